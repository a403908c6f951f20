"""Command-line entry point wiring the modules into reproducible runs.

Exit codes: 0 on success, 1 on numeric or validation failures, 2 on
usage errors (argparse). Every run echoes its configuration into a
run.json next to its outputs; all CSV and MTX1 artifacts are
byte-reproducible under identical flags and seeds.

SLORA_THREADS caps the worker count (default 1). The current operations
are single-threaded, so any cap of at least 1 is honored trivially.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .adapter import (
    PARALLEL,
    SERIAL,
    default_factor_std,
    load_adapters,
    param_count,
    save_adapters,
)
from .analysis import SPECTRUM_SLOTS, param_report, spectrum_report
from .attention import (
    EncoderStack,
    attach_adapters,
    encoder_forward,
    fold_adapters,
    load_stack,
    random_stack,
    save_stack,
)
from .autograd import grad_check
from .linalg import SvdConvergenceError, gaussian_matrix, offset_seed
from .mtx import MtxFormatError
from .tasks import (
    DATA_SEED_OFFSET,
    NOISE_SEED_REGION,
    Dataset,
    gen_classification,
    gen_teacher_student,
    load_dataset,
    save_dataset,
)
from .trainer import (
    TrainConfig,
    TrainingDivergedError,
    adapter_param_values,
    batch_loss_and_grads,
    save_history,
    train,
)

MODE_MAP = {
    "lora": (PARALLEL, False),
    "serial": (SERIAL, False),
    "lora+": (PARALLEL, True),
    "serial+": (SERIAL, True),
}

GRADCHECK_GATE = 1e-4
MERGE_TOL = 1e-10


def worker_cap() -> int:
    raw = os.environ.get("SLORA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SLORA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"SLORA_THREADS must be >= 1, got {n}")
    return n


def _write_run_json(path, command: str, options: dict) -> None:
    payload = {
        "command": command,
        "options": {k: options[k] for k in sorted(options)},
        "version": __version__,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _options(args, skip=("func", "command")) -> dict:
    return {k: v for k, v in vars(args).items() if k not in skip}


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    if args.task in ("teacher-serial", "teacher-parallel"):
        mode = SERIAL if args.task == "teacher-serial" else PARALLEL
        base, dataset = gen_teacher_student(
            d_model=args.d_model,
            heads=args.heads,
            n_blocks=args.blocks,
            n_tokens=args.tokens,
            teacher_mode=mode,
            teacher_rank=args.rank,
            n_samples=args.samples,
            seed=args.seed,
            n_eval=args.eval_samples,
        )
    elif args.task == "classify":
        dataset = gen_classification(
            d_model=args.d_model,
            n_tokens=args.tokens,
            n_classes=args.classes,
            n_samples=args.samples,
            seed=args.seed,
            n_eval=args.eval_samples,
        )
        base = random_stack(args.d_model, args.heads, args.blocks, args.seed)
    else:
        raise ValueError(f"unknown task {args.task!r}")
    save_dataset(args.out, dataset)
    save_stack(os.path.join(args.out, "model"), base)
    _write_run_json(os.path.join(args.out, "run.json"), "gen-data", _options(args))
    print(
        f"wrote {dataset.n_train} train / {dataset.n_eval} eval samples and "
        f"a {args.blocks}-block d={args.d_model} base model to {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# train / sweep
# ---------------------------------------------------------------------------


def _train_once(args, rank: int, out_dir: str):
    mode, plus = MODE_MAP[args.mode]
    cfg = TrainConfig(
        mode=mode,
        rank=rank,
        epochs=args.epochs,
        base_lr=args.lr,
        optimizer=args.optimizer,
        plus_variant=plus,
        ab_ratio=args.ab_ratio,
        batch=args.batch,
        seed=args.seed,
    )
    dataset = load_dataset(args.data)
    base = load_stack(os.path.join(args.data, "model"))
    student = attach_adapters(base, cfg.mode, cfg.rank, cfg.init_std, cfg.seed)
    t0 = time.perf_counter()
    history = train(student, dataset, cfg)
    elapsed = time.perf_counter() - t0
    os.makedirs(out_dir, exist_ok=True)
    save_history(os.path.join(out_dir, "history.csv"), history)
    save_adapters(
        os.path.join(out_dir, "adapter"), history.adapters, seed=cfg.seed, std=cfg.init_std
    )
    n_params = param_count(base.d_model, cfg.rank, base.n_blocks, cfg.mode)
    if history.records:
        print(
            f"rank {rank}: {cfg.epochs} epochs in {elapsed:.1f} s, "
            f"final train {history.final_train_loss:.6g}, "
            f"eval {history.final_eval_loss:.6g}, {n_params} trainable params"
        )
    else:
        print(f"rank {rank}: 0 epochs, adapters left at initialization")
    return history, n_params


def cmd_train(args) -> int:
    _train_once(args, args.rank, args.out)
    _write_run_json(os.path.join(args.out, "run.json"), "train", _options(args))
    return 0


def cmd_sweep(args) -> int:
    ranks = [int(r) for r in args.ranks.split(",") if r]
    if not ranks:
        raise ValueError("no ranks given")
    summary = []
    for rank in ranks:
        out_dir = os.path.join(args.out, f"rank{rank}")
        history, n_params = _train_once(args, rank, out_dir)
        summary.append((rank, n_params, history.final_train_loss, history.final_eval_loss))
    lines = ["rank,trainable_params,final_train_loss,final_eval_loss"]
    lines.extend(f"{r},{p},{tr!r},{ev!r}" for r, p, tr, ev in summary)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_run_json(os.path.join(args.out, "run.json"), "sweep", _options(args))
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    mode, _ = MODE_MAP[args.mode]
    base = random_stack(args.d_model, args.heads, args.blocks, args.seed)
    # Nonzero factors: at the zero-b init every a gradient vanishes
    # identically, which would make the check vacuous.
    stack = attach_adapters(
        base, mode, args.rank, default_factor_std(args.rank), args.seed, zero_b=False
    )
    total = args.tokens * args.samples
    flat_x = gaussian_matrix(
        args.d_model, total, 1.0, offset_seed(args.seed, DATA_SEED_OFFSET)
    )
    flat_t = gaussian_matrix(
        args.d_model, total, 1.0, offset_seed(args.seed, NOISE_SEED_REGION)
    )
    inputs = [
        np.ascontiguousarray(flat_x[:, i * args.tokens:(i + 1) * args.tokens])
        for i in range(args.samples)
    ]
    targets = [
        np.ascontiguousarray(flat_t[:, i * args.tokens:(i + 1) * args.tokens])
        for i in range(args.samples)
    ]
    dataset = Dataset(
        kind="regression",
        d_model=args.d_model,
        n_tokens=args.tokens,
        inputs=inputs,
        targets=targets,
        n_train=args.samples,
    )
    params = adapter_param_values(stack.adapters())
    indices = range(args.samples)

    def closure(p):
        return batch_loss_and_grads(stack, p, dataset, indices)

    err = grad_check(closure, params, args.eps)
    print(f"gradcheck mode={args.mode} d_model={args.d_model} rank={args.rank}: "
          f"max relative error {err:.3e}")
    if err > GRADCHECK_GATE:
        print(f"error: exceeds gate {GRADCHECK_GATE:g}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# spectra / params
# ---------------------------------------------------------------------------


def _load_adapted_stack(model_dir, adapter_dir):
    stack = load_stack(model_dir)
    if adapter_dir is None:
        return stack
    adapters, manifest = load_adapters(adapter_dir)
    if manifest["d_model"] != stack.d_model:
        raise ValueError(
            f"adapter d_model {manifest['d_model']} != model d_model {stack.d_model}"
        )
    if len(adapters) != stack.n_blocks:
        raise ValueError(
            f"adapter has {len(adapters)} blocks, model has {stack.n_blocks}"
        )
    blocks = tuple((w, ad) for (w, _), ad in zip(stack.blocks, adapters))
    return EncoderStack(blocks=blocks, d_model=stack.d_model)


def cmd_spectra(args) -> int:
    stack = _load_adapted_stack(args.model, args.adapter)
    slots = tuple(s for s in args.slots.split(",") if s)
    rows = spectrum_report(stack, slots, args.out)
    _write_run_json(args.out + ".run.json", "spectra", _options(args))
    print(f"wrote {len(rows)} spectrum rows to {args.out}")
    return 0


def cmd_params(args) -> int:
    with open(args.spec) as fh:
        specs = json.load(fh)
    if not isinstance(specs, list):
        raise ValueError(f"{args.spec}: expected a JSON list of model specs")
    rows = param_report(specs, args.out)
    _write_run_json(args.out + ".run.json", "params", _options(args))
    for name, parallel, serial, ratio in rows:
        print(f"{name}: parallel {parallel}, serial {serial}, ratio {ratio:.4f}")
    return 0


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------


def cmd_merge(args) -> int:
    stack = _load_adapted_stack(args.model, args.adapter)
    if stack.mode is None:
        raise ValueError("merge needs an adapter directory")
    folded = fold_adapters(stack)
    worst = 0.0
    for i in range(args.probes):
        x = gaussian_matrix(
            stack.d_model,
            args.tokens,
            1.0,
            offset_seed(args.seed, DATA_SEED_OFFSET + 16 * i),
        )
        live = encoder_forward(x, stack)
        merged = encoder_forward(x, folded)
        denom = max(float(np.linalg.norm(live)), 1e-300)
        worst = max(worst, float(np.linalg.norm(live - merged)) / denom)
    print(f"merge check: worst relative forward deviation {worst:.3e} "
          f"over {args.probes} probes")
    if worst > MERGE_TOL:
        print(f"error: exceeds tolerance {MERGE_TOL:g}, not writing output",
              file=sys.stderr)
        return 1
    save_stack(args.out, folded)
    _write_run_json(os.path.join(args.out, "run.json"), "merge", _options(args))
    print(f"wrote folded checkpoint to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_train_flags(p, with_rank=True):
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--mode", required=True, choices=sorted(MODE_MAP))
    if with_rank:
        p.add_argument("--rank", type=int, default=2)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--ab-ratio", type=float, default=None,
                   help="b-factor learning rate multiplier; defaults to 20 for "
                        "'+' modes and is forced to 1 otherwise")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=0, help="0 means full batch")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slora",
        description="Low-rank attention adapters: data generation, training, "
                    "merging and spectrum diagnostics.",
    )
    parser.add_argument("--version", action="version", version=f"slora {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic task directory")
    p.add_argument("--task", required=True,
                   choices=("teacher-serial", "teacher-parallel", "classify"))
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tokens", type=int, default=6)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--eval-samples", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fine-tune adapters on a dataset")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="rank ablation: one training run per rank")
    p.add_argument("--ranks", required=True, help="comma-separated ranks, e.g. 8,16,32,64")
    _add_train_flags(p, with_rank=False)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--mode", required=True, choices=("lora", "serial"))
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tokens", type=int, default=4)
    p.add_argument("--samples", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("spectra", help="singular value report for a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--adapter", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--slots", default=",".join(SPECTRUM_SLOTS))
    p.set_defaults(func=cmd_spectra)

    p = sub.add_parser("params", help="parameter-count comparison table")
    p.add_argument("--spec", required=True, help="JSON list of model specs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("merge", help="fold adapters into weights and verify")
    p.add_argument("--model", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probes", type=int, default=8)
    p.add_argument("--tokens", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_merge)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        worker_cap()
        return args.func(args)
    except (ValueError, OSError, KeyError, MtxFormatError,
            SvdConvergenceError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
