"""Adapter fine-tuning with a frozen backbone.

Only adapter factors are trainable; block weights enter every tape as
constants, so their arrays are never written. Factor parameters split
into two learning-rate groups: all a factors at the base rate and all
b factors at ab_ratio times the base rate (the "+" variants default
that ratio to 20, plain runs force it to 1).

Everything is deterministic under the config seed: adapter init, batch
shuffling (stream seed = config seed + 2^40 + epoch) and the fixed
sample order inside each gradient accumulation. Wall-clock timing is
kept in TrainHistory only; ``save_history`` writes a 0.000 placeholder
in the seconds column so run artifacts stay byte-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .adapter import PARALLEL, SERIAL, AdapterSet, LowRankPair, default_factor_std
from .attention import EncoderStack, effective_weight_handles, encoder_forward, mha_graph
from .autograd import Tape, backward
from .linalg import Rng, offset_seed

SHUFFLE_SEED_REGION = 1 << 40

OPTIMIZERS = ("adam", "sgd")
DEFAULT_PLUS_RATIO = 20.0


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message carries epoch and step."""


@dataclass
class TrainConfig:
    mode: str
    rank: int
    epochs: int
    base_lr: float = 1e-2
    optimizer: str = "adam"
    plus_variant: bool = False
    ab_ratio: float | None = None
    batch: int = 0
    seed: int = 0
    init_std: float | None = None

    def __post_init__(self):
        if self.mode not in (PARALLEL, SERIAL):
            raise ValueError(f"mode must be parallel or serial, got {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not self.plus_variant:
            self.ab_ratio = 1.0
        elif self.ab_ratio is None:
            self.ab_ratio = DEFAULT_PLUS_RATIO
        if self.ab_ratio < 1.0:
            raise ValueError(f"ab_ratio must be >= 1, got {self.ab_ratio}")
        if self.init_std is None:
            self.init_std = default_factor_std(self.rank)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_loss: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    adapters: list = field(default_factory=list)

    @property
    def final_eval_loss(self) -> float:
        return self.records[-1].eval_loss if self.records else float("nan")

    @property
    def final_train_loss(self) -> float:
        return self.records[-1].train_loss if self.records else float("nan")


@dataclass
class ParamGroup:
    factor: str
    lr: float
    names: list


def adapter_param_values(adapters) -> dict:
    """Name -> array copy for every factor, names match checkpoint files."""
    params = {}
    for i, ad in enumerate(adapters):
        for slot, pair in ad.pairs():
            params[f"block{i}.{slot}.A"] = pair.a.copy()
            params[f"block{i}.{slot}.B"] = pair.b.copy()
    return params


def adapters_from_params(template_adapters, params: dict):
    """Rebuild AdapterSets from a parameter dict (inverse of adapter_param_values)."""
    rebuilt = []
    for i, ad in enumerate(template_adapters):
        pairs = {
            slot: LowRankPair(
                b=params[f"block{i}.{slot}.B"].copy(),
                a=params[f"block{i}.{slot}.A"].copy(),
            )
            for slot, _ in ad.pairs()
        }
        if ad.mode == PARALLEL:
            rebuilt.append(AdapterSet(mode=PARALLEL, parallel=pairs))
        else:
            rebuilt.append(AdapterSet(mode=SERIAL, serial=pairs["serial"]))
    return rebuilt


def make_param_groups(adapters, cfg: TrainConfig) -> list:
    """Two groups covering exactly the adapter factors: a at base_lr, b at ab_ratio * base_lr."""
    if isinstance(adapters, AdapterSet):
        adapters = [adapters]
    names = sorted(adapter_param_values(adapters))
    return [
        ParamGroup(factor="A", lr=cfg.base_lr, names=[n for n in names if n.endswith(".A")]),
        ParamGroup(
            factor="B",
            lr=cfg.ab_ratio * cfg.base_lr,
            names=[n for n in names if n.endswith(".B")],
        ),
    ]


class SgdOptimizer:
    def __init__(self, lr_by_name: dict):
        self.lr_by_name = lr_by_name

    def step(self, params: dict, grads: dict) -> None:
        for name, lr in self.lr_by_name.items():
            params[name] -= lr * grads[name]


class AdamOptimizer:
    """Adam with bias correction; beta = (0.9, 0.999), eps = 1e-8."""

    def __init__(self, lr_by_name: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr_by_name = lr_by_name
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: None for name in lr_by_name}
        self.v = {name: None for name in lr_by_name}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, lr in self.lr_by_name.items():
            g = grads[name]
            if self.m[name] is None:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = self.m[name] / (1.0 - b1 ** self.t)
            v_hat = self.v[name] / (1.0 - b2 ** self.t)
            params[name] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _block_tape_handles(tape: Tape, stack: EncoderStack, param_nodes: dict):
    """Hoist per-block effective weights once per tape; reused by every sample."""
    handles = []
    for i, (weights, adapters) in enumerate(stack.blocks):
        weight_nodes = {
            "q": tape.constant(weights.wq),
            "k": tape.constant(weights.wk),
            "v": tape.constant(weights.wv),
            "out": tape.constant(weights.wout),
        }
        pair_nodes = {
            slot: (param_nodes[f"block{i}.{slot}.B"], param_nodes[f"block{i}.{slot}.A"])
            for slot, _ in adapters.pairs()
        }
        eff, serial_pair = effective_weight_handles(tape, weight_nodes, adapters, pair_nodes)
        handles.append((eff, serial_pair, weights.d_model, weights.heads))
    return handles


def batch_loss_and_grads(stack: EncoderStack, params: dict, dataset, indices):
    """Mean loss over the given samples plus gradients for every factor.

    Regression uses per-sample mean squared error over output entries;
    classification pools tokens, projects through the dataset readout and
    applies softmax cross-entropy. Samples accumulate in index order.
    """
    tape = Tape()
    param_nodes = {name: tape.param(value, name) for name, value in params.items()}
    blocks = _block_tape_handles(tape, stack, param_nodes)
    readout_node = None
    if dataset.kind == "classification":
        readout_node = tape.constant(dataset.readout)
    total = None
    for idx in indices:
        h = tape.constant(dataset.inputs[idx])
        for eff, serial_pair, d_model, heads in blocks:
            h = tape.add(h, mha_graph(tape, h, eff, d_model, heads, serial_pair))
        if dataset.kind == "regression":
            diff = tape.sub(h, tape.constant(dataset.targets[idx]))
            sample_loss = tape.scale(tape.sum_squares(diff), 1.0 / diff.value.size)
        else:
            logits = tape.matmul(readout_node, tape.mean_cols(h))
            sample_loss = tape.cross_entropy(logits, dataset.labels[idx])
        total = sample_loss if total is None else tape.add(total, sample_loss)
    loss_node = tape.scale(total, 1.0 / len(indices))
    grads = backward(tape, loss_node)
    return float(loss_node.value[0, 0]), grads


def evaluation_loss(stack: EncoderStack, dataset, indices) -> float:
    """Eager mean loss over the given samples (same formulas as training)."""
    losses = []
    for idx in indices:
        out = encoder_forward(dataset.inputs[idx], stack)
        if dataset.kind == "regression":
            diff = out - dataset.targets[idx]
            losses.append(float(np.mean(diff * diff)))
        else:
            z = dataset.readout @ out.mean(axis=1, keepdims=True)
            zmax = z.max()
            lse = zmax + np.log(np.sum(np.exp(z - zmax)))
            losses.append(float(lse - z[dataset.labels[idx], 0]))
    return float(np.mean(losses))


def train(stack: EncoderStack, task, cfg: TrainConfig) -> TrainHistory:
    """Optimize the stack's adapters against the task; weights stay frozen.

    The stack must already carry adapters matching cfg.mode and cfg.rank
    (see attention.attach_adapters). Returns the per-epoch history and
    the trained adapters; the input stack is not modified.
    """
    if task.n_train < 1:
        raise ValueError("dataset has no training samples")
    if stack.mode is None:
        raise ValueError("stack has no adapters attached")
    if stack.mode != cfg.mode:
        raise ValueError(f"stack adapter mode {stack.mode!r} != config mode {cfg.mode!r}")
    template = stack.adapters()
    if template[0].rank != cfg.rank:
        raise ValueError(f"stack adapter rank {template[0].rank} != config rank {cfg.rank}")

    params = adapter_param_values(template)
    groups = make_param_groups(template, cfg)
    lr_by_name = {name: g.lr for g in groups for name in g.names}
    if cfg.optimizer == "adam":
        opt = AdamOptimizer(lr_by_name)
    else:
        opt = SgdOptimizer(lr_by_name)

    n_train = task.n_train
    batch = cfg.batch if 0 < cfg.batch < n_train else n_train
    train_indices = np.arange(n_train)
    eval_indices = np.arange(n_train, n_train + task.n_eval)

    history = TrainHistory()
    work_stack = stack
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if batch < n_train:
            perm = Rng(offset_seed(cfg.seed, SHUFFLE_SEED_REGION + epoch)).permutation(n_train)
            order = train_indices[perm]
        else:
            order = train_indices
        loss_sum = 0.0
        for step, start in enumerate(range(0, n_train, batch)):
            chunk = order[start:start + batch]
            loss, grads = batch_loss_and_grads(work_stack, params, task, chunk)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}"
                )
            opt.step(params, grads)
            loss_sum += loss * len(chunk)
        trained = adapters_from_params(template, params)
        work_stack = EncoderStack(
            blocks=tuple((w, ad) for (w, _), ad in zip(stack.blocks, trained)),
            d_model=stack.d_model,
            n_tokens=stack.n_tokens,
        )
        train_loss = loss_sum / n_train
        if len(eval_indices):
            eval_loss = evaluation_loss(work_stack, task, eval_indices)
        else:
            eval_loss = train_loss
        history.records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=train_loss,
                eval_loss=eval_loss,
                seconds=time.perf_counter() - t0,
            )
        )
    history.adapters = adapters_from_params(template, params)
    return history


def save_history(path, history: TrainHistory) -> None:
    """Write history.csv: epoch, train_loss, eval_loss, seconds.

    The seconds column is a 0.000 placeholder; measured wall time stays
    in TrainHistory so that identical seeded runs produce byte-identical
    files.
    """
    lines = ["epoch,train_loss,eval_loss,seconds"]
    for rec in history.records:
        lines.append(f"{rec.epoch},{rec.train_loss!r},{rec.eval_loss!r},0.000")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
