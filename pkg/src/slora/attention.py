"""Multi-head attention and a minimal residual encoder stack.

Inputs use a column-per-token layout (x is d_model x n_tokens) so the
serial input transform reads literally as matrix times feature. Blocks
are attention plus a residual connection, no layer norm or MLP, which
keeps the merged-weight equivalence checks exact and the gradient
surface small.

The forward pass is written once against a tiny op interface and runs
either eagerly on numpy arrays or on an autograd tape, so the trained
path and the inference path cannot drift apart.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .adapter import (
    PARALLEL,
    SERIAL,
    AdapterSet,
    init_adapter,
    merge_parallel,
    merge_serial,
    random_adapter,
)
from .linalg import Matrix, as_matrix, gaussian_matrix, offset_seed
from .mtx import mtx_path, read_mtx, write_mtx

# Weight stream offsets within a block's 16-seed stride; chosen to avoid
# the adapter factor offsets (a: 1..5, b: 9..13).
WEIGHT_SEED_OFFSETS = {"wq": 6, "wk": 7, "wv": 8, "wout": 14}
BLOCK_SEED_STRIDE = 16


@dataclass(frozen=True)
class MhaWeights:
    """Frozen square projection weights for one attention block."""

    wq: Matrix
    wk: Matrix
    wv: Matrix
    wout: Matrix
    heads: int

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wout"):
            w = as_matrix(getattr(self, name), name)
            object.__setattr__(self, name, w)
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wout"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(
                    f"{name} must be {d}x{d}, got {getattr(self, name).shape}"
                )
        if self.heads < 1 or d % self.heads != 0:
            raise ValueError(f"d_model {d} not divisible by heads {self.heads}")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]


@dataclass(frozen=True)
class EncoderStack:
    """Ordered attention blocks with optional per-block adapters."""

    blocks: tuple
    d_model: int
    n_tokens: int | None = None

    def __post_init__(self):
        blocks = tuple(self.blocks)
        modes = set()
        for weights, adapters in blocks:
            if weights.d_model != self.d_model:
                raise ValueError(
                    f"block d_model {weights.d_model} != stack d_model {self.d_model}"
                )
            modes.add(None if adapters is None else adapters.mode)
        if len(modes) > 1:
            raise ValueError(f"adapter mode must be uniform across blocks, got {modes}")
        object.__setattr__(self, "blocks", blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def mode(self) -> str | None:
        if not self.blocks:
            return None
        adapters = self.blocks[0][1]
        return None if adapters is None else adapters.mode

    @property
    def heads(self) -> int:
        return self.blocks[0][0].heads

    def weights(self):
        return [w for w, _ in self.blocks]

    def adapters(self):
        return [ad for _, ad in self.blocks]


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax with per-row max subtraction for overflow safety."""
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class _EagerOps:
    """Numpy backend for the shared forward-graph builder."""

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def scale(a, c):
        return c * a

    @staticmethod
    def transpose(a):
        return a.T

    @staticmethod
    def softmax_rows(a):
        return softmax_rows(a)

    @staticmethod
    def serial_transform(x, b, a):
        return x + b @ (a @ x)

    @staticmethod
    def row_slice(a, start, stop):
        return a[start:stop]

    @staticmethod
    def concat_rows(parts):
        return np.concatenate(parts, axis=0)


EAGER = _EagerOps()


def effective_weight_handles(ops, weight_handles: dict, adapters, pair_handles=None):
    """Merge parallel adapters into projection handles; pass serial through.

    ``weight_handles`` maps q/k/v/out to backend handles for the frozen
    weights. ``pair_handles`` maps slot to (b, a) handles and defaults to
    the adapter's own arrays (eager use). Returns (effective weight map,
    serial (b, a) handles or None).
    """
    if adapters is None:
        return dict(weight_handles), None
    if pair_handles is None:
        pair_handles = {slot: (p.b, p.a) for slot, p in adapters.pairs()}
    if adapters.mode == SERIAL:
        return dict(weight_handles), pair_handles["serial"]
    eff = {}
    for slot in ("q", "k", "v", "out"):
        b, a = pair_handles[slot]
        eff[slot] = ops.add(weight_handles[slot], ops.matmul(b, a))
    return eff, None


def mha_graph(ops, x, eff_weights: dict, d_model: int, heads: int, serial_pair=None):
    """Scaled dot-product MHA over any op backend.

    ``x`` is d_model x n. Per head: scores = softmax(q^T k / sqrt(d_head))
    and the head output is v @ scores^T; heads concatenate along rows and
    go through the output projection.
    """
    if serial_pair is not None:
        b, a = serial_pair
        x = ops.serial_transform(x, b, a)
    q = ops.matmul(eff_weights["q"], x)
    k = ops.matmul(eff_weights["k"], x)
    v = ops.matmul(eff_weights["v"], x)
    d_head = d_model // heads
    inv_sqrt = 1.0 / np.sqrt(d_head)
    head_outs = []
    for h in range(heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = ops.row_slice(q, lo, hi)
        kh = ops.row_slice(k, lo, hi)
        vh = ops.row_slice(v, lo, hi)
        scores = ops.softmax_rows(ops.scale(ops.matmul(ops.transpose(qh), kh), inv_sqrt))
        head_outs.append(ops.matmul(vh, ops.transpose(scores)))
    merged = head_outs[0] if heads == 1 else ops.concat_rows(head_outs)
    return ops.matmul(eff_weights["out"], merged)


def mha_forward(x: Matrix, weights: MhaWeights, adapters: AdapterSet | None = None) -> Matrix:
    """One attention block, eager. Adapters may be absent, parallel or serial."""
    x = as_matrix(x, "mha input")
    if x.shape[0] != weights.d_model:
        raise ValueError(
            f"input rows {x.shape[0]} != d_model {weights.d_model}"
        )
    handles = {"q": weights.wq, "k": weights.wk, "v": weights.wv, "out": weights.wout}
    eff, serial_pair = effective_weight_handles(EAGER, handles, adapters)
    return mha_graph(EAGER, x, eff, weights.d_model, weights.heads, serial_pair)


def encoder_forward(x: Matrix, stack: EncoderStack) -> Matrix:
    """Residual stack: x <- x + mha_forward(x) for each block in order."""
    x = as_matrix(x, "encoder input")
    if x.shape[0] != stack.d_model:
        raise ValueError(f"input rows {x.shape[0]} != d_model {stack.d_model}")
    for weights, adapters in stack.blocks:
        x = x + mha_forward(x, weights, adapters)
    return x


def random_stack(
    d_model: int,
    heads: int,
    n_blocks: int,
    seed: int,
    std: float | None = None,
) -> EncoderStack:
    """Random frozen stack; weight std defaults to 1/sqrt(d_model)."""
    if std is None:
        std = 1.0 / np.sqrt(d_model)
    blocks = []
    for i in range(n_blocks):
        ws = {
            name: gaussian_matrix(
                d_model,
                d_model,
                std,
                offset_seed(seed, BLOCK_SEED_STRIDE * i + off),
            )
            for name, off in WEIGHT_SEED_OFFSETS.items()
        }
        blocks.append((MhaWeights(heads=heads, **ws), None))
    return EncoderStack(blocks=tuple(blocks), d_model=d_model)


def attach_adapters(
    stack: EncoderStack,
    mode: str,
    rank: int,
    std: float,
    seed: int,
    zero_b: bool = True,
) -> EncoderStack:
    """Return a copy of the stack with fresh adapters on every block."""
    build = init_adapter if zero_b else random_adapter
    blocks = tuple(
        (weights, build(mode, stack.d_model, rank, std, seed, block_index=i))
        for i, (weights, _) in enumerate(stack.blocks)
    )
    return EncoderStack(blocks=blocks, d_model=stack.d_model, n_tokens=stack.n_tokens)


def strip_adapters(stack: EncoderStack) -> EncoderStack:
    blocks = tuple((weights, None) for weights, _ in stack.blocks)
    return EncoderStack(blocks=blocks, d_model=stack.d_model, n_tokens=stack.n_tokens)


def fold_adapters(stack: EncoderStack) -> EncoderStack:
    """Merge adapters into the weights, returning an adapter-free stack.

    Parallel pairs fold as w + b @ a on their own projection. The serial
    pair folds as w @ (I + b @ a) into wq, wk and wv; wout is unchanged.
    """
    blocks = []
    for weights, adapters in stack.blocks:
        if adapters is None:
            blocks.append((weights, None))
            continue
        if adapters.mode == PARALLEL:
            slots = adapters.parallel
            folded = MhaWeights(
                wq=merge_parallel(weights.wq, slots["q"]),
                wk=merge_parallel(weights.wk, slots["k"]),
                wv=merge_parallel(weights.wv, slots["v"]),
                wout=merge_parallel(weights.wout, slots["out"]),
                heads=weights.heads,
            )
        else:
            pair = adapters.serial
            folded = MhaWeights(
                wq=merge_serial(weights.wq, pair),
                wk=merge_serial(weights.wk, pair),
                wv=merge_serial(weights.wv, pair),
                wout=weights.wout,
                heads=weights.heads,
            )
        blocks.append((folded, None))
    return EncoderStack(blocks=tuple(blocks), d_model=stack.d_model, n_tokens=stack.n_tokens)


# ---------------------------------------------------------------------------
# Stack checkpoints: block{i}.{wq|wk|wv|wout}.mtx plus model.json.
# ---------------------------------------------------------------------------

MODEL_MANIFEST = "model.json"


def save_stack(directory, stack: EncoderStack) -> None:
    os.makedirs(directory, exist_ok=True)
    for i, (weights, _) in enumerate(stack.blocks):
        for name in ("wq", "wk", "wv", "wout"):
            write_mtx(mtx_path(directory, f"block{i}.{name}"), getattr(weights, name))
    manifest = {
        "d_model": stack.d_model,
        "heads": stack.heads,
        "n_blocks": stack.n_blocks,
    }
    with open(os.path.join(directory, MODEL_MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_stack(directory) -> EncoderStack:
    manifest_path = os.path.join(directory, MODEL_MANIFEST)
    if not os.path.exists(manifest_path):
        raise ValueError(f"missing model manifest {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    d_model = int(manifest["d_model"])
    heads = int(manifest["heads"])
    blocks = []
    for i in range(int(manifest["n_blocks"])):
        ws = {
            name: read_mtx(mtx_path(directory, f"block{i}.{name}"))
            for name in ("wq", "wk", "wv", "wout")
        }
        for name, w in ws.items():
            if w.shape != (d_model, d_model):
                raise ValueError(
                    f"block{i}.{name}: expected {d_model}x{d_model}, got {w.shape}"
                )
        blocks.append((MhaWeights(heads=heads, **ws), None))
    return EncoderStack(blocks=tuple(blocks), d_model=d_model)
