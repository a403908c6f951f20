"""Low-rank adapter pairs for frozen attention projections.

Two attachment styles are supported. Parallel mode gives each of the
four projections (q, k, v, out) its own factor pair and adds b @ a to
that projection's weight. Serial mode keeps a single shared pair per
block and rescales the block input as x + b @ (a @ x) before the q, k
and v projections; the output projection is left untouched. A freshly
initialized adapter has b = 0, so it is an exact no-op.

Seed derivation (documented so checkpoints are reproducible): the
factor drawn for slot ``slot`` of block ``i`` uses stream seed

    seed + 16 * i + SLOT_SEED_OFFSETS[slot] + (8 if factor is b else 0)

All offsets stay below the per-block stride of 16 and never collide
with the attention-weight offsets used by :mod:`slora.attention`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .linalg import Matrix, as_matrix, gaussian_matrix, offset_seed
from .mtx import mtx_path, read_mtx, write_mtx

PARALLEL = "parallel"
SERIAL = "serial"
MODES = (PARALLEL, SERIAL)

PARALLEL_SLOTS = ("q", "k", "v", "out")
SERIAL_SLOT = "serial"
SLOT_SEED_OFFSETS = {"q": 1, "k": 2, "v": 3, "out": 4, SERIAL_SLOT: 5}
B_FACTOR_SEED_OFFSET = 8
BLOCK_SEED_STRIDE = 16


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


@dataclass(frozen=True)
class LowRankPair:
    """Factor pair (b: d_out x r, a: r x d_in) representing the update b @ a."""

    b: Matrix
    a: Matrix

    def __post_init__(self):
        b = as_matrix(self.b, "b factor")
        a = as_matrix(self.a, "a factor")
        if b.shape[1] != a.shape[0]:
            raise ValueError(
                f"factor rank mismatch: b is {b.shape[0]}x{b.shape[1]}, "
                f"a is {a.shape[0]}x{a.shape[1]}"
            )
        r = b.shape[1]
        if r > min(b.shape[0], a.shape[1]):
            raise ValueError(
                f"rank {r} exceeds min(d_out, d_in) = "
                f"{min(b.shape[0], a.shape[1])}"
            )
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    @property
    def d_in(self) -> int:
        return self.a.shape[1]


@dataclass(frozen=True)
class AdapterSet:
    """Adapter attachment for one attention block.

    Exactly one of ``parallel`` (all four projection slots) or ``serial``
    (one square shared pair) is populated, matching ``mode``.
    """

    mode: str
    parallel: dict | None = None
    serial: LowRankPair | None = None

    def __post_init__(self):
        _check_mode(self.mode)
        if self.mode == PARALLEL:
            if self.serial is not None or self.parallel is None:
                raise ValueError("parallel mode requires the four projection slots only")
            if set(self.parallel) != set(PARALLEL_SLOTS):
                raise ValueError(
                    f"parallel slots must be exactly {PARALLEL_SLOTS}, "
                    f"got {sorted(self.parallel)}"
                )
        else:
            if self.parallel is not None or self.serial is None:
                raise ValueError("serial mode requires a single shared pair only")
            if self.serial.d_out != self.serial.d_in:
                raise ValueError(
                    f"serial pair must be square, got {self.serial.d_out}x"
                    f"{self.serial.d_in}"
                )

    @property
    def rank(self) -> int:
        if self.mode == PARALLEL:
            return next(iter(self.parallel.values())).rank
        return self.serial.rank

    def pairs(self):
        """Deterministically ordered (slot, pair) items."""
        if self.mode == PARALLEL:
            return [(slot, self.parallel[slot]) for slot in PARALLEL_SLOTS]
        return [(SERIAL_SLOT, self.serial)]


def _slot_seed(seed: int, block_index: int, slot: str, factor: str) -> int:
    off = BLOCK_SEED_STRIDE * block_index + SLOT_SEED_OFFSETS[slot]
    if factor == "b":
        off += B_FACTOR_SEED_OFFSET
    return offset_seed(seed, off)


def default_factor_std(rank: int) -> float:
    """Init scale 1/sqrt(rank), keeping ||b @ a|| stable across ranks."""
    return 1.0 / np.sqrt(rank)


def _build_pair(d_out, d_in, r, std, seed, block_index, slot, zero_b):
    a = gaussian_matrix(r, d_in, std, _slot_seed(seed, block_index, slot, "a"))
    if zero_b:
        b = np.zeros((d_out, r))
    else:
        b = gaussian_matrix(d_out, r, std, _slot_seed(seed, block_index, slot, "b"))
    return LowRankPair(b=b, a=a)


def init_adapter(
    mode: str,
    d_model: int,
    r: int,
    std: float,
    seed: int,
    block_index: int = 0,
) -> AdapterSet:
    """Fresh adapter for one block: Gaussian a factors, zero b factors.

    The zero b makes the update b @ a vanish, so a newly attached adapter
    leaves the block's forward pass bit-identical to the frozen one.
    """
    _check_mode(mode)
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    if r > d_model:
        raise ValueError(f"rank {r} exceeds d_model {d_model}")
    return _make_adapter(mode, d_model, r, std, seed, block_index, zero_b=True)


def random_adapter(
    mode: str,
    d_model: int,
    r: int,
    std: float,
    seed: int,
    block_index: int = 0,
) -> AdapterSet:
    """Adapter with both factors drawn Gaussian (nonzero update).

    Used to build synthetic targets; trainable adapters should use
    init_adapter so they start as a no-op.
    """
    _check_mode(mode)
    if r < 1 or r > d_model:
        raise ValueError(f"rank must be in [1, {d_model}], got {r}")
    return _make_adapter(mode, d_model, r, std, seed, block_index, zero_b=False)


def _make_adapter(mode, d_model, r, std, seed, block_index, zero_b):
    if mode == PARALLEL:
        slots = {
            slot: _build_pair(d_model, d_model, r, std, seed, block_index, slot, zero_b)
            for slot in PARALLEL_SLOTS
        }
        return AdapterSet(mode=PARALLEL, parallel=slots)
    pair = _build_pair(d_model, d_model, r, std, seed, block_index, SERIAL_SLOT, zero_b)
    return AdapterSet(mode=SERIAL, serial=pair)


def lora_delta(pair: LowRankPair) -> Matrix:
    """Dense update b @ a, shape d_out x d_in."""
    return pair.b @ pair.a


def serial_transform(x: Matrix, pair: LowRankPair) -> Matrix:
    """Apply x + b @ (a @ x) without materializing the identity."""
    x = as_matrix(x, "serial_transform input")
    if x.shape[0] != pair.d_in:
        raise ValueError(
            f"serial_transform dimension mismatch: x has {x.shape[0]} rows, "
            f"pair expects {pair.d_in}"
        )
    return x + pair.b @ (pair.a @ x)


def merge_parallel(w: Matrix, pair: LowRankPair) -> Matrix:
    """Fold a parallel adapter into its weight: w + b @ a."""
    w = as_matrix(w, "weight")
    if w.shape != (pair.d_out, pair.d_in):
        raise ValueError(
            f"merge_parallel shape mismatch: weight {w.shape}, "
            f"update {(pair.d_out, pair.d_in)}"
        )
    return w + pair.b @ pair.a


def merge_serial(w: Matrix, pair: LowRankPair) -> Matrix:
    """Fold a serial adapter into a downstream weight: w + w @ b @ a.

    Equivalent to w @ (I + b @ a), so the folded weight applied to x
    matches w applied to serial_transform(x, pair).
    """
    w = as_matrix(w, "weight")
    if w.shape[1] != pair.d_in:
        raise ValueError(
            f"merge_serial shape mismatch: weight has {w.shape[1]} cols, "
            f"pair expects {pair.d_in}"
        )
    return w + (w @ pair.b) @ pair.a


def param_count(
    d_model: int,
    r: int,
    n_blocks: int,
    mode: str,
    adapted_slots=PARALLEL_SLOTS,
) -> int:
    """Trainable scalar count for a stack of adapters.

    Parallel: n_blocks * |slots| * r * (d_in + d_out), all slots square
    at d_model here. Serial: n_blocks * r * 2 * d_model. With the four
    square projection slots the parallel/serial ratio is exactly 4.
    """
    _check_mode(mode)
    if mode == SERIAL:
        return n_blocks * r * 2 * d_model
    slots = tuple(adapted_slots)
    if not slots:
        raise ValueError("parallel mode needs a nonempty adapted_slots")
    unknown = [s for s in slots if s not in PARALLEL_SLOTS]
    if unknown:
        raise ValueError(f"unknown projection slots {unknown}")
    return n_blocks * len(slots) * r * (d_model + d_model)


# ---------------------------------------------------------------------------
# Checkpoint format: one MTX1 file per factor plus adapter.json.
# ---------------------------------------------------------------------------

ADAPTER_MANIFEST = "adapter.json"


def save_adapters(directory, adapters, seed: int, std: float) -> None:
    """Write ``block{i}.{slot}.{A|B}.mtx`` files plus the adapter.json manifest."""
    adapters = list(adapters)
    if not adapters:
        raise ValueError("no adapters to save")
    mode = adapters[0].mode
    d_model = adapters[0].pairs()[0][1].d_in
    rank = adapters[0].rank
    os.makedirs(directory, exist_ok=True)
    for i, ad in enumerate(adapters):
        if ad.mode != mode:
            raise ValueError("all blocks must share one adapter mode")
        for slot, pair in ad.pairs():
            write_mtx(mtx_path(directory, f"block{i}.{slot}.A"), pair.a)
            write_mtx(mtx_path(directory, f"block{i}.{slot}.B"), pair.b)
    manifest = {
        "mode": mode,
        "d_model": d_model,
        "rank": rank,
        "n_blocks": len(adapters),
        "seed": int(seed),
        "std": float(std),
    }
    with open(os.path.join(directory, ADAPTER_MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_adapters(directory):
    """Read an adapter checkpoint; returns (adapters, manifest)."""
    manifest_path = os.path.join(directory, ADAPTER_MANIFEST)
    if not os.path.exists(manifest_path):
        raise ValueError(f"missing adapter manifest {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    mode = _check_mode(manifest["mode"])
    n_blocks = int(manifest["n_blocks"])
    adapters = []
    for i in range(n_blocks):
        slots = PARALLEL_SLOTS if mode == PARALLEL else (SERIAL_SLOT,)
        pairs = {}
        for slot in slots:
            a = read_mtx(mtx_path(directory, f"block{i}.{slot}.A"))
            b = read_mtx(mtx_path(directory, f"block{i}.{slot}.B"))
            pairs[slot] = LowRankPair(b=b, a=a)
        if mode == PARALLEL:
            adapters.append(AdapterSet(mode=PARALLEL, parallel=pairs))
        else:
            adapters.append(AdapterSet(mode=SERIAL, serial=pairs[SERIAL_SLOT]))
    return adapters, manifest
