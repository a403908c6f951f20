"""Singular-value spectrum reports and parameter-count comparison tables.

Both reports write plain CSV with ``\\n`` line endings and repr-formatted
floats, so identical inputs always produce byte-identical files.
"""

from __future__ import annotations

from .adapter import PARALLEL, SERIAL, PARALLEL_SLOTS, merge_parallel, merge_serial, param_count
from .attention import EncoderStack
from .linalg import SvdConvergenceError, svd

SPECTRUM_SLOTS = ("q", "k", "v")
_SLOT_WEIGHTS = {"q": "wq", "k": "wk", "v": "wv"}


def _spectrum(matrix, block_index, slot, variant):
    try:
        return svd(matrix).s
    except SvdConvergenceError as exc:
        raise SvdConvergenceError(
            f"block {block_index}, slot {slot}, variant {variant}: {exc}"
        ) from exc


def spectrum_rows(stack: EncoderStack, slots=SPECTRUM_SLOTS):
    """(block, slot, variant, index, sigma) rows for base and merged weights.

    Every block/slot emits the base spectrum; blocks carrying parallel
    adapters add the spectrum of w + b @ a, serial blocks add the
    spectrum of w @ (I + b @ a) on q, k and v.
    """
    slots = tuple(slots)
    unknown = [s for s in slots if s not in SPECTRUM_SLOTS]
    if unknown:
        raise ValueError(f"spectrum slots must be among {SPECTRUM_SLOTS}, got {unknown}")
    if not slots:
        raise ValueError("no slots requested")
    rows = []
    for b, (weights, adapters) in enumerate(stack.blocks):
        for slot in slots:
            w = getattr(weights, _SLOT_WEIGHTS[slot])
            variants = [("base", w)]
            if adapters is not None and adapters.mode == PARALLEL:
                variants.append(("parallel", merge_parallel(w, adapters.parallel[slot])))
            if adapters is not None and adapters.mode == SERIAL:
                variants.append(("serial", merge_serial(w, adapters.serial)))
            for variant, matrix in variants:
                sigmas = _spectrum(matrix, b, slot, variant)
                rows.extend(
                    (b, slot, variant, i, float(sig)) for i, sig in enumerate(sigmas)
                )
    return rows


def spectrum_report(stack: EncoderStack, slots=SPECTRUM_SLOTS, out_path=None):
    """Write the spectrum CSV (block,slot,variant,index,sigma); returns the rows."""
    rows = spectrum_rows(stack, slots)
    if out_path is not None:
        lines = ["block,slot,variant,index,sigma"]
        lines.extend(f"{b},{slot},{variant},{i},{sig!r}" for b, slot, variant, i, sig in rows)
        with open(out_path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
    return rows


def param_report_rows(model_specs):
    """(name, parallel_count, serial_count, ratio) per spec entry.

    Each spec is a mapping with name, d_model, n_blocks, rank and slots
    (the parallel projection slots; must be nonempty).
    """
    specs = list(model_specs)
    if not specs:
        raise ValueError("no model specs given")
    rows = []
    for spec in specs:
        slots = tuple(spec.get("slots", PARALLEL_SLOTS))
        if not slots:
            raise ValueError(f"spec {spec.get('name')!r}: empty parallel slots")
        d = int(spec["d_model"])
        n_blocks = int(spec["n_blocks"])
        rank = int(spec["rank"])
        parallel = param_count(d, rank, n_blocks, PARALLEL, slots)
        serial = param_count(d, rank, n_blocks, SERIAL)
        rows.append((str(spec["name"]), parallel, serial, parallel / serial))
    return rows


def param_report(model_specs, out_path=None):
    """Write the parameter comparison CSV; returns the rows."""
    rows = param_report_rows(model_specs)
    if out_path is not None:
        lines = ["name,parallel_count,serial_count,ratio"]
        lines.extend(
            f"{name},{parallel},{serial},{ratio!r}" for name, parallel, serial, ratio in rows
        )
        with open(out_path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")
    return rows
