"""Synthetic fine-tuning tasks with known optima, plus dataset files.

Teacher-student regression: a frozen random stack plus a random nonzero
adapter defines the teacher; its outputs on Gaussian token matrices are
the targets and the bare stack is returned as the student's starting
point. When the student's adapter mode and rank can represent the
teacher's, zero loss is attainable by construction.

Classification: Gaussian class centers in token space, balanced labels
from the generating class, and the center matrix doubles as a frozen
readout (n_classes x d_model) that maps mean-pooled encoder output to
logits.

Seed streams: sample tokens draw from seed + 15 (teacher-student) or
seed + 2^32 (classification noise; centers use seed + 15), disjoint
from the per-block weight and adapter streams.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .adapter import PARALLEL, SERIAL, random_adapter, default_factor_std
from .attention import EncoderStack, encoder_forward, random_stack
from .linalg import Matrix, gaussian_matrix, offset_seed
from .mtx import read_mtx, write_mtx

DATA_SEED_OFFSET = 15
NOISE_SEED_REGION = 1 << 32

REGRESSION = "regression"
CLASSIFICATION = "classification"

DATASET_MANIFEST = "dataset.json"


@dataclass
class Dataset:
    """Samples are d_model x n_tokens matrices; first n_train are the train split."""

    kind: str
    d_model: int
    n_tokens: int
    inputs: list
    n_train: int
    targets: list | None = None
    labels: list | None = None
    readout: Matrix | None = None

    def __post_init__(self):
        if self.kind not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if not self.inputs:
            raise ValueError("dataset has no samples")
        if not (0 <= self.n_train <= len(self.inputs)):
            raise ValueError(f"n_train {self.n_train} out of range")
        for i, x in enumerate(self.inputs):
            if x.shape != (self.d_model, self.n_tokens):
                raise ValueError(
                    f"input {i}: expected {self.d_model}x{self.n_tokens}, got {x.shape}"
                )
        if self.kind == REGRESSION:
            if self.targets is None or len(self.targets) != len(self.inputs):
                raise ValueError("regression dataset needs one target per input")
        else:
            if self.labels is None or len(self.labels) != len(self.inputs):
                raise ValueError("classification dataset needs one label per input")
            if self.readout is None:
                raise ValueError("classification dataset needs a readout matrix")

    @property
    def n_eval(self) -> int:
        return len(self.inputs) - self.n_train


def gen_teacher_student(
    d_model: int,
    heads: int,
    n_blocks: int,
    n_tokens: int,
    teacher_mode: str,
    teacher_rank: int,
    n_samples: int,
    seed: int,
    n_eval: int = 64,
    teacher_std: float | None = None,
):
    """Build (student base stack, regression dataset) for a hidden-adapter target.

    The teacher's factor pairs are both drawn Gaussian (std defaults to
    1/sqrt(rank)) so it differs from the base immediately; teacher_std=0
    degenerates to targets that equal the base outputs. n_samples counts
    the train split; n_eval extra samples follow it.
    """
    if teacher_rank > d_model:
        raise ValueError(f"teacher rank {teacher_rank} exceeds d_model {d_model}")
    if teacher_std is None:
        teacher_std = default_factor_std(teacher_rank)
    base = random_stack(d_model, heads, n_blocks, seed)
    teacher_adapters = [
        random_adapter(teacher_mode, d_model, teacher_rank, teacher_std, seed, block_index=i)
        for i in range(n_blocks)
    ]
    teacher = EncoderStack(
        blocks=tuple((w, ad) for (w, _), ad in zip(base.blocks, teacher_adapters)),
        d_model=d_model,
        n_tokens=n_tokens,
    )
    total = n_samples + n_eval
    flat = gaussian_matrix(d_model, n_tokens * total, 1.0, offset_seed(seed, DATA_SEED_OFFSET))
    inputs = [
        np.ascontiguousarray(flat[:, i * n_tokens:(i + 1) * n_tokens]) for i in range(total)
    ]
    targets = [encoder_forward(x, teacher) for x in inputs]
    dataset = Dataset(
        kind=REGRESSION,
        d_model=d_model,
        n_tokens=n_tokens,
        inputs=inputs,
        targets=targets,
        n_train=n_samples,
    )
    return base, dataset


def gen_classification(
    d_model: int,
    n_tokens: int,
    n_classes: int,
    n_samples: int,
    seed: int,
    n_eval: int = 64,
    center_std: float = 2.0,
    noise_std: float = 1.0,
) -> Dataset:
    """Balanced Gaussian-cluster classification in token space.

    Sample i belongs to class i mod n_classes; each of its tokens is the
    class center plus N(0, noise_std^2) noise. Labels come from the
    generating class and the center matrix is kept as the frozen readout.
    """
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    centers = gaussian_matrix(n_classes, d_model, center_std, offset_seed(seed, DATA_SEED_OFFSET))
    total = n_samples + n_eval
    noise = gaussian_matrix(
        d_model, n_tokens * total, noise_std, offset_seed(seed, NOISE_SEED_REGION)
    )
    inputs = []
    labels = []
    for i in range(total):
        label = i % n_classes
        tokens = centers[label][:, None] + noise[:, i * n_tokens:(i + 1) * n_tokens]
        inputs.append(np.ascontiguousarray(tokens))
        labels.append(label)
    return Dataset(
        kind=CLASSIFICATION,
        d_model=d_model,
        n_tokens=n_tokens,
        inputs=inputs,
        labels=labels,
        readout=centers,
        n_train=n_samples,
    )


# ---------------------------------------------------------------------------
# Dataset directory format. inputs/NNNNN.mtx always; regression adds
# targets/NNNNN.mtx, classification adds labels.csv and readout.mtx.
# ---------------------------------------------------------------------------


def save_dataset(directory, ds: Dataset) -> None:
    os.makedirs(os.path.join(directory, "inputs"), exist_ok=True)
    for i, x in enumerate(ds.inputs):
        write_mtx(os.path.join(directory, "inputs", f"{i:05d}.mtx"), x)
    if ds.kind == REGRESSION:
        os.makedirs(os.path.join(directory, "targets"), exist_ok=True)
        for i, t in enumerate(ds.targets):
            write_mtx(os.path.join(directory, "targets", f"{i:05d}.mtx"), t)
    else:
        with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["index", "label"])
            for i, label in enumerate(ds.labels):
                writer.writerow([i, label])
        write_mtx(os.path.join(directory, "readout.mtx"), ds.readout)
    manifest = {
        "kind": ds.kind,
        "d_model": ds.d_model,
        "n_tokens": ds.n_tokens,
        "n_train": ds.n_train,
        "n_eval": ds.n_eval,
    }
    if ds.kind == CLASSIFICATION:
        manifest["n_classes"] = int(ds.readout.shape[0])
    with open(os.path.join(directory, DATASET_MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(directory) -> Dataset:
    """Read and validate a dataset directory; shape mismatches name the file."""
    manifest_path = os.path.join(directory, DATASET_MANIFEST)
    if not os.path.exists(manifest_path):
        raise ValueError(f"missing dataset manifest {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    for key in ("kind", "d_model", "n_tokens", "n_train"):
        if key not in manifest:
            raise ValueError(f"{manifest_path}: missing field {key!r}")
    kind = manifest["kind"]
    d_model = int(manifest["d_model"])
    n_tokens = int(manifest["n_tokens"])
    n_train = int(manifest["n_train"])

    inputs_dir = os.path.join(directory, "inputs")
    if not os.path.isdir(inputs_dir):
        raise ValueError(f"missing inputs directory {inputs_dir}")
    names = sorted(os.listdir(inputs_dir))
    inputs = []
    for name in names:
        path = os.path.join(inputs_dir, name)
        x = read_mtx(path)
        if x.shape != (d_model, n_tokens):
            raise ValueError(
                f"{path}: shape {x.shape} disagrees with manifest "
                f"{d_model}x{n_tokens}"
            )
        inputs.append(x)

    targets = labels = readout = None
    if kind == REGRESSION:
        targets = []
        for name in names:
            path = os.path.join(directory, "targets", name)
            if not os.path.exists(path):
                raise ValueError(f"missing target file {path}")
            t = read_mtx(path)
            if t.shape != (d_model, n_tokens):
                raise ValueError(
                    f"{path}: shape {t.shape} disagrees with manifest "
                    f"{d_model}x{n_tokens}"
                )
            targets.append(t)
    elif kind == CLASSIFICATION:
        labels_path = os.path.join(directory, "labels.csv")
        if not os.path.exists(labels_path):
            raise ValueError(f"missing labels file {labels_path}")
        by_index = {}
        with open(labels_path, newline="") as fh:
            for row in csv.DictReader(fh):
                by_index[int(row["index"])] = int(row["label"])
        if sorted(by_index) != list(range(len(inputs))):
            raise ValueError(f"{labels_path}: label indices do not cover the samples")
        labels = [by_index[i] for i in range(len(inputs))]
        readout_path = os.path.join(directory, "readout.mtx")
        if not os.path.exists(readout_path):
            raise ValueError(f"missing readout file {readout_path}")
        readout = read_mtx(readout_path)
        if readout.shape[1] != d_model:
            raise ValueError(
                f"{readout_path}: readout cols {readout.shape[1]} != d_model {d_model}"
            )
    else:
        raise ValueError(f"{manifest_path}: unknown kind {kind!r}")

    return Dataset(
        kind=kind,
        d_model=d_model,
        n_tokens=n_tokens,
        inputs=inputs,
        targets=targets,
        labels=labels,
        readout=readout,
        n_train=n_train,
    )
