"""Datasets: CSV ingestion, synthetic generation, splitting and class weights.

Synthetic data is a hierarchy-aware Gaussian mixture: every node owns a
prototype displaced from its parent's by a per-level random offset, so
sibling leaves cluster under shared ancestors and the tree structure is
recoverable from the features.  Everything is driven by labelled SplitMix64
substreams, so a dataset is a pure function of its config.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .rng import SplitMix64
from .taxonomy import Head, RoutedLabel, Taxonomy, leaves

UNASSIGNED = -1  # split value before stratified_split has run


class DataError(ValueError):
    """Raised for malformed dataset files or invalid generator configs."""


@dataclass(frozen=True)
class Sample:
    id: str
    features: np.ndarray  # (D,) float64
    leaf: str
    split: int = UNASSIGNED


@dataclass(frozen=True)
class Dataset:
    taxonomy: Taxonomy
    samples: tuple[Sample, ...]
    feature_dim: int

    def __len__(self) -> int:
        return len(self.samples)

    def subset(self, splits) -> "Dataset":
        keep = tuple(s for s in self.samples if s.split in splits)
        return Dataset(self.taxonomy, keep, self.feature_dim)

    def features_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.feature_dim))
        return np.stack([s.features for s in self.samples])


@dataclass(frozen=True)
class GeneratorConfig:
    feature_dim: int
    leaf_counts: dict[str, int]
    level_scales: tuple[float, ...] = (2.0, 1.0, 0.5)
    noise_sigma: float = 1.0
    seed: int = 0


def generate_synthetic(t: Taxonomy, cfg: GeneratorConfig) -> Dataset:
    """Deterministic hierarchy-aware Gaussian mixture dataset.

    Node prototypes: p(root) = 0, p(n) = p(parent) + scale(level) * g(n)
    with g(n) a standard-normal vector from the "prototypes" substream
    (so the offset has per-dimension standard deviation scale(level)).
    Samples: p(leaf) + noise_sigma * gaussian, from the "noise" substream.
    Nodes are visited in depth-first declaration order; samples are drawn
    leaf by leaf in depth-first leaf order.
    """
    if cfg.noise_sigma <= 0:
        raise DataError("noise_sigma must be > 0")
    if any(c < 0 for c in cfg.leaf_counts.values()):
        raise DataError("leaf counts must be >= 0")
    leaf_order = leaves(t)
    for tag in cfg.leaf_counts:
        if tag not in leaf_order:
            raise DataError(f"leaf_counts names non-leaf or unknown tag {tag!r}")
    total = sum(cfg.leaf_counts.get(tag, 0) for tag in leaf_order)
    if total == 0:
        raise DataError("zero total sample count")
    max_level = t.max_level()
    if len(cfg.level_scales) < max_level:
        raise DataError(
            f"level_scales has {len(cfg.level_scales)} entries, need >= {max_level}"
        )

    root = SplitMix64(cfg.seed)
    proto_stream = root.substream("prototypes")
    noise_stream = root.substream("noise")

    D = cfg.feature_dim
    prototypes = {t.root: np.zeros(D)}

    def visit(tag):
        for child in t.nodes[tag].children:
            scale = cfg.level_scales[t.nodes[child].level - 1]
            offset = scale * proto_stream.fill_gaussian(D)
            prototypes[child] = prototypes[tag] + offset
            visit(child)

    visit(t.root)

    samples = []
    for tag in leaf_order:
        count = cfg.leaf_counts.get(tag, 0)
        proto = prototypes[tag]
        for k in range(count):
            feats = proto + cfg.noise_sigma * noise_stream.fill_gaussian(D)
            samples.append(Sample(id=f"{tag}_{k:05d}", features=feats, leaf=tag))
    return Dataset(t, tuple(samples), D)


def stratified_split(d: Dataset, k: int = 5, seed: int = 0) -> Dataset:
    """Per-leaf shuffled round-robin assignment into k subsets.

    Within each leaf the subset sizes differ by at most one.  By
    convention subsets 0..k-2 are train-dev and subset k-1 is the test
    hold-out.
    """
    if k < 2:
        raise DataError("k must be >= 2")
    stream = SplitMix64(seed).substream("split")
    by_leaf: dict[str, list[int]] = {}
    for i, s in enumerate(d.samples):
        by_leaf.setdefault(s.leaf, []).append(i)
    assignment = [UNASSIGNED] * len(d.samples)
    for tag in leaves(d.taxonomy):
        idx = by_leaf.get(tag, [])
        stream.shuffle(idx)
        for pos, i in enumerate(idx):
            assignment[i] = pos % k
    new = tuple(
        Sample(s.id, s.features, s.leaf, assignment[i])
        for i, s in enumerate(d.samples)
    )
    return Dataset(d.taxonomy, new, d.feature_dim)


def class_weights(
    d: Dataset, heads: list[Head], routings: list[RoutedLabel]
) -> list[np.ndarray]:
    """Inverse-frequency weights per head: w_c = N_h / (K_h * n_c).

    K_h is the head's effective width (including the leaky slot), n_c the
    number of samples routed to class c, N_h their total.  Classes with
    n_c = 0 get weight 0; a head with no routed samples at all gets an
    all-zero vector (and is thereby excluded from the loss) with a warning.
    """
    if len(routings) != len(d.samples):
        raise DataError("one routing per sample required")
    out = []
    for hi, head in enumerate(heads):
        counts = np.zeros(head.width)
        for r in routings:
            tgt = r.targets[hi]
            if tgt >= 0:
                counts[tgt] += 1
        n_total = counts.sum()
        w = np.zeros(head.width)
        if n_total == 0:
            warnings.warn(
                f"head {head.id}: no applicable training samples; excluded from loss",
                stacklevel=2,
            )
        else:
            nz = counts > 0
            w[nz] = n_total / (head.width * counts[nz])
        out.append(w)
    return out


_CSV_FLOAT = "%.17g"


def write_csv(d: Dataset) -> str:
    cols = ["id", "leaf", "split"] + [f"f{i}" for i in range(d.feature_dim)]
    lines = [",".join(cols)]
    for s in d.samples:
        feats = ",".join(_CSV_FLOAT % v for v in s.features)
        lines.append(f"{s.id},{s.leaf},{s.split},{feats}")
    return "\n".join(lines) + "\n"


def load_csv(text: str, t: Taxonomy) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise DataError("empty dataset file")
    header = lines[0].split(",")
    if header[:3] != ["id", "leaf", "split"]:
        raise DataError("bad header: expected id,leaf,split,f0..")
    D = len(header) - 3
    expected = [f"f{i}" for i in range(D)]
    if header[3:] != expected:
        raise DataError("bad header: feature columns must be f0..f{D-1}")
    leaf_set = set(leaves(t))
    samples = []
    ids = set()
    for rowno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3 + D:
            raise DataError(f"row {rowno}: expected {3 + D} fields, got {len(parts)}")
        sid, leaf, split_s = parts[0], parts[1], parts[2]
        if sid in ids:
            raise DataError(f"row {rowno}: duplicate id {sid!r}")
        ids.add(sid)
        if leaf not in leaf_set:
            raise DataError(f"row {rowno}: unknown leaf tag {leaf!r}")
        try:
            split = int(split_s)
        except ValueError:
            raise DataError(f"row {rowno}: bad split {split_s!r}") from None
        feats = np.array([float(v) for v in parts[3:]])
        if not np.isfinite(feats).all():
            raise DataError(f"row {rowno}: non-finite feature value")
        samples.append(Sample(sid, feats, leaf, split))
    return Dataset(t, tuple(samples), D)


def scaled_leaf_counts(t: Taxonomy, scale: float) -> dict[str, int]:
    """Leaf counts from the taxonomy file's count column, scaled and rounded
    half-up.  Requires counts on every leaf."""
    out = {}
    for tag in leaves(t):
        count = t.nodes[tag].count
        if count is None:
            raise DataError(f"leaf {tag} has no count in the taxonomy file")
        out[tag] = int(math.floor(count * scale + 0.5))
    return out
