"""Datasets: MHealth ingestion, synthetic multi-view objects, splits, weights."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
MHEALTH_COLUMNS = 24
MHEALTH_CLASSES = 12
MHEALTH_FEATURES = 23

DATASET_MAGIC = b"DFGD"
DATASET_VERSION = 1


@dataclass
class Dataset:
    """Features are ``(N, D)`` or, for multi-view data, ``(N, V, D)``."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    splits: dict[str, np.ndarray]
    name: str = ""

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def n_views(self) -> int:
        return self.features.shape[1] if self.features.ndim == 3 else 1

    def split_inputs(self, split: str, dnn=None):
        """Model inputs and labels for one split.

        Multi-view features are handed out per IoT node: the i-th IoT node of
        ``dnn`` (topological order) receives view i.
        """
        idx = self.splits[split]
        y = self.labels[idx]
        if self.features.ndim == 2:
            return self.features[idx], y
        if dnn is None:
            raise ValueError("multi-view data needs the graph to map views onto IoT nodes")
        iot = dnn.iot_nodes
        if len(iot) != self.n_views:
            raise ValueError(f"{self.n_views} views but {len(iot)} IoT nodes")
        return {node.id: self.features[idx, v] for v, node in enumerate(iot)}, y


def split_indices(n: int, seed: int, fractions: Sequence[float] = SPLIT_FRACTIONS) -> dict[str, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }


def split_by_groups(groups: np.ndarray, seed: int, fractions: Sequence[float] = SPLIT_FRACTIONS):
    """Whole groups (e.g. subjects) go to one split; proportions are approximate."""
    uniq = np.random.default_rng(seed).permutation(np.unique(groups))
    counts = np.array([np.sum(groups == g) for g in uniq])
    cum = np.cumsum(counts) / counts.sum()
    cut1 = np.searchsorted(cum, fractions[0] - 1e-9) + 1
    cut2 = max(np.searchsorted(cum, fractions[0] + fractions[1] - 1e-9) + 1, cut1 + 1)
    parts = {"train": uniq[:cut1], "val": uniq[cut1:cut2], "test": uniq[cut2:]}
    return {k: np.flatnonzero(np.isin(groups, v)) for k, v in parts.items()}


def standardize(features: np.ndarray, train_idx: np.ndarray) -> np.ndarray:
    mean = features[train_idx].mean(axis=0)
    std = features[train_idx].std(axis=0)
    std[std == 0] = 1.0
    return ((features - mean) / std).astype(np.float32)


def load_mhealth(
    path,
    seed: int = 0,
    split_by: str = "row",
    feature_columns: Optional[Sequence[int]] = None,
    label_column: int = 23,
    max_rows: Optional[int] = None,
) -> Dataset:
    """Read the per-subject ``mHealth_subject*.log`` files under ``path``.

    Rows labelled 0 (no activity) are dropped, labels become 0-based, and
    features are standardized with train-split statistics. ``max_rows``
    takes a seeded uniform subsample after filtering.
    """
    path = Path(path)
    files = sorted(path.glob("mHealth_subject*.log")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no mHealth_subject*.log files under {path}")
    if feature_columns is None:
        feature_columns = list(range(MHEALTH_FEATURES))
    blocks, groups = [], []
    for subject, f in enumerate(files):
        rows = []
        with open(f) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != MHEALTH_COLUMNS:
                    raise ValueError(f"{f}:{lineno}: expected {MHEALTH_COLUMNS} columns, got {len(parts)}")
                try:
                    rows.append([float(v) for v in parts])
                except ValueError as exc:
                    raise ValueError(f"{f}:{lineno}: malformed row") from exc
        arr = np.array(rows, dtype=np.float64).reshape(-1, MHEALTH_COLUMNS)
        blocks.append(arr)
        groups.append(np.full(len(arr), subject))
    table = np.concatenate(blocks)
    group = np.concatenate(groups)
    labels = table[:, label_column].astype(np.int64)
    if np.any(labels != table[:, label_column]) or labels.min() < 0 or labels.max() > MHEALTH_CLASSES:
        raise ValueError(f"labels must be integers in 0..{MHEALTH_CLASSES}")
    keep = labels != 0
    features, labels, group = table[keep][:, feature_columns], labels[keep] - 1, group[keep]
    if max_rows is not None and max_rows < len(labels):
        pick = np.sort(np.random.default_rng([seed, 7]).choice(len(labels), max_rows, replace=False))
        features, labels, group = features[pick], labels[pick], group[pick]
    if split_by == "row":
        splits = split_indices(len(labels), seed)
    elif split_by == "subject":
        splits = split_by_groups(group, seed)
    else:
        raise ValueError(f"unknown split_by {split_by!r}")
    return Dataset(standardize(features, splits["train"]), labels, MHEALTH_CLASSES, splits, "mhealth")


def class_weights(dataset: Dataset, normalize: bool = True) -> np.ndarray:
    """Inverse class frequency on the train split, ``N / (K * N_c)``, mean 1 if normalized."""
    y = dataset.labels[dataset.splits["train"]]
    if y.size == 0:
        raise ValueError("empty train split")
    k = dataset.class_count
    counts = np.bincount(y, minlength=k).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError(f"classes {np.flatnonzero(counts == 0).tolist()} absent from the train split")
    w = y.size / (k * counts)
    return w / w.mean() if normalize else w


# -- synthetic data ---------------------------------------------------------


@dataclass
class SynthMultiViewSpec:
    n: int = 1400
    views: int = 6
    view_dim: int = 32 * 32 * 3
    classes: int = 3
    class_skew: tuple = (0.25, 0.65, 0.10)  # pedestrian, car, bus
    occlusion_rate: float = 0.3
    signal: float = 0.1
    seed: int = 0
    split_seed: int = 0


def synth_multiview(spec: SynthMultiViewSpec = SynthMultiViewSpec()) -> Dataset:
    """Noisy renderings of per-class, per-camera prototype images.

    Each instance shows one object to every camera; an occluded camera sees
    an all-zero image, but at least one camera always sees the object.
    """
    rng = np.random.default_rng(spec.seed)
    skew = np.asarray(spec.class_skew, dtype=np.float64)
    if len(skew) != spec.classes:
        raise ValueError("class_skew needs one entry per class")
    prototypes = rng.standard_normal((spec.classes, spec.views, spec.view_dim))
    labels = rng.choice(spec.classes, size=spec.n, p=skew / skew.sum())
    feats = np.empty((spec.n, spec.views, spec.view_dim), dtype=np.float32)
    for i in range(spec.n):
        feats[i] = spec.signal * prototypes[labels[i]] + rng.standard_normal((spec.views, spec.view_dim))
    occluded = rng.random((spec.n, spec.views)) < spec.occlusion_rate
    all_hidden = occluded.all(axis=1)
    occluded[all_hidden, rng.integers(0, spec.views, size=all_hidden.sum())] = False
    feats[occluded] = 0.0
    return Dataset(feats, labels.astype(np.int64), spec.classes, split_indices(spec.n, spec.split_seed), "multiview")


def synth_activity(
    n: int = 40000,
    features: int = MHEALTH_FEATURES,
    classes: int = MHEALTH_CLASSES,
    seed: int = 0,
    split_seed: int = 0,
    noise: float = 0.2,
) -> Dataset:
    """Sensor-like tabular stand-in with the MHealth shape (23 features, 12 classes).

    Each class is a mixture of a few clusters in a low-dimensional latent
    space pushed through a fixed random nonlinearity, so it is not linearly
    separable but a deep MLP learns it well.
    """
    rng = np.random.default_rng(seed)
    latent = 8
    centers = rng.standard_normal((classes, 3, latent)) * 2.0
    mix = rng.standard_normal((latent, features))
    labels = rng.integers(0, classes, size=n)
    which = rng.integers(0, 3, size=n)
    z = centers[labels, which] + rng.standard_normal((n, latent))
    x = np.tanh(z @ mix / np.sqrt(latent)) + 0.5 * np.sin(z @ rng.standard_normal((latent, features)) / np.sqrt(latent))
    x += noise * rng.standard_normal(x.shape)
    splits = split_indices(n, split_seed)
    return Dataset(standardize(x, splits["train"]), labels, classes, splits, "activity")


# -- binary container -------------------------------------------------------


def save_dataset(path, dataset: Dataset) -> None:
    """Write features and labels; splits are recomputed from the seed on load."""
    feats = dataset.features if dataset.features.ndim == 3 else dataset.features[:, None, :]
    n, v, d = feats.shape
    header = DATASET_MAGIC + struct.pack("<IIIII", DATASET_VERSION, n, v, d, dataset.class_count)
    body = np.ascontiguousarray(feats, dtype="<f4").tobytes() + dataset.labels.astype("<u2").tobytes()
    Path(path).write_bytes(header + body)


def load_dataset(path, split_seed: int = 0) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset container (bad magic)")
    version, n, v, d, k = struct.unpack_from("<IIIII", buf, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    off = 24
    feats = np.frombuffer(buf, dtype="<f4", count=n * v * d, offset=off).reshape(n, v, d).astype(np.float32)
    off += 4 * n * v * d
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
    if off + 2 * n != len(buf):
        raise ValueError(f"{path}: size does not match header")
    if v == 1:
        feats = feats[:, 0, :]
    return Dataset(feats, labels, k, split_indices(n, split_seed), Path(path).stem)
