"""Open-set SSL tasks, feature-file I/O, augmentations and batch sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .networks import ConfigError

UNKNOWN_LABEL = -1
TEST_FRACTION = 0.2


class FeatureFileError(ValueError):
    """A feature CSV could not be parsed."""


@dataclass(frozen=True)
class OpenSetDataset:
    """Features plus index splits.

    ``labels`` holds raw class ids (``-1`` for unknown). The labels at
    ``unlabeled_idx`` are ground truth kept only for evaluation; training code
    reaches the unlabeled pool through :meth:`unlabeled_features` alone.
    """

    features: np.ndarray
    labels: np.ndarray
    seen_classes: tuple[int, ...]
    unseen_classes: tuple[int, ...]
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        if np.intersect1d(self.labeled_idx, self.unlabeled_idx).size:
            raise ConfigError("labeled and unlabeled indices overlap")
        bad = ~np.isin(self.labels[self.labeled_idx], self.seen_classes)
        if bad.any():
            raise ConfigError("labeled samples must come from seen classes")

    @property
    def num_seen(self) -> int:
        return len(self.seen_classes)

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def to_index(self, raw) -> np.ndarray:
        """Map raw class ids to ``0..K-1`` for seen classes, ``K`` for any other
        known class and ``-1`` for unknown ground truth."""
        raw = np.asarray(raw, dtype=np.int64)
        lookup = {c: i for i, c in enumerate(self.seen_classes)}
        k = self.num_seen
        return np.array([UNKNOWN_LABEL if r == UNKNOWN_LABEL else lookup.get(int(r), k) for r in raw],
                        dtype=np.int64)

    def labeled_set(self) -> tuple[np.ndarray, np.ndarray]:
        return self.features[self.labeled_idx], self.to_index(self.labels[self.labeled_idx])

    def unlabeled_features(self) -> np.ndarray:
        return self.features[self.unlabeled_idx]

    def hidden_unlabeled_truth(self) -> np.ndarray:
        """Open-set ground truth of the unlabeled pool. Evaluation only."""
        return self.to_index(self.labels[self.unlabeled_idx])

    def test_set(self) -> tuple[np.ndarray, np.ndarray]:
        """Test features with open-set truth (``K`` marks any unseen class)."""
        return self.features[self.test_idx], self.to_index(self.labels[self.test_idx])

    def with_unlabeled_labels(self, labels: np.ndarray) -> "OpenSetDataset":
        new = self.labels.copy()
        new[self.unlabeled_idx] = labels
        return OpenSetDataset(self.features, new, self.seen_classes, self.unseen_classes,
                              self.labeled_idx, self.unlabeled_idx, self.test_idx)


def make_gaussian_mixture_task(seed: int = 0, k_seen: int = 4, k_unseen: int = 4, input_dim: int = 16,
                               n_per_class: int = 500, n_labeled: int = 4,
                               class_sep: float = 3.0) -> OpenSetDataset:
    """Isotropic unit-variance Gaussian classes with means on a common sphere.

    The sphere radius is set so that the mean distance between pairs of class
    means equals ``class_sep``.

    Classes ``0..k_seen-1`` are seen. Each class holds out 20% of its samples
    for test; ``n_labeled`` of the remaining samples of each seen class are
    labeled, everything else is unlabeled.
    """
    if k_seen < 2:
        raise ConfigError(f"k_seen must be >= 2, got {k_seen}")
    if k_unseen < 0 or input_dim < 1 or class_sep <= 0:
        raise ConfigError("k_unseen >= 0, input_dim >= 1 and class_sep > 0 are required")
    n_test = int(round(TEST_FRACTION * n_per_class))
    if n_labeled < 1 or n_labeled > n_per_class - n_test:
        raise ConfigError(
            f"n_labeled={n_labeled} infeasible with n_per_class={n_per_class} ({n_test} held out)")

    rng = np.random.default_rng(seed)
    n_classes = k_seen + k_unseen
    directions = rng.standard_normal((n_classes, input_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    gaps = np.linalg.norm(directions[:, None] - directions[None], axis=2)
    mean_gap = gaps[np.triu_indices(n_classes, 1)].mean() if n_classes > 1 else 0.0
    if mean_gap == 0.0:  # one class, or every direction coincides (input_dim=1)
        mean_gap = 1.0
    means = (class_sep / mean_gap) * directions

    features = np.empty((n_classes * n_per_class, input_dim))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    labeled, unlabeled, test = [], [], []
    for c in range(n_classes):
        start = c * n_per_class
        features[start:start + n_per_class] = means[c] + rng.standard_normal((n_per_class, input_dim))
        order = start + rng.permutation(n_per_class)
        test.append(order[:n_test])
        train = order[n_test:]
        if c < k_seen:
            labeled.append(train[:n_labeled])
            unlabeled.append(train[n_labeled:])
        else:
            unlabeled.append(train)
    return OpenSetDataset(
        features=features,
        labels=labels,
        seen_classes=tuple(range(k_seen)),
        unseen_classes=tuple(range(k_seen, n_classes)),
        labeled_idx=np.sort(np.concatenate(labeled)),
        unlabeled_idx=np.sort(np.concatenate(unlabeled)),
        test_idx=np.sort(np.concatenate(test)),
    )


# ---------------------------------------------------------------------------
# CSV feature files: one sample per line, ``label,f1,...,fD``, no header


def _read_rows(path, allow_unknown: bool) -> tuple[np.ndarray, np.ndarray]:
    labels, rows = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) < 2:
                raise FeatureFileError(f"{path}:{lineno}: need a label and at least one feature")
            if width is None:
                width = len(rec)
            elif len(rec) != width:
                raise FeatureFileError(f"{path}:{lineno}: expected {width} fields, got {len(rec)}")
            try:
                label = int(rec[0])
            except ValueError:
                raise FeatureFileError(f"{path}:{lineno}: label {rec[0]!r} is not an integer") from None
            if label < 0 and not (allow_unknown and label == UNKNOWN_LABEL):
                raise FeatureFileError(f"{path}:{lineno}: invalid label {label}")
            try:
                values = [float(v) for v in rec[1:]]
            except ValueError as exc:
                raise FeatureFileError(f"{path}:{lineno}: non-numeric feature ({exc})") from None
            if not np.all(np.isfinite(values)):
                raise FeatureFileError(f"{path}:{lineno}: non-finite feature value")
            labels.append(label)
            rows.append(values)
    if not rows:
        return np.empty(0, dtype=np.int64), np.empty((0, 0))
    return np.array(labels, dtype=np.int64), np.array(rows, dtype=np.float64)


def load_feature_csv(labeled_path, unlabeled_path, test_path) -> OpenSetDataset:
    """Assemble a dataset from three feature files.

    Seen classes are the distinct labels of the labeled file. Unlabeled rows
    may carry ``-1`` for unknown ground truth.
    """
    y_l, x_l = _read_rows(labeled_path, allow_unknown=False)
    if not len(y_l):
        raise FeatureFileError(f"{labeled_path}: labeled file is empty")
    y_u, x_u = _read_rows(unlabeled_path, allow_unknown=True)
    y_t, x_t = _read_rows(test_path, allow_unknown=False)
    dim = x_l.shape[1]
    for path, x in ((unlabeled_path, x_u), (test_path, x_t)):
        if len(x) and x.shape[1] != dim:
            raise FeatureFileError(f"{path}: {x.shape[1]} features per row, labeled file has {dim}")
    x_u = x_u.reshape(-1, dim)
    x_t = x_t.reshape(-1, dim)
    seen = tuple(int(c) for c in np.unique(y_l))
    if len(seen) < 2:
        raise FeatureFileError(f"{labeled_path}: need at least 2 distinct classes, got {seen}")
    others = np.unique(np.concatenate([y_u, y_t]))
    unseen = tuple(int(c) for c in others if c != UNKNOWN_LABEL and c not in seen)
    n_l, n_u = len(y_l), len(y_u)
    return OpenSetDataset(
        features=np.concatenate([x_l, x_u, x_t]),
        labels=np.concatenate([y_l, y_u, y_t]),
        seen_classes=seen,
        unseen_classes=unseen,
        labeled_idx=np.arange(n_l),
        unlabeled_idx=np.arange(n_l, n_l + n_u),
        test_idx=np.arange(n_l + n_u, n_l + n_u + len(y_t)),
    )


def write_feature_csv(dataset: OpenSetDataset, out_dir) -> tuple[Path, Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = (out / "labeled.csv", out / "unlabeled.csv", out / "test.csv")
    for path, idx in zip(paths, (dataset.labeled_idx, dataset.unlabeled_idx, dataset.test_idx)):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for i in idx:
                writer.writerow([int(dataset.labels[i])] + [repr(float(v)) for v in dataset.features[i]])
    return paths


# ---------------------------------------------------------------------------
# augmentation and batching


@dataclass(frozen=True)
class AugmentSpec:
    weak_sigma: float = 0.1
    strong_sigma: float = 0.5
    strong_mask_frac: float = 0.25

    def validate(self) -> None:
        if self.weak_sigma < 0 or self.strong_sigma < self.weak_sigma:
            raise ConfigError("need 0 <= weak_sigma <= strong_sigma")
        if not 0.0 <= self.strong_mask_frac < 1.0:
            raise ConfigError(f"strong_mask_frac must lie in [0, 1), got {self.strong_mask_frac}")


def augment(x: np.ndarray, spec: AugmentSpec, strength: str, rng: np.random.Generator) -> np.ndarray:
    """Weak: additive Gaussian noise. Strong: more noise, then zero a fixed
    fraction of coordinates per row chosen uniformly at random."""
    x = np.asarray(x, dtype=np.float64)
    if strength == "weak":
        if spec.weak_sigma == 0:
            return x.copy()
        return x + spec.weak_sigma * rng.standard_normal(x.shape)
    if strength != "strong":
        raise ValueError(f"strength must be 'weak' or 'strong', got {strength!r}")
    out = x + spec.strong_sigma * rng.standard_normal(x.shape)
    n, d = out.shape
    n_mask = int(round(spec.strong_mask_frac * d))
    if n_mask and n:
        cols = np.argsort(rng.random((n, d)), axis=1)[:, :n_mask]
        out[np.arange(n)[:, None], cols] = 0.0
    return out


@dataclass
class UnlabeledBatch:
    """Unlabeled rows plus their positions in the unlabeled pool.

    ``pool_idx`` lets an evaluator look up hidden truth; the trainer only
    reads ``x``.
    """

    x: np.ndarray
    pool_idx: np.ndarray


def next_batch(dataset: OpenSetDataset, batch_size: int, mu: int, rng: np.random.Generator):
    """Sample ``batch_size`` labeled and ``mu * batch_size`` unlabeled rows with replacement."""
    if batch_size < 1 or mu < 1:
        raise ConfigError(f"batch_size and mu must be >= 1, got {batch_size}, {mu}")
    n_l, n_u = len(dataset.labeled_idx), len(dataset.unlabeled_idx)
    if n_l == 0 or n_u == 0:
        raise ConfigError("labeled and unlabeled pools must be non-empty")
    li = rng.integers(0, n_l, size=batch_size)
    ui = rng.integers(0, n_u, size=mu * batch_size)
    x_l, y_l = dataset.labeled_set()
    return (x_l[li], y_l[li]), UnlabeledBatch(dataset.features[dataset.unlabeled_idx[ui]], ui)
