# app/data.py
"""
Synthetic 2-D Gaussian-mixture datasets (RING, BLOB), the labeled /
unlabeled split, batching, and CSV import/export.

CSV layout (one directory per dataset):
    train.csv, test.csv   header: x1,x2,class,labeled_flag
    floats with 9 significant digits; test rows carry labeled_flag 0
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.linalg import DTYPE, RngStream
from core.config import settings
from core.exceptions import ArgumentError, ResultsIOError
from core.logging import get_logger

logger = get_logger(__name__)

CSV_HEADER = ("x1", "x2", "class", "labeled_flag")
FLOAT_FMT = "{:.9g}"

RING_RADIUS = 0.75
RING_SIGMA = 0.05
BLOB_SIGMA = 0.12
BLOB_SPREAD = 0.8
BLOB_SEPARATION = 3.5  # minimum centre distance, in sigmas
BLOB_MAX_LAYOUTS = 50
BLOB_DRAWS_PER_CENTER = 200


class MixtureSpec(BaseModel):
    """K isotropic Gaussians in [−1, 1]² whose 3σ boxes stay inside the square."""
    model_config = ConfigDict(frozen=True)

    kind: Literal["ring", "blob"]
    num_classes: int = Field(ge=2)
    centers: list[tuple[float, float]]
    sigmas: list[float]
    seed: int

    @model_validator(mode="after")
    def _check_geometry(self) -> "MixtureSpec":
        if len(self.centers) != self.num_classes or len(self.sigmas) != self.num_classes:
            raise ValueError("need exactly one center and one sigma per class")
        for (cx, cy), sigma in zip(self.centers, self.sigmas):
            if sigma <= 0:
                raise ValueError("sigmas must be positive")
            if max(abs(cx), abs(cy)) + 3.0 * sigma > 1.0 + 1e-12:
                raise ValueError(f"center ({cx}, {cy}) violates the 3-sigma margin for sigma={sigma}")
        return self

    def center_array(self) -> np.ndarray:
        return np.asarray(self.centers, dtype=DTYPE)

    def sigma_array(self) -> np.ndarray:
        return np.asarray(self.sigmas, dtype=DTYPE)


@dataclass(frozen=True)
class MixturePool:
    """Fully labeled samples of a mixture before the SSL split."""
    spec: MixtureSpec | None
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def num_classes(self) -> int:
        if self.spec is not None:
            return self.spec.num_classes
        return int(max(self.train_y.max(), self.test_y.max())) + 1


@dataclass(frozen=True)
class SslDataset:
    """
    A training pool partitioned into labeled / unlabeled index sets plus a
    test split. ``train_y`` of unlabeled samples is the hidden oracle view:
    training code never reads it.
    """
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    labeled_index: np.ndarray
    unlabeled_index: np.ndarray
    num_classes: int
    n_s: int

    @cached_property
    def labeled_x(self) -> np.ndarray:
        return self.train_x[self.labeled_index]

    @cached_property
    def labeled_onehot(self) -> np.ndarray:
        return one_hot(self.train_y[self.labeled_index], self.num_classes)

    @cached_property
    def unlabeled_x(self) -> np.ndarray:
        return self.train_x[self.unlabeled_index]

    @cached_property
    def test_onehot(self) -> np.ndarray:
        return one_hot(self.test_y, self.num_classes)

    @property
    def sample_dim(self) -> int:
        return self.train_x.shape[1]

    @property
    def num_labeled(self) -> int:
        return int(self.labeled_index.size)

    @property
    def num_unlabeled(self) -> int:
        return int(self.unlabeled_index.size)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=DTYPE)
    out[np.arange(labels.size), labels] = 1.0
    return out


# ─── Synthesis ────────────────────────────────────────────────────────────────

def _balanced_labels(n: int, num_classes: int, rng: RngStream) -> np.ndarray:
    labels = np.arange(n, dtype=np.int64) % num_classes
    return labels[rng.permutation(n)]


def to_csv_precision(x: np.ndarray) -> np.ndarray:
    """Round to exactly the values a CSV export stores, so export then import is lossless."""
    return np.array([float(FLOAT_FMT.format(v)) for v in x.ravel()], dtype=DTYPE).reshape(x.shape)


def sample_mixture(spec: MixtureSpec, n: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """n samples with class counts differing by at most one, clipped to [−1, 1]² at CSV precision."""
    labels = _balanced_labels(n, spec.num_classes, rng)
    noise = rng.standard_normal(n, 2)
    x = spec.center_array()[labels] + spec.sigma_array()[labels, None] * noise
    return to_csv_precision(np.clip(x, -1.0, 1.0)), labels


def _build_pool(spec: MixtureSpec, train_n: int, test_n: int) -> MixturePool:
    if train_n < spec.num_classes or test_n < 1:
        raise ArgumentError("train_n must cover every class and test_n must be >= 1",
                            train_n=train_n, test_n=test_n)
    root = RngStream(spec.seed, ("mixture", spec.kind))
    train_x, train_y = sample_mixture(spec, train_n, root.child("train"))
    test_x, test_y = sample_mixture(spec, test_n, root.child("test"))
    logger.debug("Mixture pool built", extra={"kind": spec.kind, "num_classes": spec.num_classes,
                                              "train_n": train_n, "test_n": test_n, "seed": spec.seed})
    return MixturePool(spec=spec, train_x=train_x, train_y=train_y, test_x=test_x, test_y=test_y)


def make_ring(seed: int = 0, num_classes: int = 10, train_n: int = 10_000, test_n: int = 1_000,
              radius: float = RING_RADIUS, sigma: float = RING_SIGMA) -> tuple[MixtureSpec, MixturePool]:
    """Centers equally spaced on a circle: class k at angle 2πk/K."""
    if num_classes < 2:
        raise ArgumentError("RING needs K >= 2", num_classes=num_classes)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = [(float(radius * np.cos(a)), float(radius * np.sin(a))) for a in angles]
    spec = MixtureSpec(kind="ring", num_classes=num_classes, centers=centers,
                       sigmas=[sigma] * num_classes, seed=seed)
    return spec, _build_pool(spec, train_n, test_n)


def _separated_centers(num_classes: int, half_width: float, min_distance: float,
                       rng: RngStream) -> list[tuple[float, float]]:
    """Sequential uniform draws, rejecting any closer than ``min_distance`` to an accepted centre."""
    for layout in range(BLOB_MAX_LAYOUTS):
        layout_rng = rng.child("layout", layout)
        accepted: list[np.ndarray] = []
        for _ in range(BLOB_DRAWS_PER_CENTER * num_classes):
            candidate = layout_rng.uniform(-half_width, half_width, 2)
            if all(np.linalg.norm(candidate - c) >= min_distance for c in accepted):
                accepted.append(candidate)
                if len(accepted) == num_classes:
                    return [(float(cx), float(cy)) for cx, cy in accepted]
    raise ArgumentError("cannot place BLOB centres this far apart", num_classes=num_classes,
                        half_width=half_width, min_distance=min_distance)


def make_blob(seed: int | None = None, num_classes: int = 8, train_n: int = 10_000, test_n: int = 1_000,
              sigma: float = BLOB_SIGMA, spread: float = BLOB_SPREAD,
              separation: float = BLOB_SEPARATION) -> tuple[MixtureSpec, MixturePool]:
    """
    Centers uniform in [−s, s]² with s = min(spread, 1 − 3σ), no two closer
    than ``separation``·σ; neighbouring modes still overlap.

    ``seed=None`` selects the canonical BLOB instance shared by every run.
    """
    if num_classes < 2:
        raise ArgumentError("BLOB needs K >= 2", num_classes=num_classes)
    seed = settings.CANONICAL_BLOB_SEED if seed is None else seed
    half_width = min(spread, 1.0 - 3.0 * sigma)
    if half_width <= 0:
        raise ArgumentError("sigma too large for the unit square", sigma=sigma)
    rng = RngStream(seed, ("mixture", "blob", "centers"))
    centers = _separated_centers(num_classes, half_width, separation * sigma, rng)
    spec = MixtureSpec(kind="blob", num_classes=num_classes, centers=centers,
                       sigmas=[sigma] * num_classes, seed=seed)
    return spec, _build_pool(spec, train_n, test_n)


# ─── Semi-supervised split ───────────────────────────────────────────────────

def split_ssl(pool: MixturePool, n_s: int, seed: int) -> SslDataset:
    """Pick exactly n_s labeled samples per class uniformly; the rest is unlabeled."""
    if n_s < 1:
        raise ArgumentError("n_s must be >= 1", n_s=n_s)
    rng = RngStream(seed, "ssl-split")
    k = pool.num_classes
    picked: list[np.ndarray] = []
    for cls in range(k):
        members = np.flatnonzero(pool.train_y == cls)
        if members.size < n_s:
            raise ArgumentError("class has fewer samples than n_s",
                                cls=cls, available=int(members.size), n_s=n_s)
        picked.append(members[rng.choice(members.size, n_s, replace=False)])
    labeled = np.sort(np.concatenate(picked))
    mask = np.ones(pool.train_x.shape[0], dtype=bool)
    mask[labeled] = False
    return SslDataset(
        train_x=pool.train_x, train_y=pool.train_y,
        test_x=pool.test_x, test_y=pool.test_y,
        labeled_index=labeled, unlabeled_index=np.flatnonzero(mask),
        num_classes=k, n_s=n_s,
    )


# ─── Batching ────────────────────────────────────────────────────────────────

class BatchIterator:
    """
    Per-worker batching over an SslDataset.

    ``epoch_batches`` visits every unlabeled sample exactly once per call
    (reshuffled, last batch may be short). ``labeled_batch`` returns the
    whole labeled set when it fits in one batch, otherwise the next chunk of
    a labeled ordering that is reshuffled each time it is exhausted.
    """

    def __init__(self, data: SslDataset, batch_size: int, rng: RngStream, shuffle: bool = True) -> None:
        if batch_size < 1:
            raise ArgumentError("batch size must be >= 1", batch_size=batch_size)
        self.data = data
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.epoch = 0
        self._rng = rng
        self._labeled_order = np.arange(data.num_labeled)
        self._labeled_pos = data.num_labeled

    def epoch_batches(self) -> Iterator[np.ndarray]:
        n = self.data.num_unlabeled
        order = self._rng.permutation(n) if self.shuffle else np.arange(n)
        self.epoch += 1
        for start in range(0, n, self.batch_size):
            yield self.data.unlabeled_x[order[start:start + self.batch_size]]

    def labeled_batch(self) -> tuple[np.ndarray, np.ndarray]:
        data = self.data
        if data.num_labeled <= self.batch_size:
            return data.labeled_x, data.labeled_onehot
        if self._labeled_pos + self.batch_size > data.num_labeled:
            self._labeled_order = self._rng.permutation(data.num_labeled)
            self._labeled_pos = 0
        idx = self._labeled_order[self._labeled_pos:self._labeled_pos + self.batch_size]
        self._labeled_pos += self.batch_size
        return data.labeled_x[idx], data.labeled_onehot[idx]

    def random_unlabeled(self, size: int) -> np.ndarray:
        """Uniform draw without replacement (whole set if smaller than ``size``)."""
        n = self.data.num_unlabeled
        idx = self._rng.choice(n, size=min(size, n), replace=False)
        return self.data.unlabeled_x[idx]


# ─── Reference classifier ────────────────────────────────────────────────────

def bayes_predict(spec: MixtureSpec, x: np.ndarray) -> np.ndarray:
    """Argmax class likelihood under the mixture with equal priors."""
    centers = spec.center_array()
    sigmas = spec.sigma_array()
    sq = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    loglik = -sq / (2.0 * sigmas ** 2) - x.shape[1] * np.log(sigmas)
    return np.argmax(loglik, axis=1)


def bayes_accuracy(spec: MixtureSpec, test_x: np.ndarray, test_y: np.ndarray) -> float:
    """Supervised ceiling: accuracy of the Bayes-optimal classifier on a test split."""
    return float(np.mean(bayes_predict(spec, test_x) == test_y))


# ─── CSV import / export ─────────────────────────────────────────────────────

def _write_rows(path: Path, x: np.ndarray, y: np.ndarray, flags: np.ndarray) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for (x1, x2), cls, flag in zip(x, y, flags):
            writer.writerow((FLOAT_FMT.format(x1), FLOAT_FMT.format(x2), int(cls), int(flag)))


def export_csv(dataset: SslDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        flags = np.zeros(dataset.train_x.shape[0], dtype=np.int64)
        flags[dataset.labeled_index] = 1
        _write_rows(directory / "train.csv", dataset.train_x, dataset.train_y, flags)
        _write_rows(directory / "test.csv", dataset.test_x, dataset.test_y,
                    np.zeros(dataset.test_x.shape[0], dtype=np.int64))
    except OSError as exc:
        raise ResultsIOError(f"cannot write dataset: {exc}", path=str(directory)) from exc
    logger.info("Dataset exported", extra={"path": str(directory), "train_n": int(dataset.train_x.shape[0])})
    return directory


def _read_rows(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ResultsIOError("unexpected CSV header", path=str(path), header=",".join(header))
            rows = [row for row in reader if row]
    except OSError as exc:
        raise ResultsIOError(f"cannot read dataset: {exc}", path=str(path)) from exc
    try:
        x = np.array([[float(r[0]), float(r[1])] for r in rows], dtype=DTYPE).reshape(-1, 2)
        y = np.array([int(r[2]) for r in rows], dtype=np.int64)
        flags = np.array([int(r[3]) for r in rows], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise ResultsIOError(f"malformed dataset row: {exc}", path=str(path)) from exc
    return x, y, flags


def import_csv(directory: str | Path, num_classes: int | None = None) -> SslDataset:
    """Inverse of export_csv; the labeled flags define the split."""
    directory = Path(directory)
    train_x, train_y, flags = _read_rows(directory / "train.csv")
    test_x, test_y, _ = _read_rows(directory / "test.csv")
    k = num_classes or int(max(train_y.max(), test_y.max())) + 1
    labeled = np.flatnonzero(flags == 1)
    counts = np.bincount(train_y[labeled], minlength=k)
    if counts.size != k or np.any(counts != counts[0]) or counts[0] < 1:
        raise ArgumentError("labeled rows must be balanced across classes", counts=counts.tolist())
    return SslDataset(
        train_x=train_x, train_y=train_y, test_x=test_x, test_y=test_y,
        labeled_index=labeled, unlabeled_index=np.flatnonzero(flags == 0),
        num_classes=k, n_s=int(counts[0]),
    )


# ─── Config-driven loading ───────────────────────────────────────────────────

class DatasetConfig(BaseModel):
    """The [dataset] section of a run file."""
    model_config = ConfigDict(frozen=True)

    kind: Literal["ring", "blob", "csv"] = "ring"
    seed: int | None = Field(default=None, ge=0)
    n_s: int = Field(default=1, ge=1)
    num_classes: int | None = Field(default=None, ge=2)
    train_n: int = Field(default=10_000, ge=2)
    test_n: int = Field(default=1_000, ge=1)
    radius: float = Field(default=RING_RADIUS, gt=0, lt=1)
    sigma: float | None = Field(default=None, gt=0)
    spread: float = Field(default=BLOB_SPREAD, gt=0, le=1)
    separation: float = Field(default=BLOB_SEPARATION, ge=0)
    csv_path: str | None = None

    @model_validator(mode="after")
    def _csv_needs_path(self) -> "DatasetConfig":
        if self.kind == "csv" and not self.csv_path:
            raise ValueError("dataset.kind = csv requires dataset.csv_path")
        return self

    def resolved(self) -> "DatasetConfig":
        """Materialise kind-dependent defaults (seed, K, sigma)."""
        if self.kind == "ring":
            return self.model_copy(update={
                "seed": 0 if self.seed is None else self.seed,
                "num_classes": self.num_classes or 10,
                "sigma": self.sigma or RING_SIGMA,
            })
        if self.kind == "blob":
            return self.model_copy(update={
                "seed": settings.CANONICAL_BLOB_SEED if self.seed is None else self.seed,
                "num_classes": self.num_classes or 8,
                "sigma": self.sigma or BLOB_SIGMA,
            })
        return self


def build_pool(config: DatasetConfig) -> MixturePool:
    cfg = config.resolved()
    if cfg.kind == "ring":
        return make_ring(cfg.seed, cfg.num_classes, cfg.train_n, cfg.test_n, cfg.radius, cfg.sigma)[1]
    if cfg.kind == "blob":
        return make_blob(cfg.seed, cfg.num_classes, cfg.train_n, cfg.test_n, cfg.sigma, cfg.spread,
                         cfg.separation)[1]
    ds = import_csv(cfg.csv_path, cfg.num_classes)
    return MixturePool(spec=None, train_x=ds.train_x, train_y=ds.train_y, test_x=ds.test_x, test_y=ds.test_y)


def load_dataset(config: DatasetConfig, split_seed: int) -> SslDataset:
    """Synthetic kinds are split with ``split_seed``; CSV datasets keep their stored split."""
    if config.kind == "csv":
        return import_csv(config.csv_path, config.num_classes)
    return split_ssl(build_pool(config), config.n_s, split_seed)
