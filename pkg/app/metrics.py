# app/metrics.py
"""
Evaluation metrics.

  - classification_accuracy: argmax of the discriminator's class head
  - wasserstein1:            exact empirical W1 between equal-size point
                             sets, via min-cost perfect matching
                             (scipy's shortest-augmenting-path LSA solver)
  - frechet_distance:        ||Δμ||² + Tr(Σp + Σq − 2(Σp Σq)^½)
  - summary statistics and rank tests for result tables
"""
from __future__ import annotations

from typing import TYPE_CHECKING, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg as sla
from scipy import stats
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from app.linalg import DTYPE, RngStream, sample_standard_normal
from core.exceptions import ArgumentError

if TYPE_CHECKING:
    from app.neuralnet import DiscriminatorNet, GeneratorNet

W1_MAX_POINTS = 512
PSD_TOLERANCE = 1e-8


class MetricRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    epoch: int = Field(ge=0)
    accuracy: float = Field(ge=0.0, le=1.0)
    w1: float = Field(ge=0.0, allow_inf_nan=False)
    fid: float | None = Field(default=None, ge=0.0, allow_inf_nan=False)


def classification_accuracy(d: "DiscriminatorNet", test_x: np.ndarray, test_y: np.ndarray) -> float:
    """Fraction of test samples whose argmax class (lowest index on ties) is correct."""
    test_x = np.asarray(test_x, dtype=DTYPE)
    if test_x.shape[0] == 0:
        raise ArgumentError("test set is empty")
    labels = np.asarray(test_y)
    if labels.ndim == 2:
        labels = np.argmax(labels, axis=1)
    _, class_probs, _ = d.forward(test_x)
    return float(np.mean(np.argmax(class_probs, axis=1) == labels))


def _subsample(points: np.ndarray, size: int, rng: RngStream) -> np.ndarray:
    if points.shape[0] == size:
        return points
    return points[np.sort(rng.choice(points.shape[0], size, replace=False))]


def wasserstein1(sample_a: np.ndarray, sample_b: np.ndarray, rng: RngStream | None = None,
                 max_points: int | None = None) -> float:
    """
    Exact W1 between the uniform empirical measures of two point sets.

    The larger set is subsampled uniformly to the size of the smaller (and
    both to ``max_points`` when given) using ``rng``; W1 is then the mean
    Euclidean cost of the optimal perfect matching.
    """
    a = np.asarray(sample_a, dtype=DTYPE)
    b = np.asarray(sample_b, dtype=DTYPE)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if b.ndim == 1:
        b = b.reshape(-1, 1)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ArgumentError("wasserstein1 needs non-empty samples")
    if a.shape[1] != b.shape[1]:
        raise ArgumentError("samples differ in dimension", a=a.shape[1], b=b.shape[1])
    n = min(a.shape[0], b.shape[0])
    if max_points is not None:
        n = min(n, max_points)
    if a.shape[0] != n or b.shape[0] != n:
        rng = rng or RngStream(0, "w1-subsample")
        a = _subsample(a, n, rng)
        b = _subsample(b, n, rng)
    cost = cdist(a, b, metric="euclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / n)


def generator_w1(g: "GeneratorNet", reference: np.ndarray, rng: RngStream,
                 max_points: int = W1_MAX_POINTS) -> float:
    """W1 between min(|reference|, max_points) generated points and a reference subsample."""
    n = min(reference.shape[0], max_points)
    fake, _ = g.forward(sample_standard_normal(rng.child("z"), n, g.latent_dim))
    return wasserstein1(fake, reference, rng=rng.child("subsample"), max_points=n)


def _symmetric_psd(cov: np.ndarray, name: str) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=DTYPE))
    if cov.shape[0] != cov.shape[1]:
        raise ArgumentError(f"{name} must be square", shape=cov.shape)
    cov = 0.5 * (cov + cov.T)
    vals, vecs = sla.eigh(cov)
    if vals.min() < -PSD_TOLERANCE:
        raise ArgumentError(f"{name} is not positive semidefinite", min_eigenvalue=float(vals.min()))
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = sla.eigh(cov)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_p: np.ndarray, cov_p: np.ndarray, mu_q: np.ndarray, cov_q: np.ndarray) -> float:
    """
    Fréchet distance between N(μp, Σp) and N(μq, Σq).

    Tr((Σp Σq)^½) is taken as Tr((Σp^½ Σq Σp^½)^½), whose argument is
    symmetric PSD, so the root comes from an eigendecomposition.
    """
    mu_p = np.atleast_1d(np.asarray(mu_p, dtype=DTYPE))
    mu_q = np.atleast_1d(np.asarray(mu_q, dtype=DTYPE))
    sp = _symmetric_psd(cov_p, "cov_p")
    sq = _symmetric_psd(cov_q, "cov_q")
    if not (mu_p.shape == mu_q.shape and sp.shape == sq.shape and sp.shape[0] == mu_p.size):
        raise ArgumentError("means and covariances do not conform",
                            mu_p=mu_p.shape, mu_q=mu_q.shape, cov_p=sp.shape, cov_q=sq.shape)
    root_p = _psd_sqrt(sp)
    middle = root_p @ sq @ root_p
    middle = 0.5 * (middle + middle.T)
    tr_covmean = float(np.sqrt(np.clip(sla.eigvalsh(middle), 0.0, None)).sum())
    diff = mu_p - mu_q
    value = float(diff @ diff + np.trace(sp) + np.trace(sq) - 2.0 * tr_covmean)
    return max(value, 0.0)


def fit_gaussian_summary(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased covariance (symmetrised)."""
    x = np.asarray(samples, dtype=DTYPE)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[0] < 2:
        raise ArgumentError("need at least two samples", n=x.shape[0])
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return mean, 0.5 * (cov + cov.T)


def frechet_from_samples(samples_p: np.ndarray, samples_q: np.ndarray) -> float:
    return frechet_distance(*fit_gaussian_summary(samples_p), *fit_gaussian_summary(samples_q))


# ─── Result statistics ───────────────────────────────────────────────────────

SUMMARY_COLUMNS = ("Min", "Median", "IQR", "Max")


def summarize(values: Sequence[float]) -> dict[str, float]:
    """Min / Median / IQR (Q3 − Q1, linear interpolation) / Max."""
    arr = np.asarray(values, dtype=DTYPE)
    if arr.size == 0:
        raise ArgumentError("cannot summarize an empty sample")
    q1, median, q3 = np.percentile(arr, [25, 50, 75])
    return {"Min": float(arr.min()), "Median": float(median), "IQR": float(q3 - q1), "Max": float(arr.max())}


def mann_whitney(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided Mann-Whitney U p-value (1.0 when either side is empty or both are constant and equal)."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.size == 0 or b.size == 0:
        return 1.0
    if np.all(a == a[0]) and np.all(b == a[0]):
        return 1.0
    return float(stats.mannwhitneyu(a, b, alternative="two-sided").pvalue)


def epochs_to_peak(epochs: Sequence[int], accuracies: Sequence[float]) -> int:
    """Cumulative epochs at which accuracy first reaches its run maximum."""
    if len(epochs) == 0 or len(epochs) != len(accuracies):
        raise ArgumentError("epochs and accuracies must be non-empty and equally long")
    return int(epochs[int(np.argmax(np.asarray(accuracies)))])
