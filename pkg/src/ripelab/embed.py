"""From-scratch UMAP to 2-D plus the line-fit ripeness metric.

The embedding follows the standard construction: exact brute-force
Euclidean kNN (N is a few hundred here; documented limit ~1e4), per-point
smooth-kNN calibration (rho = nearest-neighbor distance, sigma by 64-step
bisection so the fuzzy cardinality hits log2(k)), fuzzy union
symmetrization w1 + w2 - w1*w2, the (a, b) curve fit for the low-dim
similarity 1 / (1 + a * x^(2b)), PCA initialization scaled to [-10, 10],
and seeded negative-sampling SGD. Everything is sequential and exactly
reproducible for a fixed seed; no approximate NN descent, no spectral
init, no parallel mode.

Ripeness per point is the normalized projection onto a total-least-squares
line through the 2-D cloud, oriented so projections correlate positively
with timepoint, with the population minimum mapping to 0 and the maximum
to 1 (one shared scale across berries and varieties).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit
from scipy import sparse
from scipy.optimize import curve_fit
from scipy.stats import spearmanr

from .errors import EstimationError, ValidationError

SMOOTH_K_TOLERANCE = 1e-5
INIT_SCALE = 10.0
GRAD_CLIP = 4.0


@dataclass(frozen=True)
class UmapParams:
    """Embedding hyperparameters; None n_neighbors means min(15, N - 1)."""

    n_neighbors: int | None = None
    min_dist: float = 0.1
    spread: float = 1.0
    n_epochs: int = 500
    negative_sample_rate: int = 5
    learning_rate: float = 1.0
    repulsion_strength: float = 1.0
    init: str = "pca"

    def __post_init__(self):
        if self.n_neighbors is not None and self.n_neighbors < 1:
            raise ValidationError("n_neighbors must be >= 1")
        if not self.min_dist > 0:
            raise ValidationError("min_dist must be positive")
        if self.n_epochs < 1:
            raise ValidationError("n_epochs must be >= 1")
        if self.init != "pca":
            raise ValidationError(f"unsupported init {self.init!r}")


@dataclass(frozen=True, eq=False)
class EmbeddingModel:
    points: np.ndarray  # (N, 2) float64
    knn_indices: np.ndarray  # (N, k) int64, self excluded
    knn_dists: np.ndarray  # (N, k) float64
    sigmas: np.ndarray  # (N,) float64
    rhos: np.ndarray  # (N,) float64
    curve: tuple[float, float]  # (a, b), both > 0
    params: UmapParams
    seed: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("embedding contains non-finite coordinates")
        a, b = self.curve
        if not (a > 0 and b > 0):
            raise ValidationError(f"curve parameters must be positive, got {self.curve}")


@dataclass(frozen=True)
class RipenessAxis:
    """TLS line through the embedding; projections in [lo, hi] map to [0, 1]."""

    direction: tuple[float, float]
    origin: tuple[float, float]
    lo: float
    hi: float

    def __post_init__(self):
        norm = float(np.hypot(*self.direction))
        if abs(norm - 1.0) > 1e-9:
            raise ValidationError("direction must be a unit vector")
        if not self.lo < self.hi:
            raise ValidationError(f"need lo < hi, got ({self.lo}, {self.hi})")
        object.__setattr__(self, "direction", tuple(float(v) for v in self.direction))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))


@dataclass(frozen=True)
class ExtractorScore:
    """How line-like and time-ordered one extractor's embedding is."""

    name: str
    linearity: float  # fraction of 2-D variance on the first principal axis
    monotonicity: float  # mean per-berry Spearman of projection vs timepoint


# --------------------------------------------------------------------------
# graph construction
# --------------------------------------------------------------------------


def exact_knn(x: np.ndarray, k: int, block: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force Euclidean kNN excluding self; ties resolved by index."""
    n = x.shape[0]
    sq = np.einsum("ij,ij->i", x, x)
    indices = np.empty((n, k), dtype=np.int64)
    dists = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (x[start:stop] @ x.T)
        np.maximum(d2, 0.0, out=d2)
        for i in range(start, stop):
            d2[i - start, i] = np.inf
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        indices[start:stop] = order
        dists[start:stop] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return indices, dists


def smooth_knn_calibration(
    knn_dists: np.ndarray, k: int, n_iter: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Bisection for per-point sigma so fuzzy cardinality equals log2(k).

    rho is the nearest-neighbor distance (zero for exact duplicates); the
    search runs on [0, inf) with doubling until an upper bound exists.
    """
    n = knn_dists.shape[0]
    target = np.log2(k)
    rho = knn_dists[:, 0].copy()
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    mid = np.ones(n)
    done = np.zeros(n, dtype=bool)
    adjusted = np.maximum(0.0, knn_dists - rho[:, None])
    for _ in range(n_iter):
        psum = np.exp(-adjusted / mid[:, None]).sum(axis=1)
        done |= np.abs(psum - target) < SMOOTH_K_TOLERANCE
        if done.all():
            break
        high = (psum > target) & ~done
        low = (psum <= target) & ~done
        hi[high] = mid[high]
        lo[low] = mid[low]
        grow = low & np.isinf(hi)
        halve = (high | low) & ~grow
        mid[halve] = 0.5 * (lo[halve] + hi[halve])
        mid[grow] *= 2.0
    return mid, rho


def membership_strengths(
    knn_indices: np.ndarray,
    knn_dists: np.ndarray,
    sigmas: np.ndarray,
    rhos: np.ndarray,
) -> sparse.csr_matrix:
    """Directed membership weights exp(-max(0, d - rho) / sigma)."""
    n, k = knn_indices.shape
    rows = np.repeat(np.arange(n, dtype=np.int64), k)
    cols = knn_indices.ravel()
    vals = np.exp(
        -np.maximum(0.0, knn_dists - rhos[:, None]) / sigmas[:, None]
    ).ravel()
    return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def fuzzy_union(w: sparse.csr_matrix) -> sparse.csr_matrix:
    """Symmetrize by probabilistic union: w1 + w2 - w1 * w2."""
    wt = w.T.tocsr()
    return (w + wt - w.multiply(wt)).tocsr()


def find_ab_params(spread: float, min_dist: float) -> tuple[float, float]:
    """Least-squares (a, b) so 1/(1 + a x^(2b)) tracks the target falloff."""

    def curve(x, a, b):
        return 1.0 / (1.0 + a * x ** (2 * b))

    xv = np.linspace(0, spread * 3, 300)
    yv = np.zeros(xv.shape)
    yv[xv < min_dist] = 1.0
    yv[xv >= min_dist] = np.exp(-(xv[xv >= min_dist] - min_dist) / spread)
    params, _ = curve_fit(curve, xv, yv)
    return float(params[0]), float(params[1])


def make_epochs_per_sample(weights: np.ndarray, n_epochs: int) -> np.ndarray:
    """Epoch spacing per edge: heavy edges sampled every epoch."""
    result = -1.0 * np.ones(weights.shape[0], dtype=np.float64)
    n_samples = n_epochs * (weights / weights.max())
    result[n_samples > 0] = float(n_epochs) / n_samples[n_samples > 0]
    return result


def pca_init(x: np.ndarray, scale: float = INIT_SCALE) -> np.ndarray:
    """First two principal-component scores, rescaled into [-scale, scale].

    Singular-vector signs are fixed by making each component's
    largest-magnitude loading positive, so the init is reproducible.
    """
    centered = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    points = np.zeros((x.shape[0], 2), dtype=np.float64)
    for comp in range(min(2, vt.shape[0])):
        v = vt[comp]
        pivot = int(np.argmax(np.abs(v)))
        sign = 1.0 if v[pivot] >= 0 else -1.0
        points[:, comp] = sign * u[:, comp] * s[comp]
    max_abs = np.max(np.abs(points))
    if max_abs > 0:
        points *= scale / max_abs
    return points


# --------------------------------------------------------------------------
# layout optimization (sequential, deterministic)
# --------------------------------------------------------------------------


def _splitmix64(seed: int) -> int:
    mask = (1 << 64) - 1
    z = (seed + 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    z = z ^ (z >> 31)
    return z or 0x9E3779B97F4A7C15


@njit(cache=True)
def _clip(val):
    if val > GRAD_CLIP:
        return GRAD_CLIP
    if val < -GRAD_CLIP:
        return -GRAD_CLIP
    return val


@njit(cache=True)
def _optimize_layout(
    emb,
    head,
    tail,
    n_epochs,
    epochs_per_sample,
    a,
    b,
    gamma,
    initial_alpha,
    negative_sample_rate,
    rng_state,
):
    n_vertices = emb.shape[0]
    dim = emb.shape[1]
    epochs_per_negative_sample = epochs_per_sample / negative_sample_rate
    epoch_of_next_negative_sample = epochs_per_negative_sample.copy()
    epoch_of_next_sample = epochs_per_sample.copy()
    state = rng_state

    for n in range(n_epochs):
        alpha = initial_alpha * (1.0 - n / n_epochs)
        for i in range(epochs_per_sample.shape[0]):
            if epoch_of_next_sample[i] <= n:
                j = head[i]
                k = tail[i]
                dist_squared = 0.0
                for d in range(dim):
                    diff = emb[j, d] - emb[k, d]
                    dist_squared += diff * diff
                if dist_squared > 0.0:
                    grad_coeff = -2.0 * a * b * dist_squared ** (b - 1.0)
                    grad_coeff /= a * dist_squared**b + 1.0
                else:
                    grad_coeff = 0.0
                for d in range(dim):
                    grad_d = _clip(grad_coeff * (emb[j, d] - emb[k, d]))
                    emb[j, d] += grad_d * alpha
                    emb[k, d] -= grad_d * alpha
                epoch_of_next_sample[i] += epochs_per_sample[i]

                n_neg = int(
                    (n - epoch_of_next_negative_sample[i])
                    / epochs_per_negative_sample[i]
                )
                for _ in range(n_neg):
                    # xorshift64* stream, top bits for the index
                    state ^= state >> np.uint64(12)
                    state ^= state << np.uint64(25)
                    state ^= state >> np.uint64(27)
                    mixed = state * np.uint64(2685821657736338717)
                    k = np.int64(mixed >> np.uint64(33)) % n_vertices
                    if k == j:
                        continue
                    dist_squared = 0.0
                    for d in range(dim):
                        diff = emb[j, d] - emb[k, d]
                        dist_squared += diff * diff
                    if dist_squared > 0.0:
                        grad_coeff = 2.0 * gamma * b
                        grad_coeff /= (0.001 + dist_squared) * (
                            a * dist_squared**b + 1.0
                        )
                    else:
                        grad_coeff = 0.0
                    for d in range(dim):
                        if grad_coeff > 0.0:
                            grad_d = _clip(grad_coeff * (emb[j, d] - emb[k, d]))
                        else:
                            grad_d = GRAD_CLIP
                        emb[j, d] += grad_d * alpha
                epoch_of_next_negative_sample[i] += (
                    n_neg * epochs_per_negative_sample[i]
                )
    return emb


def umap_embed(
    features: np.ndarray, params: UmapParams = UmapParams(), seed: int = 0
) -> EmbeddingModel:
    """Embed feature vectors into 2-D; bitwise reproducible per seed.

    Raises:
        ValidationError: non-finite features, N < 2, or an explicit
            n_neighbors >= N.
    """
    x = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    if x.ndim != 2:
        raise ValidationError(f"features must be N x D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features contain NaN or infinity")
    n = x.shape[0]
    if n < 2:
        raise ValidationError("embedding needs at least 2 points")
    if params.n_neighbors is None:
        k = min(15, n - 1)
    else:
        k = params.n_neighbors
        if n <= k:
            raise ValidationError(f"n_neighbors={k} needs more than {k} points, got {n}")

    knn_indices, knn_dists = exact_knn(x, k)
    sigmas, rhos = smooth_knn_calibration(knn_dists, k)
    graph = fuzzy_union(membership_strengths(knn_indices, knn_dists, sigmas, rhos))

    # drop edges too weak to be sampled even once
    graph.data[graph.data < graph.data.max() / float(params.n_epochs)] = 0.0
    graph.eliminate_zeros()
    coo = graph.tocoo()
    head = coo.row.astype(np.int64)
    tail = coo.col.astype(np.int64)
    epochs_per_sample = make_epochs_per_sample(coo.data, params.n_epochs)

    a, b = find_ab_params(params.spread, params.min_dist)
    points = np.ascontiguousarray(pca_init(x))

    points = _optimize_layout(
        points,
        head,
        tail,
        params.n_epochs,
        epochs_per_sample,
        a,
        b,
        float(params.repulsion_strength),
        float(params.learning_rate),
        float(params.negative_sample_rate),
        np.uint64(_splitmix64(int(seed))),
    )
    return EmbeddingModel(
        points=points,
        knn_indices=knn_indices,
        knn_dists=knn_dists,
        sigmas=sigmas,
        rhos=rhos,
        curve=(a, b),
        params=params,
        seed=int(seed),
    )


# --------------------------------------------------------------------------
# ripeness axis
# --------------------------------------------------------------------------


def _principal_direction(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Centroid, unit principal direction, and its variance fraction."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / points.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    direction = evecs[:, int(np.argmax(evals))]
    # canonical sign before any data-driven orientation
    pivot = int(np.argmax(np.abs(direction)))
    if direction[pivot] < 0:
        direction = -direction
    total = float(evals.sum())
    linearity = float(evals.max() / total) if total > 0 else float("nan")
    return centroid, direction, linearity


def fit_ripeness_axis(points: np.ndarray, timepoints: Sequence[int]) -> RipenessAxis:
    """Total-least-squares ripeness axis through the 2-D embedding.

    The direction is the first principal component, oriented so the
    projection's Spearman correlation with timepoint is non-negative.
    The origin is re-anchored at the minimum-projection foot of the
    line, so lo is always 0 and hi is the projection range.

    Raises:
        ValidationError: fewer than 2 distinct timepoints.
        EstimationError: zero-variance embedding.
    """
    points = np.asarray(points, dtype=np.float64)
    timepoints = np.asarray(timepoints, dtype=np.int64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValidationError("points must be N x 2")
    if points.shape[0] != timepoints.shape[0]:
        raise ValidationError("timepoints must parallel points")
    if np.unique(timepoints).size < 2:
        raise ValidationError("need at least 2 distinct timepoints")

    centroid, direction, _ = _principal_direction(points)
    projections = (points - centroid) @ direction
    if not projections.max() > projections.min():
        raise EstimationError("zero-variance embedding has no ripeness axis")
    rho = spearmanr(projections, timepoints).statistic
    if np.isfinite(rho) and rho < 0:
        direction = -direction
        projections = -projections
    lo = float(projections.min())
    hi = float(projections.max())
    origin = centroid + lo * direction
    return RipenessAxis(
        direction=(float(direction[0]), float(direction[1])),
        origin=(float(origin[0]), float(origin[1])),
        lo=0.0,
        hi=hi - lo,
    )


def ripeness_value(axis: RipenessAxis, point: Sequence[float]) -> float:
    """Normalized projection onto the axis, clamped to [0, 1]."""
    p = np.asarray(point, dtype=np.float64)
    proj = float((p - np.asarray(axis.origin)) @ np.asarray(axis.direction))
    return float(np.clip((proj - axis.lo) / (axis.hi - axis.lo), 0.0, 1.0))


def ripeness_values(axis: RipenessAxis, points: np.ndarray) -> np.ndarray:
    """Vectorized ripeness_value."""
    pts = np.asarray(points, dtype=np.float64)
    proj = (pts - np.asarray(axis.origin)) @ np.asarray(axis.direction)
    return np.clip((proj - axis.lo) / (axis.hi - axis.lo), 0.0, 1.0)


# --------------------------------------------------------------------------
# extractor comparison
# --------------------------------------------------------------------------


def _per_berry_spearman(
    projections: np.ndarray, berry_ids: np.ndarray, timepoints: np.ndarray
) -> float:
    rhos = []
    for berry in np.unique(berry_ids):
        sel = berry_ids == berry
        if np.unique(timepoints[sel]).size < 2:
            continue
        rho = spearmanr(projections[sel], timepoints[sel]).statistic
        if np.isfinite(rho):
            rhos.append(rho)
    if not rhos:
        raise ValidationError("no berry has 2+ distinct timepoints to rank")
    return float(np.mean(rhos))


def select_extractor_report(
    embeddings: Sequence[tuple[str, np.ndarray, np.ndarray, np.ndarray]],
) -> list[ExtractorScore]:
    """Rank extractors by how line-like and time-ordered their 2-D maps are.

    Args:
        embeddings: (name, berry_ids, timepoints, N x 2 points) per
            extractor; all must cover the same (berry, timepoint) set.

    Returns:
        Scores sorted best first: monotonicity, then linearity, then name.

    Raises:
        ValidationError: fewer than 2 extractors or mismatched index sets.
    """
    if len(embeddings) < 2:
        raise ValidationError("extractor comparison needs at least 2 embeddings")
    key_set = None
    for name, berry_ids, timepoints, _ in embeddings:
        keys = {(int(b), int(t)) for b, t in zip(berry_ids, timepoints)}
        if key_set is None:
            key_set = keys
        elif keys != key_set:
            raise ValidationError(
                f"extractor {name!r} covers a different (berry, timepoint) set"
            )

    scores = []
    for name, berry_ids, timepoints, points in embeddings:
        points = np.asarray(points, dtype=np.float64)
        berry_ids = np.asarray(berry_ids, dtype=np.int64)
        timepoints = np.asarray(timepoints, dtype=np.int64)
        centroid, direction, linearity = _principal_direction(points)
        projections = (points - centroid) @ direction
        rho = spearmanr(projections, timepoints).statistic
        if np.isfinite(rho) and rho < 0:
            projections = -projections
        mono = _per_berry_spearman(projections, berry_ids, timepoints)
        scores.append(ExtractorScore(name=name, linearity=linearity, monotonicity=mono))
    return sorted(scores, key=lambda s: (-s.monotonicity, -s.linearity, s.name))
