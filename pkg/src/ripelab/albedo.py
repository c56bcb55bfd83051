"""Five-class albedo model: k-means fit, berry labeling, ripeness ratios.

Classes follow the grower convention: 1 is greenest, 5 is deepest red,
and classes 4-5 together are "red". The cluster-to-class mapping is
automatic by default (ascending redness score R - G of the centroid) so
the pipeline runs unattended; a human override may supply the
permutation instead, mirroring the manual mapping workflow.

The ripeness ratio of a bog at date t is its red fraction at t divided
by its red fraction at the final collection date, so the final entry is
exactly 1 and values above 1 are legitimate (a bog can be redder before
its last date than on it).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FitError, ValidationError

N_CLASSES = 5
RED_CLASSES = (4, 5)
DEFAULT_RISK_THRESHOLD = 0.6
KMEANS_TOL = 1e-6
KMEANS_MAX_ITER = 300
MAX_FIT_PIXELS = 500_000


@dataclass(frozen=True)
class ColorClassModel:
    """5 RGB centroids plus the cluster-to-class permutation."""

    centroids: tuple[tuple[float, float, float], ...]
    class_of_cluster: tuple[int, ...]  # cluster index -> class 1..5
    source: str = "auto"  # "auto" | "human_override"

    def __post_init__(self):
        if len(self.centroids) != N_CLASSES:
            raise ValidationError(f"need {N_CLASSES} centroids")
        cents = tuple(tuple(float(v) for v in c) for c in self.centroids)
        for i in range(N_CLASSES):
            for j in range(i + 1, N_CLASSES):
                if cents[i] == cents[j]:
                    raise ValidationError(f"centroids {i} and {j} coincide")
        if sorted(self.class_of_cluster) != list(range(1, N_CLASSES + 1)):
            raise ValidationError(
                f"class_of_cluster must be a permutation of 1..{N_CLASSES}"
            )
        if self.source not in ("auto", "human_override"):
            raise ValidationError(f"unknown source {self.source!r}")
        object.__setattr__(self, "centroids", cents)
        object.__setattr__(self, "class_of_cluster", tuple(int(c) for c in self.class_of_cluster))

    def centroid_of_class(self, label: int) -> tuple[float, float, float]:
        return self.centroids[self.class_of_cluster.index(label)]

    def to_dict(self) -> dict:
        return {
            "centroids": [list(c) for c in self.centroids],
            "class_of_cluster": list(self.class_of_cluster),
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ColorClassModel":
        return cls(
            centroids=tuple(tuple(c) for c in data["centroids"]),
            class_of_cluster=tuple(data["class_of_cluster"]),
            source=data.get("source", "auto"),
        )


@dataclass(frozen=True)
class ClassHistogram:
    """Per-session class counts; fractions undefined when no berries."""

    session_id: str
    counts: tuple[int, int, int, int, int]
    fractions: tuple[float, float, float, float, float] | None

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ValidationError("counts must be non-negative")
        total = sum(counts)
        if total == 0:
            if self.fractions is not None:
                raise ValidationError("zero-count histogram must have no fractions")
        else:
            fracs = tuple(c / total for c in counts)
            if self.fractions is not None and not np.allclose(
                self.fractions, fracs, rtol=0, atol=1e-12
            ):
                raise ValidationError("fractions inconsistent with counts")
            object.__setattr__(self, "fractions", fracs)
        object.__setattr__(self, "counts", counts)

    @property
    def empty(self) -> bool:
        return sum(self.counts) == 0

    @property
    def red_fraction(self) -> float:
        if self.fractions is None:
            raise ValidationError(f"session {self.session_id}: no detections")
        return sum(self.fractions[c - 1] for c in RED_CLASSES)

    @classmethod
    def from_labels(cls, session_id: str, labels: Sequence[int]) -> "ClassHistogram":
        counts = [0] * N_CLASSES
        for lab in labels:
            if not 1 <= lab <= N_CLASSES:
                raise ValidationError(f"label {lab} outside 1..{N_CLASSES}")
            counts[lab - 1] += 1
        return cls(session_id=session_id, counts=tuple(counts), fractions=None)


@dataclass(frozen=True)
class RipenessRatioTable:
    """Table 1 layout: one row per bog, one column per date."""

    dates: tuple[str, ...]
    bogs: tuple[str, ...]
    values: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        if len(self.values) != len(self.bogs):
            raise ValidationError("one value row per bog required")
        for row in self.values:
            if len(row) != len(self.dates):
                raise ValidationError("ragged ratio table")

    def row(self, bog: str) -> tuple[float, ...]:
        return self.values[self.bogs.index(bog)]


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------


def _kmeans_pp_init(pixels: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = pixels.shape[0]
    centroids = np.empty((k, pixels.shape[1]), dtype=np.float64)
    centroids[0] = pixels[rng.integers(n)]
    d2 = np.sum((pixels - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = pixels[int(np.argmax(d2))]
        else:
            centroids[i] = pixels[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((pixels - centroids[i]) ** 2, axis=1))
    return centroids


def _assign(pixels: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = (
        np.sum(pixels**2, axis=1)[:, None]
        - 2.0 * pixels @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    labels = np.argmin(d2, axis=1)
    return labels, d2


def kmeans_objective(pixels: np.ndarray, centroids: np.ndarray) -> float:
    """Sum of squared distances to the nearest centroid."""
    labels, d2 = _assign(pixels, centroids)
    return float(d2[np.arange(pixels.shape[0]), labels].sum())


def fit_color_classes(
    pixels: np.ndarray,
    seed: int,
    class_override: Sequence[int] | None = None,
) -> ColorClassModel:
    """Fit the 5-cluster RGB model with seeded k-means++ plus Lloyd.

    Pixels should be sampled across the whole growing season (caller's
    responsibility). The input is sorted internally before any seeded
    draw, so permuting the pixel order changes nothing. Convergence at
    max centroid movement < 1e-6 or 300 iterations. An empty cluster is
    re-seeded at the point farthest from its assigned centroid.

    Args:
        class_override: optional cluster-to-class permutation replacing
            the automatic redness (R - G) ordering.

    Raises:
        FitError: fewer than 5 distinct pixel values.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != 3:
        raise ValidationError(f"pixels must be N x 3, got {pixels.shape}")
    pixels = np.unique(pixels, axis=0)  # sorted; dedup keeps k-means++ spread
    distinct = pixels.shape[0]
    if distinct < N_CLASSES:
        raise FitError(f"< 5 distinct values: k-means needs {N_CLASSES}, got {distinct}")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(pixels, N_CLASSES, rng)
    prev_obj = np.inf
    for _ in range(KMEANS_MAX_ITER):
        labels, d2 = _assign(pixels, centroids)
        point_d2 = d2[np.arange(pixels.shape[0]), labels]
        obj = float(point_d2.sum())
        assert obj <= prev_obj + 1e-9, "k-means objective increased"
        prev_obj = obj
        new_centroids = centroids.copy()
        for c in range(N_CLASSES):
            members = labels == c
            if members.any():
                new_centroids[c] = pixels[members].mean(axis=0)
            else:
                new_centroids[c] = pixels[int(np.argmax(point_d2))]
                point_d2 = point_d2.copy()
                point_d2[int(np.argmax(point_d2))] = 0.0
        move = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if move < KMEANS_TOL:
            break

    redness = centroids[:, 0] - centroids[:, 1]
    order = np.lexsort((centroids[:, 2], centroids[:, 1], centroids[:, 0], redness))
    class_of_cluster = [0] * N_CLASSES
    for rank, cluster in enumerate(order):
        class_of_cluster[cluster] = rank + 1

    if class_override is not None:
        class_of_cluster = list(class_override)
        source = "human_override"
    else:
        source = "auto"
    return ColorClassModel(
        centroids=tuple(tuple(c) for c in centroids),
        class_of_cluster=tuple(class_of_cluster),
        source=source,
    )


def label_berry(pixels: np.ndarray, model: ColorClassModel) -> int:
    """Majority class over the berry's pixels; ties go to the riper class.

    Each pixel is assigned to the nearest centroid in calibrated RGB;
    duplicating the pixel list cannot change the result.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != 3 or pixels.shape[0] == 0:
        raise ValidationError("label_berry needs a nonempty N x 3 pixel list")
    centroids = np.asarray(model.centroids, dtype=np.float64)
    labels, _ = _assign(pixels, centroids)
    votes = np.zeros(N_CLASSES, dtype=np.int64)
    for cluster, count in zip(*np.unique(labels, return_counts=True)):
        votes[model.class_of_cluster[cluster] - 1] += count
    best = votes.max()
    # argmax from the top: riper class wins ties
    for label in range(N_CLASSES, 0, -1):
        if votes[label - 1] == best:
            return label
    raise AssertionError("unreachable")


def class_histogram(session_id: str, labels: Sequence[int]) -> ClassHistogram:
    """Counts and fractions per class; zero berries flags the histogram."""
    return ClassHistogram.from_labels(session_id, labels)


def sample_training_pixels(
    pixel_blocks: Sequence[np.ndarray],
    seed: int,
    cap: int = MAX_FIT_PIXELS,
) -> np.ndarray:
    """Pool berry pixels across sessions, uniformly subsampled to a cap."""
    blocks = [np.asarray(b, dtype=np.float64).reshape(-1, 3) for b in pixel_blocks if len(b)]
    if not blocks:
        raise ValidationError("no pixels to sample")
    pool = np.concatenate(blocks, axis=0)
    if pool.shape[0] > cap:
        rng = np.random.default_rng(seed)
        idx = rng.choice(pool.shape[0], size=cap, replace=False)
        pool = pool[np.sort(idx)]
    return pool


# --------------------------------------------------------------------------
# ripeness ratio and risk
# --------------------------------------------------------------------------


def ripeness_ratio(histograms: Sequence[ClassHistogram]) -> tuple[float, ...]:
    """Red-fraction ratios against the final date, final entry exactly 1.

    ratio_t = (frac4_t + frac5_t) / (frac4_T + frac5_T). Values above 1
    are preserved, never clamped. The final entry is guarded to exactly
    1.0 rather than trusting x/x round-off.

    Raises:
        ValidationError: fewer than 2 dates, an empty histogram, or a
            zero red fraction at the final date ("undefined ratio").
    """
    histograms = list(histograms)
    if len(histograms) < 2:
        raise ValidationError("ripeness ratio needs at least 2 dates")
    reds = [h.red_fraction for h in histograms]
    final = reds[-1]
    if final == 0.0:
        raise ValidationError(
            "undefined ratio: red fraction at the final date is zero"
        )
    ratios = [r / final for r in reds[:-1]]
    ratios.append(1.0)
    return tuple(ratios)


def risk_flag(ratios: Sequence[float], threshold: float = DEFAULT_RISK_THRESHOLD) -> int | None:
    """Index of the first date whose ratio is >= threshold, else None."""
    for i, r in enumerate(ratios):
        if r >= threshold:
            return i
    return None


def risk_date(
    ratios: Sequence[float],
    dates: Sequence[str],
    threshold: float = DEFAULT_RISK_THRESHOLD,
) -> str | None:
    """First date at or past the risk threshold, else None."""
    if len(ratios) != len(dates):
        raise ValidationError("ratios and dates must parallel")
    idx = risk_flag(ratios, threshold)
    return None if idx is None else dates[idx]
