"""Frame alignment: corner matching and RANSAC homography estimation.

Each ground-series frame is aligned to the first frame of its series.
Corners come from a Harris detector, described by 11x11 zero-mean
unit-norm patches and matched by normalized correlation with a Lowe
ratio test and symmetric cross-check. A commodity detector (SIFT etc.)
can be swapped in by supplying correspondences from a JSON file; the
robust estimation stage is the part that matters and is self-contained.

Conventions: points are (x, y) pixel coordinates; a homography maps
moving-frame coordinates to reference-frame coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EstimationError, InsufficientCorrespondences, ValidationError

MIN_IMAGE_SIDE = 64
PATCH_SIZE = 11  # descriptor window, odd
HARRIS_K = 0.04
HARRIS_SIGMA = 1.5


@dataclass(frozen=True)
class MatchParams:
    # relative to max Harris response; a single high-contrast object (the
    # gray card) can dominate the max by 3+ orders of magnitude, so the
    # floor sits well below it but far above the sensor-noise response
    response_rel_threshold: float = 1e-4
    nms_radius: int = 5
    ratio: float = 0.8  # Lowe ratio on descriptor distances
    max_corners: int = 4000


@dataclass(frozen=True)
class Correspondence:
    src: tuple[float, float]  # (x, y) in the moving frame
    dst: tuple[float, float]  # (x, y) in the reference frame
    score: float

    def __post_init__(self):
        object.__setattr__(self, "src", (float(self.src[0]), float(self.src[1])))
        object.__setattr__(self, "dst", (float(self.dst[0]), float(self.dst[1])))


@dataclass(frozen=True)
class Homography:
    """3x3 projective map, row-major, normalized so h[8] == 1."""

    h: tuple[float, ...]
    inlier_count: int
    reprojection_rms: float

    def __post_init__(self):
        if len(self.h) != 9:
            raise ValidationError("homography needs 9 row-major entries")
        h = tuple(float(v) for v in self.h)
        if h[8] == 0.0:
            raise ValidationError("homography h[2][2] must be nonzero")
        if h[8] != 1.0:
            h = tuple(v / h[8] for v in h)
        if h[0] * h[4] - h[1] * h[3] == 0.0:
            raise ValidationError("upper-left 2x2 of homography is singular")
        if self.inlier_count < 4:
            raise ValidationError(
                f"homography needs >= 4 inliers, got {self.inlier_count}"
            )
        object.__setattr__(self, "h", h)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.h, dtype=np.float64).reshape(3, 3)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(h=(1, 0, 0, 0, 1, 0, 0, 0, 1), inlier_count=4, reprojection_rms=0.0)

    def to_dict(self) -> dict:
        return {
            "h": list(self.h),
            "inlier_count": self.inlier_count,
            "reprojection_rms": self.reprojection_rms,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Homography":
        return cls(
            h=tuple(data["h"]),
            inlier_count=int(data["inlier_count"]),
            reprojection_rms=float(data["reprojection_rms"]),
        )


# --------------------------------------------------------------------------
# detection and matching
# --------------------------------------------------------------------------


def harris_corners(image: np.ndarray, params: MatchParams) -> np.ndarray:
    """Harris corner positions as an M x 2 array of (x, y), strongest first."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError("corner detection expects a grayscale image")
    ix = ndimage.sobel(img, axis=1, mode="nearest")
    iy = ndimage.sobel(img, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, HARRIS_SIGMA, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, HARRIS_SIGMA, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, HARRIS_SIGMA, mode="nearest")
    response = sxx * syy - sxy * sxy - HARRIS_K * (sxx + syy) ** 2

    rmax = response.max()
    if rmax <= 0:
        return np.empty((0, 2), dtype=np.float64)
    size = 2 * params.nms_radius + 1
    local_max = ndimage.maximum_filter(response, size=size, mode="nearest")
    margin = PATCH_SIZE // 2
    keep = (response == local_max) & (response > params.response_rel_threshold * rmax)
    keep[:margin, :] = keep[-margin:, :] = False
    keep[:, :margin] = keep[:, -margin:] = False
    rows, cols = np.nonzero(keep)
    if rows.size == 0:
        return np.empty((0, 2), dtype=np.float64)
    strength = response[rows, cols]
    order = np.lexsort((cols, rows, -strength))[: params.max_corners]
    return np.stack([cols[order], rows[order]], axis=1).astype(np.float64)


def _patch_descriptors(
    image: np.ndarray, corners: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Zero-mean unit-norm 11x11 patches; flat (zero-norm) corners dropped."""
    img = np.asarray(image, dtype=np.float64)
    half = PATCH_SIZE // 2
    descs = np.empty((corners.shape[0], PATCH_SIZE * PATCH_SIZE), dtype=np.float64)
    valid = np.ones(corners.shape[0], dtype=bool)
    for i, (x, y) in enumerate(corners):
        r, c = int(y), int(x)
        patch = img[r - half : r + half + 1, c - half : c + half + 1].ravel()
        patch = patch - patch.mean()
        norm = np.linalg.norm(patch)
        if norm == 0.0:
            valid[i] = False
            continue
        descs[i] = patch / norm
    return corners[valid], descs[valid]


def detect_and_match(
    moving: np.ndarray,
    reference: np.ndarray,
    params: MatchParams = MatchParams(),
) -> list[Correspondence]:
    """Match Harris corner patches between two grayscale frames.

    Matches maximize normalized correlation, must pass the Lowe ratio
    test (best/second-best descriptor distance < params.ratio), and are
    cross-checked symmetrically. Scores are the correlations.

    Raises:
        ValidationError: image smaller than 64 x 64.
        InsufficientCorrespondences: fewer than 4 surviving matches.
    """
    for name, img in (("moving", moving), ("reference", reference)):
        img = np.asarray(img)
        if img.ndim != 2:
            raise ValidationError(f"{name} image must be grayscale")
        if min(img.shape) < MIN_IMAGE_SIDE:
            raise ValidationError(
                f"{name} image must be at least {MIN_IMAGE_SIDE}px per side"
            )

    corners_a = harris_corners(moving, params)
    corners_b = harris_corners(reference, params)
    if corners_a.shape[0] == 0 or corners_b.shape[0] == 0:
        raise InsufficientCorrespondences(0)
    pts_a, desc_a = _patch_descriptors(moving, corners_a)
    pts_b, desc_b = _patch_descriptors(reference, corners_b)
    if pts_a.shape[0] == 0 or pts_b.shape[0] == 0:
        raise InsufficientCorrespondences(0)

    # correlation of unit vectors; distance^2 = 2 - 2*corr
    corr = desc_a @ desc_b.T
    best_ab = _ratio_matches(corr, params.ratio)
    best_ba = _ratio_matches(corr.T, params.ratio)

    matches = []
    for i, (j, score) in best_ab.items():
        back = best_ba.get(j)
        if back is not None and back[0] == i:
            matches.append(
                Correspondence(
                    src=(pts_a[i, 0], pts_a[i, 1]),
                    dst=(pts_b[j, 0], pts_b[j, 1]),
                    score=float(score),
                )
            )
    if len(matches) < 4:
        raise InsufficientCorrespondences(len(matches))
    return matches


def _ratio_matches(corr: np.ndarray, ratio: float) -> dict[int, tuple[int, float]]:
    """Best match per row passing the Lowe ratio test on patch distances."""
    out: dict[int, tuple[int, float]] = {}
    n_cols = corr.shape[1]
    for i in range(corr.shape[0]):
        row = corr[i]
        j = int(np.argmax(row))
        best = row[j]
        d1 = np.sqrt(max(0.0, 2.0 - 2.0 * best))
        if n_cols == 1:
            out[i] = (j, float(best))
            continue
        second = np.max(np.concatenate([row[:j], row[j + 1 :]]))
        d2 = np.sqrt(max(0.0, 2.0 - 2.0 * second))
        if d2 == 0.0:  # duplicate descriptors, ambiguous
            continue
        if d1 / d2 < ratio:
            out[i] = (j, float(best))
    return out


# --------------------------------------------------------------------------
# homography estimation
# --------------------------------------------------------------------------


def _hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translate centroid to origin, scale mean distance to sqrt(2)."""
    centroid = pts.mean(axis=0)
    shifted = pts - centroid
    mean_dist = np.mean(np.linalg.norm(shifted, axis=1))
    scale = np.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    t = np.array(
        [[scale, 0, -scale * centroid[0]], [0, scale, -scale * centroid[1]], [0, 0, 1]],
        dtype=np.float64,
    )
    return shifted * scale, t


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Direct linear transform with Hartley normalization; None if degenerate."""
    src_n, t_src = _hartley_normalize(src)
    dst_n, t_dst = _hartley_normalize(dst)
    n = src.shape[0]
    a = np.zeros((2 * n, 9), dtype=np.float64)
    x, y = src_n[:, 0], src_n[:, 1]
    u, v = dst_n[:, 0], dst_n[:, 1]
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = 1.0
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = 1.0
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v
    try:
        _, s, vt = np.linalg.svd(a)
    except np.linalg.LinAlgError:
        return None
    if n > 4 and s[-2] <= 1e-12 * max(s[0], 1.0):
        return None
    h_n = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_n @ t_src
    if abs(h[2, 2]) < 1e-15:
        return None
    return h / h[2, 2]


def _apply_h(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    hom = np.column_stack([pts, np.ones(pts.shape[0])]) @ h.T
    w = hom[:, 2]
    w = np.where(np.abs(w) < 1e-15, 1e-15, w)
    return hom[:, :2] / w[:, None]


def _symmetric_errors(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Per-point RMS of forward and backward transfer distances, pixels."""
    try:
        h_inv = np.linalg.inv(h)
    except np.linalg.LinAlgError:
        return np.full(src.shape[0], np.inf)
    fwd = np.sum((_apply_h(h, src) - dst) ** 2, axis=1)
    bwd = np.sum((_apply_h(h_inv, dst) - src) ** 2, axis=1)
    return np.sqrt(0.5 * (fwd + bwd))


def _collinear_triple(pts: np.ndarray) -> bool:
    for i in range(4):
        sub = np.delete(pts, i, axis=0)
        area = abs(
            (sub[1, 0] - sub[0, 0]) * (sub[2, 1] - sub[0, 1])
            - (sub[2, 0] - sub[0, 0]) * (sub[1, 1] - sub[0, 1])
        )
        if area < 1e-9:
            return True
    return False


def estimate_homography(
    matches: list[Correspondence],
    seed: int,
    threshold: float = 3.0,
    max_iters: int = 2000,
    confidence: float = 0.99,
) -> Homography:
    """RANSAC homography from correspondences; deterministic per seed.

    Minimal 4-point samples, normalized DLT, inlier test at `threshold`
    pixels of symmetric reprojection error, adaptive iteration count at
    the given confidence capped at `max_iters`, then a least-squares DLT
    refit on the winning inlier set. Correspondences are canonically
    sorted first, so the result does not depend on input order.

    Raises:
        InsufficientCorrespondences: fewer than 4 matches.
        EstimationError: no model with at least 4 inliers.
    """
    if len(matches) < 4:
        raise InsufficientCorrespondences(len(matches))
    matches = sorted(matches, key=lambda m: (m.src, m.dst, m.score))
    src = np.array([m.src for m in matches], dtype=np.float64)
    dst = np.array([m.dst for m in matches], dtype=np.float64)
    n = src.shape[0]

    rng = np.random.default_rng(seed)
    best_inliers: np.ndarray | None = None
    best_count = 0
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        s4, d4 = src[idx], dst[idx]
        if _collinear_triple(s4) or _collinear_triple(d4):
            continue  # degenerate sample, redraw
        h = _dlt(s4, d4)
        if h is None:
            continue
        errors = _symmetric_errors(h, src, dst)
        inliers = errors <= threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
            w = count / n
            if w >= 1.0:
                break
            denom = np.log1p(-min(w**4, 1 - 1e-12))
            needed = int(np.ceil(np.log(1.0 - confidence) / denom))
    if best_inliers is None or best_count < 4:
        raise EstimationError(
            f"no homography with >= 4 inliers among {n} correspondences"
        )

    h = _dlt(src[best_inliers], dst[best_inliers])
    if h is None:
        raise EstimationError("degenerate inlier set in final refit")
    errors = _symmetric_errors(h, src, dst)
    inliers = errors <= threshold
    if int(inliers.sum()) < 4:
        raise EstimationError("refit lost inlier support")
    rms = float(np.sqrt(np.mean(errors[inliers] ** 2)))
    return Homography(
        h=tuple(h.ravel().tolist()),
        inlier_count=int(inliers.sum()),
        reprojection_rms=rms,
    )


# --------------------------------------------------------------------------
# warping
# --------------------------------------------------------------------------


def warp_to_reference(
    image: np.ndarray, h: Homography
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-warp an image into reference-frame coordinates.

    Bilinear sampling; output pixels whose source footprint leaves the
    moving image are set to the (0, 0, 0) sentinel and flagged False in
    the returned validity mask.

    Returns:
        (warped image, validity mask); warped keeps the input dtype.
    """
    image = np.asarray(image)
    mat = h.matrix
    if abs(np.linalg.det(mat)) < 1e-12:
        raise EstimationError("near-singular homography cannot be inverted")
    h_inv = np.linalg.inv(mat)

    rows, cols = image.shape[:2]
    xs, ys = np.meshgrid(np.arange(cols, dtype=np.float64), np.arange(rows, dtype=np.float64))
    denom = h_inv[2, 0] * xs + h_inv[2, 1] * ys + h_inv[2, 2]
    denom = np.where(np.abs(denom) < 1e-15, 1e-15, denom)
    u = (h_inv[0, 0] * xs + h_inv[0, 1] * ys + h_inv[0, 2]) / denom
    v = (h_inv[1, 0] * xs + h_inv[1, 1] * ys + h_inv[1, 2]) / denom

    valid = (u >= 0.0) & (u <= cols - 1.0) & (v >= 0.0) & (v <= rows - 1.0)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, cols - 2 if cols > 1 else 0)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, rows - 2 if rows > 1 else 0)
    fu = np.clip(u - u0, 0.0, 1.0)
    fv = np.clip(v - v0, 0.0, 1.0)

    img = image.astype(np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    w00 = (1 - fu) * (1 - fv)
    w10 = fu * (1 - fv)
    w01 = (1 - fu) * fv
    w11 = fu * fv
    out = (
        img[v0, u0] * w00[..., None]
        + img[v0, u0 + 1] * w10[..., None]
        + img[v0 + 1, u0] * w01[..., None]
        + img[v0 + 1, u0 + 1] * w11[..., None]
    )
    out[~valid] = 0.0
    if image.ndim == 2:
        out = out[:, :, 0]
    if np.issubdtype(image.dtype, np.integer):
        out = np.rint(np.clip(out, np.iinfo(image.dtype).min, np.iinfo(image.dtype).max))
    return out.astype(image.dtype), valid


def warp_labels_to_reference(label: np.ndarray, h: Homography) -> np.ndarray:
    """Nearest-neighbor inverse warp for integer label images (0 = none)."""
    label = np.asarray(label)
    mat = h.matrix
    if abs(np.linalg.det(mat)) < 1e-12:
        raise EstimationError("near-singular homography cannot be inverted")
    h_inv = np.linalg.inv(mat)
    rows, cols = label.shape
    xs, ys = np.meshgrid(np.arange(cols, dtype=np.float64), np.arange(rows, dtype=np.float64))
    denom = h_inv[2, 0] * xs + h_inv[2, 1] * ys + h_inv[2, 2]
    denom = np.where(np.abs(denom) < 1e-15, 1e-15, denom)
    u = np.rint((h_inv[0, 0] * xs + h_inv[0, 1] * ys + h_inv[0, 2]) / denom).astype(np.int64)
    v = np.rint((h_inv[1, 0] * xs + h_inv[1, 1] * ys + h_inv[1, 2]) / denom).astype(np.int64)
    valid = (u >= 0) & (u < cols) & (v >= 0) & (v < rows)
    out = np.zeros_like(label)
    out[valid] = label[v[valid], u[valid]]
    return out


def load_correspondences(path) -> list[Correspondence]:
    """Read externally produced correspondences (a SIFT front-end etc.).

    Format: JSON ``{"matches": [{"src": [x, y], "dst": [x, y],
    "score": s}, ...]}``; score defaults to 1.0.
    """
    from .model import read_json

    data = read_json(path)
    if "matches" not in data:
        raise ValidationError(f"{path}: missing 'matches' field")
    return [
        Correspondence(
            src=tuple(m["src"]), dst=tuple(m["dst"]), score=float(m.get("score", 1.0))
        )
        for m in data["matches"]
    ]
