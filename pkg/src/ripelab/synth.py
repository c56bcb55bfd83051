"""Deterministic synthetic bog generator: the oracle for every stage.

Renders berry disks whose color interpolates green to red along a
per-berry logistic ripening state, embeds a 6-patch gray card, applies a
per-frame homography, then per-channel photometric distortion, then
Gaussian sensor noise. Ground truth (states, classes, colors, true
homographies, true gain/offset, centers/radii) is written alongside so
every estimator can be scored without re-deriving anything.

Disks, not berry-shaped meshes: shape realism is irrelevant to the
estimators under test. The background carries a fixed smooth blob
texture tied to reference coordinates so corner matching has something
to grip; smoothness matters because a corner patch must survive
subpixel resampling under the frame jitter. Berry interiors and the
card stay texture-free so color oracles are exact. All canvas values
stay inside [8, 243] before distortion, so the default distortion
ranges never clip.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import GenerationError, ValidationError
from .model import (
    FeatureRecord,
    GrayPatchSample,
    InstanceMask,
    InstanceMaskSet,
    SessionManifest,
    save_manifest,
    save_masks,
    save_features,
    write_json,
)

CARD_REFERENCE_VALUES = (243.0, 200.0, 160.0, 122.0, 85.0, 52.0)
CARD_ORIGIN = (8, 8)  # (x, y) of the first patch
CARD_PATCH_SIZE = 22
CARD_PATCH_GAP = 4


@dataclass(frozen=True)
class SynthConfig:
    n_berries: int = 14
    n_frames: int = 27
    image_size: tuple[int, int] = (480, 640)  # (height, width)
    radius_range: tuple[float, float] = (12.0, 18.0)
    green_rgb: tuple[float, float, float] = (40.0, 130.0, 45.0)
    red_rgb: tuple[float, float, float] = (170.0, 35.0, 40.0)
    midpoint_frac_range: tuple[float, float] = (0.35, 0.60)
    rate_range: tuple[float, float] = (0.25, 0.45)
    gain_range: tuple[float, float] = (0.85, 1.02)
    offset_range: tuple[float, float] = (-6.0, 2.0)
    noise_sigma: float = 2.0
    jitter_px: float = 2.0
    rot_jitter: float = 0.002
    scale_jitter: float = 0.003
    persp_jitter: float = 1e-6
    texture_amplitude: float = 55.0
    texture_scale: float = 2.0
    background_rgb: tuple[float, float, float] = (96.0, 88.0, 70.0)
    bog_id: str = "SYN1"
    variety: str = "Stevens"
    start_date: str = "2023-08-02"
    seed: int = 0

    def __post_init__(self):
        if self.n_berries < 1:
            raise ValidationError("n_berries must be >= 1")
        if self.n_frames < 1:
            raise ValidationError("n_frames must be >= 1")
        h, w = self.image_size
        if h < 64 or w < 64:
            raise ValidationError("image_size must be at least 64 x 64")
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ValidationError("bad radius_range")
        if not 0 < self.gain_range[0] <= self.gain_range[1]:
            raise ValidationError("gains must be positive")
        if self.noise_sigma < 0 or self.texture_amplitude < 0:
            raise ValidationError("noise levels must be >= 0")
        if self.texture_scale <= 0:
            raise ValidationError("texture_scale must be > 0")
        for rgb in (self.green_rgb, self.red_rgb, self.background_rgb):
            if any(not (8.0 <= v <= 243.0) for v in rgb):
                raise ValidationError("colors must lie in [8, 243] to avoid clipping")
        amp = self.texture_amplitude
        if any(
            not (8.0 <= v - amp and v + amp <= 243.0) for v in self.background_rgb
        ):
            raise ValidationError(
                "background +- texture_amplitude must stay in [8, 243]"
            )
        try:
            datetime.date.fromisoformat(self.start_date)
        except ValueError as exc:
            raise ValidationError(f"bad start_date: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        kwargs = dict(data)
        for key in (
            "image_size",
            "radius_range",
            "green_rgb",
            "red_rgb",
            "midpoint_frac_range",
            "rate_range",
            "gain_range",
            "offset_range",
            "background_rgb",
        ):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class SynthDataset:
    """Paths of one generated dataset plus its in-memory ground truth."""

    out_dir: Path
    series_path: Path
    truth_path: Path
    frame_paths: tuple[Path, ...]
    clean_paths: tuple[Path, ...]
    mask_paths: tuple[Path, ...]
    manifest_paths: tuple[Path, ...]
    features_path: Path
    scrambled_features_path: Path
    truth: dict = field(compare=False)


def _logistic(t: np.ndarray, midpoint: float, rate: float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-rate * (t - midpoint)))


def state_to_class(s: float) -> int:
    """Quantize ripening state into 5 equal bins (class 1..5)."""
    return min(4, int(s * 5.0)) + 1


def _frame_homography(config: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Small frame-to-reference warp about the image center."""
    h, w = config.image_size
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    dx, dy = rng.uniform(-config.jitter_px, config.jitter_px, size=2)
    theta = rng.uniform(-config.rot_jitter, config.rot_jitter)
    scale = 1.0 + rng.uniform(-config.scale_jitter, config.scale_jitter)
    px, py = rng.uniform(-config.persp_jitter, config.persp_jitter, size=2)
    cos, sin = np.cos(theta) * scale, np.sin(theta) * scale
    to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    rot = np.array([[cos, -sin, dx], [sin, cos, dy], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    mat = back @ rot @ to_center
    mat[2, 0] = px
    mat[2, 1] = py
    return mat / mat[2, 2]


def _card_rects() -> list[tuple[int, int, int, int]]:
    """(x0, y0, x1, y1) per patch, brightest first, left to right."""
    x0, y0 = CARD_ORIGIN
    rects = []
    for i in range(len(CARD_REFERENCE_VALUES)):
        x = x0 + i * (CARD_PATCH_SIZE + CARD_PATCH_GAP)
        rects.append((x, y0, x + CARD_PATCH_SIZE, y0 + CARD_PATCH_SIZE))
    return rects


def _place_berries(
    config: SynthConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping (x, y) centers and radii clear of card and borders."""
    h, w = config.image_size
    r_max = config.radius_range[1]
    card_bottom = CARD_ORIGIN[1] + CARD_PATCH_SIZE
    border = int(np.ceil(r_max)) + 8
    cell = int(np.ceil(2 * r_max + 10))
    y_start = max(border, card_bottom + int(np.ceil(r_max)) + 6)
    ys = np.arange(y_start + cell // 2, h - border, cell)
    xs = np.arange(border + cell // 2, w - border, cell)
    cells = [(float(x), float(y)) for y in ys for x in xs]
    if len(cells) < config.n_berries:
        raise GenerationError(
            f"cannot place {config.n_berries} non-overlapping berries in "
            f"a {h}x{w} image (capacity {len(cells)})"
        )
    chosen = rng.permutation(len(cells))[: config.n_berries]
    centers = np.array([cells[i] for i in chosen], dtype=np.float64)
    centers += rng.uniform(-3.0, 3.0, size=centers.shape)
    radii = rng.uniform(*config.radius_range, size=config.n_berries)
    return centers, radii


def generate(config: SynthConfig, out_dir: str | Path) -> SynthDataset:
    """Render the dataset and write every interchange artifact.

    Layout under out_dir: frames/ (distorted uint8 PNGs), clean/
    (pre-distortion PNGs), masks/ (RLE JSON, frame coordinates),
    manifests/, series.json, truth.json, features.csv (ideal linear
    extractor), features_scrambled.csv (time-scrambled extractor).
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(config.seed)
    h, w = config.image_size
    n_frames, n_berries = config.n_frames, config.n_berries

    centers, radii = _place_berries(config, rng)
    midpoints = n_frames * rng.uniform(*config.midpoint_frac_range, size=n_berries)
    rates = rng.uniform(*config.rate_range, size=n_berries)
    t_axis = np.arange(n_frames, dtype=np.float64)
    states = np.stack([_logistic(t_axis, m, r) for m, r in zip(midpoints, rates)])
    green = np.asarray(config.green_rgb)
    red = np.asarray(config.red_rgb)
    colors = green[None, None, :] + states[:, :, None] * (red - green)[None, None, :]

    homographies = [np.eye(3)]
    for _ in range(1, n_frames):
        homographies.append(_frame_homography(config, rng))
    gains = rng.uniform(*config.gain_range, size=(n_frames, 3))
    offsets = rng.uniform(*config.offset_range, size=(n_frames, 3))
    # smooth blob field in reference coordinates; peak-normalized so the
    # no-clip guarantee on background +- amplitude holds exactly
    texture = gaussian_filter(
        rng.standard_normal((h, w)), sigma=config.texture_scale, mode="wrap"
    )
    peak = np.abs(texture).max()
    if peak > 0:
        texture *= config.texture_amplitude / peak

    for sub in ("frames", "clean", "masks", "manifests"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    start = datetime.date.fromisoformat(config.start_date)
    dates = [(start + datetime.timedelta(days=t)).isoformat() for t in range(n_frames)]
    card_rects = _card_rects()

    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    frame_paths, clean_paths, mask_paths, manifest_paths = [], [], [], []
    truth_frames = []
    for t in range(n_frames):
        mat = homographies[t]
        denom = mat[2, 0] * xs + mat[2, 1] * ys + mat[2, 2]
        rx = (mat[0, 0] * xs + mat[0, 1] * ys + mat[0, 2]) / denom
        ry = (mat[1, 0] * xs + mat[1, 1] * ys + mat[1, 2]) / denom

        gy = np.clip(ry, 0.0, h - 1.0)
        gx = np.clip(rx, 0.0, w - 1.0)
        y0 = np.floor(gy).astype(np.int64)
        x0 = np.floor(gx).astype(np.int64)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        fy = gy - y0
        fx = gx - x0
        tex = (
            texture[y0, x0] * (1 - fy) * (1 - fx)
            + texture[y0, x1] * (1 - fy) * fx
            + texture[y1, x0] * fy * (1 - fx)
            + texture[y1, x1] * fy * fx
        )
        canvas = np.empty((h, w, 3), dtype=np.float64)
        canvas[:] = np.asarray(config.background_rgb)
        canvas += tex[:, :, None]
        # card patches with a 2 px linear edge ramp: hard card edges would
        # dwarf every texture corner under a max-relative Harris threshold;
        # interiors stay exactly at the reference value
        ew = 2.0
        for (px0, py0, px1, py1), value in zip(card_rects, CARD_REFERENCE_VALUES):
            ax = np.clip(np.minimum(rx - px0, px1 - rx) / ew, 0.0, 1.0)
            ay = np.clip(np.minimum(ry - py0, py1 - ry) / ew, 0.0, 1.0)
            alpha = (ax * ay)[:, :, None]
            canvas = canvas * (1.0 - alpha) + value * alpha

        instances = []
        for b in range(n_berries):
            d2 = (rx - centers[b, 0]) ** 2 + (ry - centers[b, 1]) ** 2
            inside = d2 <= radii[b] ** 2
            canvas[inside] = colors[b, t]
            rows_b, cols_b = np.nonzero(inside)
            if rows_b.size:
                instances.append(InstanceMask.from_pixels(b + 1, rows_b, cols_b))

        clean = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
        distorted = canvas * gains[t][None, None, :] + offsets[t][None, None, :]
        if config.noise_sigma > 0:
            distorted = distorted + rng.normal(0.0, config.noise_sigma, size=distorted.shape)
        frame = np.clip(np.rint(distorted), 0, 255).astype(np.uint8)

        frame_id = f"f{t:02d}"
        frame_path = out_dir / "frames" / f"{frame_id}.png"
        clean_path = out_dir / "clean" / f"{frame_id}.png"
        mask_path = out_dir / "masks" / f"{frame_id}.json"
        Image.fromarray(frame).save(frame_path)
        Image.fromarray(clean).save(clean_path)
        save_masks(
            InstanceMaskSet(frame_id=frame_id, instances=tuple(instances), shape=(h, w)),
            mask_path,
        )

        patches = tuple(
            GrayPatchSample(
                measured_rgb=tuple(gains[t][c] * v + offsets[t][c] for c in range(3)),
                reference_value=v,
            )
            for v in CARD_REFERENCE_VALUES
        )
        manifest = SessionManifest(
            session_id=f"s{t:02d}",
            bog_id=config.bog_id,
            variety=config.variety,
            capture_date=dates[t],
            role="ground",
            image_paths=(frame_path,),
            card_patches=patches,
        )
        manifest_path = out_dir / "manifests" / f"s{t:02d}.json"
        save_manifest(manifest, manifest_path)

        frame_paths.append(frame_path)
        clean_paths.append(clean_path)
        mask_paths.append(mask_path)
        manifest_paths.append(manifest_path)
        truth_frames.append(
            {
                "session_id": f"s{t:02d}",
                "frame_id": frame_id,
                "capture_date": dates[t],
                "gain": gains[t].tolist(),
                "offset": offsets[t].tolist(),
                "h": (homographies[t] / homographies[t][2, 2]).ravel().tolist(),
            }
        )

    truth = {
        "seed": config.seed,
        "config": config.to_dict(),
        "dates": dates,
        "frames": truth_frames,
        "berries": [
            {
                "berry_id": b + 1,
                "center": centers[b].tolist(),
                "radius": float(radii[b]),
                "states": states[b].tolist(),
                "classes": [state_to_class(s) for s in states[b]],
                "colors": colors[b].tolist(),
            }
            for b in range(n_berries)
        ],
    }
    truth_path = out_dir / "truth.json"
    write_json(truth, truth_path)

    series = {
        "series_id": f"{config.bog_id}-ground",
        "bog_id": config.bog_id,
        "sessions": [f"manifests/s{t:02d}.json" for t in range(n_frames)],
    }
    series_path = out_dir / "series.json"
    write_json(series, series_path)

    features_path = out_dir / "features.csv"
    scrambled_path = out_dir / "features_scrambled.csv"
    save_features(synth_features(states, d=64, mode="linear", seed=config.seed), features_path)
    save_features(
        synth_features(states, d=64, mode="scrambled", seed=config.seed), scrambled_path
    )

    return SynthDataset(
        out_dir=out_dir,
        series_path=series_path,
        truth_path=truth_path,
        frame_paths=tuple(frame_paths),
        clean_paths=tuple(clean_paths),
        mask_paths=tuple(mask_paths),
        manifest_paths=tuple(manifest_paths),
        features_path=features_path,
        scrambled_features_path=scrambled_path,
        truth=truth,
    )


def synth_features(
    states: np.ndarray,
    d: int,
    mode: str = "linear",
    seed: int = 0,
    noise_sigma: float = 0.01,
) -> list[FeatureRecord]:
    """Ideal or deliberately bad extractor output from ground-truth states.

    Linear mode embeds each state s as s * u + noise for one fixed random
    unit vector u in D dimensions. Scrambled mode permutes each berry's
    timepoints first, producing features with no temporal order; it
    exists to validate the extractor ranking.

    Args:
        states: (n_berries, n_frames) ripening states in [0, 1].
    """
    if d < 2:
        raise ValidationError("feature dimension must be >= 2")
    if mode not in ("linear", "scrambled"):
        raise ValidationError(f"unknown feature mode {mode!r}")
    states = np.asarray(states, dtype=np.float64)
    n_berries, n_frames = states.shape
    rng = np.random.default_rng([seed, 7])
    u = rng.normal(size=d)
    u /= np.linalg.norm(u)
    records = []
    for b in range(n_berries):
        series = states[b]
        if mode == "scrambled":
            series = series[rng.permutation(n_frames)]
        for t in range(n_frames):
            vec = series[t] * u
            if noise_sigma > 0:
                vec = vec + rng.normal(0.0, noise_sigma, size=d)
            records.append(
                FeatureRecord(berry_id=b + 1, timepoint_index=t, vector=tuple(vec))
            )
    return records
