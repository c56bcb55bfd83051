"""Point-prompt segmentation to label-PNG mask files.

The stub predictor needs no weights: it grows the connected region of
pixels whose color stays within a fixed distance of the clicked pixel.
On near-uniform berries that recovers the disk almost exactly; it
exists so mask plumbing can be validated end to end offline. Output is
one 16-bit label PNG per frame (0 background, prompt id elsewhere),
which the analysis toolkit's mask loader reads directly.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

STUB_COLOR_TOLERANCE = 30.0


def _warn(message: str) -> None:
    print(f"warning: {message}", file=sys.stderr)


def load_prompts(path: str | Path) -> list[dict]:
    """Frames from a prompt file; image paths resolved against it."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    if "frames" not in data or not isinstance(data["frames"], list):
        raise ValueError(f"{path}: prompt file needs a 'frames' list")
    frames = []
    for frame in data["frames"]:
        for key in ("frame_id", "image", "prompts"):
            if key not in frame:
                raise ValueError(f"{path}: frame entry missing {key!r}")
        image = Path(frame["image"])
        if not image.is_absolute():
            image = path.parent / image
        frames.append(
            {
                "frame_id": str(frame["frame_id"]),
                "image": image,
                "prompts": frame["prompts"],
            }
        )
    return frames


def stub_segment_frame(rgb: np.ndarray, prompts: list[dict]) -> np.ndarray:
    """Label image from color-distance region growing around each click.

    Later prompts overwrite earlier ones on contested pixels, so the
    label image stays single-valued no matter how regions leak.
    """
    h, w = rgb.shape[:2]
    label = np.zeros((h, w), dtype=np.uint16)
    pixels = rgb.astype(np.float64)
    for prompt in prompts:
        pid = int(prompt["id"])
        x, y = float(prompt["x"]), float(prompt["y"])
        col, row = int(round(x)), int(round(y))
        if not (0 <= row < h and 0 <= col < w):
            _warn(f"prompt id {pid} at ({x}, {y}) is outside the {h}x{w} image; skipped")
            continue
        if pid <= 0:
            _warn(f"prompt id {pid} is not a positive instance id; skipped")
            continue
        seed_color = pixels[row, col]
        dist = np.linalg.norm(pixels - seed_color, axis=2)
        mask = dist <= STUB_COLOR_TOLERANCE
        components, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
        region = components == components[row, col]
        label[region] = pid
    return label


def segment_prompts(backend_name: str, prompts_path: str | Path, out_dir: str | Path) -> int:
    """Write one label PNG per prompted frame; returns the frame count."""
    if backend_name != "stub":
        raise ValueError(
            f"segmentation backend {backend_name!r} unavailable; only 'stub' ships here"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = load_prompts(prompts_path)
    for frame in frames:
        rgb = np.asarray(Image.open(frame["image"]).convert("RGB"))
        if not frame["prompts"]:
            _warn(f"frame {frame['frame_id']}: no prompts; writing empty mask")
        label = stub_segment_frame(rgb, frame["prompts"])
        Image.fromarray(label).save(out_dir / f"{frame['frame_id']}.png")
    return len(frames)
