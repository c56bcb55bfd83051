"""Cross-frame berry identity: greedy IoU association and chip extraction.

Input masks must already sit in reference-frame coordinates (after
warping). Frame-0 instances seed track identities; each later frame's
instances are matched to live tracks by greedy highest-IoU assignment.
Berries are near-stationary after alignment, so the cheap greedy rule
suffices; no Hungarian solver, no motion model. A track that has been
missing for more than MAX_GAP_FRAMES consecutive frames is retired, and
a reappearing instance starts a new track (no re-identification).

Upstream segmenters label each frame independently and carry no notion
of identity across frames; the IoU rule here is what stitches those
per-frame labelings into per-berry histories.
"""

from __future__ import annotations

import datetime
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .model import BerryTrack, InstanceMask, InstanceMaskSet, TrackEntry

IOU_THRESHOLD = 0.3
MAX_GAP_FRAMES = 3


@dataclass(frozen=True)
class TrackSet:
    """Association result over one date-ordered frame sequence.

    ``unmatched`` records, per frame id, instances that could not be
    assigned to any pre-existing track. Those instances are not dropped:
    each seeds a fresh track, so every instance of every frame belongs
    to exactly one track, and ``unmatched`` is the audit trail of where
    identities were born outside frame 0.
    """

    tracks: tuple[BerryTrack, ...]
    unmatched: dict[str, tuple[int, ...]]


@dataclass(frozen=True)
class BerryChip:
    """Tight crop of one berry with a mask alpha channel."""

    pixels: np.ndarray  # (h, w, 3), source dtype
    alpha: np.ndarray  # (h, w) uint8, 255 inside the mask
    bbox: tuple[int, int, int, int]  # (row_min, col_min, row_max, col_max)
    mean_rgb: tuple[float, float, float]


def mask_iou(a: InstanceMask, b: InstanceMask) -> float:
    """Intersection-over-union of two pixel sets."""
    ra = a.bbox()
    rb = b.bbox()
    if ra[2] < rb[0] or rb[2] < ra[0] or ra[3] < rb[1] or rb[3] < ra[1]:
        return 0.0
    ka = a.flat_keys()
    kb = b.flat_keys()
    inter = np.intersect1d(ka, kb, assume_unique=True).size
    if inter == 0:
        return 0.0
    return inter / float(ka.size + kb.size - inter)


def _default_sessions(frames: Sequence[InstanceMaskSet]) -> list[tuple[str, str]]:
    # placeholder calendar: one day per frame, preserving order
    base = datetime.date(2000, 1, 1)
    return [
        (f.frame_id, (base + datetime.timedelta(days=i)).isoformat())
        for i, f in enumerate(frames)
    ]


def associate(
    frames: Sequence[InstanceMaskSet],
    sessions: Sequence[tuple[str, str]] | None = None,
    iou_threshold: float = IOU_THRESHOLD,
    max_gap: int = MAX_GAP_FRAMES,
) -> TrackSet:
    """Greedy IoU association of per-frame instances into berry tracks.

    Args:
        frames: date-ordered mask sets in reference coordinates.
        sessions: optional (session_id, capture_date) per frame; defaults
            to frame ids on a synthetic one-day calendar.
        iou_threshold: minimum IoU against a track's most recent mask.
        max_gap: most consecutive missed frames before a track retires.

    Ties in IoU break toward the lower track id, then the lower instance
    id; assignment is deterministic and independent of mask file order
    within a frame.

    Raises:
        ValidationError: empty frame list, duplicate frame ids, or
            capture dates out of order.
    """
    if not frames:
        raise ValidationError("associate needs at least one frame")
    if sessions is None:
        sessions = _default_sessions(frames)
    if len(sessions) != len(frames):
        raise ValidationError("sessions must parallel frames")
    dates = [d for _, d in sessions]
    for a, b in zip(dates, dates[1:]):
        if not a < b:
            raise ValidationError(f"frames out of date order: {a!r} !< {b!r}")

    # per live track: (berry_id, last mask, last frame index, entries)
    live: list[list] = []
    next_id = 1
    unmatched: dict[str, tuple[int, ...]] = {}
    all_entries: dict[int, list[TrackEntry]] = {}

    for t, frame in enumerate(frames):
        session_id, date = sessions[t]
        eligible = [tr for tr in live if t - tr[2] <= max_gap + 1]
        pairs = []
        for tr in eligible:
            for inst in frame.instances:
                iou = mask_iou(tr[1], inst)
                if iou >= iou_threshold:
                    pairs.append((-iou, tr[0], inst.instance_id, tr, inst))
        pairs.sort(key=lambda p: (p[0], p[1], p[2]))
        used_tracks: set[int] = set()
        used_instances: set[int] = set()
        for _, berry_id, inst_id, tr, inst in pairs:
            if berry_id in used_tracks or inst_id in used_instances:
                continue
            used_tracks.add(berry_id)
            used_instances.add(inst_id)
            tr[1] = inst
            tr[2] = t
            all_entries[berry_id].append(
                TrackEntry(
                    session_id=session_id,
                    capture_date=date,
                    mask_ref=f"{frame.frame_id}:{inst_id}",
                )
            )
        leftovers = tuple(
            inst.instance_id
            for inst in frame.instances
            if inst.instance_id not in used_instances
        )
        if t > 0 and leftovers:
            unmatched[frame.frame_id] = leftovers
        for inst in frame.instances:
            if inst.instance_id in used_instances:
                continue
            berry_id = next_id
            next_id += 1
            live.append([berry_id, inst, t])
            all_entries[berry_id] = [
                TrackEntry(
                    session_id=session_id,
                    capture_date=date,
                    mask_ref=f"{frame.frame_id}:{inst.instance_id}",
                )
            ]

    tracks = tuple(
        BerryTrack(berry_id=bid, entries=tuple(entries))
        for bid, entries in sorted(all_entries.items())
    )
    return TrackSet(tracks=tracks, unmatched=unmatched)


def extract_berry_chip(image: np.ndarray, mask: InstanceMask) -> BerryChip:
    """Crop one berry to its bounding box with non-mask pixels alpha=0.

    ``mean_rgb`` averages the image over exactly the mask pixels.

    Raises:
        ValidationError: mask pixels outside the image.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got {image.shape}")
    rmin, cmin, rmax, cmax = mask.bbox()
    if rmin < 0 or cmin < 0 or rmax >= image.shape[0] or cmax >= image.shape[1]:
        raise ValidationError("mask pixels outside the image bounds")
    rows, cols = mask.decode()
    values = image[rows, cols].astype(np.float64)
    mean_rgb = tuple(float(v) for v in values.mean(axis=0))

    chip = np.zeros((rmax - rmin + 1, cmax - cmin + 1, 3), dtype=image.dtype)
    alpha = np.zeros(chip.shape[:2], dtype=np.uint8)
    chip[rows - rmin, cols - cmin] = image[rows, cols]
    alpha[rows - rmin, cols - cmin] = 255
    return BerryChip(pixels=chip, alpha=alpha, bbox=(rmin, cmin, rmax, cmax), mean_rgb=mean_rgb)


def save_chip(chip: BerryChip, path) -> None:
    """Write a chip as an RGBA PNG (alpha = mask)."""
    from PIL import Image

    rgba = np.dstack([chip.pixels.astype(np.uint8), chip.alpha])
    Image.fromarray(rgba, mode="RGBA").save(path)


def load_chip(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an RGBA chip back as (rgb uint8, alpha uint8)."""
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("RGBA"))
    return arr[:, :, :3], arr[:, :, 3]
