"""Chip discovery and feature-CSV emission.

The CSV layout is the one the analysis toolkit parses: header
``berry_id,timepoint,dim_0..dim_{D-1}``, one row per (berry, timepoint),
floats via repr so a rerun is byte-identical. validate_rows is the
schema self-check that must pass before anything touches disk.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

CHIP_NAME = re.compile(r"berry(\d+)_t(\d+)\.png$")


@dataclass(frozen=True)
class FeatureRow:
    berry_id: int
    timepoint: int
    vector: tuple[float, ...]


def find_chips(chips_dir: str | Path) -> list[tuple[int, int, Path]]:
    """(berry_id, timepoint, path) for every chip, sorted for determinism."""
    chips_dir = Path(chips_dir)
    if not chips_dir.is_dir():
        raise FileNotFoundError(f"chips directory not found: {chips_dir}")
    found = []
    for path in chips_dir.iterdir():
        match = CHIP_NAME.fullmatch(path.name)
        if match:
            found.append((int(match.group(1)), int(match.group(2)), path))
    if not found:
        raise FileNotFoundError(f"no berry chips (berryNNN_tNNN.png) in {chips_dir}")
    return sorted(found)


def load_chip(path: Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Chip pixels as (rgb, alpha-or-None)."""
    array = np.asarray(Image.open(path).convert("RGBA"))
    return array[:, :, :3], array[:, :, 3]


def validate_rows(rows: Sequence[FeatureRow]) -> None:
    """Schema self-check mirroring the downstream loader's rules."""
    if not rows:
        raise ValueError("no feature rows produced")
    dim = len(rows[0].vector)
    if dim < 1:
        raise ValueError("feature vectors must have at least one dimension")
    seen = set()
    for row in rows:
        if len(row.vector) != dim:
            raise ValueError(
                f"inconsistent dimension: {len(row.vector)} != {dim} "
                f"at berry {row.berry_id} t{row.timepoint}"
            )
        if not all(np.isfinite(v) for v in row.vector):
            raise ValueError(
                f"non-finite feature at berry {row.berry_id} t{row.timepoint}"
            )
        key = (row.berry_id, row.timepoint)
        if key in seen:
            raise ValueError(f"duplicate (berry_id, timepoint) = {key}")
        seen.add(key)


def write_feature_csv(rows: Iterable[FeatureRow], path: str | Path) -> None:
    """Write validated rows sorted by (berry_id, timepoint); UTF-8, LF."""
    rows = sorted(rows, key=lambda r: (r.berry_id, r.timepoint))
    validate_rows(rows)
    dim = len(rows[0].vector)
    lines = ["berry_id,timepoint," + ",".join(f"dim_{i}" for i in range(dim))]
    for row in rows:
        lines.append(
            f"{row.berry_id},{row.timepoint},"
            + ",".join(repr(float(v)) for v in row.vector)
        )
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def extract_features(backend, chips_dir: str | Path, out_path: str | Path) -> int:
    """Encode every chip and write the CSV; returns the row count."""
    rows = []
    for berry_id, timepoint, path in find_chips(chips_dir):
        rgb, alpha = load_chip(path)
        vector = backend.encode(rgb, alpha)
        rows.append(
            FeatureRow(
                berry_id=berry_id,
                timepoint=timepoint,
                vector=tuple(float(v) for v in np.asarray(vector, dtype=np.float64)),
            )
        )
    write_feature_csv(rows, out_path)
    return len(rows)
