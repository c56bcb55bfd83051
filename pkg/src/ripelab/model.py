"""Domain types and interchange file I/O.

Everything the pipeline persists goes through this module: session
manifests (JSON), instance masks (16-bit label PNG or RLE JSON), feature
vectors (CSV), and berry tracks (JSON). Loaded objects are immutable and
safe to share between threads; loading itself is single-threaded per file.

Interchange formats:
  - manifest: JSON, image paths relative to the manifest file.
  - features: CSV with header ``berry_id,timepoint,dim_0,...,dim_{D-1}``,
    UTF-8, LF line endings.
  - masks: 16-bit grayscale PNG label image (pixel value = instance id,
    0 = background) or JSON ``{frame_id, instances: [{id, rle: [[row,
    col_start, len], ...]}]}``. The internal form is RLE.
"""

from __future__ import annotations

import csv
import datetime
import json
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ValidationError

SESSION_ROLES = ("aerial", "ground")
N_CARD_PATCHES = 6


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GrayPatchSample:
    """One neutral gray-card patch: what the camera saw vs. the reference."""

    measured_rgb: tuple[float, float, float]
    reference_value: float

    def __post_init__(self):
        if len(self.measured_rgb) != 3:
            raise ValidationError("measured_rgb must have 3 channels")
        for v in self.measured_rgb:
            if not (0.0 <= float(v) <= 255.0):
                raise ValidationError(
                    f"measured_rgb value {v} outside [0, 255]"
                )
        if not (0.0 <= float(self.reference_value) <= 255.0):
            raise ValidationError(
                f"reference_value {self.reference_value} outside [0, 255]"
            )
        object.__setattr__(self, "measured_rgb", tuple(float(v) for v in self.measured_rgb))
        object.__setattr__(self, "reference_value", float(self.reference_value))


@dataclass(frozen=True)
class SessionManifest:
    """One imaging session: a bog, a date, its images and card samples."""

    session_id: str
    bog_id: str
    variety: str
    capture_date: str  # ISO-8601 date, compared lexicographically
    role: str
    image_paths: tuple[Path, ...]
    card_patches: tuple[GrayPatchSample, ...] | None = None

    def __post_init__(self):
        if self.role not in SESSION_ROLES:
            raise ValidationError(
                f"role must be one of {SESSION_ROLES}, got {self.role!r}"
            )
        try:
            datetime.date.fromisoformat(self.capture_date)
        except ValueError as exc:
            raise ValidationError(
                f"capture_date {self.capture_date!r} is not an ISO-8601 date"
            ) from exc
        if not self.image_paths:
            raise ValidationError("image_paths must not be empty")
        object.__setattr__(
            self, "image_paths", tuple(Path(p) for p in self.image_paths)
        )
        if self.card_patches is not None:
            patches = tuple(self.card_patches)
            if len(patches) != N_CARD_PATCHES:
                raise ValidationError(
                    f"card_patches must have {N_CARD_PATCHES} entries, "
                    f"got {len(patches)}"
                )
            refs = [p.reference_value for p in patches]
            # brightest first: reference values strictly decreasing
            for a, b in zip(refs, refs[1:]):
                if not b < a:
                    raise ValidationError(
                        "card_patches reference values must be strictly "
                        f"decreasing (brightest first), got {refs}"
                    )
            object.__setattr__(self, "card_patches", patches)


@dataclass(frozen=True)
class InstanceMask:
    """Run-length encoded pixel set of one segmented instance."""

    instance_id: int
    runs: tuple[tuple[int, int, int], ...]  # (row, col_start, length)

    def __post_init__(self):
        if self.instance_id <= 0:
            raise ValidationError(
                f"instance_id must be positive, got {self.instance_id}"
            )
        runs = tuple(
            (int(r), int(c), int(n)) for r, c, n in sorted(self.runs)
        )
        if not runs:
            raise ValidationError(f"instance {self.instance_id} has no pixels")
        prev = None
        for r, c, n in runs:
            if r < 0 or c < 0 or n <= 0:
                raise ValidationError(
                    f"instance {self.instance_id}: bad run {(r, c, n)}"
                )
            if prev is not None and prev[0] == r and c < prev[1] + prev[2]:
                raise ValidationError(
                    f"instance {self.instance_id}: overlapping runs in row {r}"
                )
            prev = (r, c, n)
        object.__setattr__(self, "runs", runs)

    @property
    def pixel_count(self) -> int:
        return sum(n for _, _, n in self.runs)

    def decode(self) -> tuple[np.ndarray, np.ndarray]:
        """Expand to (rows, cols) integer arrays in scan order."""
        rows = np.concatenate([np.full(n, r, dtype=np.int64) for r, _, n in self.runs])
        cols = np.concatenate(
            [np.arange(c, c + n, dtype=np.int64) for _, c, n in self.runs]
        )
        return rows, cols

    def flat_keys(self) -> np.ndarray:
        """Pixels packed as row * 2**32 + col, sorted; used for set ops."""
        rows, cols = self.decode()
        return rows << np.int64(32) | cols

    def bbox(self) -> tuple[int, int, int, int]:
        """(row_min, col_min, row_max, col_max), inclusive."""
        rows = [r for r, _, _ in self.runs]
        cmin = min(c for _, c, _ in self.runs)
        cmax = max(c + n - 1 for _, c, n in self.runs)
        return min(rows), cmin, max(rows), cmax

    @classmethod
    def from_pixels(cls, instance_id: int, rows, cols) -> "InstanceMask":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size == 0:
            raise ValidationError(f"instance {instance_id} has no pixels")
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        keys = rows << np.int64(32) | cols
        keep = np.ones(keys.size, dtype=bool)
        keep[1:] = keys[1:] != keys[:-1]
        rows, cols = rows[keep], cols[keep]
        # run boundaries: new row or non-contiguous column
        breaks = np.flatnonzero(
            (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1] + 1)
        )
        starts = np.concatenate(([0], breaks + 1))
        ends = np.concatenate((breaks, [rows.size - 1]))
        runs = tuple(
            (int(rows[s]), int(cols[s]), int(e - s + 1))
            for s, e in zip(starts, ends)
        )
        return cls(instance_id=instance_id, runs=runs)


@dataclass(frozen=True)
class InstanceMaskSet:
    """All instance masks of one frame; instances are pairwise disjoint."""

    frame_id: str
    instances: tuple[InstanceMask, ...]
    # (height, width) when the source format carries it; advisory only.
    shape: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        inst = tuple(sorted(self.instances, key=lambda m: m.instance_id))
        ids = [m.instance_id for m in inst]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate instance ids in frame {self.frame_id}")
        _check_disjoint(self.frame_id, inst)
        if self.shape is not None:
            h, w = self.shape
            for m in inst:
                rmin, cmin, rmax, cmax = m.bbox()
                if rmin < 0 or cmin < 0 or rmax >= h or cmax >= w:
                    raise ValidationError(
                        f"instance {m.instance_id} exceeds image bounds "
                        f"{(h, w)} in frame {self.frame_id}"
                    )
            object.__setattr__(self, "shape", (int(h), int(w)))
        object.__setattr__(self, "instances", inst)

    def get(self, instance_id: int) -> InstanceMask:
        for m in self.instances:
            if m.instance_id == instance_id:
                return m
        raise KeyError(instance_id)

    def to_label_image(self, shape: tuple[int, int] | None = None) -> np.ndarray:
        """Render as a uint16 label image (0 = background)."""
        if shape is None:
            shape = self.shape
        if shape is None:
            rmax = cmax = 0
            for m in self.instances:
                _, _, r, c = m.bbox()
                rmax, cmax = max(rmax, r), max(cmax, c)
            shape = (rmax + 1, cmax + 1)
        label = np.zeros(shape, dtype=np.uint16)
        for m in self.instances:
            rows, cols = m.decode()
            label[rows, cols] = m.instance_id
        return label


def _check_disjoint(frame_id: str, instances: Sequence[InstanceMask]) -> None:
    runs = []
    for m in instances:
        runs.extend((r, c, n, m.instance_id) for r, c, n in m.runs)
    runs.sort()
    for (r1, c1, n1, id1), (r2, c2, n2, id2) in zip(runs, runs[1:]):
        if r1 == r2 and c2 < c1 + n1 and id1 != id2:
            raise ValidationError(
                f"instances {id1} and {id2} overlap in frame {frame_id} "
                f"(row {r1})"
            )


@dataclass(frozen=True)
class FeatureRecord:
    """One feature vector for one berry at one timepoint."""

    berry_id: int
    timepoint_index: int
    vector: tuple[float, ...]


@dataclass(frozen=True)
class TrackEntry:
    """One timepoint of a berry track.

    ``mean_rgb`` is populated by chip extraction; association alone only
    knows mask identities, so it is optional until appearance is attached.
    """

    session_id: str
    capture_date: str
    mask_ref: str  # "<frame_id>:<instance_id>"
    mean_rgb: tuple[float, float, float] | None = None
    feature: tuple[float, ...] | None = None
    class_label: int | None = None
    ripeness: float | None = None

    def __post_init__(self):
        if self.class_label is not None and not 1 <= self.class_label <= 5:
            raise ValidationError(
                f"class_label must be in 1..5, got {self.class_label}"
            )
        if self.ripeness is not None and not 0.0 <= self.ripeness <= 1.0:
            raise ValidationError(
                f"ripeness must be in [0, 1], got {self.ripeness}"
            )


@dataclass(frozen=True)
class BerryTrack:
    """One physical berry across the season."""

    berry_id: int
    entries: tuple[TrackEntry, ...]

    def __post_init__(self):
        sessions = [e.session_id for e in self.entries]
        if len(set(sessions)) != len(sessions):
            raise ValidationError(
                f"track {self.berry_id} has multiple entries for one session"
            )
        dates = [e.capture_date for e in self.entries]
        for a, b in zip(dates, dates[1:]):
            if not a < b:
                raise ValidationError(
                    f"track {self.berry_id} entries not date-ordered: "
                    f"{a!r} !< {b!r}"
                )
        object.__setattr__(self, "entries", tuple(self.entries))


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------


def load_manifest(path: str | Path) -> SessionManifest:
    """Load and validate a session manifest.

    Image paths are resolved relative to the manifest's directory and must
    exist on disk.
    """
    path = Path(path)
    data = _read_json(path)
    for key in ("session_id", "bog_id", "variety", "capture_date", "role", "image_paths"):
        if key not in data:
            raise ValidationError(f"manifest {path}: missing field {key!r}")
    patches = None
    if data.get("card_patches") is not None:
        raw = data["card_patches"]
        if not isinstance(raw, list):
            raise ValidationError(f"manifest {path}: card_patches must be a list")
        if len(raw) != N_CARD_PATCHES:
            raise ValidationError(
                f"manifest {path}: card_patches must have {N_CARD_PATCHES} entries, "
                f"got {len(raw)}"
            )
        patches = tuple(
            GrayPatchSample(
                measured_rgb=tuple(p["measured_rgb"]),
                reference_value=p["reference_value"],
            )
            for p in raw
        )
    base = path.parent
    images = tuple((base / p).resolve() for p in data["image_paths"])
    manifest = SessionManifest(
        session_id=str(data["session_id"]),
        bog_id=str(data["bog_id"]),
        variety=str(data["variety"]),
        capture_date=str(data["capture_date"]),
        role=str(data["role"]),
        image_paths=images,
        card_patches=patches,
    )
    for img in manifest.image_paths:
        if not img.is_file():
            raise IOError(f"manifest {path}: missing image file {img}")
    return manifest


def save_manifest(manifest: SessionManifest, path: str | Path) -> None:
    """Write a manifest; image paths are stored relative to ``path``."""
    path = Path(path)
    base = path.parent.resolve()
    rel_paths = []
    for p in manifest.image_paths:
        try:
            rel = Path(p).resolve().relative_to(base)
        except ValueError:
            rel = Path(np_relpath(p, base))
        rel_paths.append(rel.as_posix())
    data = {
        "session_id": manifest.session_id,
        "bog_id": manifest.bog_id,
        "variety": manifest.variety,
        "capture_date": manifest.capture_date,
        "role": manifest.role,
        "image_paths": rel_paths,
    }
    if manifest.card_patches is not None:
        data["card_patches"] = [
            {"measured_rgb": list(p.measured_rgb), "reference_value": p.reference_value}
            for p in manifest.card_patches
        ]
    _write_json(data, path)


def np_relpath(target: Path, base: Path) -> str:
    import os

    return os.path.relpath(str(Path(target).resolve()), str(base))


def load_series(path: str | Path) -> tuple[dict, list[SessionManifest]]:
    """Load a series file: metadata plus date-ordered session manifests.

    Format: ``{"series_id": ..., "sessions": ["relative/manifest.json", ...]}``.
    Capture dates must strictly increase across the listed sessions.
    """
    path = Path(path)
    data = _read_json(path)
    if "sessions" not in data or not isinstance(data["sessions"], list):
        raise ValidationError(f"series {path}: missing 'sessions' list")
    if not data["sessions"]:
        raise ValidationError(f"series {path}: empty session list")
    manifests = [load_manifest(path.parent / p) for p in data["sessions"]]
    dates = [m.capture_date for m in manifests]
    for a, b in zip(dates, dates[1:]):
        if not a < b:
            raise ValidationError(
                f"series {path}: capture dates must strictly increase "
                f"({a!r} !< {b!r})"
            )
    meta = {k: v for k, v in data.items() if k != "sessions"}
    return meta, manifests


# --------------------------------------------------------------------------
# feature files
# --------------------------------------------------------------------------


def load_features(path: str | Path) -> list[FeatureRecord]:
    """Parse a feature CSV; the dimension D is inferred from the header.

    Lines starting with '#' (audit metadata) are ignored.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty feature file") from None
        if header[:2] != ["berry_id", "timepoint"]:
            raise ValidationError(
                f"{path}: header must start with berry_id,timepoint"
            )
        dims = header[2:]
        expected = [f"dim_{i}" for i in range(len(dims))]
        if dims != expected or not dims:
            raise ValidationError(
                f"{path}: feature columns must be dim_0..dim_{{D-1}}, got {dims}"
            )
        d = len(dims)
        records: list[FeatureRecord] = []
        seen: set[tuple[int, int]] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 + d:
                raise ValidationError(
                    f"{path}: line {lineno}: expected {2 + d} fields, got {len(row)}"
                )
            try:
                berry = int(row[0])
                tp = int(row[1])
                vec = tuple(float(v) for v in row[2:])
            except ValueError as exc:
                raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
            key = (berry, tp)
            if key in seen:
                raise ValidationError(
                    f"{path}: duplicate (berry_id, timepoint) = {key}"
                )
            seen.add(key)
            records.append(FeatureRecord(berry, tp, vec))
    return records


def save_features(records: Iterable[FeatureRecord], path: str | Path) -> None:
    """Write feature records as CSV (UTF-8, LF line endings)."""
    records = list(records)
    if not records:
        raise ValidationError("cannot save an empty feature set")
    d = len(records[0].vector)
    for rec in records:
        if len(rec.vector) != d:
            raise ValidationError(
                f"inconsistent feature dimension: {len(rec.vector)} != {d}"
            )
    buf = io.StringIO()
    header = ["berry_id", "timepoint"] + [f"dim_{i}" for i in range(d)]
    buf.write(",".join(header) + "\n")
    for rec in records:
        fields = [str(rec.berry_id), str(rec.timepoint_index)]
        fields += [repr(float(v)) for v in rec.vector]
        buf.write(",".join(fields) + "\n")
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def features_as_arrays(
    records: Sequence[FeatureRecord],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Records sorted by (berry, timepoint) as (berry_ids, timepoints, X)."""
    recs = sorted(records, key=lambda r: (r.berry_id, r.timepoint_index))
    berry = np.array([r.berry_id for r in recs], dtype=np.int64)
    tp = np.array([r.timepoint_index for r in recs], dtype=np.int64)
    x = np.array([r.vector for r in recs], dtype=np.float64)
    return berry, tp, x


# --------------------------------------------------------------------------
# masks
# --------------------------------------------------------------------------


def load_masks(path: str | Path) -> InstanceMaskSet:
    """Load masks from a label PNG or an RLE JSON file.

    Both encodings of the same mask produce identical ``InstanceMaskSet``s.
    """
    path = Path(path)
    if path.suffix.lower() == ".png":
        label = np.asarray(Image.open(path))
        if label.ndim != 2:
            raise ValidationError(f"{path}: label image must be single channel")
        label = label.astype(np.int64)
        ids = np.unique(label)
        ids = ids[ids != 0]
        instances = []
        for iid in ids:
            rows, cols = np.nonzero(label == iid)
            instances.append(InstanceMask.from_pixels(int(iid), rows, cols))
        return InstanceMaskSet(
            frame_id=path.stem, instances=tuple(instances), shape=label.shape
        )
    if path.suffix.lower() == ".json":
        data = _read_json(path)
        for key in ("frame_id", "instances"):
            if key not in data:
                raise ValidationError(f"{path}: missing field {key!r}")
        instances = tuple(
            InstanceMask(
                instance_id=int(inst["id"]),
                runs=tuple((r, c, n) for r, c, n in inst["rle"]),
            )
            for inst in data["instances"]
        )
        return InstanceMaskSet(frame_id=str(data["frame_id"]), instances=instances)
    raise ValidationError(f"{path}: unsupported mask format {path.suffix!r}")


def save_masks(mask_set: InstanceMaskSet, path: str | Path) -> None:
    """Write masks; format chosen from the path suffix (.png or .json)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        label = mask_set.to_label_image()
        if label.max(initial=0) > np.iinfo(np.uint16).max:
            raise ValidationError("instance id exceeds 16-bit label range")
        Image.fromarray(label.astype(np.uint16)).save(path)
        return
    if path.suffix.lower() == ".json":
        data = {
            "frame_id": mask_set.frame_id,
            "instances": [
                {"id": m.instance_id, "rle": [list(run) for run in m.runs]}
                for m in mask_set.instances
            ],
        }
        _write_json(data, path)
        return
    raise ValidationError(f"{path}: unsupported mask format {path.suffix!r}")


# --------------------------------------------------------------------------
# tracks
# --------------------------------------------------------------------------


def tracks_to_dict(tracks: Sequence[BerryTrack]) -> list[dict]:
    out = []
    for t in tracks:
        entries = []
        for e in t.entries:
            entry = {
                "session_id": e.session_id,
                "capture_date": e.capture_date,
                "mask_ref": e.mask_ref,
                "mean_rgb": list(e.mean_rgb) if e.mean_rgb is not None else None,
                "class_label": e.class_label,
                "ripeness": e.ripeness,
            }
            if e.feature is not None:
                entry["feature"] = list(e.feature)
            entries.append(entry)
        out.append({"berry_id": t.berry_id, "entries": entries})
    return out


def save_tracks(
    tracks: Sequence[BerryTrack],
    path: str | Path,
    unmatched: dict[str, tuple[int, ...]] | None = None,
    meta: dict | None = None,
) -> None:
    data = {"tracks": tracks_to_dict(tracks)}
    if unmatched is not None:
        data["unmatched"] = {k: list(v) for k, v in sorted(unmatched.items())}
    if meta is not None:
        data["meta"] = meta
    _write_json(data, path)


def load_tracks(path: str | Path) -> list[BerryTrack]:
    data = _read_json(Path(path))
    tracks = []
    for t in data.get("tracks", []):
        entries = tuple(
            TrackEntry(
                session_id=e["session_id"],
                capture_date=e["capture_date"],
                mask_ref=e["mask_ref"],
                mean_rgb=tuple(e["mean_rgb"]) if e.get("mean_rgb") else None,
                feature=tuple(e["feature"]) if e.get("feature") else None,
                class_label=e.get("class_label"),
                ripeness=e.get("ripeness"),
            )
            for e in t["entries"]
        )
        tracks.append(BerryTrack(berry_id=int(t["berry_id"]), entries=entries))
    return tracks


# --------------------------------------------------------------------------
# JSON helpers (deterministic output: sorted keys, LF, repr floats)
# --------------------------------------------------------------------------


def _read_json(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from exc


def _write_json(data: dict, path: str | Path) -> None:
    text = json.dumps(data, sort_keys=True, indent=2)
    Path(path).write_bytes((text + "\n").encode("utf-8"))


def write_json(data: dict, path: str | Path) -> None:
    """Deterministic JSON writer shared by the CLI stages."""
    _write_json(data, path)


def read_json(path: str | Path) -> dict:
    return _read_json(Path(path))
