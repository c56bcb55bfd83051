"""Pipeline orchestration: calibrate, register, track, classes, ratio,
embed, report, with content-hash stage caching.

Each stage records digests of its inputs and parameters; a rerun whose
digests match and whose outputs are intact is skipped outright, so
repeated runs are idempotent and byte-identical. Hashes cover file
contents, never paths or mtimes, which makes the cache robust to file
copies and keeps every artifact free of machine-specific strings: the
same dataset run into two different out dirs produces identical bytes.

Every artifact embeds the run's config hash and seed: JSON under a
"meta" key, CSV as a leading '#' comment, SVG in a <desc> element, PNG
in a tEXt chunk.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from . import albedo, embed, register, report, track
from .calib import CalibrationModel, apply_calibration, fit_calibration
from .errors import RipelabError, StageError, ValidationError
from .model import (
    InstanceMask,
    InstanceMaskSet,
    SessionManifest,
    features_as_arrays,
    load_features,
    load_masks,
    load_series,
    read_json,
    save_masks,
    save_tracks,
    write_json,
)

STAGES = ("calibrate", "register", "track", "classes", "ratio", "embed", "report")


@dataclass(frozen=True)
class PipelineConfig:
    series_path: Path
    masks_dir: Path
    out_dir: Path
    features_path: Path | None = None
    seed: int = 0
    threads: int = 1
    risk_threshold: float = albedo.DEFAULT_RISK_THRESHOLD
    iou_threshold: float = track.IOU_THRESHOLD
    register_threshold: float = 3.0
    register_ratio: float = 0.8
    erode_masks: bool = False
    umap: embed.UmapParams = field(default_factory=embed.UmapParams)

    def __post_init__(self):
        if self.threads < 1:
            raise ValidationError("threads must be >= 1")
        object.__setattr__(self, "series_path", Path(self.series_path))
        object.__setattr__(self, "masks_dir", Path(self.masks_dir))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        if self.features_path is not None:
            object.__setattr__(self, "features_path", Path(self.features_path))

    def resolved_features_path(self) -> Path:
        if self.features_path is not None:
            return self.features_path
        return self.series_path.parent / "features.csv"


# --------------------------------------------------------------------------
# hashing and cache bookkeeping
# --------------------------------------------------------------------------


def _digest_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _digest_obj(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class StageCache:
    """Skips a stage when its input digests, params, and outputs all match."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / "cache_manifest.json"
        self.entries: dict = {}
        if self.path.is_file():
            try:
                self.entries = json.loads(self.path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError):
                self.entries = {}

    def up_to_date(self, stage: str, key: str, out_dir: Path) -> bool:
        entry = self.entries.get(stage)
        if not entry or entry.get("key") != key:
            return False
        for rel, digest in entry.get("outputs", {}).items():
            target = out_dir / rel
            if not target.is_file() or _digest_file(target) != digest:
                return False
        return True

    def record(self, stage: str, key: str, out_dir: Path, outputs: list[Path]) -> None:
        self.entries[stage] = {
            "key": key,
            "outputs": {
                p.relative_to(out_dir).as_posix(): _digest_file(p) for p in sorted(outputs)
            },
        }
        write_json(self.entries, self.path)


def _require(stage: str, path: Path) -> Path:
    if not Path(path).exists():
        raise StageError(stage, f"missing input: {path}")
    return Path(path)


def _save_png(array: np.ndarray, path: Path, meta: str) -> None:
    info = PngInfo()
    info.add_text("comment", meta)
    Image.fromarray(array).save(path, pnginfo=info)


def _write_text(path: Path, text: str) -> None:
    Path(path).write_bytes(text.encode("utf-8"))


def _parallel_map(fn, items, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _label_to_maskset(label: np.ndarray, frame_id: str) -> InstanceMaskSet:
    ids = np.unique(label)
    ids = ids[ids != 0]
    instances = []
    for iid in ids:
        rows, cols = np.nonzero(label == iid)
        instances.append(InstanceMask.from_pixels(int(iid), rows, cols))
    return InstanceMaskSet(frame_id=frame_id, instances=tuple(instances), shape=label.shape)


def _mask_path_for(masks_dir: Path, manifest: SessionManifest) -> Path:
    stem = Path(manifest.image_paths[0]).stem
    for suffix in (".json", ".png"):
        candidate = masks_dir / f"{stem}{suffix}"
        if candidate.is_file():
            return candidate
    return masks_dir / f"{stem}.json"  # reported as the missing artifact


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


class Pipeline:
    """One configured run over one series; stages share loaded state."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out_dir = config.out_dir
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.cache = StageCache(self.out_dir)
        self.manifests: list[SessionManifest] = []
        self.series_meta: dict = {}
        self.statuses: dict[str, str] = {}

    # ---- shared context -------------------------------------------------

    def _load_series(self) -> None:
        if self.manifests:
            return
        _require("calibrate", self.config.series_path)
        self.series_meta, self.manifests = load_series(self.config.series_path)

    @property
    def sessions(self) -> list[str]:
        return [m.session_id for m in self.manifests]

    @property
    def dates(self) -> list[str]:
        return [m.capture_date for m in self.manifests]

    @property
    def bog_id(self) -> str:
        return self.manifests[0].bog_id

    def _params(self) -> dict:
        cfg = self.config
        return {
            "seed": cfg.seed,
            "risk_threshold": cfg.risk_threshold,
            "iou_threshold": cfg.iou_threshold,
            "register_threshold": cfg.register_threshold,
            "register_ratio": cfg.register_ratio,
            "erode_masks": cfg.erode_masks,
            "umap": dataclasses.asdict(cfg.umap),
        }

    def config_hash(self) -> str:
        self._load_series()
        digests = {"series": _digest_file(self.config.series_path)}
        for m in self.manifests:
            digests[f"manifest:{m.session_id}"] = _digest_obj(
                {
                    "session_id": m.session_id,
                    "capture_date": m.capture_date,
                    "images": [_digest_file(p) for p in m.image_paths],
                    "card": [
                        [list(p.measured_rgb), p.reference_value]
                        for p in (m.card_patches or ())
                    ],
                }
            )
            mask_path = _mask_path_for(self.config.masks_dir, m)
            digests[f"mask:{m.session_id}"] = (
                _digest_file(mask_path) if mask_path.is_file() else "absent"
            )
        features = self.config.resolved_features_path()
        digests["features"] = _digest_file(features) if features.is_file() else "absent"
        return _digest_obj({"inputs": digests, "params": self._params()})

    def meta_line(self) -> str:
        return f"config={self.config_hash()[:16]} seed={self.config.seed}"

    def _meta(self) -> dict:
        return {"config": self.config_hash()[:16], "seed": self.config.seed}

    # ---- stage runner ----------------------------------------------------

    def _stage(self, name: str, inputs: dict[str, Path], fn) -> None:
        for path in inputs.values():
            _require(name, path)
        key = _digest_obj(
            {
                "inputs": {k: _digest_file(p) for k, p in sorted(inputs.items())},
                "params": self._params(),
            }
        )
        if self.cache.up_to_date(name, key, self.out_dir):
            self.statuses[name] = "skipped"
            return
        try:
            outputs = fn()
        except StageError:
            raise
        except RipelabError as exc:
            raise StageError(name, str(exc)) from exc
        self.cache.record(name, key, self.out_dir, outputs)
        self.statuses[name] = "ran"

    def _input_map(self, label: str, paths) -> dict[str, Path]:
        return {f"{label}:{i}": Path(p) for i, p in enumerate(paths)}

    # ---- stages ----------------------------------------------------------

    def stage_calibrate(self) -> None:
        self._load_series()
        inputs = {"series": self.config.series_path}
        inputs.update(self._input_map("image", [m.image_paths[0] for m in self.manifests]))

        def fn() -> list[Path]:
            meta = self.meta_line()
            (self.out_dir / "corrected").mkdir(exist_ok=True)
            (self.out_dir / "calibration").mkdir(exist_ok=True)
            outputs = []
            for m in self.manifests:
                image = np.asarray(Image.open(m.image_paths[0]).convert("RGB"))
                if m.card_patches is not None:
                    model = fit_calibration(m.card_patches)
                    source = "fitted"
                else:
                    model = CalibrationModel.identity()
                    source = "identity"
                corrected = apply_calibration(model, image)
                png = self.out_dir / "corrected" / f"{m.session_id}.png"
                _save_png(corrected, png, meta)
                cal = self.out_dir / "calibration" / f"{m.session_id}.json"
                payload = model.to_dict()
                payload.update(
                    {"session_id": m.session_id, "source": source, "meta": self._meta()}
                )
                write_json(payload, cal)
                outputs += [png, cal]
            return outputs

        self._stage("calibrate", inputs, fn)

    def _corrected_path(self, session_id: str) -> Path:
        return self.out_dir / "corrected" / f"{session_id}.png"

    def stage_register(self) -> None:
        self._load_series()
        inputs = self._input_map("corrected", [self._corrected_path(s) for s in self.sessions])

        def fn() -> list[Path]:
            meta = self.meta_line()
            for sub in ("homographies", "warped", "validity"):
                (self.out_dir / sub).mkdir(exist_ok=True)
            images = [
                np.asarray(Image.open(self._corrected_path(s)).convert("RGB"))
                for s in self.sessions
            ]
            ref_gray = images[0].astype(np.float64).mean(axis=2)
            params = register.MatchParams(ratio=self.config.register_ratio)

            def solve(t: int) -> register.Homography:
                if t == 0:
                    return register.Homography.identity()
                gray = images[t].astype(np.float64).mean(axis=2)
                matches = register.detect_and_match(gray, ref_gray, params)
                return register.estimate_homography(
                    matches,
                    seed=self.config.seed * 1_000_003 + t,
                    threshold=self.config.register_threshold,
                )
            homographies = _parallel_map(solve, list(range(len(images))), self.config.threads)

            outputs = []
            for t, (session, h) in enumerate(zip(self.sessions, homographies)):
                warped, valid = register.warp_to_reference(images[t], h)
                hp = self.out_dir / "homographies" / f"h_{session}.json"
                payload = h.to_dict()
                payload.update({"session_id": session, "meta": self._meta()})
                write_json(payload, hp)
                wp = self.out_dir / "warped" / f"{session}.png"
                vp = self.out_dir / "validity" / f"{session}.png"
                _save_png(warped, wp, meta)
                _save_png((valid * np.uint8(255)), vp, meta)
                outputs += [hp, wp, vp]
            return outputs

        self._stage("register", inputs, fn)

    def _warped_path(self, session_id: str) -> Path:
        return self.out_dir / "warped" / f"{session_id}.png"

    def _warped_mask_path(self, session_id: str) -> Path:
        return self.out_dir / "warped_masks" / f"{session_id}.json"

    def stage_track(self) -> None:
        self._load_series()
        _require("track", self.config.masks_dir)
        inputs: dict[str, Path] = {}
        for m in self.manifests:
            inputs[f"mask:{m.session_id}"] = _mask_path_for(self.config.masks_dir, m)
            inputs[f"warped:{m.session_id}"] = self._warped_path(m.session_id)
            inputs[f"h:{m.session_id}"] = (
                self.out_dir / "homographies" / f"h_{m.session_id}.json"
            )

        def fn() -> list[Path]:
            meta = self.meta_line()
            (self.out_dir / "warped_masks").mkdir(exist_ok=True)
            (self.out_dir / "chips").mkdir(exist_ok=True)
            outputs = []
            warped_sets = []
            images = {}
            for m in self.manifests:
                raw = load_masks(_mask_path_for(self.config.masks_dir, m))
                image = np.asarray(Image.open(self._warped_path(m.session_id)).convert("RGB"))
                images[m.session_id] = image
                h = register.Homography.from_dict(
                    read_json(self.out_dir / "homographies" / f"h_{m.session_id}.json")
                )
                label = raw.to_label_image(shape=image.shape[:2])
                warped_label = register.warp_labels_to_reference(label, h)
                warped = _label_to_maskset(warped_label, raw.frame_id)
                warped_sets.append(warped)
                wm = self._warped_mask_path(m.session_id)
                save_masks(warped, wm)
                outputs.append(wm)

            sessions = [(m.session_id, m.capture_date) for m in self.manifests]
            track_set = track.associate(
                warped_sets, sessions=sessions, iou_threshold=self.config.iou_threshold
            )
            session_index = {s: i for i, (s, _) in enumerate(sessions)}
            frame_by_session = {s: ws for (s, _), ws in zip(sessions, warped_sets)}

            def chip_job(args):
                berry_id, entry = args
                frame = frame_by_session[entry.session_id]
                instance_id = int(entry.mask_ref.rsplit(":", 1)[1])
                chip = track.extract_berry_chip(
                    images[entry.session_id], frame.get(instance_id)
                )
                t_idx = session_index[entry.session_id]
                path = self.out_dir / "chips" / f"berry{berry_id:03d}_t{t_idx:03d}.png"
                return entry, chip, path

            jobs = [
                (t.berry_id, e) for t in track_set.tracks for e in t.entries
            ]
            results = _parallel_map(chip_job, jobs, self.config.threads)
            for _, chip, path in results:
                rgba = np.dstack([chip.pixels.astype(np.uint8), chip.alpha])
                _save_png(rgba, path, meta)
                outputs.append(path)
            enriched = []
            idx = 0
            for tr in track_set.tracks:
                entries = []
                for e in tr.entries:
                    chip = results[idx][1]
                    idx += 1
                    entries.append(dataclasses.replace(e, mean_rgb=chip.mean_rgb))
                enriched.append(dataclasses.replace(tr, entries=tuple(entries)))
            tracks_path = self.out_dir / "tracks.json"
            save_tracks(
                enriched, tracks_path, unmatched=track_set.unmatched, meta=self._meta()
            )
            outputs.append(tracks_path)
            return outputs

        self._stage("track", inputs, fn)

    def stage_classes(self) -> None:
        self._load_series()
        inputs: dict[str, Path] = {}
        for s in self.sessions:
            inputs[f"warped:{s}"] = self._warped_path(s)
            inputs[f"warped_mask:{s}"] = self._warped_mask_path(s)

        def fn() -> list[Path]:
            from scipy import ndimage

            blocks = []
            per_instance: list[tuple[str, int, np.ndarray]] = []
            for m in self.manifests:
                image = np.asarray(
                    Image.open(self._warped_path(m.session_id)).convert("RGB")
                )
                mask_set = load_masks(self._warped_mask_path(m.session_id))
                for inst in mask_set.instances:
                    rows, cols = inst.decode()
                    if self.config.erode_masks:
                        dense = np.zeros(image.shape[:2], dtype=bool)
                        dense[rows, cols] = True
                        eroded = ndimage.binary_erosion(dense)
                        if eroded.any():
                            rows, cols = np.nonzero(eroded)
                    pixels = image[rows, cols].astype(np.float64)
                    blocks.append(pixels)
                    per_instance.append((m.session_id, inst.instance_id, pixels))

            pool = albedo.sample_training_pixels(blocks, seed=self.config.seed)
            model = albedo.fit_color_classes(pool, seed=self.config.seed)

            labels: dict[str, dict[str, int]] = {s: {} for s in self.sessions}
            for session_id, instance_id, pixels in per_instance:
                labels[session_id][str(instance_id)] = albedo.label_berry(pixels, model)

            histograms = []
            for m in self.manifests:
                hist = albedo.class_histogram(
                    m.session_id, list(labels[m.session_id].values())
                )
                histograms.append(
                    {
                        "session_id": m.session_id,
                        "capture_date": m.capture_date,
                        "counts": list(hist.counts),
                        "fractions": list(hist.fractions) if hist.fractions else None,
                    }
                )

            classes_path = self.out_dir / "classes.json"
            payload = model.to_dict()
            payload["meta"] = self._meta()
            write_json(payload, classes_path)
            labels_path = self.out_dir / "labels.json"
            write_json({"labels": labels, "meta": self._meta()}, labels_path)
            hist_path = self.out_dir / "histograms.json"
            write_json(
                {"bog_id": self.bog_id, "sessions": histograms, "meta": self._meta()},
                hist_path,
            )
            return [classes_path, labels_path, hist_path]

        self._stage("classes", inputs, fn)

    def stage_ratio(self) -> None:
        self._load_series()
        inputs = {"histograms": self.out_dir / "histograms.json"}

        def fn() -> list[Path]:
            data = read_json(self.out_dir / "histograms.json")
            histograms = [
                albedo.ClassHistogram(
                    session_id=h["session_id"],
                    counts=tuple(h["counts"]),
                    fractions=None,
                )
                for h in data["sessions"]
            ]
            dates = [h["capture_date"] for h in data["sessions"]]
            ratios = albedo.ripeness_ratio(histograms)
            risk = albedo.risk_date(ratios, dates, self.config.risk_threshold)
            table = albedo.RipenessRatioTable(
                dates=tuple(dates), bogs=(data["bog_id"],), values=(ratios,)
            )
            ratio_path = self.out_dir / "ratio.json"
            write_json(
                {
                    "bog_id": data["bog_id"],
                    "dates": dates,
                    "ratios": list(ratios),
                    "risk_date": risk,
                    "risk_threshold": self.config.risk_threshold,
                    "meta": self._meta(),
                },
                ratio_path,
            )
            (self.out_dir / "report").mkdir(exist_ok=True)
            table_path = self.out_dir / "report" / "table.csv"
            _write_text(table_path, report.render_ratio_csv(table, meta=self.meta_line()))
            return [ratio_path, table_path]

        self._stage("ratio", inputs, fn)

    def stage_embed(self) -> None:
        self._load_series()
        inputs = {"features": self.config.resolved_features_path()}

        def fn() -> list[Path]:
            records = load_features(self.config.resolved_features_path())
            berry_ids, timepoints, x = features_as_arrays(records)
            model = embed.umap_embed(x, self.config.umap, seed=self.config.seed)
            axis = embed.fit_ripeness_axis(model.points, timepoints)
            ripeness = embed.ripeness_values(axis, model.points)

            lines = [f"# {self.meta_line()}", "berry_id,timepoint,x,y,ripeness"]
            for b, t, p, r in zip(berry_ids, timepoints, model.points, ripeness):
                lines.append(f"{b},{t},{float(p[0])!r},{float(p[1])!r},{float(r)!r}")
            emb_path = self.out_dir / "embedding.csv"
            _write_text(emb_path, "\n".join(lines) + "\n")

            axis_path = self.out_dir / "axis.json"
            write_json(
                {
                    "direction": list(axis.direction),
                    "origin": list(axis.origin),
                    "lo": axis.lo,
                    "hi": axis.hi,
                    "curve": list(model.curve),
                    "meta": self._meta(),
                },
                axis_path,
            )
            return [emb_path, axis_path]

        self._stage("embed", inputs, fn)

    def stage_report(self) -> None:
        self._load_series()
        inputs = {
            "histograms": self.out_dir / "histograms.json",
            "ratio": self.out_dir / "ratio.json",
            "embedding": self.out_dir / "embedding.csv",
            "tracks": self.out_dir / "tracks.json",
            "labels": self.out_dir / "labels.json",
        }

        def fn() -> list[Path]:
            meta = self.meta_line()
            report_dir = self.out_dir / "report"
            report_dir.mkdir(exist_ok=True)
            hist_data = read_json(self.out_dir / "histograms.json")
            histograms = [
                albedo.ClassHistogram(
                    session_id=h["session_id"], counts=tuple(h["counts"]), fractions=None
                )
                for h in hist_data["sessions"]
            ]
            dates = [h["capture_date"] for h in hist_data["sessions"]]
            hist_svg = report_dir / "histograms.svg"
            _write_text(
                hist_svg,
                report.render_histograms_svg(
                    histograms, dates, bog=hist_data["bog_id"], meta=meta
                ),
            )

            berry_ids, timepoints, points, ripeness = _read_embedding(
                self.out_dir / "embedding.csv"
            )
            emb_svg = report_dir / "embedding.svg"
            _write_text(
                emb_svg,
                report.render_embedding_svg(berry_ids, timepoints, points, meta=meta),
            )

            index_to_date = {i: d for i, d in enumerate(self.dates)}
            series: dict[int, list[tuple[str, float]]] = {}
            for b, t, r in zip(berry_ids, timepoints, ripeness):
                series.setdefault(int(b), []).append((index_to_date[int(t)], float(r)))
            ripe_svg = report_dir / "ripeness.svg"
            _write_text(ripe_svg, report.render_ripeness_svg(series, meta=meta))

            merged = _merge_tracks(
                self.out_dir / "tracks.json",
                read_json(self.out_dir / "labels.json")["labels"],
                {(int(b), int(t)): float(r) for b, t, r in zip(berry_ids, timepoints, ripeness)},
                {s: i for i, s in enumerate(self.sessions)},
            )
            tracks_out = report_dir / "tracks.json"
            save_tracks(merged, tracks_out, meta=self._meta())
            return [hist_svg, emb_svg, ripe_svg, tracks_out]

        self._stage("report", inputs, fn)

    # ---- entry point -------------------------------------------------------

    def run(self) -> dict:
        self.stage_calibrate()
        self.stage_register()
        self.stage_track()
        self.stage_classes()
        self.stage_ratio()
        self.stage_embed()
        self.stage_report()
        return {
            "stages": dict(self.statuses),
            "config_hash": self.config_hash(),
            "report_dir": str(self.out_dir / "report"),
        }


def _read_embedding(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    berry, tp, xs, ys, rip = [], [], [], [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.reader(line for line in fh if not line.startswith("#")):
            if row[0] == "berry_id":
                continue
            berry.append(int(row[0]))
            tp.append(int(row[1]))
            xs.append(float(row[2]))
            ys.append(float(row[3]))
            rip.append(float(row[4]))
    return (
        np.array(berry, dtype=np.int64),
        np.array(tp, dtype=np.int64),
        np.column_stack([xs, ys]).astype(np.float64),
        np.array(rip, dtype=np.float64),
    )


def _merge_tracks(
    tracks_path: Path,
    labels: dict[str, dict[str, int]],
    ripeness: dict[tuple[int, int], float],
    session_index: dict[str, int],
) -> list:
    from .model import load_tracks

    merged = []
    for tr in load_tracks(tracks_path):
        entries = []
        for e in tr.entries:
            instance_id = e.mask_ref.rsplit(":", 1)[1]
            label = labels.get(e.session_id, {}).get(instance_id)
            rip = ripeness.get((tr.berry_id, session_index[e.session_id]))
            entries.append(
                dataclasses.replace(e, class_label=label, ripeness=rip)
            )
        merged.append(dataclasses.replace(tr, entries=tuple(entries)))
    return merged


def run_pipeline(config: PipelineConfig) -> dict:
    """Run every stage in dependency order; see module docstring."""
    return Pipeline(config).run()
