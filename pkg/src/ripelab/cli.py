"""Command-line entry point: every pipeline stage as a subcommand.

Global flags (--seed, --threads, --out-dir, --config) are accepted
before or after the subcommand. Exit codes: 0 success, 2 validation
error (bad arguments, malformed or missing user input), 3 stage
failure (a processing step could not complete).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import albedo, embed, register, report, synth, track
from .calib import fit_calibration, apply_calibration
from .errors import RipelabError, StageError, ValidationError
from .model import (
    features_as_arrays,
    load_features,
    load_manifest,
    load_masks,
    load_series,
    read_json,
    save_tracks,
    write_json,
)
from .pipeline import (
    Pipeline,
    PipelineConfig,
    _digest_file,
    _digest_obj,
    _parallel_map,
    _save_png,
    _write_text,
    run_pipeline,
)

GLOBAL_FLAGS = ("seed", "threads", "out_dir", "config")


def _meta_for(
    command: str, seed: int, inputs: dict[str, Path], params: dict
) -> tuple[str, dict]:
    """Config hash + seed, embedded into every artifact for audit."""
    digests = {
        k: _digest_file(p) if Path(p).is_file() else "absent"
        for k, p in sorted(inputs.items())
    }
    h = _digest_obj({"command": command, "inputs": digests, "params": params})[:16]
    return f"config={h} seed={seed}", {"config": h, "seed": seed}


def _require_out_dir(args) -> Path:
    if args.out_dir is None:
        raise ValidationError("--out-dir is required for this command")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _threads(args) -> int:
    return 1 if args.threads is None else args.threads


# --------------------------------------------------------------------------
# subcommand implementations
# --------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    out_dir = _require_out_dir(args)
    if args.config is not None:
        config = synth.SynthConfig.from_dict(read_json(args.config))
        if args.seed is not None:
            config = synth.SynthConfig.from_dict(
                {**config.to_dict(), "seed": args.seed}
            )
    else:
        config = synth.SynthConfig(seed=_seed(args))
    dataset = synth.generate(config, out_dir)
    print(f"wrote synthetic dataset to {out_dir} ({dataset.series_path.name})")
    return 0


def _cmd_calibrate(args) -> int:
    out_dir = _require_out_dir(args)
    manifest = load_manifest(args.manifest)
    if manifest.card_patches is None:
        raise ValidationError(f"{args.manifest}: manifest has no card patches")
    model = fit_calibration(manifest.card_patches)
    meta_line, meta = _meta_for(
        "calibrate",
        _seed(args),
        {"manifest": Path(args.manifest)},
        {"session": manifest.session_id},
    )
    (out_dir / "corrected").mkdir(exist_ok=True)
    for path in manifest.image_paths:
        image = np.asarray(Image.open(path).convert("RGB"))
        corrected = apply_calibration(model, image)
        _save_png(corrected, out_dir / "corrected" / f"{Path(path).stem}.png", meta_line)
    payload = model.to_dict()
    payload.update({"session_id": manifest.session_id, "meta": meta})
    write_json(payload, out_dir / "calibration.json")
    print(f"gain={model.gain} offset={model.offset} rms={model.residual_rms}")
    return 0


def _load_series_images(series_path: Path) -> tuple[list, list[np.ndarray]]:
    _, manifests = load_series(series_path)
    images = [
        np.asarray(Image.open(m.image_paths[0]).convert("RGB")) for m in manifests
    ]
    return manifests, images


def _external_matches(path: Path, manifests) -> dict[str, list]:
    """Map session id -> correspondence list from an external JSON file."""
    data = read_json(path)
    if "frames" in data:
        out = {}
        for session_id, matches in data["frames"].items():
            out[session_id] = [
                register.Correspondence(
                    src=tuple(m["src"]), dst=tuple(m["dst"]),
                    score=float(m.get("score", 1.0)),
                )
                for m in matches
            ]
        return out
    if "matches" in data:
        if len(manifests) != 2:
            raise ValidationError(
                "flat 'matches' correspondences need a 2-frame series; "
                "use the 'frames' mapping for longer series"
            )
        return {manifests[1].session_id: register.load_correspondences(path)}
    raise ValidationError(f"{path}: expected 'frames' or 'matches'")


def _cmd_register(args) -> int:
    out_dir = _require_out_dir(args)
    seed = _seed(args)
    manifests, images = _load_series_images(Path(args.series))
    external = (
        _external_matches(Path(args.correspondences), manifests)
        if args.correspondences
        else None
    )
    params = register.MatchParams(ratio=args.ratio)
    meta_line, meta = _meta_for(
        "register",
        seed,
        {"series": Path(args.series)},
        {"threshold": args.threshold, "ratio": args.ratio, "chain": args.chain},
    )
    grays = [im.astype(np.float64).mean(axis=2) for im in images]

    def solve(t: int) -> register.Homography:
        if t == 0:
            return register.Homography.identity()
        target = t - 1 if args.chain else 0
        session_id = manifests[t].session_id
        if external is not None:
            if session_id not in external:
                raise ValidationError(f"no correspondences for session {session_id}")
            matches = external[session_id]
        else:
            matches = register.detect_and_match(grays[t], grays[target], params)
        return register.estimate_homography(
            matches, seed=seed * 1_000_003 + t, threshold=args.threshold
        )

    homographies = _parallel_map(solve, list(range(len(images))), _threads(args))
    if args.chain:
        # compose t -> t-1 maps down to the reference frame
        composed = [homographies[0]]
        for t in range(1, len(homographies)):
            mat = composed[t - 1].matrix @ homographies[t].matrix
            composed.append(
                register.Homography(
                    h=tuple((mat / mat[2, 2]).ravel()),
                    inlier_count=homographies[t].inlier_count,
                    reprojection_rms=homographies[t].reprojection_rms,
                )
            )
        homographies = composed

    for sub in ("warped", "validity"):
        (out_dir / sub).mkdir(exist_ok=True)
    for m, image, h in zip(manifests, images, homographies):
        payload = h.to_dict()
        payload.update({"session_id": m.session_id, "meta": meta})
        write_json(payload, out_dir / f"h_{m.session_id}.json")
        warped, valid = register.warp_to_reference(image, h)
        _save_png(warped, out_dir / "warped" / f"{m.session_id}.png", meta_line)
        _save_png(valid * np.uint8(255), out_dir / "validity" / f"{m.session_id}.png", meta_line)
    print(f"registered {len(manifests)} frames")
    return 0


def _cmd_track(args) -> int:
    masks_dir = Path(args.masks_dir)
    if not masks_dir.is_dir():
        raise StageError("track", f"missing input: {masks_dir}")
    sessions = None
    if args.series:
        _, manifests = load_series(Path(args.series))
        sessions = [(m.session_id, m.capture_date) for m in manifests]
        mask_paths = []
        for m in manifests:
            stem = Path(m.image_paths[0]).stem
            for suffix in (".json", ".png"):
                candidate = masks_dir / f"{stem}{suffix}"
                if candidate.is_file():
                    mask_paths.append(candidate)
                    break
            else:
                raise StageError("track", f"missing input: {masks_dir / (stem + '.json')}")
    else:
        mask_paths = sorted(
            p for p in masks_dir.iterdir() if p.suffix.lower() in (".json", ".png")
        )
        if not mask_paths:
            raise StageError("track", f"missing input: {masks_dir}")
    frames = [load_masks(p) for p in mask_paths]
    track_set = track.associate(frames, sessions=sessions, iou_threshold=args.iou)
    _, meta = _meta_for(
        "track",
        _seed(args),
        {p.name: p for p in mask_paths},
        {"iou": args.iou},
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_tracks(track_set.tracks, out, unmatched=track_set.unmatched, meta=meta)
    print(f"{len(track_set.tracks)} tracks over {len(frames)} frames")
    return 0


def _chip_pixel_blocks(chips_dir: Path) -> dict[str, np.ndarray]:
    paths = sorted(chips_dir.glob("*.png"))
    if not paths:
        raise ValidationError(f"no chips found in {chips_dir}")
    blocks = {}
    for p in paths:
        pixels, alpha = track.load_chip(p)
        blocks[p.stem] = pixels[alpha > 0].astype(np.float64)
    return blocks


def _cmd_classes_fit(args) -> int:
    seed = _seed(args)
    blocks = _chip_pixel_blocks(Path(args.chips))
    pool = albedo.sample_training_pixels(list(blocks.values()), seed=seed)
    model = albedo.fit_color_classes(pool, seed=seed)
    _, meta = _meta_for("classes-fit", seed, {"chips": Path(args.chips)}, {})
    payload = model.to_dict()
    payload["meta"] = meta
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json(payload, out)
    print(f"fitted {albedo.N_CLASSES} color classes from {len(blocks)} chips")
    return 0


def _cmd_classes_apply(args) -> int:
    model = albedo.ColorClassModel.from_dict(read_json(args.model))
    blocks = _chip_pixel_blocks(Path(args.chips))
    labels = {name: albedo.label_berry(pixels, model) for name, pixels in blocks.items()}
    _, meta = _meta_for(
        "classes-apply",
        _seed(args),
        {"chips": Path(args.chips), "model": Path(args.model)},
        {},
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_json({"labels": labels, "meta": meta}, out)
    print(f"labeled {len(labels)} chips")
    return 0


def _cmd_ratio(args) -> int:
    data = read_json(args.histograms)
    bog = args.bog or data.get("bog_id")
    if not bog:
        raise ValidationError("no bog id: pass --bog or use histograms with bog_id")
    histograms = [
        albedo.ClassHistogram(
            session_id=h["session_id"], counts=tuple(h["counts"]), fractions=None
        )
        for h in data["sessions"]
    ]
    dates = [h["capture_date"] for h in data["sessions"]]
    ratios = albedo.ripeness_ratio(histograms)
    risk = albedo.risk_date(ratios, dates, args.threshold)
    table = albedo.RipenessRatioTable(dates=tuple(dates), bogs=(bog,), values=(ratios,))
    meta_line, _ = _meta_for(
        "ratio",
        _seed(args),
        {"histograms": Path(args.histograms)},
        {"bog": bog, "threshold": args.threshold},
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_text(out, report.render_ratio_csv(table, meta=meta_line))
    print(f"risk date: {risk if risk is not None else 'none'}")
    return 0


def _umap_params(args) -> embed.UmapParams:
    return embed.UmapParams(
        n_neighbors=args.n_neighbors,
        min_dist=args.min_dist,
        n_epochs=args.epochs,
    )


def _embed_features(path: Path, params: embed.UmapParams, seed: int):
    records = load_features(path)
    berry_ids, timepoints, x = features_as_arrays(records)
    model = embed.umap_embed(x, params, seed=seed)
    return berry_ids, timepoints, model


def _cmd_embed(args) -> int:
    seed = _seed(args)
    params = _umap_params(args)
    berry_ids, timepoints, model = _embed_features(Path(args.features), params, seed)
    axis = embed.fit_ripeness_axis(model.points, timepoints)
    ripeness = embed.ripeness_values(axis, model.points)
    meta_line, _ = _meta_for(
        "embed",
        seed,
        {"features": Path(args.features)},
        {
            "n_neighbors": args.n_neighbors,
            "min_dist": args.min_dist,
            "epochs": args.epochs,
        },
    )
    lines = [f"# {meta_line}", "berry_id,timepoint,x,y,ripeness"]
    for b, t, p, r in zip(berry_ids, timepoints, model.points, ripeness):
        lines.append(f"{b},{t},{float(p[0])!r},{float(p[1])!r},{float(r)!r}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_text(out, "\n".join(lines) + "\n")
    print(f"embedded {len(berry_ids)} records")
    return 0


def _cmd_embed_compare(args) -> int:
    seed = _seed(args)
    params = _umap_params(args)
    embeddings = []
    for path in args.features_list:
        p = Path(path)
        berry_ids, timepoints, model = _embed_features(p, params, seed)
        embeddings.append((p.stem, berry_ids, timepoints, model.points))
    scores = embed.select_extractor_report(embeddings)
    meta_line, _ = _meta_for(
        "embed-compare",
        seed,
        {Path(p).name: Path(p) for p in args.features_list},
        {
            "n_neighbors": args.n_neighbors,
            "min_dist": args.min_dist,
            "epochs": args.epochs,
        },
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_text(out, report.render_ranking_csv(scores, meta=meta_line))
    print(f"best extractor: {scores[0].name}")
    return 0


def _pipeline_config(args) -> PipelineConfig:
    out_dir = _require_out_dir(args)
    kwargs = {}
    if getattr(args, "features", None):
        kwargs["features_path"] = Path(args.features)
    if getattr(args, "erode_masks", False):
        kwargs["erode_masks"] = True
    if getattr(args, "iou", None) is not None:
        kwargs["iou_threshold"] = args.iou
    if getattr(args, "threshold", None) is not None:
        kwargs["risk_threshold"] = args.threshold
    return PipelineConfig(
        series_path=Path(args.series),
        masks_dir=Path(args.masks_dir),
        out_dir=out_dir,
        seed=_seed(args),
        threads=_threads(args),
        **kwargs,
    )


def _cmd_run(args) -> int:
    summary = run_pipeline(_pipeline_config(args))
    for stage, status in summary["stages"].items():
        print(f"{stage}: {status}")
    print(f"report: {summary['report_dir']}")
    return 0


def _cmd_report(args) -> int:
    pipe = Pipeline(_pipeline_config(args))
    pipe.stage_report()
    print(f"report: {pipe.out_dir / 'report'} ({pipe.statuses['report']})")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_global_flags(parser: argparse.ArgumentParser, root: bool) -> None:
    # on subparsers the defaults are suppressed so a flag given before
    # the subcommand is not clobbered by the subparser's default
    default = None if root else argparse.SUPPRESS
    parser.add_argument("--seed", type=int, default=default, help="run seed")
    parser.add_argument("--threads", type=int, default=default, help="worker threads")
    parser.add_argument("--out-dir", type=str, default=default, help="output directory")
    parser.add_argument("--config", type=str, default=default, help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ripelab",
        description="Cranberry ripening analysis from registered bog imagery",
    )
    _add_global_flags(parser, root=True)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        _add_global_flags(p, root=False)
        return p

    command("synth", "generate a synthetic ground-truthed dataset")

    p = command("calibrate", "fit and apply gray-card calibration")
    p.add_argument("--manifest", required=True, help="session manifest JSON")

    p = command("register", "align series frames to the first frame")
    p.add_argument("--series", required=True, help="series JSON")
    p.add_argument("--correspondences", default=None, help="external matches JSON")
    p.add_argument("--threshold", type=float, default=3.0, help="inlier threshold (px)")
    p.add_argument("--ratio", type=float, default=0.8, help="Lowe ratio")
    p.add_argument("--chain", action="store_true", help="register to previous frame and compose")

    p = command("track", "associate per-frame masks into berry tracks")
    p.add_argument("--masks-dir", required=True, help="directory of mask files")
    p.add_argument("--out", required=True, help="output tracks JSON")
    p.add_argument("--series", default=None, help="series JSON for session ids/dates")
    p.add_argument("--iou", type=float, default=track.IOU_THRESHOLD, help="IoU gate")

    p = command("classes", "fit or apply the 5-class color model")
    csub = p.add_subparsers(dest="classes_command", required=True)
    pf = csub.add_parser("fit", help="fit color classes from berry chips")
    _add_global_flags(pf, root=False)
    pf.add_argument("--chips", required=True, help="directory of RGBA chips")
    pf.add_argument("--out", required=True, help="output model JSON")
    pa = csub.add_parser("apply", help="label chips with a fitted model")
    _add_global_flags(pa, root=False)
    pa.add_argument("--chips", required=True, help="directory of RGBA chips")
    pa.add_argument("--model", required=True, help="fitted model JSON")
    pa.add_argument("--out", required=True, help="output labels JSON")

    p = command("ratio", "ripeness ratio table and risk date")
    p.add_argument("--histograms", required=True, help="histograms JSON")
    p.add_argument("--bog", default=None, help="bog id row label")
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument(
        "--threshold", type=float, default=albedo.DEFAULT_RISK_THRESHOLD,
        help="risk threshold on the ratio",
    )

    p = command("embed", "UMAP embedding and ripeness axis")
    p.add_argument("--features", help="feature CSV")
    p.add_argument("--out", help="output embedding CSV")
    p.add_argument("--n-neighbors", type=int, default=None)
    p.add_argument("--min-dist", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=500)
    esub = p.add_subparsers(dest="embed_command")
    pc = esub.add_parser("compare", help="rank feature extractors")
    _add_global_flags(pc, root=False)
    pc.add_argument(
        "--features", dest="features_list", nargs="+", required=True,
        help="two or more feature CSVs",
    )
    pc.add_argument("--out", required=True, help="output ranking CSV")
    pc.add_argument("--n-neighbors", type=int, default=None)
    pc.add_argument("--min-dist", type=float, default=0.1)
    pc.add_argument("--epochs", type=int, default=500)

    p = command("report", "re-emit the report bundle")
    p.add_argument("--series", required=True, help="series JSON")
    p.add_argument("--masks-dir", required=True, help="directory of mask files")
    p.add_argument("--features", default=None, help="feature CSV")

    p = command("run", "run the full pipeline")
    p.add_argument("--series", required=True, help="series JSON")
    p.add_argument("--masks-dir", required=True, help="directory of mask files")
    p.add_argument("--features", default=None, help="feature CSV")
    p.add_argument("--erode-masks", action="store_true", help="erode masks 1 px before sampling")
    p.add_argument("--iou", type=float, default=None, help="IoU gate for tracking")
    p.add_argument(
        "--threshold", type=float, default=None, help="risk threshold on the ratio"
    )

    return parser


_HANDLERS = {
    "synth": _cmd_synth,
    "calibrate": _cmd_calibrate,
    "register": _cmd_register,
    "track": _cmd_track,
    "ratio": _cmd_ratio,
    "report": _cmd_report,
    "run": _cmd_run,
}


def _dispatch(args) -> int:
    if args.command == "classes":
        fn = {"fit": _cmd_classes_fit, "apply": _cmd_classes_apply}[args.classes_command]
    elif args.command == "embed":
        if getattr(args, "embed_command", None) == "compare":
            fn = _cmd_embed_compare
        else:
            fn = _cmd_embed
    else:
        fn = _HANDLERS[args.command]
    return fn(args)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "embed" and getattr(args, "embed_command", None) is None:
        if not args.features or not args.out:
            parser.error("embed requires --features and --out")
    try:
        return _dispatch(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except RipelabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
