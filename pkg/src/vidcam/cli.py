"""Command-line entry point: ``vidcam <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dataset, evaluator, frames, network, synthetic, trainer
from .errors import ConfigError, DataError, NumericError, VidcamError
from .preprocess import load_frame

log = logging.getLogger("vidcam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
JOBS_ENV = "VIDCAM_JOBS"
BUILTIN_CONFIGS = Path(__file__).parent / "configs"


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "")))
    except ValueError:
        return os.cpu_count() or 1


def run_config(args) -> dict:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return {"args": cfg, "config_hash": hashlib.sha256(blob).hexdigest()[:16], "seed": cfg.get("seed")}


def load_config(name_or_path) -> dict:
    if name_or_path is None:
        return {}
    p = Path(name_or_path)
    if not p.exists():
        builtin = BUILTIN_CONFIGS / f"{name_or_path.removesuffix('.spec')}.spec"
        if not builtin.exists():
            raise DataError(f"config file not found: {name_or_path}")
        p = builtin
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from None


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def cmd_select_devices(args) -> int:
    cat = dataset.read_catalog(args.catalog) if args.catalog else dataset.catalog_from_vision_tree(args.vision_root)
    devs = dataset.select_devices(cat, exclude=args.exclude, min_shared=args.min_shared)
    for row in devs.audit:
        print(f"{row['device_id']:>6}  {row['brand']} {row['model']:<24} native={row['native']:<3} "
              f"shared={row['native_shared_both']:<3} siblings={row['same_model_devices']}  {row['decision']}")
    print(f"selected {len(devs)} of {len(devs.audit)} devices")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_json(out, {"devices": [asdict(d) for d in devs.devices], "audit": devs.audit, "run": run_config(args)})
    if args.catalog_out:
        dataset.write_catalog(args.catalog_out, cat)
    return EXIT_OK


def _device_catalog(args, cat):
    if args.devices:
        data = json.loads(Path(args.devices).read_text())
        return dataset.DeviceCatalog([dataset.Device(**{k: d[k] for k in ("device_id", "brand", "model", "instance")})
                                      for d in data["devices"]])
    if args.all_devices:
        first = {d: cat.natives(d)[0] for d in cat.devices() if cat.natives(d)}
        return dataset.DeviceCatalog([dataset.Device(d, v.brand, v.model, 1) for d, v in first.items()])
    return dataset.select_devices(cat, exclude=args.exclude)


def cmd_split(args) -> int:
    cat = dataset.read_catalog(args.catalog)
    devs = _device_catalog(args, cat)
    manifest = dataset.build_split(devs, cat, fractions=(args.train_fraction, 1 - args.train_fraction), seed=args.seed)
    audit = dataset.validate_manifest(manifest)
    manifest.metadata["run"] = run_config(args)
    manifest.write(args.out)
    meta = manifest.metadata
    print(f"{len(devs)} devices, native per device {meta['native_per_device']}, videos {meta['videos']}")
    print(audit.summary())
    return EXIT_OK if audit.ok else EXIT_DATA


def cmd_validate(args) -> int:
    audit = dataset.validate_manifest(dataset.SplitManifest.read(args.manifest))
    print(audit.summary())
    return EXIT_OK if audit.ok else EXIT_DATA


def _videos_from(path):
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        p = r.get("path", "")
        if p and not Path(p).is_absolute():
            p = str(path.parent / p)
        out.append(frames.VideoDescriptor(r["video_id"], p, int(r.get("frames") or 0), device_id=r.get("device_id", ""),
                                          scenario=r.get("scenario") or "flat", version=r.get("version") or "native"))
    return out


def cmd_sample(args) -> int:
    videos = _videos_from(args.videos)
    decoder = frames.FFmpegDecoder(args.ffmpeg, args.ffprobe)
    res = frames.extract_many(videos, args.frames, args.out, decoder=decoder, allow_repeats=args.allow_repeats,
                              jobs=args.jobs)
    written = sum(fs.written for fs in res.framesets)
    print(f"{len(res.framesets)} videos sampled, {written} frames written, {len(res.failures)} failed")
    for vid, msg in res.failures.items():
        print(f"error: {vid}: {msg}", file=sys.stderr)
    return EXIT_OK if res.ok else EXIT_DATA


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    manifest = dataset.SplitManifest.read(args.manifest)
    arch = network.ArchitectureSpec.from_dict(cfg["architecture"]) if "architecture" in cfg else network.ArchitectureSpec()
    arch = arch.replace(num_classes=len(manifest.devices))
    if args.no_constrained:
        arch = arch.replace(constrained=dict(asdict(arch.constrained), enabled=False))
    tcfg = dict(cfg.get("training", {}))
    for key in ("epochs", "batch_size", "lr0", "momentum", "decay"):
        if getattr(args, key) is not None:
            tcfg[key] = getattr(args, key)
    tcfg.update(seed=args.seed, deterministic=args.deterministic, checkpoint_dir=str(args.out),
                jobs=args.jobs, cache_frames=args.cache_frames, check_every=1 if args.debug else 50)
    config = trainer.TrainConfig(**tcfg)
    model = network.build_model(arch, args.seed, catalog=manifest.devices)
    for name, shape in arch.shape_audit():
        log.info("shape %-12s %s", name, shape)
    frames_root = args.frames or Path(args.manifest).parent / "frames"
    history = trainer.train(model, manifest, frames_root, config, evaluate_each_epoch=args.eval_each_epoch)
    out = Path(args.out)
    with (out / "history.csv").open("w") as fh:
        fh.write("epoch,mean_loss,lr,video_accuracy,frame_accuracy,checkpoint\n")
        for h in history:
            fh.write(f"{h.epoch},{h.mean_loss:.8f},{h.lr:.8g},{'' if h.video_accuracy is None else h.video_accuracy},"
                     f"{'' if h.frame_accuracy is None else h.frame_accuracy},{Path(h.path).name}\n")
    from . import plots

    plots.training_curve_figure(history, out / "training.png")
    _write_json(out / "run.json", run_config(args))
    for h in history:
        print(h.log_line())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = evaluator.evaluate(args.checkpoint, args.manifest, args.frames, voting=args.voting,
                                metadata={"run": run_config(args)}, split=args.split)
    evaluator.emit_report(report, args.out, figures=not args.no_figures)
    print(f"overall video accuracy {report.accuracy['overall']:.4f} "
          f"(frame accuracy {report.frame_accuracy:.4f}, {report.slices['overall'].videos} videos)")
    for key, acc in report.accuracy.items():
        if key != "overall" and "/" not in key:
            print(f"  {key:<20} {acc:.4f}")
    return EXIT_OK


def cmd_classify(args) -> int:
    ckpt = trainer.load_checkpoint(args.checkpoint)
    model = ckpt.model()
    if args.video_frames:
        source = Path(args.video_frames)
        dec = frames.DirectoryDecoder()
    else:
        source = Path(args.video)
        dec = frames.FFmpegDecoder(args.ffmpeg, args.ffprobe)
    total = dec.count_frames(source)
    idx = frames.sample_indices(total, args.frames, allow_repeats=args.allow_repeats)
    with tempfile.TemporaryDirectory() as tmp:
        uniq = sorted(set(idx))
        paths = [Path(tmp) / f"f{i}.png" for i in uniq]
        dec.extract(source, uniq, paths)
        by_index = dict(zip(uniq, paths))
        x = np.stack([load_frame(by_index[i], size=model.spec.input_shape[1:]) for i in idx])
    z = model.predict_proba(x)
    verdict = evaluator.majority_vote([(int(np.argmax(r)), r) for r in z], voting=args.voting,
                                      num_classes=len(model.catalog))
    print(f"predicted device: {model.catalog[verdict.predicted]}" + (" (tie broken)" if verdict.tie else ""))
    print("votes: " + ", ".join(f"{d}={n}" for d, n in zip(model.catalog, verdict.tally) if n))
    mean = z.mean(axis=0)
    print("mean probabilities:")
    for d, p in sorted(zip(model.catalog, mean), key=lambda t: -t[1]):
        print(f"  {d:>8} {p:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = synthetic.SyntheticSpec(num_classes=args.classes, size=args.size, noise=args.noise, scene=args.scene,
                                   videos_per_class=args.videos, frames_per_video=args.frames, seed=args.seed,
                                   multiplicative=args.multiplicative)
    ds = synthetic.generate(spec, args.out)
    _write_json(Path(args.out) / "synth.json", {"spec": asdict(spec), "max_pattern_overlap": ds.max_pattern_overlap,
                                                "clip_fraction": ds.clip_fraction, "run": run_config(args)})
    print(f"{len(ds.frames)} frames written to {args.out} "
          f"(pattern overlap {ds.max_pattern_overlap:.4f}, clipped {100 * ds.clip_fraction:.3f}%)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    results = run_gradcheck(args.seed)
    worst = 0.0
    for name, err in results.items():
        flag = "ok" if err <= TOLERANCE else "FAIL"
        print(f"{name:<40} {err:.3e}  {flag}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    if worst > TOLERANCE:
        raise NumericError("gradient check failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidcam", description="Video source-camera identification from sensor noise.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--jobs", type=int, default=default_jobs(), help=f"worker count (env {JOBS_ENV})")
        sp.add_argument("--deterministic", action="store_true")

    s = sub.add_parser("select-devices", help="apply the device selection rules to a catalog")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--catalog", type=Path)
    src.add_argument("--vision-root", type=Path, help="VISION-style directory tree")
    s.add_argument("--exclude", nargs="*", default=list(dataset.DEFAULT_EXCLUDE))
    s.add_argument("--min-shared", type=int, default=dataset.MIN_NATIVE_SHARED)
    s.add_argument("--out", type=Path, help="selected devices JSON")
    s.add_argument("--catalog-out", type=Path, help="write the (generated) catalog CSV")
    common(s)
    s.set_defaults(func=cmd_select_devices)

    s = sub.add_parser("split", help="build a balanced train/test split manifest")
    s.add_argument("--catalog", type=Path, required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--devices", type=Path, help="devices JSON from select-devices")
    g.add_argument("--all-devices", action="store_true", help="skip device selection")
    s.add_argument("--exclude", nargs="*", default=list(dataset.DEFAULT_EXCLUDE))
    s.add_argument("--train-fraction", type=float, default=0.55)
    s.add_argument("--out", type=Path, required=True)
    common(s)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("validate", help="audit a split manifest")
    s.add_argument("--manifest", type=Path, required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("sample", help="extract equally spaced frames from videos")
    s.add_argument("--videos", type=Path, required=True, help="catalog or split CSV with video_id and path")
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--allow-repeats", action="store_true")
    s.add_argument("--ffmpeg", default="ffmpeg")
    s.add_argument("--ffprobe", default="ffprobe")
    common(s)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("train", help="train a ConstrainedNet (or the unconstrained ablation)")
    s.add_argument("--config", default=None, help="config file or builtin name (default, synthetic)")
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--frames", type=Path, help="frames directory (default: <manifest dir>/frames)")
    s.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr0", type=float)
    s.add_argument("--momentum", type=float)
    s.add_argument("--decay", type=float)
    s.add_argument("--no-constrained", action="store_true", help="UnconstrainedNet ablation")
    s.add_argument("--eval-each-epoch", action="store_true", help="test video accuracy after every epoch")
    s.add_argument("--cache-frames", action="store_true", help="keep decoded frames in memory")
    s.add_argument("--debug", action="store_true", help="assert the filter constraints after every step")
    common(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="video-level evaluation with reports and figures")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--frames", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--voting", default="majority", help="majority | avgprob | threshold:<p>")
    s.add_argument("--split", default="test", choices=("test", "train"))
    s.add_argument("--no-figures", action="store_true")
    common(s, seed=False)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("classify", help="identify the source device of one video")
    s.add_argument("--checkpoint", type=Path, required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--video", type=Path)
    g.add_argument("--video-frames", type=Path, help="directory of pre-extracted frames")
    s.add_argument("--frames", type=int, default=200)
    s.add_argument("--allow-repeats", action="store_true")
    s.add_argument("--voting", default="majority")
    s.add_argument("--ffmpeg", default="ffmpeg")
    s.add_argument("--ffprobe", default="ffprobe")
    common(s, seed=False)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("synth", help="generate a synthetic noise-fingerprint dataset")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--videos", type=int, default=12)
    s.add_argument("--frames", type=int, default=9)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--noise", type=float, default=0.03)
    s.add_argument("--scene", type=float, default=0.3)
    s.add_argument("--multiplicative", action="store_true")
    s.add_argument("--out", type=Path, required=True)
    common(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    common(s)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "deterministic", False):
        args.jobs = 1
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, VidcamError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
