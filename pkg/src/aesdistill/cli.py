"""Command-line surface tying the pipeline together.

Subcommands: ``synth`` (desk-scale dataset), ``make-manifest``, ``cfa``
(feature-alignment pretraining against a frozen reference encoder),
``finetune-teacher``, ``skd`` (semi-supervised student distillation),
``eval`` and ``attn-report``.

Exit codes: 0 success, 1 data/argument errors, 2 configuration errors,
3 IO errors, 4 numerical aborts (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import config as cfgmod
from .align_trainer import run_alignment
from .attention import collect_stats, compare_stats
from .data import Manifest, SampleRecord, derive_seed, merge_manifests
from .distill_trainer import finetune_teacher, predict_pairs, run_skd
from .distributions import ScoreDistribution
from .errors import (AesdistillError, ConfigError, DivergenceError,
                     UnsupportedCapabilityError)
from .metrics import compute_metrics, interval_error_rate
from .models import (FeatureCache, PredictionHead, Projector, TinyVit,
                     build_encoder, cache_features, capture_attention,
                     encoder_from_checkpoint, freeze, load_checkpoint,
                     to_tensor)
from .runio import read_json, write_json, write_yaml
from .synthetic import SyntheticSpec, generate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

RUN_ROOT_ENV = "AESDISTILL_RUNS"


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--profile", default="desk", choices=cfgmod.profile_names(),
                        help="configuration profile supplying the defaults")
    parser.add_argument("--config", default=None, help="YAML config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--seed", type=int, default=None, help="run seed")
    parser.add_argument("--run-dir", default=None, help="run directory")
    parser.add_argument("--resume", action="store_true",
                        help="resume from the run directory's last checkpoint")


def _resolved(args) -> dict:
    cfg = cfgmod.resolve_config(args.profile, args.config, args.overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.run_dir is not None:
        cfg["run_dir"] = args.run_dir
    return cfg


def _run_dir(cfg: dict, command: str, resume: bool) -> Path:
    if cfg.get("run_dir"):
        run_dir = Path(cfg["run_dir"])
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        name = f"{command}-{cfgmod.config_fingerprint(cfg)}-s{cfg['seed']}"
        run_dir = root / name
    if run_dir.exists() and any(run_dir.iterdir()) and not resume:
        raise ConfigError(
            f"run directory {run_dir} already exists; pass --resume to continue "
            f"or choose another --run-dir"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg["run_dir"] = str(run_dir)
    write_yaml(run_dir / "config.yaml", cfg)
    return run_dir


def _resume_state(run_dir: Path, resume: bool) -> dict | None:
    if not resume:
        return None
    path = run_dir / "resume.pt"
    if not path.exists():
        raise ConfigError(f"--resume given but {path} does not exist")
    return load_checkpoint(path)


def _require(cfg: dict, dotted: str):
    node = cfg
    for key in dotted.split("."):
        node = node[key]
    if node is None:
        raise ConfigError(f"config key {dotted} must be set for this command")
    return node


def _load_labels_file(path: Path, bins: tuple[float, ...]) -> dict:
    """Label file: JSON object mapping sample id to a scalar MOS or a probs list."""
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise ConfigError(f"label file {path} must hold an id-to-label mapping")
    labels = {}
    for sample_id, value in raw.items():
        if isinstance(value, (int, float)):
            labels[sample_id] = float(value)
        else:
            labels[sample_id] = ScoreDistribution.from_stored(value, bins)
    return labels


def cmd_make_manifest(args) -> int:
    cfg = _resolved(args)
    bins = cfgmod.bin_values(cfg)
    out = Path(args.out)
    if args.merge:
        result = merge_manifests([Manifest.load(p) for p in args.merge])
        result.manifest.save(out)
        stats = {
            "count": len(result.manifest),
            "labeled": result.manifest.labeled,
            "per_source": result.per_source,
            "duplicates_dropped": result.duplicates_dropped,
        }
    else:
        if not args.images:
            raise ConfigError("make-manifest needs --images or --merge")
        image_dir = Path(args.images)
        if not image_dir.is_dir():
            raise FileNotFoundError(f"image directory {image_dir} does not exist")
        paths = sorted(p for p in image_dir.rglob("*")
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        labels = _load_labels_file(Path(args.labels), bins) if args.labels else None
        records = []
        for p in paths:
            label = None
            if labels is not None:
                if p.stem not in labels:
                    raise ConfigError(f"label file has no entry for {p.stem!r}")
                label = labels[p.stem]
            records.append(SampleRecord(id=p.stem, uri=str(p), source=args.source,
                                        label=label))
        manifest = Manifest(
            records=tuple(records), labeled=labels is not None,
            bin_values=bins if labels is not None else None,
            score_range=(bins[0], bins[-1]) if labels is not None else None,
        )
        manifest.save(out)
        per_source = {}
        for rec in records:
            per_source[rec.source] = per_source.get(rec.source, 0) + 1
        stats = {"count": len(records), "labeled": labels is not None,
                 "per_source": per_source, "duplicates_dropped": 0}
    print(json.dumps(stats, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _resolved(args)
    spec = SyntheticSpec(n=args.n, unlabeled_n=args.unlabeled_n,
                         image_size=args.image_size, seed=cfg["seed"],
                         noise_level=args.noise, bin_values=cfgmod.bin_values(cfg))
    labeled, unlabeled = generate(spec, args.out)
    print(json.dumps({"labeled": len(labeled), "unlabeled": len(unlabeled),
                      "out": str(args.out)}, indent=2))
    return EXIT_OK


def _teacher_encoder(cfg: dict):
    spec = cfgmod.encoder_spec(cfg, "teacher")
    ckpt = cfg["teacher_encoder"]["init_checkpoint"]
    if ckpt:
        encoder = encoder_from_checkpoint(load_checkpoint(ckpt))
    else:
        encoder = build_encoder(spec, seed=int(cfg["teacher_encoder"]["init_seed"]))
    return freeze(encoder)


def _student_backbone(cfg: dict, init_key: str):
    init = cfg["distill"].get(init_key) if init_key else None
    spec = cfgmod.encoder_spec(cfg, "student")
    if init:
        return encoder_from_checkpoint(load_checkpoint(init))
    return build_encoder(spec, seed=int(cfg["student_encoder"]["init_seed"]))


def cmd_cfa(args) -> int:
    cfg = _resolved(args)
    run_dir = _run_dir(cfg, "cfa", args.resume)
    manifest = Manifest.load(_require(cfg, "align.unlabeled_manifest"))
    preprocess = cfgmod.preprocess_spec(cfg)
    teacher_norm = cfgmod.normalization(cfg, "teacher")
    student_norm = cfgmod.normalization(cfg, "student")

    if cfg["align"]["teacher_source"] == "cache":
        cache_path = cfg["align"]["cache_path"]
        if cache_path and Path(cache_path).exists():
            teacher = FeatureCache.load(cache_path)
        else:
            encoder = _teacher_encoder(cfg)
            teacher = cache_features(encoder, manifest, preprocess, teacher_norm)
            teacher.save(cache_path or run_dir / "teacher_features.fc")
    elif cfg["align"]["teacher_source"] == "live":
        teacher = _teacher_encoder(cfg)
    else:
        raise ConfigError("align.teacher_source must be 'live' or 'cache'")

    backbone = _student_backbone(cfg, init_key="")
    teacher_dim = cfgmod.encoder_spec(cfg, "teacher").feature_dim
    torch.manual_seed(derive_seed(cfg["seed"], "projector"))
    projector = Projector(backbone.feature_dim, teacher_dim,
                          hidden=cfg["projector"]["hidden"])
    result = run_alignment(backbone, projector, teacher, manifest, preprocess,
                           teacher_norm, student_norm, cfgmod.align_config(cfg),
                           run_dir, seed=cfg["seed"],
                           resume_state=_resume_state(run_dir, args.resume))
    print(json.dumps({"run_dir": str(run_dir),
                      "checkpoint": str(result.checkpoint_path),
                      "epoch_losses": result.epoch_losses}, indent=2))
    return EXIT_OK


def cmd_finetune_teacher(args) -> int:
    cfg = _resolved(args)
    run_dir = _run_dir(cfg, "teacher", args.resume)
    labeled = Manifest.load(_require(cfg, "distill.labeled_manifest"))
    eval_manifest = Manifest.load(_require(cfg, "distill.eval_manifest"))
    bins = cfgmod.bin_values(cfg)

    init = cfg["distill"]["teacher_init"]
    if init:
        backbone = encoder_from_checkpoint(load_checkpoint(init))
    else:
        backbone = build_encoder(cfgmod.encoder_spec(cfg, "teacher"),
                                 seed=int(cfg["teacher_encoder"]["init_seed"]))
    torch.manual_seed(derive_seed(cfg["seed"], "teacher-head"))
    head = PredictionHead(backbone.feature_dim, n_bins=len(bins),
                          hidden=cfg["head"]["hidden"])
    result = finetune_teacher(backbone, head, labeled, eval_manifest, bins,
                              cfgmod.distill_config(cfg),
                              cfgmod.preprocess_spec(cfg),
                              cfgmod.normalization(cfg, "teacher"), run_dir,
                              seed=cfg["seed"],
                              resume_state=_resume_state(run_dir, args.resume))
    report = result.report.to_dict() if result.report else None
    print(json.dumps({"run_dir": str(run_dir),
                      "checkpoint": str(result.checkpoint_path),
                      "eval_report": report}, indent=2))
    return EXIT_OK


def cmd_skd(args) -> int:
    cfg = _resolved(args)
    run_dir = _run_dir(cfg, "skd", args.resume)
    labeled = Manifest.load(_require(cfg, "distill.labeled_manifest"))
    eval_manifest = Manifest.load(_require(cfg, "distill.eval_manifest"))
    unlabeled_path = cfg["distill"]["unlabeled_manifest"]
    unlabeled = Manifest.load(unlabeled_path) if unlabeled_path else None
    bins = cfgmod.bin_values(cfg)

    teacher_payload = load_checkpoint(_require(cfg, "distill.teacher_checkpoint"))
    teacher_backbone = encoder_from_checkpoint(teacher_payload)
    teacher_head = PredictionHead(teacher_backbone.feature_dim,
                                  n_bins=len(teacher_payload["bin_values"]),
                                  hidden=cfg["head"]["hidden"])
    teacher_head.load_state_dict(teacher_payload["head"])
    freeze(teacher_backbone), freeze(teacher_head)
    if tuple(teacher_payload["bin_values"]) != bins:
        raise ConfigError("teacher checkpoint bin values do not match config bins")

    student_backbone = _student_backbone(cfg, init_key="student_init")
    torch.manual_seed(derive_seed(cfg["seed"], "student-head"))
    student_head = PredictionHead(student_backbone.feature_dim, n_bins=len(bins),
                                  hidden=cfg["head"]["hidden"])
    result = run_skd(student_backbone, student_head, teacher_backbone,
                     teacher_head, labeled, unlabeled, eval_manifest, bins,
                     cfgmod.distill_config(cfg), cfgmod.preprocess_spec(cfg),
                     cfgmod.normalization(cfg, "teacher"),
                     cfgmod.normalization(cfg, "student"), run_dir,
                     seed=cfg["seed"],
                     resume_state=_resume_state(run_dir, args.resume))
    report = result.report.to_dict() if result.report else None
    print(json.dumps({"run_dir": str(run_dir),
                      "best_checkpoint": str(result.best_checkpoint_path),
                      "last_checkpoint": str(result.last_checkpoint_path),
                      "best_srcc": result.best_srcc,
                      "eval_report": report}, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    payload = load_checkpoint(args.checkpoint)
    manifest = Manifest.load(args.manifest)
    bins = tuple(payload["bin_values"])
    if manifest.bin_values is not None and manifest.bin_values != bins:
        raise ConfigError(
            "manifest bin values do not match the checkpoint head; "
            f"checkpoint={bins} manifest={manifest.bin_values}"
        )
    backbone = encoder_from_checkpoint(payload)
    head = PredictionHead(backbone.feature_dim, n_bins=len(bins),
                          hidden=cfg["head"]["hidden"])
    head.load_state_dict(payload["head"])
    freeze(backbone), freeze(head)

    pairs = predict_pairs(backbone, head, manifest, bins,
                          cfgmod.preprocess_spec(cfg, mode="eval"),
                          cfgmod.normalization(cfg, "student"),
                          batch_size=int(cfg["eval"]["batch_size"]))
    metrics_report = compute_metrics(pairs)
    ier_report = interval_error_rate(pairs, cfgmod.ier_config(cfg))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", metrics_report.to_dict())
    write_json(out / "ier.json", ier_report.to_dict())
    with open(out / "ier_plot.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["interval_lo", "interval_hi", "n", "ier"])
        for stat in ier_report.intervals:
            writer.writerow([stat.lo, stat.hi, stat.n,
                             "" if stat.ier is None else stat.ier])
    print(json.dumps({"metrics": metrics_report.to_dict(),
                      "out": str(out)}, indent=2))
    return EXIT_OK


def _probe_stats(encoder, manifest: Manifest, cfg: dict):
    from .data import batch_views
    preprocess = cfgmod.preprocess_spec(cfg, mode="eval")
    norm = cfgmod.normalization(cfg, "student")
    probe_ids = manifest.ids[: int(cfg["attn"]["probe_size"])]
    records = manifest.by_id()
    layer_maps: list[list] = []
    batch = int(cfg["eval"]["batch_size"])
    for start in range(0, len(probe_ids), batch):
        views, _ = batch_views(records, probe_ids[start:start + batch], preprocess,
                               epoch=0)
        for per_image in capture_attention(encoder, to_tensor(views, norm)):
            if not layer_maps:
                layer_maps = [[] for _ in per_image]
            for layer, amap in enumerate(per_image):
                layer_maps[layer].append(amap)
    return collect_stats(layer_maps)


def cmd_attn_report(args) -> int:
    cfg = _resolved(args)
    manifest = Manifest.load(args.probe)
    encoders = []
    for path in (args.before, args.after):
        encoder = freeze(encoder_from_checkpoint(load_checkpoint(path)))
        if not isinstance(encoder, TinyVit):
            raise UnsupportedCapabilityError(
                f"{path} is not a transformer-family checkpoint"
            )
        encoders.append(encoder)
    if encoders[0].spec.depth != encoders[1].spec.depth:
        raise ConfigError("checkpoints have different depths")

    before = _probe_stats(encoders[0], manifest, cfg)
    after = _probe_stats(encoders[1], manifest, cfg)
    comparison = compare_stats(before, after)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "attn_report.json", {
        "probe_size": min(int(cfg["attn"]["probe_size"]), len(manifest)),
        "layers": [c.to_dict() for c in comparison],
    })
    with open(out / "attn_plot.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "layer", "mean_distance", "distance_std",
                         "mean_entropy"])
        for tag, stats in (("before", before), ("after", after)):
            for layer, s in enumerate(stats.per_layer):
                writer.writerow([tag, layer, s.mean_distance, s.distance_std,
                                 s.mean_entropy])
    print(json.dumps({"out": str(out), "layers": len(comparison)}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aesdistill",
        description="Feature-alignment pretraining and semi-supervised "
                    "distillation for image aesthetics scoring.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--unlabeled-n", type=int, default=None)
    p.add_argument("--image-size", type=int, default=48)
    p.add_argument("--noise", type=float, default=0.0,
                   help="label noise level")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("make-manifest", help="build or merge dataset manifests")
    p.add_argument("--images", default=None, help="directory of images")
    p.add_argument("--labels", default=None,
                   help="JSON file mapping image stem to scalar MOS or probs")
    p.add_argument("--source", default="local", help="source tag for records")
    p.add_argument("--merge", nargs="+", default=None,
                   help="merge existing manifest files instead")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_make_manifest)

    p = sub.add_parser("cfa", help="feature-alignment pretraining (phase I)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_cfa)

    p = sub.add_parser("finetune-teacher", help="supervised teacher fine-tuning")
    _add_config_flags(p)
    p.set_defaults(func=cmd_finetune_teacher)

    p = sub.add_parser("skd", help="semi-supervised student distillation (phase II)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_skd)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-report",
                       help="attention distance/entropy comparison of two checkpoints")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--probe", required=True, help="probe manifest")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_attn_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        logger.error("numerical abort: %s (step=%s lr=%s)", exc, exc.step, exc.lr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        logger.error("io error: %s", exc)
        return EXIT_IO
    except (AesdistillError, ValueError) as exc:
        logger.error("error: %s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
