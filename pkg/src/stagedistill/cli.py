"""Command-line entry point: ``stagedistill <subcommand> [options]``.

Exit codes: 0 success, 2 configuration/input error, 3 training failure,
1 any other library error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from . import cascade as C
from .analysis import correlation_report, overhead_report
from .config import RunConfig
from .data import load_image_folder, make_synthetic
from .errors import ConfigError, DistillError, InputError, TrainingError
from .models import build, load_checkpoint, param_count, save_checkpoint
from .packager import PackageStore, build_package
from .training import evaluate, supervised_loss, train

log = logging.getLogger("stagedistill")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_TRAINING = 0, 1, 2, 3


def _load_data(cfg: RunConfig):
    d, m = cfg["data"], cfg["model"]
    if d["source"] == "synthetic":
        return make_synthetic(d["n_train"], d["n_val"], seed=d["seed"], image_size=m["image_size"],
                              noise=d["noise"], num_classes=m["num_classes"])
    train_set = load_image_folder(d["root"], "train", m["image_size"])
    val_set = load_image_folder(d["root"], "val", m["image_size"], train_set.class_names)
    if train_set.num_classes != m["num_classes"]:
        raise ConfigError(f"model.num_classes: data has {train_set.num_classes} classes")
    return train_set, val_set


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else Path("runs") / cfg["name"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    return out


def _load_weights(path, what: str):
    if not path:
        raise ConfigError(f"no {what} checkpoint given")
    if not Path(path).is_file():
        raise InputError(f"{what} checkpoint not found: {path}")
    return load_checkpoint(path)


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2))
    return path


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    return RunConfig.load(args.config, overrides, args.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_teacher(args) -> Path:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    train_set, val_set = _load_data(cfg)
    spec = cfg.teacher_spec()
    init = build(spec, cfg["seed"])
    weights, tlog = train(init, supervised_loss, train_set, cfg.schedule(teacher=True),
                          val_data=val_set, metrics_path=out / "metrics.jsonl")
    save_checkpoint(weights, out / "checkpoint.sdkw", meta={"role": "teacher"})
    report = evaluate(weights, val_set)
    _write_json(out / "report.json", {"params": param_count(weights), **report.to_dict()})
    print(f"teacher top1 {report.top1:.2f} top5 {report.top5:.2f} -> {out / 'checkpoint.sdkw'}")
    return out


def cmd_distill(args) -> Path:
    overrides = list(args.set or [])
    if args.mode:
        overrides.append(f"distill.mode={args.mode}")
    if args.teacher:
        overrides.append(f"distill.teacher_checkpoint={args.teacher}")
    cfg = RunConfig.load(args.config, overrides, args.seed)
    teacher = _load_weights(cfg["distill.teacher_checkpoint"], "teacher")
    student_spec = cfg.student_spec()
    if teacher.spec.num_classes != student_spec.num_classes:
        raise ConfigError("model.num_classes: teacher checkpoint has a different label space")
    out = _out_dir(args, cfg)
    train_set, val_set = _load_data(cfg)
    dcfg = cfg.distill_config()
    mode = cfg["distill.mode"]

    if mode == "single":
        kind = cfg["distill.kind"]
        ladder = C.make_ladder(teacher.spec, student_spec, dcfg)
        res = C.cascade(teacher, ladder, cfg.single_recipe(), train_set, dcfg.schedule, dcfg,
                        val_set, out / f"branch-{kind}")
        save_checkpoint(res.weights, out / "final" / "checkpoint.sdkw", meta={"mode": "single", "kind": kind})
        report = evaluate(res.weights, val_set)
        _write_json(out / "run.json", {
            "mode": "single", "kind": kind, "n_runs": len(res.rungs),
            "extra_params": res.extra_params, "final_report": report.to_dict(),
            "config": dcfg.snapshot(),
        })
    else:
        fn = C.skd_train if mode == "skd" else C.rskd_train
        res = fn(teacher, student_spec, train_set, dcfg, val_set, out)
        report = evaluate(res.final_model(), val_set)
    print(f"{mode} student top1 {report.top1:.2f} top5 {report.top5:.2f} -> {out}")
    return out


def cmd_package_labels(args) -> Path:
    overrides = list(args.set or [])
    if args.checkpoint:
        overrides.append(f"package.checkpoint={args.checkpoint}")
    cfg = RunConfig.load(args.config, overrides, args.seed)
    model = _load_weights(cfg["package.checkpoint"], "pretrained")
    out = _out_dir(args, cfg)
    train_set, val_set = _load_data(cfg)
    p = cfg["package"]
    source = val_set if p["split"] == "val" else train_set
    gen = cfg.frame_generator()
    store = PackageStore(out / "packages")
    n = min(p["n_images"], len(source))
    agree = 0
    for i in range(n):
        pkg = build_package(source.x[i], model, p["count"], gen, seed=cfg["seed"] * 100003 + i,
                            threshold=p["threshold"], weight_scheme=p["weight_scheme"],
                            anomaly_rate=p["anomaly_rate"], source_id=f"{p['split']}-{i:06d}")
        store.add(pkg)
        agree += int(pkg.aggregated.top_class == int(source.y[i]))
    summary = {"n_packages": n, "label_agreement": agree / max(n, 1), "store": str(store.root)}
    _write_json(out / "package-summary.json", summary)
    print(f"wrote {n} packages to {store.root} (top-class agreement {summary['label_agreement']:.3f})")
    return out


def cmd_eval(args) -> Path:
    cfg = _config(args)
    weights = _load_weights(args.checkpoint, "model")
    out = _out_dir(args, cfg)
    train_set, val_set = _load_data(cfg)
    data = val_set if cfg["report.split"] == "val" else train_set
    report = evaluate(weights, data)
    _write_json(out / "eval.json", {"checkpoint": str(args.checkpoint), **report.to_dict()})
    print(json.dumps({"top1": report.top1, "top5": report.top5, "n_samples": report.n_samples}))
    return out


def cmd_correlation(args) -> Path:
    cfg = _config(args)
    teacher = _load_weights(args.teacher, "teacher")
    student = _load_weights(args.student, "student")
    if teacher.spec.num_classes != student.spec.num_classes:
        raise InputError("teacher and student label spaces differ")
    out = _out_dir(args, cfg)
    train_set, val_set = _load_data(cfg)
    data = val_set if cfg["report.split"] == "val" else train_set
    rep = correlation_report(teacher, student, data)
    rep.write_csv(out / "correlation.csv")
    if cfg["report.heatmap"]:
        rep.plot(out / "correlation.png")
    _write_json(out / "correlation.json", rep.to_dict())
    print(f"correlation diff frobenius {rep.diff_frobenius:.6f}")
    return out


def cmd_report_overhead(args) -> Path:
    run = Path(args.run)
    rep = overhead_report(run)
    _write_json(run / "overhead.json", rep)
    print(json.dumps(rep))
    return run


# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out: bool = True):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value by dotted key (repeatable)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    if out:
        p.add_argument("--out", help="output directory (default runs/<name>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagedistill", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train a teacher network from scratch")
    _common(p)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="run SKD, RSKD or a single-recipe cascade")
    _common(p)
    p.add_argument("--mode", choices=("skd", "rskd", "single"))
    p.add_argument("--teacher", help="teacher checkpoint (overrides distill.teacher_checkpoint)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("package-labels", help="build composite pseudo-label packages")
    _common(p)
    p.add_argument("--checkpoint", help="pretrained labelling model")
    p.set_defaults(func=cmd_package_labels)

    p = sub.add_parser("eval", help="top-1/top-5 of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("correlation", help="teacher/student logit correlation difference")
    _common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.set_defaults(func=cmd_correlation)

    p = sub.add_parser("report-overhead", help="extra parameters and time per batch of a run")
    p.add_argument("run", help="run directory")
    p.set_defaults(func=cmd_report_overhead)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        where = f" (rung {exc.rung})" if exc.rung is not None else ""
        print(f"training failed{where}: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except DistillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
