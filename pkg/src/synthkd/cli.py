"""Command-line entry point: ``synthkd <subcommand> ...``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or digest
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import RunConfig
from .data import load_checkpoint, load_synthetic, save_checkpoint, save_synthetic
from .diffusion import generate_dataset, train_denoiser
from .distill import train_student, train_teacher
from .errors import ConfigError, FormatError, NumericalError
from .metrics import accuracy, dist_variance, teacher_eval_on_synthetic
from .pipeline import (distill_config, gen_config, new_classifier, new_denoiser, schedule, toy_splits,
                       write_rows)
from .sweep import KINDS, Sweep

log = logging.getLogger("synthkd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ArtifactError(Exception):
    """A declared input artifact is missing or does not match its declared digest."""


def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def _load(path, kind: str):
    if not Path(path).exists():
        raise ArtifactError(f"{kind} checkpoint {path} does not exist")
    model, manifest = load_checkpoint(path)
    if model.kind != kind:
        raise ArtifactError(f"{path} holds a {model.kind}, expected a {kind}")
    return model, manifest


def _check_digest(label: str, declared: str | None, actual: str) -> None:
    if declared and not actual.startswith(declared):
        raise ArtifactError(f"{label} digest {actual[:16]} does not match declared {declared}")


def _progress(label: str, every: int):
    start = time.time()

    def report(i, value):
        if i % every == 0:
            log.info("%s %d: %s (%.0fs)", label, i, value, time.time() - start)
    return report


def cmd_train_diffusion(args) -> None:
    cfg = _config(args)
    d = cfg["denoiser"]
    train, _ = toy_splits(cfg)
    model, trace = train_denoiser(new_denoiser(cfg), train, schedule(cfg), epochs=d["epochs"], batch=d["batch"],
                                  lr=d["lr"], cond_dropout_p=d["cond_dropout_p"], seed=d["seed"],
                                  ema_decay=d["ema_decay"], progress=_progress("step", 200))
    meta = {"config_digest": cfg.digest(), "initial_loss": trace.initial, "final_loss": trace.final,
            "schedule_digest": schedule(cfg).digest()}
    out = save_checkpoint(model, args.out, meta)
    trace_path = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    rows = [{"step": i, "loss": float(v), "seed": d["seed"], "config_digest": cfg.digest()}
            for i, v in enumerate(trace.losses)]
    write_rows(trace_path, rows, ["step", "loss", "seed", "config_digest"])
    print(f"loss {trace.initial:.4f} -> {trace.final:.4f}; wrote {out} and {trace_path}")


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    model, _ = _load(args.checkpoint, "denoiser")
    gc = gen_config(cfg, s=args.s, T_sample=args.steps, per_class_count=args.per_class, seed=args.seed)
    ds = generate_dataset(model, schedule(cfg), gc, workers=args.workers, progress=_progress("chunk", 50))
    save_synthetic(ds, args.out)
    print(f"wrote {len(ds)} images to {args.out} (digest {ds.digest()[:16]})")


def cmd_train_teacher(args) -> None:
    cfg = _config(args)
    t = cfg["teacher"]
    tier = args.tier or t["tier"]
    train, test = toy_splits(cfg)
    model, res = train_teacher(new_classifier(cfg, tier, t["seed"]), train, test, epochs=t["epochs"], lr=t["lr"],
                               batch_size=t["batch_size"], seed=t["seed"], weight_decay=t["weight_decay"])
    out = save_checkpoint(model, args.out, {"config_digest": cfg.digest(), "test_accuracy": res.final_accuracy,
                                            "best_accuracy": res.best_accuracy})
    rows = [dict(r, config_digest=cfg.digest()) for r in res.rows]
    write_rows(out.with_suffix(".trace.csv"), rows, ["epoch", "split", "loss", "accuracy", "seed", "config_digest"])
    print(f"tier {tier} teacher: real-test accuracy {res.final_accuracy:.4f}; wrote {out}")


def cmd_distill(args) -> None:
    cfg = _config(args)
    teacher, _ = _load(args.teacher, "classifier")
    if not Path(args.synthetic).exists():
        raise ArtifactError(f"synthetic dataset {args.synthetic} does not exist")
    ds = load_synthetic(args.synthetic)
    _check_digest("teacher", args.teacher_digest, teacher.digest())
    _check_digest("synthetic dataset", args.synthetic_digest, ds.digest())
    seed = args.seed if args.seed is not None else cfg["student"]["seed"]
    overrides = {k: v for k, v in (("tau", args.tau), ("soft_weight", args.soft), ("hard_weight", args.hard),
                                   ("epochs", args.epochs)) if v is not None}
    dc = distill_config(cfg, seed, **overrides)
    _, test = toy_splits(cfg)
    student = new_classifier(cfg, args.student_tier or cfg["student"]["tier"], seed)
    student, res = train_student(student, teacher, ds, test, dc)
    out = save_checkpoint(student, args.out, {
        "config_digest": cfg.digest(), "distill_digest": dc.digest(), "teacher_digest": teacher.digest(),
        "dataset_digest": ds.digest(), "test_accuracy": res.final_accuracy, "best_accuracy": res.best_accuracy})
    write_rows(out.with_suffix(".trace.csv"), res.rows,
               ["epoch", "split", "loss", "accuracy", "seed", "config_digest"])
    print(f"student real-test accuracy {res.final_accuracy:.4f} (best {res.best_accuracy:.4f}); wrote {out}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    if not Path(args.model).exists():
        raise ArtifactError(f"model {args.model} does not exist")
    model, _ = load_checkpoint(args.model)
    if model.kind != "classifier":
        raise ArtifactError("eval expects a classifier checkpoint")
    if args.dataset in ("toy-test", "toy-train"):
        train, test = toy_splits(cfg)
        ds = test if args.dataset == "toy-test" else train
        result = {"accuracy": accuracy(model, ds), "dist_variance": dist_variance(model, ds)}
        result["confidence"] = teacher_eval_on_synthetic(model, ds)["confidence"]
    else:
        if not Path(args.dataset).exists():
            raise ArtifactError(f"dataset {args.dataset} does not exist")
        result = teacher_eval_on_synthetic(model, load_synthetic(args.dataset))
        result.pop("context")
    for key in ("accuracy", "confidence", "dist_variance"):
        print(f"{key} {result[key]!r}")


def cmd_sweep(args) -> None:
    cfg = _config(args)
    denoiser, _ = _load(args.denoiser, "denoiser")
    teachers = {}
    for path in args.teacher or []:
        model, _ = _load(path, "classifier")
        teachers[model.tier] = model
    # missing tiers are trained from the config so a capacity sweep can start from scratch
    needed = set(cfg["sweep"]["teacher_tiers"]) if args.kind == "capacity" else set()
    needed.add(cfg["teacher"]["tier"])
    out = Path(args.out_dir)
    t = cfg["teacher"]
    for tier in sorted(needed - set(teachers)):
        path = out / "teachers" / f"{tier}.ckpt"
        if path.exists():
            teachers[tier], _ = _load(path, "classifier")
            continue
        log.info("training tier-%s teacher", tier)
        train, test = toy_splits(cfg)
        model, res = train_teacher(new_classifier(cfg, tier, t["seed"]), train, test, epochs=t["epochs"],
                                   lr=t["lr"], batch_size=t["batch_size"], seed=t["seed"],
                                   weight_decay=t["weight_decay"])
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, path, {"config_digest": cfg.digest(), "test_accuracy": res.final_accuracy})
        teachers[tier] = model
    summary = Sweep(args.kind, cfg, out, denoiser, teachers, workers=args.workers).run()
    print(f"wrote {summary}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="synthkd", description="Synthetic-data knowledge distillation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON run config (defaults used when omitted)")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
        sp.set_defaults(func=func)
        return sp

    sp = add("train-diffusion", cmd_train_diffusion, "train the conditional denoiser on the toy train split")
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--trace", help="loss-trace CSV (default: <out>.trace.csv)")

    sp = add("gen-data", cmd_gen_data, "sample a labelled synthetic dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--s", type=float, help="guidance scale")
    sp.add_argument("--steps", type=int, help="sampling steps")
    sp.add_argument("--per-class", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out", required=True, help="SKDS output path")

    sp = add("train-teacher", cmd_train_teacher, "train a classifier on the real toy split")
    sp.add_argument("--tier", choices=["S", "M", "L"])
    sp.add_argument("--out", required=True)

    sp = add("distill", cmd_distill, "distill a student from a teacher on synthetic data")
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--student-tier", choices=["S", "M", "L"])
    sp.add_argument("--synthetic", required=True)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--soft", type=float, help="soft-label loss weight")
    sp.add_argument("--hard", type=float, help="hard-label loss weight")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--teacher-digest", help="expected teacher digest (prefix)")
    sp.add_argument("--synthetic-digest", help="expected dataset digest (prefix)")
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "accuracy, confidence and dist_variance of a classifier")
    sp.add_argument("--model", required=True)
    sp.add_argument("--dataset", default="toy-test", help="toy-test, toy-train or an SKDS path")

    sp = add("sweep", cmd_sweep, "run an experiment grid")
    sp.add_argument("--kind", required=True, choices=KINDS)
    sp.add_argument("--denoiser", required=True)
    sp.add_argument("--teacher", action="append", help="teacher checkpoint; repeat for several tiers")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out-dir", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArtifactError, FormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
