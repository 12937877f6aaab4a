"""``magseg`` command line: gen-data, train, eval, gradcheck.

Exit codes: 0 success, 1 check failure, 2 runtime error, 64 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, gradsuite, lscd, segnet, synthdata
from .config import RESOLVED_NAME, RunConfig, load_config, make_config, parse_text
from .errors import ConfigError, MagsegError, TrainError, UsageError
from .evaluate import eval_miss_sensor, eval_miss_system, eval_mss
from .mff import MODALITIES
from .trainer import LOSS_TERMS, train_loop

EXIT_OK, EXIT_CHECK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2, 64
SEED_ENV = "A2S_SEED"

log = logging.getLogger("magseg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def parse_modalities(text: str) -> tuple:
    """``"R,D"`` or ``"RD"`` to canonical-order names."""
    parts = text.split(",") if "," in text else list(text)
    names = [n.strip().upper() for n in parts if n.strip()]
    bad = [n for n in names if n not in MODALITIES]
    if not names or bad:
        raise UsageError(f"bad modality subset {text!r}; use letters from {''.join(MODALITIES)}")
    if len(set(names)) != len(names):
        raise UsageError(f"repeated modality in {text!r}")
    return tuple(m for m in MODALITIES if m in names)


def parse_losses(text: str) -> list:
    terms = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in terms if t not in LOSS_TERMS]
    if not terms or bad:
        raise UsageError(f"bad --loss {text!r}; choose from {','.join(LOSS_TERMS)}")
    return terms


# -- gen-data ---------------------------------------------------------------


def cmd_gen(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    if args.size % args.patch:
        raise UsageError(f"--size {args.size} is not divisible by patch {args.patch}")
    if args.classes < 2:
        raise UsageError("--classes must be >= 2")
    if args.count < 0 or (args.val_count is not None and args.val_count < 0):
        raise UsageError("sample counts must be >= 0")
    val = args.val_count if args.val_count is not None else args.count // 4
    spec = synthdata.DatasetSpec(seed=seed, num_classes=args.classes, height=args.size, width=args.size,
                                 train=args.count, val=val, n_shapes=args.shapes)
    root = synthdata.write_dataset(args.out, spec, force=args.force, threads=args.threads)
    digest = synthdata.dataset_digest(root)
    print(f"wrote {spec.train} train / {spec.val} val samples (K={spec.num_classes}, "
          f"{spec.height}x{spec.width}, seed {seed}) to {root} sha256={digest}")
    return EXIT_OK


# -- train ------------------------------------------------------------------


def resolve_run_config(args) -> RunConfig:
    overrides = {
        "data": args.data,
        "out": args.out,
        "total_steps": args.steps,
        "base_lr": args.lr,
        "seed": args.seed,
        "teacher_seed": args.teacher_seed,
        "teacher_gamma": args.gamma,
        "teacher_path": args.teacher,
        "threads": args.threads,
        "modality_dropout_prob": args.dropout,
    }
    if args.verbose:
        overrides["verbosity"] = args.verbose
    file_values = {}
    if args.config is not None:
        try:
            file_values = parse_text(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
    if overrides["seed"] is None and "seed" not in file_values:
        overrides["seed"] = _env_seed()
    values = dict(file_values)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.loss is not None:
        terms = parse_losses(args.loss)
        for t in LOSS_TERMS:
            values[f"w_{t}"] = 1.0 if t in terms else 0.0
        values["enable_base_loss"] = "base" in terms
    return make_config(values)


def build_teacher(cfg: RunConfig, num_classes: int) -> lscd.TeacherEmbeddings:
    if cfg.teacher_path:
        te = lscd.teacher_load(cfg.teacher_path)
    else:
        seed = cfg.seed if cfg.teacher_seed is None else cfg.teacher_seed
        te = lscd.teacher_synthesize(seed, num_classes, cfg.teacher_dim, cfg.teacher_gamma)
    if te.num_classes < num_classes:
        raise UsageError(f"teacher has {te.num_classes} class rows, dataset needs {num_classes}")
    return te


def cmd_train(args) -> int:
    cfg = resolve_run_config(args)
    if not cfg.data:
        raise UsageError("train needs --data (or 'data' in the config file)")
    if not cfg.out:
        raise UsageError("train needs --out (or 'out' in the config file)")
    if not Path(cfg.data).is_dir():
        raise UsageError(f"dataset directory {cfg.data} does not exist")
    dataset = synthdata.Dataset(cfg.data, "train")
    if len(dataset) == 0:
        raise UsageError(f"{cfg.data} has no training samples")
    h, w = dataset[0].shape
    if h % cfg.patch or w % cfg.patch:
        raise UsageError(f"sample extent {h}x{w} not divisible by patch {cfg.patch}")
    teacher = build_teacher(cfg, dataset.num_classes)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = train_loop(dataset, teacher, cfg.train_config(), out_dir=out,
                        log_every=100 if cfg.verbosity else 0)
    lscd.teacher_save(out / "teacher.a2sg", teacher)
    (out / RESOLVED_NAME).write_text(cfg.to_json())
    last = result.curve[-1][-1] if result.curve else float("nan")
    print(f"trained {cfg.total_steps} steps in {time.perf_counter() - start:.1f}s; "
          f"final L_total {last:.6f}; wrote {out / 'checkpoint.a2sg'}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------


def _eval_config(checkpoint: Path) -> RunConfig:
    resolved = checkpoint.parent / RESOLVED_NAME
    if resolved.is_file():
        return load_config(resolved)
    log.info("no %s next to %s; using default fusion settings", RESOLVED_NAME, checkpoint)
    return RunConfig()


def cmd_eval(args) -> int:
    if args.checkpoint is None:
        raise UsageError("eval needs --checkpoint")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint {ckpt} does not exist")
    run_cfg = _eval_config(ckpt)
    data = args.data or run_cfg.data
    if not data or not Path(data).is_dir():
        raise UsageError(f"dataset directory {data} does not exist")
    if args.modalities is not None and args.mode != "mss":
        raise UsageError("--modalities applies to --mode mss only")
    if args.conditions is not None and args.mode != "sensor":
        raise UsageError("--conditions applies to --mode sensor only")
    available = parse_modalities(args.modalities) if args.modalities is not None else MODALITIES
    dataset = synthdata.Dataset(data, args.split)
    model = segnet.load_checkpoint(ckpt, requires_grad=False)
    if model.num_classes != dataset.num_classes:
        raise UsageError(f"checkpoint predicts {model.num_classes} classes, dataset has {dataset.num_classes}")
    cfg = run_cfg.train_config()
    threads = args.threads
    if args.mode == "mss":
        report = eval_mss(model, dataset, cfg, available, threads=threads)
    elif args.mode == "miss":
        report = eval_miss_system(model, dataset, cfg, threads=threads)
    else:
        if args.conditions is not None:
            conds = [c for c in args.conditions.split(",") if c.strip()]
        else:
            conds = ["clean"] + list(dataset.manifest.get("conditions", []))
        try:
            conds = [synthdata.Condition.parse(c) for c in conds]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        report = eval_miss_sensor(model, dataset, conds, cfg, threads=threads)
    report.meta.update({"checkpoint": str(ckpt), "data": str(data), "split": args.split})
    text = report.to_csv() if args.csv else report.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    if args.eps <= 0:
        raise UsageError("--eps must be positive")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    result = gradsuite.run_suite(range(args.seeds), eps=args.eps, tolerance=args.tol, base_seed=seed)
    for line in result.lines():
        print(line)
    print(f"{'PASS' if result.passed else 'FAIL'}: {args.seeds} instances from seed {seed}, tolerance {args.tol:g}")
    print(f"gradcheck took {result.seconds:.1f}s", file=sys.stderr)
    return EXIT_OK if result.passed else EXIT_CHECK


# -- wiring -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="magseg", description="Multi-modal fusion and language-guided distillation at desk scale.")
    p.add_argument("--version", action="version", version=f"magseg {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", aliases=["gen"], help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--seed", type=int, default=None, help=f"dataset seed (default ${SEED_ENV} or 0)")
    g.add_argument("--count", type=int, default=256, help="training samples")
    g.add_argument("--val-count", type=int, default=None, help="validation samples (default count/4)")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=32, help="square extent in pixels")
    g.add_argument("--shapes", type=int, default=6, help="shapes per scene")
    g.add_argument("--patch", type=int, default=4, help="encoder patch the extent must divide into")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", default=None)
    t.add_argument("--out", default=None, help="run directory")
    t.add_argument("--config", default=None, help="key = value or JSON config file")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--loss", default=None, help="comma list of sup,cr,se,base (default sup,cr,se)")
    t.add_argument("--seed", type=int, default=None, help=f"training seed (default ${SEED_ENV} or 0)")
    t.add_argument("--teacher", default=None, help="load teacher embeddings from this file")
    t.add_argument("--teacher-seed", type=int, default=None)
    t.add_argument("--gamma", type=float, default=None, help="teacher coherence")
    t.add_argument("--dropout", type=float, default=None, help="modality dropout probability")
    t.add_argument("--threads", type=int, default=None)
    t.add_argument("-v", "--verbose", action="count", default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--data", default=None, help="dataset directory (default: the one used for training)")
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--mode", default="mss", choices=("mss", "miss", "sensor"))
    e.add_argument("--modalities", default=None, help="available subset for mss, e.g. R,D")
    e.add_argument("--conditions", default=None, help="comma list such as clean,over_exposure:1")
    e.add_argument("--out", default=None, help="write the report here instead of stdout")
    e.add_argument("--csv", action="store_true", help="CSV rows instead of JSON")
    e.add_argument("--threads", type=int, default=1)
    e.add_argument("-v", "--verbose", action="count", default=0)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every loss and the fusion")
    c.add_argument("--seed", type=int, default=None, help="first instance seed")
    c.add_argument("--seeds", type=int, default=10, help="number of instances")
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=gradsuite.TOLERANCE)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "command", None) is None:
            raise UsageError("missing command; see magseg --help")
        if getattr(args, "threads", None) is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        level = logging.DEBUG if getattr(args, "verbose", 0) > 1 else (
            logging.INFO if getattr(args, "verbose", 0) else logging.WARNING)
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except MagsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
