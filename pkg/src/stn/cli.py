"""Command-line interface: ``stn <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure. Every failure prints one diagnostic line on stderr.
"""
import argparse
import csv
import io
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .encoder import encode
from .episodic import RunConfig, evaluate, gen_synthetic, load_dataset, meta_train, save_dataset, sweep_alpha
from .episodic.config import load_run_config
from .episodic.evaluation import ablate_metrics
from .episodic.tensorio import atomic_write_text, load_tensors, save_tensors
from .episodic.training import train_adaptive_fusion
from .errors import DataError, FormatError, InvalidConfig, NumericalError, STNError
from .fusion import FusionConfig
from .metrics import GLOBAL_KINDS, LOCAL_KINDS

log = logging.getLogger("stn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")
    return value == "on"


def _grid(text):
    """``start:stop:step`` (inclusive stop) or a comma list."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(round((stop - start) / step)) + 1
            return [round(start + i * step, 10) for i in range(n)]
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; use start:stop:step or a,b,c") from None


def _kinds(allowed):
    def parse(text):
        kinds = tuple(k.strip() for k in text.split(",") if k.strip())
        bad = [k for k in kinds if k not in allowed]
        if bad or not kinds:
            raise argparse.ArgumentTypeError(f"choose from {','.join(allowed)}")
        return kinds

    return parse


# Checkpoints: parameter tensors plus a JSON sidecar with the run config.


def save_checkpoint(path, params, run, branch, extra=None):
    save_tensors(path, params)
    meta = {"branch": branch, "run_config": run.to_dict()}
    meta.update(extra or {})
    atomic_write_text(_sidecar(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    params = load_tensors(path)
    side = _sidecar(path)
    try:
        with open(side, encoding="utf-8") as fh:
            meta = json.load(fh)
        run = RunConfig.from_dict(meta["run_config"])
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint sidecar {side}: {exc.strerror}") from exc
    except (ValueError, KeyError, TypeError, InvalidConfig) as exc:
        raise FormatError(f"bad checkpoint sidecar {side}: {exc}") from exc
    return params, run


def _sidecar(path):
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".json"


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    atomic_write_text(path, buf.getvalue())


# Shared flag groups.


def _add_seed(p, default=0, help_extra=""):
    p.add_argument("--seed", type=int, default=default, help=f"random seed (default: %(default)s){help_extra}")


def _add_eval_flags(p):
    p.add_argument("--data", required=True, help="dataset manifest or directory holding manifest.json")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to evaluate (default: %(default)s)")
    p.add_argument("--ckpt-global", required=True, help="global-branch checkpoint (.stnt)")
    p.add_argument("--ckpt-local", required=True, help="local-branch checkpoint (.stnt)")
    p.add_argument("--tasks", type=int, default=200, help="evaluation tasks (default: %(default)s)")
    p.add_argument("--n", type=int, default=5, help="classes per task (default: %(default)s)")
    p.add_argument("--k", type=int, default=1, help="support images per class (default: %(default)s)")
    p.add_argument("--t", type=int, default=15, help="query images per class (default: %(default)s)")
    _add_seed(p)
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = _Parser(prog="stn", description="Few-shot classification with fused global and local metrics.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-synthetic", help="generate the synthetic confusable-pairs dataset")
    p.add_argument("--out", required=True, help="output directory for manifest.json and blobs/")
    p.add_argument("--classes", type=int, default=40, help="number of classes (default: %(default)s)")
    p.add_argument("--per-class", type=int, default=40, help="images per class (default: %(default)s)")
    _add_seed(p)

    p = sub.add_parser("train", help="meta-train both branches")
    p.add_argument("--data", required=True, help="dataset manifest or directory")
    p.add_argument("--config", help="run config JSON (default: built-in defaults)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed (default: config value, 0)")
    p.add_argument("--epochs", type=int, default=None, help="overrides the config (default: config value, 30)")
    p.add_argument(
        "--episodes-per-epoch", type=int, default=None, help="overrides the config (default: config value, 50)"
    )
    p.add_argument("--share-params", type=_on_off, default=None, help="on|off, overrides the config (default: off)")

    p = sub.add_parser("eval", help="evaluate fused accuracy")
    _add_eval_flags(p)
    p.add_argument("--alpha", type=float, default=0.7, help="local-branch fusion weight (default: %(default)s)")
    p.add_argument("--normalize", type=_on_off, default=True, help="on|off L2 normalization (default: on)")

    p = sub.add_parser("sweep-alpha", help="fused accuracy across a grid of alpha")
    _add_eval_flags(p)
    p.add_argument("--grid", type=_grid, default=_grid("0.1:0.9:0.1"), help="start:stop:step or a,b,c (default: 0.1:0.9:0.1)")
    p.add_argument("--normalize", type=_on_off, default=True, help="on|off L2 normalization (default: on)")

    p = sub.add_parser("ablate-metrics", help="global x local metric cross table")
    _add_eval_flags(p)
    p.add_argument("--global-kinds", type=_kinds(GLOBAL_KINDS), default=GLOBAL_KINDS,
                   help=f"comma list (default: {','.join(GLOBAL_KINDS)})")
    p.add_argument("--local-kinds", type=_kinds(LOCAL_KINDS), default=LOCAL_KINDS,
                   help=f"comma list (default: {','.join(LOCAL_KINDS)})")
    p.add_argument("--alpha", type=float, default=0.7, help="fusion weight for the cross table (default: %(default)s)")

    p = sub.add_parser("ablate-fusion", help="manual vs adaptive fusion, normalization on/off")
    _add_eval_flags(p)
    p.add_argument("--mode", choices=("manual", "adaptive"), default="manual", help="fusion mode (default: %(default)s)")
    p.add_argument("--normalize", type=_on_off, default=True, help="on|off branch normalization (default: on)")
    p.add_argument("--alpha", type=float, default=0.7, help="manual fusion weight (default: %(default)s)")
    p.add_argument("--fusion-episodes", type=int, default=100,
                   help="training episodes for adaptive weights (default: %(default)s)")
    p.add_argument("--fusion-lr", type=float, default=1e-2, help="adaptive weight learning rate (default: %(default)s)")

    p = sub.add_parser("export-attention", help="dump per-layer attention maps for one image")
    p.add_argument("--ckpt", required=True, help="checkpoint (.stnt)")
    p.add_argument("--image", required=True, help="tensor-container file holding one H x W x C image")
    p.add_argument("--out", required=True, help="output tensor-container path")
    return parser


# Subcommands.


def cmd_gen_synthetic(args):
    ds = gen_synthetic(args.classes, args.per_class, args.seed)
    ds.meta["cli"] = {"classes": args.classes, "per_class": args.per_class, "seed": args.seed}
    path = save_dataset(ds, args.out)
    log.info("wrote %d images to %s", len(ds.images), path)


def cmd_train(args):
    run = _read_config(args.config) if args.config else RunConfig()
    changes = {}
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("episodes_per_epoch", "episodes_per_epoch"),
                      ("share_params", "share_params")):
        if getattr(args, flag) is not None:
            changes[key] = getattr(args, flag)
    run = RunConfig.from_dict({**run.to_dict(), **changes})
    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)

    def progress(epoch, tlog):
        row = tlog.epochs[-1]
        log.info("epoch %d/%d val fused %.4f", epoch, run.epochs, row["val_fused"])

    gp, lp, tlog = meta_train(run, dataset, replay_path=os.path.join(args.out, "replay_episode.stnt"),
                              progress=progress)
    extra = {"best_epoch": tlog.best_epoch}
    save_checkpoint(os.path.join(args.out, "global.stnt"), gp, run, "global", extra)
    save_checkpoint(os.path.join(args.out, "local.stnt"), lp, run, "local", extra)
    tlog.write(os.path.join(args.out, "train_steps.csv"), os.path.join(args.out, "train_epochs.csv"))
    _write_json(os.path.join(args.out, "run.json"), {"run_config": run.to_dict(), "best_epoch": tlog.best_epoch})


def _read_config(path):
    try:
        return load_run_config(path)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, InvalidConfig):
            raise
        raise InvalidConfig(f"config {path} is not a valid run-config JSON object: {exc}") from exc


def _eval_context(args):
    gp, g_run = load_checkpoint(args.ckpt_global)
    lp, l_run = load_checkpoint(args.ckpt_local)
    if g_run.encoder != l_run.encoder:
        raise FormatError("the two checkpoints use different encoder configs")
    run = RunConfig.from_dict({**g_run.to_dict(), "n_way": args.n, "k_shot": args.k, "t_query": args.t,
                               "seed": args.seed})
    if args.tasks < 1:
        raise InvalidConfig("--tasks must be >= 1")
    dataset = load_dataset(args.data).subset(args.split)
    return gp, lp, run, dataset


def _report_files(out, stem, report, run, extra=None):
    os.makedirs(out, exist_ok=True)
    summary = report.summary()
    summary["config"] = {**summary["config"], "run_config": run.to_dict(), **(extra or {})}
    _write_json(os.path.join(out, f"{stem}.json"), summary)
    _write_csv(os.path.join(out, f"{stem}.csv"), ("task_id", "n_way", "k_shot", "accuracy"),
               report.csv_rows(run.n_way, run.k_shot))
    print(f"{stem}: mean {report.mean:.4f} ci95 {report.ci95:.4f} over {len(report.task_accuracies)} tasks")


def _cli_echo(args):
    return {"cli": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}}


def cmd_eval(args):
    gp, lp, run, ds = _eval_context(args)
    fusion = FusionConfig(alpha=args.alpha, normalize=args.normalize)
    report = evaluate(gp, lp, ds, run, tasks=args.tasks, seed=args.seed, fusion=fusion)
    _report_files(args.out, "eval", report, run, _cli_echo(args))


def cmd_sweep_alpha(args):
    gp, lp, run, ds = _eval_context(args)
    for a in args.grid:
        FusionConfig(alpha=a)
    results = sweep_alpha(gp, lp, ds, run, args.grid, tasks=args.tasks, seed=args.seed, normalize=args.normalize)
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "sweep.csv"), ("alpha", "mean", "ci95", "tasks"),
               [(a, r.mean, r.ci95, len(r.task_accuracies)) for a, r in results])
    _write_json(os.path.join(args.out, "sweep.json"), {
        "config": {**_cli_echo(args), "run_config": run.to_dict()},
        "results": [{"alpha": a, **r.summary(), "task_accuracies": r.task_accuracies} for a, r in results],
    })
    for a, r in results:
        print(f"alpha {a:.2f}: mean {r.mean:.4f} ci95 {r.ci95:.4f}")


def cmd_ablate_metrics(args):
    gp, lp, run, ds = _eval_context(args)
    run = run.with_fusion(alpha=args.alpha)
    rows = ablate_metrics(gp, lp, ds, run, args.global_kinds, args.local_kinds, tasks=args.tasks, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    _write_csv(os.path.join(args.out, "ablate_metrics.csv"), ("global_kind", "local_kind", "mean", "ci95"),
               [(r["global_kind"], r["local_kind"], r["report"].mean, r["report"].ci95) for r in rows])
    _write_json(os.path.join(args.out, "ablate_metrics.json"), {
        "config": {**_cli_echo(args), "run_config": run.to_dict()},
        "rows": [{"global_kind": r["global_kind"], "local_kind": r["local_kind"], "mean": r["report"].mean,
                  "ci95": r["report"].ci95} for r in rows],
    })
    for r in rows:
        name = "+".join(k for k in (r["global_kind"], r["local_kind"]) if k)
        print(f"{name}: mean {r['report'].mean:.4f} ci95 {r['report'].ci95:.4f}")


def cmd_ablate_fusion(args):
    gp, lp, run, ds = _eval_context(args)
    extra = _cli_echo(args)
    adaptive = None
    if args.mode == "adaptive":
        train = load_dataset(args.data).subset("train")
        adaptive = train_adaptive_fusion(gp, lp, train, run, episodes=args.fusion_episodes, lr=args.fusion_lr,
                                         seed=args.seed, normalize=args.normalize)
        extra["adaptive_params"] = adaptive.to_dict()
    fusion = FusionConfig(alpha=args.alpha, normalize=args.normalize, mode=args.mode)
    report = evaluate(gp, lp, ds, run, tasks=args.tasks, seed=args.seed, fusion=fusion, adaptive=adaptive)
    _report_files(args.out, "ablate_fusion", report, run, extra)


def cmd_export_attention(args):
    params, run = load_checkpoint(args.ckpt)
    tensors = load_tensors(args.image)
    if len(tensors) != 1:
        raise FormatError(f"{args.image} holds {len(tensors)} tensors, expected one image")
    (image,) = tensors.values()
    cfg = run.encoder
    if image.shape != (cfg.image_size, cfg.image_size, cfg.channels):
        raise FormatError(
            f"image shape {image.shape} does not match encoder input {(cfg.image_size, cfg.image_size, cfg.channels)}"
        )
    emb, attention = encode(params, image, cfg)
    out = {f"layer_{i}": a for i, a in enumerate(attention)}
    out["global"] = emb.global_
    out["local"] = emb.local
    save_tensors(args.out, out)
    print(f"wrote {len(attention)} attention layers of shape {attention[0].shape if attention else ()} to {args.out}")


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-alpha": cmd_sweep_alpha,
    "ablate-metrics": cmd_ablate_metrics,
    "ablate-fusion": cmd_ablate_fusion,
    "export-attention": cmd_export_attention,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (InvalidConfig, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except (DataError, STNError, np.linalg.LinAlgError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
