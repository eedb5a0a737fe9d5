"""Command-line front end: ``pkde {synth,label,train,tune,eval,report}``.

Global flags (``--seed``, ``--out``, ``--threads``, ``--config``,
``--verbose``) are accepted before or after the subcommand. A JSON config
file supplies defaults for any option; explicit flags win. Exit codes:
1 usage, 2 data, 3 numerical.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    AssemblyError,
    InvalidParameterError,
    ProcessParams,
    SplitAssignment,
    SplitError,
    dump_json,
    energy_density,
    load_dataset,
    load_layer_image,
    read_manifest,
    save_layer_image,
    split_dataset,
)
from .tensorio import TensorFormatError

log = logging.getLogger("pkde")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_options(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="random seed")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--threads", type=int, default=d, help="BLAS threads (default: $PKDE_THREADS or all cores)")
    p.add_argument("--config", default=d, help="JSON file with option defaults")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pkde", description=__doc__.splitlines()[0])
    _global_options(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"pkde {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def command(name, help_):
        sp = sub.add_parser(name, help=help_)
        _global_options(sp, suppress=True)
        return sp

    s = command("synth", "generate a synthetic build (images, volumes, manifest)")
    s.add_argument("--plan", help="JSON plan file (default: the ten-part reference build plan)")
    s.add_argument("--layers", type=int, help="layers per part (default 712)")
    s.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"), help="image size (default 64 64)")
    s.add_argument("--pore-rate", type=float, help="expected pores per layer at nominal energy")
    s.add_argument("--hr-signature", type=float)
    s.add_argument("--ot-signature", type=float)

    s = command("label", "detect pores in the volumes and write PP labels")
    s.add_argument("manifest")
    s.add_argument("--bandwidth", type=float, help="KDE bandwidth in pixels (default 20)")
    s.add_argument("--truncation", type=float, help="KDE truncation radius in pixels (default 6 x bandwidth)")
    s.add_argument("--threshold", type=float, help="void intensity threshold (default 11500)")
    s.add_argument("--min-diameter", type=float, help="minimum pore diameter in micrometres (default 10)")

    def model_opts(sp):
        sp.add_argument("manifest")
        sp.add_argument("--depth", type=int)
        sp.add_argument("--width", type=int, help="channels at the first level")
        sp.add_argument("--skip", choices=("concat", "add"))
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--split", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
        sp.add_argument("--splits", help="existing splits.json to reuse")

    s = command("train", "train a network on a labelled manifest")
    model_opts(s)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--init", help="weights directory to resume from")

    s = command("tune", "hyperparameter search over learning rate and batch size")
    model_opts(s)
    s.add_argument("--trials", type=int)
    s.add_argument("--mode", choices=("bayes", "random"))
    s.add_argument("--parallel", type=int, help="concurrent trials (constant liar)")

    s = command("eval", "predict and score layers")
    s.add_argument("manifest")
    s.add_argument("--weights", help="weights directory (default: <out>/weights)")
    s.add_argument("--splits", help="splits.json (default: next to the weights)")
    s.add_argument("--subset", choices=("train", "validation", "test", "all"))

    s = command("report", "box-plot statistics and failure flags from eval output")
    s.add_argument("manifest")
    s.add_argument("--scores", help="scores.csv from eval (default: <out>/scores.csv)")
    s.add_argument("--predictions", help="prediction directory (default: <out>/predictions)")
    s.add_argument("--threshold", type=float, help="MAE failure threshold (default 0.05)")
    s.add_argument("--format", choices=("json", "csv", "both"))
    return parser


DEFAULTS = {
    "layers": 712,
    "image_size": [64, 64],
    "bandwidth": 20.0,
    "threshold": None,
    "min_diameter": 10.0,
    "depth": 2,
    "width": 8,
    "skip": "concat",
    "epochs": 60,
    "split": [0.6, 0.2, 0.2],
    "lr": 1e-3,
    "batch": 16,
    "trials": 50,
    "mode": "bayes",
    "parallel": 1,
    "subset": "test",
    "format": "both",
}


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Merge config file values under explicit flags, then fill defaults."""
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
    for k, v in cfg.items():
        k = k.replace("-", "_")
        if getattr(args, k, None) is None:
            setattr(args, k, v)
    for k, v in DEFAULTS.items():
        if getattr(args, k, None) is None and hasattr(args, k):
            setattr(args, k, v)
    if args.threads is None:
        env = os.environ.get("PKDE_THREADS")
        if env:
            try:
                args.threads = int(env)
            except ValueError as exc:
                raise UsageError(f"PKDE_THREADS must be an integer, got {env!r}") from exc
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"{args.command} requires --{n.replace('_', '-')}")


def _out(args, fallback=None) -> Path:
    out = args.out or fallback
    if out is None:
        raise UsageError(f"{args.command} requires --out")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"manifest not found: {p}")
    return p


def _model_config(args):
    from .nn import ModelConfig

    return ModelConfig(depth=args.depth, base_width=args.width, skip_mode=args.skip)


def _splits(args, dataset, out: Path) -> SplitAssignment:
    if args.splits:
        s = SplitAssignment.from_dict(json.loads(Path(args.splits).read_text(encoding="utf-8")))
        unknown = (s.train | s.validation | s.test) - set(dataset.keys)
        if unknown:
            raise SplitError(f"splits reference layers absent from the dataset: {sorted(unknown)[:5]}")
    else:
        s = split_dataset(dataset, tuple(args.split), args.seed)
    dump_json(s.to_dict(), out / "splits.json")
    return s


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> dict:
    from .sections import section_ranges
    from .synth import PoreModel, RenderConfig, build_synthetic_dataset, read_plan, table1_plan, write_build

    _need(args, "seed")
    out = _out(args)
    plan = read_plan(args.plan) if args.plan else table1_plan()
    if any(e.geometry.kind == "complex" for e in plan):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            section_ranges(args.layers)
        for w in caught:
            log.warning("%s", w.message)
    model = PoreModel(seed=args.seed) if args.pore_rate is None else PoreModel(base_rate=args.pore_rate, seed=args.seed)
    rc = RenderConfig()
    if args.hr_signature is not None or args.ot_signature is not None:
        rc = RenderConfig(
            hr_signature=rc.hr_signature if args.hr_signature is None else args.hr_signature,
            ot_signature=rc.ot_signature if args.ot_signature is None else args.ot_signature,
        )
    build = build_synthetic_dataset(plan, args.layers, tuple(args.image_size), args.seed, model, rc)
    path = write_build(build, out)
    print(f"T = {build.triplet_count} triplets ({len(build.parts)} parts x {build.n_layers} layers)")
    for p, pb in sorted(build.parts.items()):
        print(f"part {p:2d}: E_v = {energy_density(pb.entry.params) / 1e9:.2f} GJ/m^3 ({pb.entry.geometry.kind})")
    return {"manifest": str(path), "triplets": build.triplet_count}


def cmd_label(args) -> dict:
    from .labeler import KdeConfig
    from .pipeline import DEFAULT_THRESHOLD, label_manifest

    mpath = _manifest(args.manifest)
    out = _out(args, mpath.parent)
    cfg = KdeConfig(args.bandwidth, args.truncation)
    thr = DEFAULT_THRESHOLD if args.threshold is None else args.threshold
    path, dropped = label_manifest(mpath, out, cfg, thr, args.min_diameter)
    for p, n in sorted(dropped.items()):
        log.info("part %d: %d pores outside the crop frame dropped", p, n)
    print(f"labelled manifest: {path}")
    return {"manifest": str(path), "dropped": {str(k): v for k, v in sorted(dropped.items())}}


def cmd_train(args) -> dict:
    from .nn import HyperParams, load_weights, save_weights, train

    _need(args, "seed")
    out = _out(args)
    ds = load_dataset(_manifest(args.manifest))
    splits = _splits(args, ds, out)
    cfg = _model_config(args)
    init = load_weights(args.init) if args.init else None
    if init is not None and init.config != cfg:
        raise UsageError(f"--init weights were trained with {init.config}, not {cfg}")
    hp = HyperParams(args.lr, args.batch, args.epochs)
    weights, report = train(
        ds, splits, cfg, hp, args.seed, init,
        on_epoch=lambda e, tr, va: log.info("epoch %d train %.5f val %.5f", e, tr, va),
    )
    save_weights(weights, out / "weights")
    dump_json(report.to_dict(), out / "train_report.json")
    print(f"best epoch {report.best_epoch}: validation MAE {report.best_val_mae:.5f}")
    return {"wall_time_train": report.wall_time}


def cmd_tune(args) -> dict:
    from .tuner import read_search_log, search_dataset

    _need(args, "seed")
    out = _out(args)
    ds = load_dataset(_manifest(args.manifest))
    splits = _splits(args, ds, out)
    log_path = out / "search.jsonl"
    prior = read_search_log(log_path)
    if prior:
        log.info("resuming search with %d logged trials", len(prior))
    res = search_dataset(
        ds, splits, _model_config(args), n_trials=args.trials, epochs=args.epochs, seed=args.seed,
        mode=args.mode, prior=prior, log_path=log_path, parallel=args.parallel,
    )
    best = res.trials[res.best_index]
    dump_json(
        {
            "best_index": res.best_index,
            "learning_rate": best.hp.learning_rate,
            "batch_size": best.hp.batch_size,
            "epochs": best.hp.epochs,
            "validation_mae": best.validation_mae,
        },
        out / "best.json",
    )
    print(f"best trial {res.best_index}: lr={best.hp.learning_rate:.3g} batch={best.hp.batch_size} val MAE {best.validation_mae:.5f}")
    return {"trials": len(res.trials)}


def cmd_eval(args) -> dict:
    from .evalreport import emit_report, score_layers
    from .nn import load_weights, predict_batch

    out = _out(args)
    ds = load_dataset(_manifest(args.manifest))
    wdir = Path(args.weights) if args.weights else out / "weights"
    if not (wdir / "weights.json").exists():
        raise FileNotFoundError(f"no weights at {wdir}")
    weights = load_weights(wdir)
    if args.subset == "all":
        keys = set(ds.keys)
    else:
        spath = Path(args.splits) if args.splits else wdir.parent / "splits.json"
        if not spath.exists():
            raise FileNotFoundError(f"no splits file at {spath}")
        s = SplitAssignment.from_dict(json.loads(spath.read_text(encoding="utf-8")))
        keys = getattr(s, args.subset)
    triplets = [t for t in ds if t.key in keys]
    if not triplets:
        raise SplitError(f"subset {args.subset!r} is empty")
    preds = predict_batch(weights, weights.config, triplets)
    for p in preds:
        save_layer_image(p.image, out, f"predictions/p{p.part:02d}_l{p.layer:04d}.pkt")
    scores = score_layers(preds, triplets, n_layers=ds.layers_per_part)
    emit_report(scores, {}, [], out, formats=("csv",), params=ds.params, stem="scores")
    mean = float(np.mean([s.mae for s in scores]))
    print(f"{len(scores)} layers scored, mean MAE {mean:.5f}")
    return {"layers": len(scores)}


def cmd_report(args) -> dict:
    from .evalreport import GROUP_KEYS, emit_report, flag_failures, group_stats, read_scores_csv

    out = _out(args)
    mpath = _manifest(args.manifest)
    m = read_manifest(mpath)
    params = {int(k): ProcessParams.from_dict(v) for k, v in m["params"].items()}
    spath = Path(args.scores) if args.scores else out / "scores.csv"
    if not spath.exists():
        raise FileNotFoundError(f"no scores file at {spath}")
    scores = read_scores_csv(spath)
    if not scores:
        raise AssemblyError(f"{spath} holds no scores")
    stats = {}
    for g in GROUP_KEYS:
        try:
            stats[g] = group_stats(scores, g, params)
        except ValueError:
            log.info("no scores to group by %s", g)
    pdir = Path(args.predictions) if args.predictions else out / "predictions"
    preds, labels = {}, {}
    by_key = {(t["part"], t["layer"]): t for t in m["triplets"]}
    for s in scores:
        f = pdir / f"p{s.part:02d}_l{s.layer:04d}.pkt"
        t = by_key.get(s.key)
        if f.exists() and t is not None and t.get("pp"):
            preds[s.key] = load_layer_image(pdir, f.name, "PP")
            labels[s.key] = load_layer_image(mpath.parent, t["pp"], "PP")
    thr = 0.05 if args.threshold is None else args.threshold
    flags = flag_failures(scores, thr, preds, labels)
    formats = ("json", "csv") if args.format == "both" else (args.format,)
    written = emit_report(scores, stats, flags, out, formats=formats, params=params)
    print(f"{len(flags)} of {len(scores)} layers above MAE {thr}; wrote {', '.join(str(p) for p in written)}")
    return {"flags": len(flags)}


COMMANDS = {
    "synth": cmd_synth,
    "label": cmd_label,
    "train": cmd_train,
    "tune": cmd_tune,
    "eval": cmd_eval,
    "report": cmd_report,
}


def _versions() -> dict:
    import scipy

    return {"pkde": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def _write_metadata(args, started, wall, extra, status) -> None:
    out = getattr(args, "out", None)
    if out is None and getattr(args, "manifest", None):
        out = Path(args.manifest).parent
    if out is None or not Path(out).is_dir():
        return
    meta = {
        "command": args.command,
        "argv": sys.argv[1:],
        "seed": args.seed,
        "threads": args.threads,
        "versions": _versions(),
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "wall_time": wall,
        "status": status,
        **extra,
    }
    dump_json(meta, Path(out) / f"run-metadata-{args.command}.json")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = resolve(args)
    except UsageError as exc:
        print(f"pkde: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    from threadpoolctl import threadpool_limits

    from .nn.model import NumericalError
    from .pipeline import ManifestError
    from .synth import PlanError
    from .tuner import SearchFailure

    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    t0 = time.perf_counter()
    status, code, extra = "ok", 0, {}
    try:
        with threadpool_limits(limits=args.threads):
            extra = COMMANDS[args.command](args) or {}
    except UsageError as exc:
        print(f"pkde {args.command}: error: {exc}", file=sys.stderr)
        status, code = "usage error", EXIT_USAGE
    except (NumericalError, SearchFailure, FloatingPointError) as exc:
        print(f"pkde {args.command}: numerical failure: {exc}", file=sys.stderr)
        status, code = "numerical failure", EXIT_NUMERICAL
    except (OSError, ValueError, KeyError, json.JSONDecodeError, TensorFormatError, AssemblyError, SplitError,
            ManifestError, PlanError, InvalidParameterError) as exc:
        print(f"pkde {args.command}: data error: {exc}", file=sys.stderr)
        status, code = "data error", EXIT_DATA
    _write_metadata(args, started, time.perf_counter() - t0, extra, status)
    return code


if __name__ == "__main__":
    sys.exit(main())
