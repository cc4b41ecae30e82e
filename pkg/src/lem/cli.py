"""Command-line entry point: ``lem <subcommand> --config run.json [--set key=value] [--seed N]``.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig

logger = logging.getLogger("lem")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def build_parser():
    common = Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.learning_rate=1e-3")
    common.add_argument("--seed", type=int, help="seed for synthesis, training and gradient checks")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = Parser(prog="lem", description="Large execution model: data, training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    sub.add_parser("synth", parents=[common], help="generate synthetic candles")
    sub.add_parser("prepare", parents=[common], help="build feature windows and date splits")
    sub.add_parser("train", parents=[common], help="fit the model")
    sub.add_parser("evaluate", parents=[common], help="hard-decision evaluation on the test split")
    sub.add_parser("report", parents=[common], help="write report CSVs from an evaluation")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check on a tiny model")
    return parser


def limit_threads():
    n = os.environ.get("LEM_NUM_THREADS")
    if n:
        import torch

        torch.set_num_threads(max(1, int(n)))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg):
    from .data import synth_market, write_candles

    s = cfg.raw["synth"]
    series = synth_market(s["seed"], s["n_bars"], s["regime"], s["frequency_minutes"], s["asset_id"],
                          volatility=s["volatility"], price0=s["price0"])
    out = cfg.path("candles")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_candles(series, out)
    print(f"wrote {len(series)} bars to {out}")


def _date_splits(timestamps, split):
    if split["val_date"] is not None and split["test_date"] is not None:
        return split["val_date"], split["test_date"]
    ts = np.sort(np.asarray(timestamps))
    n = len(ts)
    if n < 3:
        raise ValueError("too few windows to split")
    val_at = int(n * (1 - split["val_fraction"] - split["test_fraction"]))
    test_at = int(n * (1 - split["test_fraction"]))
    return int(ts[val_at]), int(ts[test_at])


def cmd_prepare(cfg):
    from .data import DatasetManifest, build_features, load_candles, prepare_dataset, split_dataset

    stride = int(cfg.raw["data"]["stride"])
    manifest = cfg.raw["data"]["manifest"]
    if manifest:
        m = DatasetManifest.load(cfg.base_dir / manifest if not Path(manifest).is_absolute() else manifest)
        parts, warnings = prepare_dataset(m, cfg.features, stride)
    else:
        windows = build_features(load_candles(cfg.path("candles")), cfg.features, stride=stride)
        val_date, test_date = _date_splits(windows.start_timestamps, cfg.raw["split"])
        parts, warnings = split_dataset(windows, val_date, test_date)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    arrays = {}
    for name, part in zip(SPLITS, parts):
        arrays.update(part.save(None, prefix=f"{name}_"))
    out = cfg.path("dataset")
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("wb") as fh:
        np.savez(fh, **arrays)
    print(" ".join(f"{n}={len(p)}" for n, p in zip(SPLITS, parts)) + f" windows -> {out}")


def load_splits(path):
    from .data import SampleBatch

    with np.load(path, allow_pickle=False) as data:
        return {name: SampleBatch.from_arrays(data, prefix=f"{name}_") for name in SPLITS}


def cmd_train(cfg):
    import torch

    from .model import LargeExecutionModel
    from .training import train

    splits = load_splits(cfg.path("dataset"))
    torch.manual_seed(cfg.train.seed)
    model = LargeExecutionModel(cfg.model_config())
    report = train(model, splits["train"], splits["val"], cfg.train, cfg.path("checkpoint"), cfg.path("train_log"),
                   progress=lambda r: print(f"epoch {r['epoch']}: train {r['train_loss']:.6f} "
                                            f"val {r['val_loss']:.6f} lr {r['lr']:.3g}"))
    report.to_json(cfg.path("train_report"))
    print(f"best epoch {report.best_epoch} val {report.best_val_loss:.6f} -> {report.checkpoint}")


def cmd_evaluate(cfg):
    from .evaluation import ShapeMismatchError, check_compatible, evaluate
    from .model import load_checkpoint

    splits = load_splits(cfg.path("dataset"))
    model, _ = load_checkpoint(cfg.path("checkpoint"))
    want = cfg.model_config()
    names = ("lookback", "horizon", "num_features")
    diff = [f"{n}: checkpoint {getattr(model.cfg, n)} vs config {getattr(want, n)}"
            for n in names if getattr(model.cfg, n) != getattr(want, n)]
    if diff:
        raise ShapeMismatchError("checkpoint/config shape mismatch (" + "; ".join(diff) + ")")
    check_compatible(model, splits["test"])
    e = cfg.raw["eval"]
    result = evaluate(model, splits["test"], e["eps_complete"], e["batch_size"])
    out = cfg.path("evaluation")
    result.save(out)
    print(f"evaluated {result.slippage.shape[0]} windows -> {out}")


def cmd_report(cfg):
    from .evaluation import EvaluationResult, build_curves, build_report, emit_reports

    result = EvaluationResult.load(cfg.path("evaluation"))
    report = build_report(result)
    paths = emit_reports(report, build_curves(result), cfg.path("reports"))
    for r in report.rows:
        if r["strategy"] == "VWAP-vol":
            print(f"{r['order_type']:24s} {r['min_period']:>5s} mean {r['mean_bps']:9.3f} std {r['std_bps']:9.3f}")
    print(f"wrote {len(paths)} files to {cfg.path('reports')}")


def cmd_gradcheck(cfg):
    import torch

    from .decision import DecisionConfig
    from .encoder import EncoderConfig
    from .model import LargeExecutionModel, ModelConfig
    from .training import grad_check

    g = cfg.raw["gradcheck"]
    torch.manual_seed(g["seed"])
    mcfg = ModelConfig(g["lookback"], g["num_features"],
                       EncoderConfig(hidden_size=g["hidden_size"], num_heads=g["num_heads"]),
                       DecisionConfig(horizon=g["horizon"]))
    model = LargeExecutionModel(mcfg).double()
    gen = torch.Generator().manual_seed(g["seed"])
    B, N = g["batch_size"], g["horizon"]
    x = torch.randn(B, mcfg.total_steps, g["num_features"], generator=gen, dtype=torch.float64)
    p = torch.exp(0.05 * torch.randn(B, N, generator=gen, dtype=torch.float64).cumsum(1))
    v = torch.rand(B, N, generator=gen, dtype=torch.float64) + 0.5
    report = grad_check(model, (x, p, v), g["tolerance"], g["fraction"], g["step"], g["seed"])
    print(report.summary())
    if not report.passed:
        print(f"gradient check failed: {', '.join(report.failing)}", file=sys.stderr)
        return 2
    print("gradient check passed")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError:
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    limit_threads()
    try:
        cfg = RunConfig.load(args.config, args.overrides, args.seed)
        code = COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"lem {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: numerical blow-up, I/O, ...
        print(f"lem {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return code if isinstance(code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
