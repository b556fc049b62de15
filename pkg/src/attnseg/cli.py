"""Batch command-line pipeline.

Subcommands: train, eval, ablate, stats, overlay, synth, params, gradcheck.
Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 numerical abort,
each with a one-line machine-parsable reason on stderr. Every run echoes its
resolved parameters into ``run_config.json`` in the output directory; outputs
carry no timestamps, so identical inputs and seeds reproduce byte-identical
results.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from attnseg.data import (
    ManifestError,
    build_manifest,
    load_dataset,
    save_dataset,
    save_overlay,
    synth_dataset,
)
from attnseg.gradcheck import BLOCK_NAMES, run_block_gradchecks
from attnseg.metrics import (
    confusion_counts,
    compute_metrics,
    write_metrics_csv,
    write_metrics_summary,
)
from attnseg.model import ModelConfig, SegmentationModel, build_model
from attnseg.nn import ConfigError
from attnseg.stats import (
    UnsupportedMethodCountError,
    friedman_test,
    load_score_csv,
    nemenyi_posthoc,
    write_stats_report,
)
from attnseg.tensor import ShapeError, TapeConsumedError
from attnseg.trainer import (
    ABLATION_STEPS,
    NumericalAbort,
    TrainConfig,
    ablation_run,
    evaluate,
    train,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


def _model_args(sub):
    sub.add_argument("--preset", choices=("full", "tiny"), default="tiny")
    sub.add_argument("--no-tam", action="store_true", help="disable the attention bottleneck")
    sub.add_argument("--no-sfeb", action="store_true", help="disable skip enhancement blocks")
    sub.add_argument("--no-convblock", action="store_true", help="single conv per decoder stage")
    sub.add_argument("--threshold", type=float, default=0.5, help="mask binarization threshold")


def _run_args(sub, out_required=True):
    sub.add_argument("--config", default=None, help="JSON file of option overrides")
    sub.add_argument("--out", required=out_required, help="output directory")
    sub.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnseg", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset root (image/_mask PNG layout)")
    _run_args(p)
    _model_args(p)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--input-size", type=int, default=None)

    p = subs.add_parser("eval", help="score predictions (or a checkpoint) against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", default=None, help="directory of predicted mask PNGs named <id>.png")
    p.add_argument("--checkpoint", default=None, help="model checkpoint to run instead of --pred")
    p.add_argument("--model-config", default=None, help="config JSON saved beside the checkpoint")
    _run_args(p)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--input-size", type=int, default=None)

    p = subs.add_parser("ablate", help="train the four stacked ablation configurations")
    p.add_argument("--data", required=True)
    _run_args(p)
    _model_args(p)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--input-size", type=int, default=None)

    p = subs.add_parser("stats", help="Friedman + Nemenyi report from a score matrix CSV")
    p.add_argument("--scores", required=True, help="CSV: header = method names, one row per image")
    _run_args(p)

    p = subs.add_parser("overlay", help="write color-coded prediction overlays")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    _run_args(p)
    p.add_argument("--input-size", type=int, default=256)

    p = subs.add_parser("synth", help="write a synthetic dataset to disk")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    _run_args(p)

    p = subs.add_parser("params", help="parameter-count breakdown of a configuration")
    _model_args(p)
    _run_args(p, out_required=False)
    p.add_argument("--input-size", type=int, default=None)

    p = subs.add_parser("gradcheck", help="finite-difference report for every block")
    _run_args(p, out_required=False)
    p.add_argument("--preset", choices=("tiny",), default="tiny")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--blocks", default=None,
                   help=f"comma-separated subset of {','.join(BLOCK_NAMES)}")
    return parser


def _apply_config_file(args) -> None:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            overrides = json.load(fh)
        for key, value in overrides.items():
            if not hasattr(args, key):
                raise ConfigError(f"unknown config key '{key}'")
            setattr(args, key, value)


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        preset=args.preset,
        input_size=getattr(args, "input_size", None),
        use_convblock=not args.no_convblock,
        use_sfeb=not args.no_sfeb,
        use_tam=not args.no_tam,
        threshold=args.threshold,
        seed=args.seed,
    )


def _echo_run_config(args, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_samples(args):
    size = getattr(args, "input_size", None)
    if size is None:
        size = 64 if getattr(args, "preset", "tiny") == "tiny" else 256
    return load_dataset(args.data, target_size=size)


def cmd_train(args) -> int:
    cfg = _model_config(args)
    samples = _load_samples(args)
    model = build_model(cfg)
    tcfg = TrainConfig(batch_size=args.batch, lr=args.lr, max_epochs=args.epochs, seed=args.seed)
    _echo_run_config(args, args.out)
    state = train(model, samples, tcfg, out_dir=args.out)
    print(f"trained {len(state.history)} epochs; best val loss {state.best_val_loss!r} "
          f"at epoch {state.best_epoch}")
    print(f"history: {os.path.join(args.out, 'history.csv')}")
    return EXIT_OK


def _pairs_from_pred_dir(samples, pred_dir, threshold):
    pairs = []
    for s in samples:
        path = os.path.join(pred_dir, f"{s.id}.png")
        if not os.path.exists(path):
            raise ManifestError(f"missing prediction for '{s.id}': {path}")
        from attnseg.data import _read_gray

        pm = _read_gray(path)
        if pm.shape != s.mask.shape[1:]:
            from attnseg.data import resize

            pm = resize(pm, *s.mask.shape[1:], mode="nearest")
        pairs.append((s, (pm > threshold).astype(np.float64)))
    return pairs


def cmd_eval(args) -> int:
    if (args.pred is None) == (args.checkpoint is None):
        raise ConfigError("eval needs exactly one of --pred or --checkpoint")
    samples = _load_samples(args)
    _echo_run_config(args, args.out)
    if args.checkpoint:
        config_path = args.model_config or os.path.join(
            os.path.dirname(args.checkpoint), "best_config.json"
        )
        model = SegmentationModel.load(args.checkpoint, config_path)
        from attnseg.trainer import to_batch
        from attnseg.tensor import no_grad

        pairs = []
        model.eval()
        with no_grad():
            for start in range(0, len(samples), 10):
                chunk = samples[start : start + 10]
                x, _ = to_batch(chunk, model.in_channels)
                probs = model(x).data
                for i, s in enumerate(chunk):
                    pairs.append((s, (probs[i] >= args.threshold).astype(np.float64)))
    else:
        pairs = _pairs_from_pred_dir(samples, args.pred, args.threshold)
    rows, counts, reports = [], [], []
    for s, pred in pairs:
        c = confusion_counts(pred.reshape(s.mask.shape[1:]), s.mask[0])
        counts.append(c)
        report = compute_metrics(c)
        reports.append(report)
        rows.append((s.id, report))
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), rows)
    payload = write_metrics_summary(os.path.join(args.out, "summary.json"), reports, counts)
    print(json.dumps(payload["per_image_mean"], sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from attnseg.data import fixed_test_split

    cfg = _model_config(args)
    samples = _load_samples(args)
    n_test = max(1, int(len(samples) * args.test_fraction))
    train_set, test_set = fixed_test_split(samples, (len(samples) - n_test, n_test), args.seed)
    tcfg = TrainConfig(batch_size=args.batch, lr=args.lr, max_epochs=args.epochs, seed=args.seed)
    _echo_run_config(args, args.out)
    rows = ablation_run(train_set, test_set, cfg, tcfg, out_dir=args.out)
    for row in rows:
        print(f"{row['config']:22s} params {row['param_count']:9d} dice {row['dice']:.4f}")
    return EXIT_OK


def cmd_stats(args) -> int:
    methods, matrix = load_score_csv(args.scores)
    fr = friedman_test(matrix)
    ph = nemenyi_posthoc(matrix, methods)
    _echo_run_config(args, args.out)
    write_stats_report(
        os.path.join(args.out, "stats.json"),
        os.path.join(args.out, "pairwise.csv"),
        methods, fr, ph,
    )
    print(f"friedman chi2 {fr.chi2!r} p {fr.p_value!r}")
    return EXIT_OK


def cmd_overlay(args) -> int:
    samples = load_dataset(args.data, target_size=args.input_size)
    pairs = _pairs_from_pred_dir(samples, args.pred, 0.5)
    _echo_run_config(args, args.out)
    for s, pred in pairs:
        save_overlay(
            os.path.join(args.out, f"{s.id}_overlay.png"),
            pred.reshape(s.mask.shape[1:]), s.mask[0], s.image[0],
        )
    print(f"wrote {len(pairs)} overlays to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    samples = synth_dataset(args.n, size=args.size, seed=args.seed)
    _echo_run_config(args, args.out)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _model_config(args)
    model = build_model(cfg)
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + p.size
    breakdown = {
        "config": asdict(cfg),
        "total": model.param_count(),
        "components": dict(sorted(groups.items())),
    }
    if args.out:
        _echo_run_config(args, args.out)
        with open(os.path.join(args.out, "params.json"), "w") as fh:
            json.dump(breakdown, fh, indent=2, sort_keys=True)
            fh.write("\n")
    for comp, count in sorted(groups.items()):
        print(f"{comp:12s} {count:10d}")
    print(f"{'total':12s} {breakdown['total']:10d}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    blocks = args.blocks.split(",") if args.blocks else None
    checks = run_block_gradchecks(seed=args.seed, eps=args.eps, blocks=blocks)
    rows = []
    failed = False
    for check in checks:
        r = check.result
        rows.append((check.block, r.max_rel_error, r.coords_checked, len(r.skipped)))
        print(f"{check.block:14s} max_rel_error {r.max_rel_error:.3e} "
              f"coords {r.coords_checked:5d} kinks_skipped {len(r.skipped)} "
              f"{'PASS' if check.passed else 'FAIL'}")
        failed = failed or not check.passed
    if args.out:
        _echo_run_config(args, args.out)
        with open(os.path.join(args.out, "gradcheck.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("block", "max_rel_error", "coords_checked", "kinks_skipped"))
            for block, err, coords, skipped in rows:
                writer.writerow((block, repr(err), coords, skipped))
    if failed:
        raise NumericalAbort("gradient check exceeded 1e-4")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "stats": cmd_stats,
    "overlay": cmd_overlay,
    "synth": cmd_synth,
    "params": cmd_params,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    try:
        _apply_config_file(args)
        return COMMANDS[args.command](args)
    except (ConfigError, ShapeError, TapeConsumedError, UnsupportedMethodCountError,
            ValueError) as exc:
        if isinstance(exc, ManifestError):
            print(f"error: io: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, FloatingPointError) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
