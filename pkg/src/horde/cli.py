"""``horde`` command line: train, eval, probe, verify-bounds, sketch-selftest, ablation.

Exit status: 0 on success, 1 when a checked property fails (verify-bounds,
sketch-selftest), 2 on usage, configuration or input errors, 3 on divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


def _ks(text: str) -> list[int]:
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad K list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be positive")
    return ks


def _emit(obj: dict, out: str | None):
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def _config(args):
    from .config import default_config, load_config

    return load_config(args.config) if args.config else default_config()


def _ckpt(args, cfg) -> Path:
    from .train import CHECKPOINT_DIR

    return Path(args.ckpt) if args.ckpt else Path(cfg.output_dir) / CHECKPOINT_DIR


def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args)
    res = train(cfg, output_dir=args.out)
    _emit({"output_dir": str(res.output_dir), "steps": res.steps, "last_loss": res.last_loss,
           "config": cfg.to_dict()}, None)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import eval_report

    cfg = _config(args)
    _emit(eval_report(cfg, _ckpt(args, cfg), args.mode, args.k), args.out)
    return EXIT_OK


def cmd_probe(args) -> int:
    from .evaluation import export_pca2d
    from .model import load_checkpoint
    from .train import load_datasets, probe_report

    cfg = _config(args)
    seed = cfg.eval.probe_seed if args.seed is None else args.seed
    rho = cfg.eval.rho if args.rho is None else args.rho
    test = load_datasets(cfg)[1]
    ckpt = _ckpt(args, cfg)
    report = probe_report(cfg, ckpt, rho, seed, args.k, test_set=test)
    if args.export_csv:
        model, _ = load_checkpoint(ckpt, expected=cfg.model)
        report["export_rows"] = export_pca2d(args.export_csv, model, test)
    _emit(report, args.out)
    return EXIT_OK


def cmd_verify_bounds(args) -> int:
    from .oracle import BoundReport, bound_report

    if args.check_report:
        report = BoundReport.from_dict(json.loads(Path(args.check_report).read_text())).recheck()
    else:
        if not (args.I and args.J):
            raise ValueError("give I.csv and J.csv, or --check-report")
        from .data import read_samples_csv

        I, J = read_samples_csv(args.I), read_samples_csv(args.J)
        if I.shape[1] != J.shape[1]:
            raise ValueError(f"sample dimensions differ: {I.shape[1]} vs {J.shape[1]}")
        report = bound_report(I, J, args.gamma, args.p)
        # verdicts come from the numbers, never from stored flags
        report.recheck()
    _emit(report.to_dict(), args.out)
    return EXIT_OK if report.all_ok else EXIT_FAIL


def cmd_sketch_selftest(args) -> int:
    from .selftest import run_selftest

    rep = run_selftest(args.c, args.d, args.K, args.trials, args.seed)
    _emit(rep, args.out)
    return EXIT_OK if rep["ok"] else EXIT_FAIL


def cmd_ablation(args) -> int:
    from .train import ablation

    cfg = _config(args)
    out = args.out or cfg.output_dir
    rep = ablation(cfg, output_dir=out)
    _emit(rep, None)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="horde", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Recall@K of a checkpoint on the test split")
    p.add_argument("-c", "--config")
    p.add_argument("--ckpt")
    p.add_argument("--mode", choices=("plain", "concat-pca"), default="plain")
    p.add_argument("--k", type=_ks, default=[1, 2, 4, 8])
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="spatial subsampling robustness probe")
    p.add_argument("-c", "--config")
    p.add_argument("--ckpt")
    p.add_argument("--rho", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=_ks, default=[1, 2, 4, 8])
    p.add_argument("--export-csv", help="write 2-D PCA coordinates of features and means")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("verify-bounds", help="check the moment bounds on two sample CSVs")
    p.add_argument("I", nargs="?")
    p.add_argument("J", nargs="?")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--check-report", help="re-verify a saved report JSON instead")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("sketch-selftest", help="Monte-Carlo checks of the sketch estimator")
    p.add_argument("--c", type=int, default=8)
    p.add_argument("--d", type=int, default=1024)
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sketch_selftest)

    p = sub.add_parser("ablation", help="(k, n) grid over the three stack modes")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablation)
    return ap


def main(argv=None) -> int:
    from .train import DivergenceError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"horde: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError) as exc:
        print(f"horde {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
