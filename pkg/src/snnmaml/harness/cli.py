"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from ..errors import ConfigError, FormatError, NumericalError, StructuralError
from ..eventdata import save_synthetic
from . import experiments as ex
from .config import RunConfig, load_config, with_overrides
from .metrics import write_metrics

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--trials", type=int, help="override the number of evaluation trials")
    common.add_argument("--precision", choices=("f32", "f64"), help="float precision")
    common.add_argument("--mode", choices=("maml", "fomaml"), help="second- or first-order meta-gradient")
    common.add_argument("--force", action="store_true", help="load a checkpoint despite a config hash mismatch")
    ckpt = argparse.ArgumentParser(add_help=False)
    ckpt.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.smck)")

    p = argparse.ArgumentParser(prog="snnmaml", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-synth", parents=[common], help="write the synthetic classes as an EVS1 directory tree")
    sub.add_parser("meta-train", parents=[common], help="meta-train an initialisation")
    sub.add_parser("meta-eval", parents=[common, ckpt], help="few-shot accuracy of a checkpoint")
    s = sub.add_parser("sweep-steps", parents=[common, ckpt], help="accuracy versus inner steps")
    s.add_argument("--steps", type=int, nargs="+", help="inner step counts (default from config)")
    sub.add_parser("freeze-layers", parents=[common, ckpt], help="accuracy with layers frozen during adaptation")
    sub.add_parser("update-stats", parents=[common, ckpt], help="update-magnitude statistics")
    sub.add_parser("transfer-baseline", parents=[common, ckpt], help="readout-only transfer learner")
    sub.add_parser("print-config", parents=[common], help="print the effective configuration")
    return p


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    top, sections = {}, {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out is not None:
        top["out"] = args.out
    if args.precision is not None:
        top["precision"] = args.precision
    if args.trials is not None:
        sections["eval"] = {"trials": args.trials}
    if args.mode is not None:
        sections["meta"] = {"mode": "second-order" if args.mode == "maml" else "first-order"}
    return with_overrides(cfg, **top, **sections)


def _checkpoint(args, cfg: RunConfig):
    path = args.checkpoint or os.path.join(cfg.out, "checkpoint.smck")
    return ex.load_params(cfg, path, args.force)


def _print_records(records) -> None:
    for rec in records:
        print(rec.summary())


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    cfg = _config(args)
    if args.command == "print-config":
        sys.stdout.write(cfg.to_yaml())
        return EXIT_OK
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    start = time.perf_counter()
    if args.command == "gen-synth":
        d = cfg.dataset
        per_class = 2 * d.samples_per_task if d.pairs else d.samples_per_task
        n = save_synthetic(out, d.n_classes, per_class, d.width, d.height, d.duration_ms,
                           d.noise_rate, d.speed, d.data_seed)
        print(f"wrote {n} streams to {out}")
    elif args.command == "meta-train":
        def progress(it, log):
            if it in log.val:
                print(f"iteration {it}: loss {log.losses[-1]:.4f}, val accuracy {log.val[it]:.4f}", flush=True)
        result = ex.run_meta_train(cfg, out, progress)
        print(f"checkpoint written to {os.path.join(out, 'checkpoint.smck')}")
        if result.log.losses:
            print(f"final loss {result.log.losses[-1]:.4f}")
    elif args.command == "meta-eval":
        params, _ = _checkpoint(args, cfg)
        rec = ex.run_meta_eval(cfg, params)
        write_metrics(os.path.join(out, "eval.csv"), [rec])
        _print_records([rec])
    elif args.command == "sweep-steps":
        params, _ = _checkpoint(args, cfg)
        records = ex.sweep_adaptation_steps(cfg, params, args.steps)
        write_metrics(os.path.join(out, "sweep_steps.csv"), records)
        _print_records(records)
    elif args.command == "freeze-layers":
        params, _ = _checkpoint(args, cfg)
        records = ex.sweep_freeze_layers(cfg, params)
        write_metrics(os.path.join(out, "freeze_layers.csv"), records)
        _print_records(records)
    elif args.command == "update-stats":
        params = adam = None
        if args.checkpoint or os.path.exists(os.path.join(out, "checkpoint.smck")):
            params, adam = _checkpoint(args, cfg)
        study = ex.run_update_stats(cfg, params, adam, out)
        for regime, st in study.stats.items():
            s = st.layer("out")
            print(f"{regime}: output layer mean |dw| {s.avg:.3g}, max {s.max:.3g}, nonzero {s.nonzero}/{s.total}")
        print(f"inner / non-meta mean ratio {study.ratio():.3g}")
        _print_records(study.records)
    elif args.command == "transfer-baseline":
        result = ex.run_transfer_baseline(cfg, out)
        print(f"pre-training accuracy {result.pretrain_accuracy:.3f} after {result.pretrain_iterations} iterations")
        _print_records(result.records)
        if args.checkpoint or os.path.exists(os.path.join(out, "checkpoint.smck")):
            params, _ = _checkpoint(args, cfg)
            target = ex.run_meta_eval(cfg, params).mean
            shots = result.shots_to_reach(target)
            print(f"MAML 1-shot accuracy {target:.4f}; transfer learner reaches it at "
                  f"{shots if shots is not None else f'> {cfg.experiment.max_shots}'} shots")
    print(f"{args.command} finished in {time.perf_counter() - start:.1f} s", file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ConfigError, StructuralError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
