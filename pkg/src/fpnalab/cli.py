"""Command-line interface for the experiment harness and single attacks.

Exit codes: 0 on success, 1 for configuration errors, 2 for runtime errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .attacks import EwaConfig, LpConfig, ewa_attack, lp_attack
from .bench import (
    ConfigError,
    ExperimentConfig,
    boundary_normal,
    boundary_point,
    run_accuracy_table,
    run_boundary_spread,
    run_perturb_sweep,
    run_tau_study,
)
from .classifiers import forward_exact, linear_from_normal, predict_class
from .schedsim import DeviceConfig


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fpnalab",
        description="Laboratory for studying classification robustness under "
                    "floating-point non-associativity in parallel reductions.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("boundary-spread", "distribution of on-boundary dot products over "
                            "an accumulation-order family"),
        ("perturb-sweep", "flip fraction versus perturbation step count"),
        ("accuracy-table", "deterministic / repeated-run / permutation-search "
                           "accuracy table"),
        ("tau-study", "rank-correlation histograms over a scheduler grid"),
        ("lp-attack", "permutation-search attack on a near-boundary linear "
                      "instance"),
        ("ewa", "external-workload attack on a near-boundary linear instance"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None,
                       help="JSON config file (flat keys)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", type=str, default=None,
                       help="override the output directory")
        p.add_argument("--precision", choices=("fp16", "fp32", "fp64"),
                       default=None, help="override the emulated precision")
    return parser


def _load_config(args):
    if args.config is not None:
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.precision is not None:
        overrides["precision"] = args.precision
    if overrides:
        doc = cfg.to_dict()
        doc["seed"] = overrides.get("seed", doc["seed"])
        doc["output_dir"] = overrides.get("out", doc["output_dir"])
        doc["precision"] = overrides.get("precision", doc["precision"])
        cfg = ExperimentConfig.from_dict(doc)
    return cfg


def _near_boundary_instance(cfg, offset_steps=0):
    """Linear model plus boundary-adjacent input from the config geometry."""
    rng = np.random.default_rng(cfg.seed)
    nhat = boundary_normal(cfg.d)
    x = boundary_point(cfg.d, cfg.point_scale, rng)
    x = x + float(offset_steps) * cfg.sweep_epsilon * nhat
    model = linear_from_normal(nhat)
    label = predict_class(forward_exact(model, x))
    return model, x, label


def _cmd_boundary_spread(cfg):
    res = run_boundary_spread(cfg)
    print(f"max_abs={res.max_abs!r} mean={res.outcome_mean!r} "
          f"stddev={res.outcome_std!r}")
    print(f"wrote {res.outcomes_csv} and {res.summary_csv}")


def _cmd_perturb_sweep(cfg):
    res = run_perturb_sweep(cfg)
    print(f"flip fraction at n=0: {res.flip_fraction[0]!r}; "
          f"last nonzero at n={res.zero_crossing}")
    print(f"wrote {res.csv_path}")


def _cmd_accuracy_table(cfg):
    res = run_accuracy_table(cfg)
    for r in res.rows:
        lp = "-" if r.acc_lp is None else f"{r.acc_lp:.4f}"
        print(f"{r.attack:10s} eps={r.epsilon:<8} "
              f"D={r.acc_deterministic:.4f} ND={r.acc_nondet:.4f} LP={lp}")
    print(f"wrote {res.csv_path} and {res.json_path} "
          f"({len(res.misses)} logged search misses)")


def _cmd_tau_study(cfg):
    res = run_tau_study(cfg)
    for c in res.cells:
        print(f"workload={c.workload_size:<6} sm={c.sm_count:<4} "
              f"power={c.power_scale:<4} mean={c.mean:.4f} "
              f"var={c.variance:.6f} modes={c.n_modes}")
    print(f"wrote {res.summary_csv}")


def _cmd_lp_attack(cfg):
    model, x, label = _near_boundary_instance(cfg)
    report = lp_attack(model, x, label,
                       LpConfig(opt_steps=cfg.lp_opt_steps,
                                verify_mode=cfg.mode),
                       np.random.default_rng(cfg.seed + 1))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "lp_report.json"
    path.write_text(report.to_json(input_id=0, epsilon=0.0))
    print(f"flipped={report.flipped} after {report.iterations_used} steps")
    print(f"wrote {path}")


def _cmd_ewa(cfg):
    model, x, label = _near_boundary_instance(cfg)
    device = DeviceConfig(sm_count=cfg.sm_count, base_jitter=cfg.base_jitter)
    report = ewa_attack(model, x, device,
                        EwaConfig(k_range=tuple(cfg.ewa_k_range),
                                  budget=cfg.ewa_budget,
                                  trials_per_eval=cfg.ewa_trials,
                                  n_blocks=cfg.n_blocks,
                                  verify_mode=cfg.mode),
                        np.random.default_rng(cfg.seed + 2), label=label)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "ewa_report.json"
    path.write_text(report.to_json(input_id=0, epsilon=0.0))
    print(f"flip_rate={report.flip_rate!r} at k={report.witness['k']} "
          f"(success={report.flipped})")
    print(f"wrote {path}")


_COMMANDS = {
    "boundary-spread": _cmd_boundary_spread,
    "perturb-sweep": _cmd_perturb_sweep,
    "accuracy-table": _cmd_accuracy_table,
    "tau-study": _cmd_tau_study,
    "lp-attack": _cmd_lp_attack,
    "ewa": _cmd_ewa,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
