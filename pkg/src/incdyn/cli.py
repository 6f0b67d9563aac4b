"""Command-line entry point: train / compare / plot / finetune.

Exit codes: 0 success, 1 config error, 2 diverged run, 3 I/O error.
"""

import os

# pin BLAS to one thread before numpy loads: the small matrix sizes here run
# faster unthreaded, and a fixed thread count keeps reruns byte-identical
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import sys
from dataclasses import replace

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="incdyn",
        description="Model-based RL with an incremental dynamics model.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, with_method=False):
        p.add_argument("--config", help="experiment config file (key = value sections)")
        p.add_argument("--env", choices=["pendulum", "cartpole", "linear"],
                       help="environment override")
        p.add_argument("--seed", type=int, action="append",
                       help="seed override (repeatable)")
        p.add_argument("--out", help="output directory override")
        if with_method:
            p.add_argument("--method", choices=["sac_baseline", "incdyn"],
                           help="method override")

    p_train = sub.add_parser("train", help="run one method over the configured seeds")
    common(p_train, with_method=True)

    p_cmp = sub.add_parser("compare", help="run the SAC baseline and the "
                                           "model-based method side by side")
    common(p_cmp)

    p_plot = sub.add_parser("plot", help="render a curve CSV as an SVG")
    p_plot.add_argument("curve", help="curve.csv produced by train/compare")
    p_plot.add_argument("--out", required=True, help="output SVG path")

    p_ft = sub.add_parser("finetune", help="LQR fine-tuning against a reference "
                                           "trajectory, using a model checkpoint")
    common(p_ft)
    return parser


def _load_experiment(args, forced_methods=None):
    from . import harness

    if args.config:
        cfg = harness.parse_config(args.config)
    else:
        cfg = harness.ExperimentConfig()
    if getattr(args, "env", None):
        cfg = replace(cfg, env=args.env)
    if getattr(args, "seed", None):
        cfg = replace(cfg, seeds=tuple(args.seed))
    if getattr(args, "out", None):
        cfg = replace(cfg, out_dir=args.out)
    if forced_methods is not None:
        cfg = replace(cfg, methods=forced_methods)
    elif getattr(args, "method", None):
        cfg = replace(cfg, methods=(args.method,))
    return cfg


def _cmd_experiment(args, forced_methods=None) -> int:
    from . import harness

    cfg = _load_experiment(args, forced_methods)
    rows, summary = harness.run_experiment(cfg)
    for method, agg in summary["aggregate"].items():
        med = agg["median_steps_to_threshold"]
        med_txt = "not reached" if med is None else f"{med:.0f}"
        print(f"{method}: crossed {agg['crossed']}/{agg['total']} seeds, "
              f"median steps to threshold {summary['threshold']}: {med_txt}")
    print(f"wrote {os.path.join(cfg.out_dir, 'curve.csv')} and summary.json")
    if any(r["status"] == "diverged" for r in summary["runs"]):
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_plot(args) -> int:
    from . import harness

    rows = harness.read_curve_csv(args.curve)
    harness.emit_plot(rows, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_finetune(args) -> int:
    from . import envs, finetune, harness, incmodel
    from .errors import StabilizationError

    cfg = _load_experiment(args)
    ft = cfg.finetune
    if getattr(args, "env", None):
        ft = replace(ft, env=args.env)
    if ft.model_path is None or ft.reference_path is None:
        raise harness.ConfigValueError(
            "[finetune] requires 'model' and 'reference' file paths")
    spec = envs.make_env_spec(ft.env)
    model = incmodel.load_model(ft.model_path)
    ref_states, ref_increments = finetune.load_reference(
        ft.reference_path, spec.state_dim, spec.action_dim)

    s_star = (np.asarray(ft.operating_state, dtype=np.float64)
              if ft.operating_state is not None else np.zeros(spec.state_dim))
    a_star = (np.asarray(ft.operating_prev_action, dtype=np.float64)
              if ft.operating_prev_action is not None else np.zeros(spec.action_dim))
    gain = incmodel.gain(model, s_star, a_star)
    system = finetune.ErrorSystem(gain=gain, Q=ft.q_scale * np.eye(spec.state_dim),
                                  R=ft.r_scale * np.eye(spec.action_dim))
    try:
        sol = finetune.solve_lqr(system)
    except StabilizationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    steps = min(ft.steps, len(ref_states))
    result = finetune.track_reference(sol, spec, ref_states, ref_increments, steps,
                                      seed=ft.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    trace_path = os.path.join(cfg.out_dir, "error_trace.txt")
    np.savetxt(trace_path, result.errors)
    print(f"tracked {len(result.errors)} steps: final error "
          f"{result.errors[-1]:.3e}, clipped {result.clip_events} actions"
          + (", truncated by env" if result.truncated else ""))
    print(f"wrote {trace_path}")
    return EXIT_OK


def main(argv=None) -> int:
    from . import harness

    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "train":
            return _cmd_experiment(args)
        if args.verb == "compare":
            return _cmd_experiment(args,
                                   forced_methods=("sac_baseline", "incdyn"))
        if args.verb == "plot":
            return _cmd_plot(args)
        return _cmd_finetune(args)
    except harness.ConfigError as exc:
        print(f"error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
