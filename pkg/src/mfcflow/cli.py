"""Command-line entry point.

Subcommands:

    train   run an experiment from a TOML config; writes metrics CSV,
            summary JSON, and a checkpoint into the output directory
    eval    re-evaluate a checkpoint's objective against its oracle
    oracle  print reference values (CSV rows) without touching any model
    dump    export plot-ready CSV data from a checkpoint
    verify  run the randomized property suites

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .flow import flow_forward, flow_inverse, load_model, log_density, sample
from .oracles import (QuadratureSpec, discrete_ot_cost, gaussian_w2sq,
                      kernel_optimal_cost, ou_second_moment,
                      rwpo_quadratic_cost, stationarity_residual)
from .problems import (DoubleWellPotential, Gaussian, QuadraticPotential,
                       RingDrift)
from .trainer import NonFiniteLossError, evaluate, train, tune_allocator
from .verify import SUITES, run_suites

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _limit_threads(n):
    if n is None:
        n = os.environ.get("MFCFLOW_THREADS")
        if n is None:
            return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(int(n))
    except Exception:
        pass


def _write_summary(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_train(args):
    cfg = load_config(args.config, args.set or ())
    outdir = Path(args.outdir or cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    checkpoint = outdir / "checkpoint"

    def on_log(it, parts):
        print(f"step {it:>7d}  loss {parts['loss']:.6g}  kinetic {parts['kinetic']:.6g}  "
              f"penalty {parts['penalty']:.6g}  terminal {parts['terminal']:.6g}", flush=True)

    try:
        model, metrics = train(cfg.problem, cfg.train, arch=cfg.arch,
                               checkpoint_path=str(checkpoint), on_log=on_log)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    metrics.to_csv(outdir / "metrics.csv")
    summary = metrics.summary()
    summary["config"] = cfg.raw
    summary["config_hash"] = cfg.config_hash()
    _write_summary(outdir / "summary.json", summary)
    print(f"objective {metrics.objective:.6g} +- {metrics.objective_stderr:.2g}"
          + (f"  benchmark {metrics.benchmark:.6g}  rel_error {metrics.rel_error:.4%}"
             if metrics.benchmark is not None else ""))
    if metrics.density_rmse is not None:
        print(f"density RMSE vs reference: {metrics.density_rmse:.4g}")
    print(f"wrote {outdir}/metrics.csv, summary.json, checkpoint.bin")
    return EXIT_OK


def cmd_eval(args):
    cfg = load_config(args.config, args.set or ())
    model = load_model(args.checkpoint)
    metrics = evaluate(model, cfg.problem, cfg.train)
    summary = metrics.summary()
    summary["checkpoint"] = args.checkpoint
    summary["config_hash"] = cfg.config_hash()
    text = json.dumps(summary, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write_summary(args.out, summary)
    print(text)
    return EXIT_OK


def _oracle_rows(args):
    name = args.name
    if name == "rwpo-cost":
        yield ("rwpo-cost", f"d={args.d};beta={args.beta};T={args.T}",
               rwpo_quadratic_cost(args.d, args.beta, args.T), 0.0)
    elif name == "w2":
        g0 = Gaussian(args.mean0, np.reshape(args.cov0, (len(args.mean0),) * 2))
        g1 = Gaussian(args.mean1, np.reshape(args.cov1, (len(args.mean1),) * 2))
        w2 = gaussian_w2sq(g0.mean, g0.cov, g1.mean, g1.cov)
        yield ("w2-squared", "closed form", w2, 0.0)
        yield ("half-w2-squared", "transport objective", 0.5 * w2, 0.0)
    elif name == "ou-moment":
        yield ("ou-moment", f"t={args.t};a={args.a};gamma={args.gamma};m0={args.m0};d={args.d}",
               ou_second_moment(args.t, args.a, args.gamma, args.m0, args.d), 0.0)
    elif name == "kernel-cost":
        potential = DoubleWellPotential(args.a) if args.potential == "double_well" else QuadraticPotential()
        var = args.p0_var if args.p0_var is not None else 2.0 * (args.T + 1.0) / args.beta
        p0 = Gaussian(np.zeros(args.d), var * np.eye(args.d))
        quad = QuadratureSpec(half_width=args.box, nodes=args.nodes)
        cost = kernel_optimal_cost(p0, potential, args.beta, args.T, quad)
        yield ("kernel-cost", f"{args.potential};beta={args.beta};T={args.T};var0={var:g}", cost, 1e-6)
    elif name == "stationarity":
        drift = RingDrift(args.delta)
        res = stationarity_residual(drift, args.gamma, np.array(args.x))
        yield ("stationarity-residual", f"delta={args.delta};gamma={args.gamma};x={args.x}", res, 0.0)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown oracle {name!r}")


def cmd_oracle(args):
    print("oracle,inputs,value,error_estimate")
    for name, inputs, value, err in _oracle_rows(args):
        print(f"{name},{inputs},{value:.10g},{err:g}")
    return EXIT_OK


def cmd_dump(args):
    model = load_model(args.checkpoint)
    times = [float(t) for t in args.times]
    rng = np.random.default_rng(args.seed)
    out = sys.stdout if args.out is None else open(args.out, "w")
    try:
        if args.what == "density":
            print("x1,x2,t,density", file=out)
            axis = np.linspace(-args.box, args.box, args.grid)
            g1, g2 = np.meshgrid(axis, axis, indexing="ij")
            pts = np.stack([g1.ravel(), g2.ravel()], axis=1)
            for t in times:
                dens = np.exp(log_density(model, pts, t))
                for (x1, x2), d in zip(pts, dens):
                    print(f"{x1:.6g},{x2:.6g},{t:.6g},{d:.8g}", file=out)
        elif args.what == "trajectories":
            starts = np.asarray(args.start, dtype=float).reshape(-1, model.arch.dim)
            z, _ = flow_inverse(model, starts, times[0])
            print("trajectory,t," + ",".join(f"x{i+1}" for i in range(model.arch.dim)), file=out)
            for t in times:
                x, _ = flow_forward(model, z, t)
                for j, row in enumerate(np.atleast_2d(x)):
                    print(f"{j},{t:.6g}," + ",".join(f"{v:.8g}" for v in row), file=out)
        elif args.what == "velocity":
            from .diffkit import velocity_fd
            print("x1,x2,t,v1,v2", file=out)
            axis = np.linspace(-args.box, args.box, args.grid)
            g1, g2 = np.meshgrid(axis, axis, indexing="ij")
            pts = np.stack([g1.ravel(), g2.ravel()], axis=1)
            for t in times:
                z, _ = flow_inverse(model, pts, t)
                v = velocity_fd(model, z, t)
                for (x1, x2), (v1, v2) in zip(pts, np.atleast_2d(v)):
                    print(f"{x1:.6g},{x2:.6g},{t:.6g},{v1:.8g},{v2:.8g}", file=out)
        elif args.what == "samples":
            print("t," + ",".join(f"x{i+1}" for i in range(model.arch.dim)), file=out)
            for t in times:
                xs = sample(model, t, args.n, rng)
                for row in xs:
                    print(f"{t:.6g}," + ",".join(f"{v:.8g}" for v in row), file=out)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_verify(args):
    unknown = set(args.suite or ()) - set(SUITES)
    if unknown:
        print(f"config error: unknown suite(s) {sorted(unknown)}; "
              f"available: {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_CONFIG
    ok = run_suites(args.suite or None, seed=args.seed)
    return EXIT_OK if ok else EXIT_VERIFY_FAILED


def build_parser():
    parser = argparse.ArgumentParser(prog="mfcflow",
                                     description="Spline-flow solvers for mean-field control problems")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric worker threads (default: MFCFLOW_THREADS or unlimited)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a TOML config")
    p.add_argument("config")
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                   help="override a config entry, e.g. --set train.steps=1000")
    p.add_argument("--outdir", default=None, help="override [output].dir")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against its oracle")
    p.add_argument("checkpoint", help="checkpoint path prefix (without .bin/.json)")
    p.add_argument("config")
    p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE")
    p.add_argument("--out", default=None, help="write the summary JSON here as well")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("oracle", help="print reference values as CSV")
    osub = p.add_subparsers(dest="name", required=True)
    q = osub.add_parser("rwpo-cost", help="exact quadratic proximal cost d/beta (log(T+1)+1)")
    q.add_argument("--d", type=int, default=2)
    q.add_argument("--beta", type=float, default=1.0)
    q.add_argument("--T", type=float, default=1.0)
    q = osub.add_parser("w2", help="closed-form squared W2 between Gaussians")
    q.add_argument("--mean0", type=float, nargs="+", required=True)
    q.add_argument("--cov0", type=float, nargs="+", required=True, help="row-major covariance")
    q.add_argument("--mean1", type=float, nargs="+", required=True)
    q.add_argument("--cov1", type=float, nargs="+", required=True)
    q = osub.add_parser("ou-moment", help="OU second moment E|x_t|^2")
    q.add_argument("--t", type=float, required=True)
    q.add_argument("--a", type=float, default=1.0)
    q.add_argument("--gamma", type=float, default=0.5)
    q.add_argument("--m0", type=float, default=8.0)
    q.add_argument("--d", type=int, default=2)
    q = osub.add_parser("kernel-cost", help="proximal cost by kernel quadrature")
    q.add_argument("--potential", choices=["quadratic", "double_well"], default="double_well")
    q.add_argument("--a", type=float, default=1.0)
    q.add_argument("--beta", type=float, default=5.0)
    q.add_argument("--T", type=float, default=2.0)
    q.add_argument("--d", type=int, default=2)
    q.add_argument("--p0-var", type=float, default=None,
                   help="isotropic variance of the Gaussian start (default 2(T+1)/beta)")
    q.add_argument("--box", type=float, default=6.0)
    q.add_argument("--nodes", type=int, default=256)
    q = osub.add_parser("stationarity", help="ring-drift stationarity residual")
    q.add_argument("--delta", type=float, default=0.5)
    q.add_argument("--gamma", type=float, default=1.0)
    q.add_argument("--x", type=float, nargs=2, default=[0.5, 1.0])
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("dump", help="export plot-ready CSV data from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("what", choices=["density", "trajectories", "velocity", "samples"])
    p.add_argument("--times", nargs="+", default=["0.0", "0.5", "1.0"])
    p.add_argument("--box", type=float, default=5.0)
    p.add_argument("--grid", type=int, default=101)
    p.add_argument("--start", type=float, nargs="+",
                   default=[-3.0, -3.0, -3.0, 3.0, 3.0, 3.0, 3.0, -3.0],
                   help="flattened start points for trajectories")
    p.add_argument("--n", type=int, default=1000, help="samples per time")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_dump)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("suite", nargs="*",
                   help=f"suites to run (default: all of {', '.join(SUITES)})")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None):
    tune_allocator()
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(args.threads)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
