"""Command-line front end: train, sweep-beta, inspect-jacobian, verify, bench.

Exit codes: 0 success, 1 validation failure (bad config, malformed
checkpoint, numerically failed run), 2 I/O error (missing or unreadable
files).  All artifacts land under the run's output directory.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from .backend import HAS_NUMBA, backend_name, use_backend
from .config import ConfigError, RunConfig
from .data import IdxFormatError
from .estimators import (
    ConvergenceError,
    IllConditionedError,
    beta_sweep,
    sweep_rows_to_csv,
)
from .fixedpoint import DivergenceError, SolverSettings, relax
from .homeostasis import symmetry_report
from .models import (
    CheckpointError,
    JacobianSizeError,
    load_checkpoint,
    save_checkpoint,
)
from .training import train

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2


def _fail(message, code):
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_config(path, output_dir=None):
    cfg = RunConfig.load(path)
    if output_dir:
        cfg.values["output_dir"] = output_dir
    return cfg


def _floats(text):
    return [float(p) for p in text.replace(",", " ").split()]


def _ints(text):
    return [int(p) for p in text.replace(",", " ").split()]


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args):
    cfg = _load_config(args.config, args.output_dir)
    train_ds, val_ds = cfg.datasets()
    net = cfg.network()
    params = cfg.params(net)
    tc = cfg.train_config()
    out_dir = cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    cfg.save(os.path.join(out_dir, "config.txt"))
    print(f"training {net.kind.value} {net.in_dim}-"
          f"{'-'.join(str(d) for d in net.layer_dims)}"
          f" on {train_ds.n} samples ({train_ds.split}); output -> {out_dir}")
    params, rows = train(net, params, train_ds, tc, val_dataset=val_ds,
                         out_dir=out_dir, log=print)
    last = rows[-1]
    print(f"done: val error {last.val_error_pct:.2f}%"
          f" after {len(rows)} epochs")
    return EXIT_OK


def _cmd_sweep_beta(args):
    cfg = _load_config(args.config, args.output_dir)
    if args.checkpoint:
        net, params, _ = load_checkpoint(args.checkpoint)
    else:
        net = cfg.network()
        params = cfg.params(net)
    _, val_ds = cfg.datasets()
    x = val_ds.images[:args.samples]
    y = val_ds.labels[:args.samples]
    rows = beta_sweep(net, params, x, y,
                      amplitudes=_floats(args.amplitudes),
                      n_points_list=_ints(args.n_points),
                      settings=cfg.solver())
    text = sweep_rows_to_csv(rows)
    out_dir = cfg["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    out_path = args.out or os.path.join(out_dir, "sweep_beta.csv")
    with open(out_path, "w") as fh:
        fh.write(text)
    whole = [r for r in rows if r["layer"] == -1]
    print(f"{'amplitude':>10} {'n_points':>9} {'cos_truth':>10}")
    for r in whole:
        print(f"{r['amplitude']:>10.3g} {r['n_points']:>9d}"
              f" {r['cosine_vs_truth']:>10.6f}")
    print(f"wrote {out_path}")
    return EXIT_OK


def _cmd_inspect_jacobian(args):
    net, params, meta = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = _load_config(args.config, args.output_dir)
        _, val_ds = cfg.datasets()
        x = val_ds.images[:args.samples]
        settings = cfg.solver()
        out_dir = cfg["output_dir"]
    else:
        rng = np.random.default_rng(args.seed)
        x = rng.uniform(0.0, 1.0, size=(args.samples, net.in_dim))
        settings = SolverSettings()
        out_dir = args.output_dir or "."
    free = relax(net, params, x, settings=settings)
    if not free.converged:
        raise ConvergenceError(
            f"free phase did not converge (residual {free.residual:.3e})")
    reports = []
    for i in range(x.shape[0]):
        J = net.jacobian_dense(params, [u[i] for u in free.state.layers],
                               x=x[i])
        reports.append(symmetry_report(J))
    os.makedirs(out_dir, exist_ok=True)
    out_path = args.out or os.path.join(out_dir, "jacobian_report.json")
    doc = {
        "checkpoint": args.checkpoint,
        "alpha": meta.get("alpha"),
        "samples": [r.__dict__ for r in reports],
        "mean_symmetry_measure": float(np.mean(
            [r.symmetry_measure for r in reports])),
        "mean_homeo_exact": float(np.mean([r.homeo_exact for r in reports])),
    }
    with open(out_path, "w") as fh:
        json.dump(doc, fh, indent=2)
    print(f"{'sample':>6} {'frob_S':>10} {'frob_A':>10} {'symmetry':>9}"
          f" {'homeo':>10}")
    for i, r in enumerate(reports):
        print(f"{i:>6d} {r.frob_S:>10.4f} {r.frob_A:>10.4f}"
              f" {r.symmetry_measure:>9.5f} {r.homeo_exact:>10.5f}")
    print(f"mean symmetry {doc['mean_symmetry_measure']:.5f};"
          f" wrote {out_path}")
    return EXIT_OK


def _cmd_verify(args):
    from .verify import format_table, run_checks

    results = run_checks()
    print(format_table(results))
    return EXIT_OK if all(r.ok for r in results) else EXIT_INVALID


def _cmd_bench(args):
    from .models import ModelKind, Network

    dims = tuple(_ints(args.dims))
    net = Network(ModelKind(args.kind), args.in_dim, dims, dims[-1])
    params = net.init_params(args.seed)
    rng = np.random.default_rng(args.seed)
    x = rng.uniform(0.0, 1.0, size=(args.batch, args.in_dim))
    settings = SolverSettings(tolerance=1e-10, max_steps_free=args.steps,
                              damping=args.damping)

    backends = ["numpy"] + (["numba"] if HAS_NUMBA else [])
    print(f"relaxation benchmark: {args.kind} {args.in_dim}-"
          f"{'-'.join(str(d) for d in dims)}, batch {args.batch},"
          f" {args.repeats} repeats")
    times = {}
    for name in backends:
        with use_backend(name):
            relax(net, params, x, settings=settings)  # warm-up / jit compile
            best = min(
                _timed(lambda: relax(net, params, x, settings=settings))
                for _ in range(args.repeats))
        times[name] = best
        print(f"  {name:<6} {best * 1e3:8.1f} ms/relaxation")
    if "numba" in times:
        print(f"  speedup numba/numpy: {times['numpy'] / times['numba']:.2f}x")
    else:
        print("  numba not importable; numpy path only")
    return EXIT_OK


def _timed(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


# ---------------------------------------------------------------------------
# wiring


def _build_parser():
    p = argparse.ArgumentParser(
        prog="holoep",
        description="Train and analyze convergent networks with holomorphic"
                    " equilibrium propagation.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a training config")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir", default=None,
                   help="override the config's output_dir")
    t.set_defaults(fn=_cmd_train)

    s = sub.add_parser("sweep-beta",
                       help="estimator-vs-oracle cosines across amplitudes")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", default=None,
                   help="evaluate at a checkpoint instead of a fresh init")
    s.add_argument("--amplitudes", default="0.02,0.05,0.1,0.2,0.5")
    s.add_argument("--n-points", default="1,2,4,6",
                   help="1 = one-sided classic estimate")
    s.add_argument("--samples", type=int, default=8)
    s.add_argument("--out", default=None)
    s.add_argument("--output-dir", default=None)
    s.set_defaults(fn=_cmd_sweep_beta)

    j = sub.add_parser("inspect-jacobian",
                       help="symmetry report for a checkpoint")
    j.add_argument("--checkpoint", required=True)
    j.add_argument("--config", default=None,
                   help="config supplying probe data and solver settings")
    j.add_argument("--samples", type=int, default=4)
    j.add_argument("--seed", type=int, default=0,
                   help="seed for probe inputs when no config is given")
    j.add_argument("--out", default=None)
    j.add_argument("--output-dir", default=None)
    j.set_defaults(fn=_cmd_inspect_jacobian)

    v = sub.add_parser("verify", help="run the invariant suite")
    v.set_defaults(fn=_cmd_verify)

    b = sub.add_parser("bench", help="relaxation backend benchmark")
    b.add_argument("--kind", default="reciprocal")
    b.add_argument("--in-dim", type=int, default=784)
    b.add_argument("--dims", default="256,256,10")
    b.add_argument("--batch", type=int, default=50)
    b.add_argument("--steps", type=int, default=200)
    b.add_argument("--damping", type=float, default=0.1)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(fn=_cmd_bench)
    return p


def cli(argv=None) -> int:
    """Parse argv and run one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:  # argparse exits 2 on bad usage; remap
        return EXIT_OK if err.code == 0 else EXIT_INVALID
    try:
        return args.fn(args)
    except FileNotFoundError as err:
        if err.filename:
            return _fail(f"no such file: {err.filename}", EXIT_IO)
        return _fail(str(err), EXIT_IO)
    except IdxFormatError as err:
        return _fail(f"unreadable data file: {err}", EXIT_IO)
    except OSError as err:
        return _fail(str(err), EXIT_IO)
    except (ConfigError, CheckpointError, JacobianSizeError) as err:
        return _fail(str(err), EXIT_INVALID)
    except (ConvergenceError, DivergenceError, IllConditionedError) as err:
        return _fail(f"numerical failure: {err}", EXIT_INVALID)
    except ValueError as err:
        return _fail(str(err), EXIT_INVALID)


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
