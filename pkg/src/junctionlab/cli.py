"""Command-line experiment runner.

Every subcommand reads a model spec, writes tidy CSV files (each with a
``.manifest.json`` sibling) and SVG charts into the output directory, and
exits nonzero when an invariant check fails.  Partial outputs of a failed
run are removed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .artifacts import OutputSet, line_chart, versions
from .homog import check_convexity, compute_effective
from .model import (
    FreeRoadLaw, SpecError, build_example_law, estimate_alpha, load_spec,
    sample_realization, validate_assumptions,
)

log = logging.getLogger("junctionlab")

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE, EXIT_ERROR = 0, 1, 2, 3


class InvariantFailure(RuntimeError):
    pass


# --- shared helpers -------------------------------------------------------------

def _load(args):
    spec = load_spec(args.spec)
    law = FreeRoadLaw(spec) if args.law == "free-road" else build_example_law(spec)
    eff = compute_effective(spec)
    return spec, law, eff


def _manifest(args, spec, **extra) -> dict:
    m = {
        "command": args.command,
        "spec": spec.name,
        "spec_hash": spec.digest(),
        "seed": args.seed,
        "law": args.law,
        "parameters": {k: v for k, v in sorted(vars(args).items())
                       if k not in ("func", "config", "out", "workers", "verbose")},
        "versions": versions(),
    }
    m.update(extra)
    return m


def _seeds(args, R, offset=0):
    from .micro_sim import replicate_seeds
    return replicate_seeds(args.seed, R, offset)


# --- subcommands -------------------------------------------------------------------

def cmd_homogenize(args, out: OutputSet):
    spec, law, eff = _load(args)
    rep = check_convexity(eff)
    assumptions = validate_assumptions(law, spec)
    out.write_text("effective.json", eff.dumps())
    rows = []
    for r in eff.roads:
        p, h = r.hamiltonian.table(n=args.table_points, pi=r.pi, delta_min=eff.delta_min)
        rows += [(r.road, a, b) for a, b in zip(p, h)]
    out.write_csv("hamiltonians.csv", ["k", "p", "H"], rows, _manifest(args, spec))
    vrows = []
    for r in eff.roads:
        e = np.linspace(0.0, 2.0 * r.velocity.e_knots[-1], 401)
        vrows += [(r.road, a, b) for a, b in zip(e, r.velocity(e))]
    out.write_csv("velocities.csv", ["k", "e", "V_bar"], vrows, _manifest(args, spec))
    series = []
    for r in eff.roads:
        p, h = r.hamiltonian.table(n=512, pi=r.pi, delta_min=eff.delta_min)
        series.append((f"H^{r.road}", p, h))
    out.write_svg("hamiltonians.svg", line_chart(series, "Effective Hamiltonians", "p", "H(p)"))
    report = {
        "A0": eff.A0,
        "e": eff.e,
        "v_e": eff.v_e,
        "convexity": {"ok": rep.ok, "min_second_difference": rep.min_second_difference,
                      "max_velocity_second_difference": rep.min_velocity_curvature},
        "assumptions": {"ok": assumptions.ok, "counts": assumptions.lattice.get("counts", {})},
    }
    out.write_json("homogenize-report.json", report)
    print(f"A0 = {eff.A0:.6g}; e = {np.round(eff.e, 6).tolist()}; v_e = {np.round(eff.v_e, 6).tolist()}")
    if not rep.ok:
        raise InvariantFailure("effective Hamiltonian failed the convexity check")
    if not assumptions.ok:
        raise InvariantFailure(f"velocity law violates the assumptions: {sorted(assumptions.by_assumption())}")


def cmd_simulate(args, out: OutputSet):
    from .micro_sim import (
        OrderingError, SimConfig, TrajectoryStreamWriter, flat_batch, integrate, theta_observer,
        theta_window, velocity_floor_constant,
    )
    spec, law, eff = _load(args)
    window = tuple(args.window) if args.window else theta_window(spec, args.horizon)
    seeds = _seeds(args, args.replicates)
    cfg = SimConfig.for_law(law, args.horizon, args.sample_dt, dt=args.dt)
    observers = {"theta": theta_observer}
    writer = None
    if args.stream:
        path = out.path("trajectory.bin")
        out._register(path)
        out.dir.mkdir(parents=True, exist_ok=True)
        writer = TrajectoryStreamWriter(path, window[0], window[1], replicate=0)
        observers["stream"] = writer
    try:
        st = flat_batch(spec, eff, seeds, window)
        traj = integrate(st, law, cfg, record_positions=False, observers=observers)
    except OrderingError as exc:
        raise InvariantFailure(str(exc)) from exc
    finally:
        if writer is not None:
            writer.close()
    th = np.asarray(traj.records["theta"])
    times = cfg.sample_times
    rows = [(t, r, int(th[s, r])) for s, t in enumerate(times) for r in range(th.shape[1])]
    floor = velocity_floor_constant(law, eff)
    man = _manifest(args, spec, window=list(window), dt=cfg.dt, replicate_seeds=seeds,
                    stats={"steps": traj.stats.steps, "halvings": traj.stats.halvings,
                           "min_step_velocity": traj.stats.min_step_velocity,
                           "max_step_velocity": traj.stats.max_step_velocity},
                    velocity_floor=floor)
    out.write_csv("theta.csv", ["t", "replicate", "theta"], rows, man)
    series = [(f"replicate {r}", times, th[:, r]) for r in range(min(8, th.shape[1]))]
    out.write_svg("theta.svg", line_chart(series, "Crossing count", "t", "theta(t)"))
    print(f"theta({times[-1]:g}) mean = {th[-1].mean():.3f}; min step velocity = {traj.stats.min_step_velocity:.4g}")
    if traj.stats.min_step_velocity < floor - 1e-9:
        raise InvariantFailure(f"velocity floor {floor} violated: {traj.stats.min_step_velocity}")


def cmd_estimate_limiter(args, out: OutputSet):
    from .limiter import estimate_flux_limiter
    spec, law, eff = _load(args)
    est = estimate_flux_limiter(spec, law, eff, R=args.replicates, T_est=args.horizon,
                                seeds=_seeds(args, args.replicates), sample_dt=args.sample_dt,
                                workers=args.workers)
    sup = est.superadditivity
    a = int(np.argmin(sup.k))
    rows = [(t, m, s, M) for t, m, s, M in zip(est.times, est.theta_mean, est.theta_std, sup.M[a])]
    man = _manifest(args, spec, estimate=est.to_dict(), h_star=sup.h_star)
    out.write_csv("theta_mean.csv", ["t", "theta_mean", "theta_std", "M_bar"], rows, man)
    out.write_json("limiter.json", est.to_dict())
    out.write_svg("theta_mean.svg", line_chart(
        [("mean theta", est.times, est.theta_mean), ("-A0 t", est.times, -eff.A0 * est.times)],
        "Mean crossing count", "t", "theta"))
    print(f"A_hat = {est.A_hat:.6f} +/- {est.ci_halfwidth:.6f}; reported {est.reported:.6f}; "
          f"k_e {'< 0' if est.k_negative else '= 0'}; A0 = {eff.A0:.6f}")
    if est.reported < eff.A0 - 1e-12 or est.reported > 0:
        raise InvariantFailure("reported limiter outside [A0, 0]")


def _limiter_value(args, eff):
    if args.limiter_file:
        import json
        d = json.loads(Path(args.limiter_file).read_text())
        return float(d["reported"])
    if args.A is not None:
        return float(args.A)
    return float(eff.A0)


def cmd_solve_macro(args, out: OutputSet):
    from .macro_solver import JunctionGrid, closed_form_nu, flat_datum, linf_error_vs_closed, solve_hj
    spec, law, eff = _load(args)
    A = _limiter_value(args, eff)
    grid = JunctionGrid.build(eff, args.dx, args.length, args.horizon)
    snaps = np.linspace(0.0, args.horizon, args.snapshots + 1)
    sol = solve_hj(eff, A, flat_datum(eff), grid, args.horizon, snapshots=snaps)
    rows = []
    for s, t in enumerate(sol.times):
        for k in range(eff.K + 1):
            x, v = sol.values(s, k)
            rows += [(t, a, k, b) for a, b in zip(x, v)]
    err = linf_error_vs_closed(sol)
    man = _manifest(args, spec, A=A, dx=grid.dx, dt=grid.dt, steps=grid.steps, linf_error_vs_closed=err)
    out.write_csv("nu.csv", ["t", "x", "k", "nu"], rows, man)
    series = []
    for k in range(eff.K + 1):
        x, v = sol.values(-1, k)
        series.append((f"scheme k={k}", x, v))
        series.append((f"closed form k={k}", x, closed_form_nu(eff, A, x, k, sol.times[-1])))
    out.write_svg("nu.svg", line_chart(series, f"nu at t = {sol.times[-1]:g}", "x", "nu"))
    print(f"A = {A:.6f}; L-inf error vs closed form at T: {err:.3e} (dx = {grid.dx:g})")
    if np.any(np.diff(sol.node(-1)) != 0):
        raise InvariantFailure("junction value is not single-valued")


def cmd_compare(args, out: OutputSet):
    from .limiter import estimate_flux_limiter
    from .macro_solver import micro_macro_compare
    spec, law, eff = _load(args)
    conv = check_convexity(eff)
    if not conv.ok:
        raise InvariantFailure("effective Hamiltonian failed the convexity check")
    if args.A is not None:
        A_hat = float(args.A)
    else:
        est = estimate_flux_limiter(spec, law, eff, R=args.limiter_replicates, T_est=args.limiter_horizon,
                                    seeds=_seeds(args, args.limiter_replicates, offset=10_000),
                                    workers=args.workers)
        A_hat = est.reported
        out.write_json("limiter.json", est.to_dict())
    x = np.linspace(args.x_range[0], args.x_range[1], args.x_points)
    table = micro_macro_compare(spec, law, eff, A_hat, args.eps, args.horizon, x,
                                _seeds(args, args.replicates), dx=args.dx)
    rows = [(r.eps, r.dx, r.micro_vs_closed, r.micro_vs_grid, r.grid_vs_closed, r.micro_vs_closed_max,
             r.mean_field_vs_closed) for r in table.rows]
    man = _manifest(args, spec, A=table.A)
    out.write_csv("compare.csv", ["eps", "dx", "micro_vs_closed", "micro_vs_grid", "grid_vs_closed",
                                  "micro_vs_closed_worst", "mean_field_vs_closed"], rows, man)
    eps = np.array([r.eps for r in table.rows])
    out.write_svg("compare.svg", line_chart(
        [("micro vs closed", eps, [r.micro_vs_closed for r in table.rows]),
         ("micro vs scheme", eps, [r.micro_vs_grid for r in table.rows]),
         ("scheme vs closed", eps, [r.grid_vs_closed for r in table.rows])],
        "Micro-macro error", "eps", "sup error", logx=True, logy=True))
    for r in table.rows:
        print(f"eps = {r.eps:g}: micro-closed {r.micro_vs_closed:.4f}, micro-scheme {r.micro_vs_grid:.4f}, "
              f"scheme-closed {r.grid_vs_closed:.4f}")


def cmd_diagnostics(args, out: OutputSet):
    from .limiter import build_corrector, concentration_diagnostic
    spec, law, eff = _load(args)
    which = set(args.which)
    if "all" in which:
        which = {"assumptions", "convexity", "propagation", "corrector", "concentration"}
    failures = []
    summary = {}
    if "assumptions" in which:
        rep = validate_assumptions(law, spec)
        summary["assumptions"] = {"ok": rep.ok, "counts": rep.lattice.get("counts", {})}
        if not rep.ok:
            failures.append("assumptions")
    if "convexity" in which:
        rep = check_convexity(eff)
        summary["convexity"] = {"ok": rep.ok, "min_second_difference": rep.min_second_difference}
        if not rep.ok:
            failures.append("convexity")
    if "propagation" in which:
        est = estimate_alpha(spec, _seeds(args, args.replicates), args.depth)
        summary["propagation"] = {"alpha": est.alpha, "ci_halfwidth": est.ci_halfwidth, "n": est.n}
        out.write_csv("alpha.csv", ["replicate", "alpha"], list(enumerate(est.per_seed)),
                      _manifest(args, spec, depth=args.depth))
    if "corrector" in which:
        n = args.corrector_n
        rows, ok = [], True
        for r, s in enumerate(_seeds(args, args.replicates)):
            c = build_corrector(spec, sample_realization(spec, s, (-n, n)), eff, 0, n)
            sl = c.slopes()
            ok &= c.increments_ok()
            rows += [(r, k, v, eff.e[k]) for k, v in sorted(sl.items())]
        summary["corrector"] = {"increments_ok": ok}
        out.write_csv("corrector_slopes.csv", ["replicate", "k", "slope", "e"], rows,
                      _manifest(args, spec, n=n))
        if not ok:
            failures.append("corrector")
    if "concentration" in which:
        times = np.asarray(args.times, dtype=float)
        rep = concentration_diagnostic(spec, law, eff, args.replicates, times, seed=args.seed,
                                       workers=args.workers)
        summary["concentration"] = {"slope": rep.slope, "decreasing": rep.decreasing,
                                    "degenerate": rep.degenerate}
        out.write_csv("concentration.csv", ["t", "sigma", "sigma_over_t"],
                      list(zip(rep.times, rep.sigma, rep.sigma_over_t)), _manifest(args, spec))
        out.write_svg("concentration.svg", line_chart([("sigma(theta)", rep.times, rep.sigma)],
                                                      "Fluctuations of the crossing count", "t", "sigma",
                                                      logx=True, logy=True))
    out.write_json("diagnostics.json", summary)
    for k, v in summary.items():
        print(f"{k}: {v}")
    if failures:
        raise InvariantFailure(f"failed checks: {', '.join(failures)}")


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", default="M-sym-2roads",
                        help="model spec file, or the name of a bundled spec (default: %(default)s)")
    common.add_argument("--law", choices=["junction", "free-road"], default="junction",
                        help="velocity law: the interpolating junction law or the no-junction control")
    common.add_argument("--seed", type=int, default=0, help="master seed (default: %(default)s)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for replicate batches")
    common.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="junctionlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="YAML file of option defaults; command-line flags override it")
    p.add_argument("--reference", action="store_true", help="print the Markdown flag reference and exit")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("homogenize", parents=[common], help="effective velocities, Hamiltonians and A0")
    s.add_argument("--table-points", type=int, default=1024)
    s.set_defaults(func=cmd_homogenize)

    s = sub.add_parser("simulate", parents=[common], help="flat-datum microscopic runs and crossing counts")
    s.add_argument("--horizon", type=float, default=100.0)
    s.add_argument("--sample-dt", type=float, default=1.0)
    s.add_argument("--dt", type=float, default=None, help="RK4 step (default: stability bound)")
    s.add_argument("--replicates", type=int, default=4)
    s.add_argument("--window", type=int, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--stream", action="store_true", help="also write the binary trajectory of replicate 0")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate-limiter", parents=[common], help="flux limiter from replicated runs")
    s.add_argument("--horizon", type=float, default=200.0)
    s.add_argument("--sample-dt", type=float, default=1.0)
    s.add_argument("--replicates", type=int, default=64)
    s.set_defaults(func=cmd_estimate_limiter)

    s = sub.add_parser("solve-macro", parents=[common], help="monotone scheme for the junction problem")
    s.add_argument("--A", type=float, default=None, help="limiter level (default: A0)")
    s.add_argument("--limiter-file", help="limiter.json from estimate-limiter")
    s.add_argument("--dx", type=float, default=0.01)
    s.add_argument("--length", type=float, default=3.0)
    s.add_argument("--horizon", type=float, default=1.0)
    s.add_argument("--snapshots", type=int, default=4)
    s.set_defaults(func=cmd_solve_macro)

    s = sub.add_parser("compare", parents=[common], help="micro-macro comparison, full pipeline")
    s.add_argument("--eps", type=float, nargs="+", default=[0.1, 0.05, 0.025])
    s.add_argument("--horizon", type=float, default=2.0)
    s.add_argument("--x-range", type=float, nargs=2, default=[-1.0, 1.0])
    s.add_argument("--x-points", type=int, default=41)
    s.add_argument("--replicates", type=int, default=8)
    s.add_argument("--dx", type=float, default=0.01)
    s.add_argument("--A", type=float, default=None, help="skip estimation and use this limiter level")
    s.add_argument("--limiter-replicates", type=int, default=16)
    s.add_argument("--limiter-horizon", type=float, default=100.0)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("diagnostics", parents=[common], help="assumption, convexity and probabilistic checks")
    s.add_argument("--which", nargs="+", default=["all"],
                   choices=["all", "assumptions", "convexity", "propagation", "corrector", "concentration"])
    s.add_argument("--replicates", type=int, default=16)
    s.add_argument("--depth", type=int, default=1000, help="propagation depth n")
    s.add_argument("--corrector-n", type=int, default=10_000)
    s.add_argument("--times", type=float, nargs="+", default=[25, 50, 100, 200])
    s.set_defaults(func=cmd_diagnostics)
    return p


def reference_markdown(parser: argparse.ArgumentParser | None = None) -> str:
    """Flag reference generated from the parser."""
    parser = parser or build_parser()
    parts = ["# junctionlab command reference", "", "```", parser.format_help().rstrip(), "```", ""]
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for name, sp in action.choices.items():
                parts += [f"## {name}", "", "```", sp.format_help().rstrip(), "```", ""]
    return "\n".join(parts)


def _apply_config(parser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    data = yaml.safe_load(Path(known.config).read_text()) or {}
    if not isinstance(data, dict):
        raise SpecError(f"{known.config}: configuration must be a mapping")
    defaults = {str(k).replace("-", "_"): v for k, v in data.items()}
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                valid = {a.dest for a in sp._actions}
                sp.set_defaults(**{k: v for k, v in defaults.items() if k in valid})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (OSError, SpecError, yaml.YAMLError) as exc:
        print(f"junctionlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args = parser.parse_args(argv)
    if args.reference:
        print(reference_markdown(parser))
        return EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = OutputSet(args.out)
    try:
        args.func(args, out)
    except InvariantFailure as exc:
        out.cleanup()
        print(f"junctionlab {args.command}: invariant check failed: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (FileNotFoundError, SpecError) as exc:
        out.cleanup()
        print(f"junctionlab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        out.cleanup()
        print(f"junctionlab {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
