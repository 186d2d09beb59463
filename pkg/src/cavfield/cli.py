"""Command-line entry point: forward solves, data synthesis, inversion,
parameter sweeps, and the self-check suite.

Exit codes: 0 success, 2 validation failure, 3 solver non-convergence,
4 check-suite failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import adjoint, artifacts, fem, forward, geometry, metrics, optimizer, synth
from .config import (Setup, build_setup, config_hash, emit_config, load_config,
                     with_delta)
from .errors import (ConfigError, ConstraintViolationError, DisconnectedDomainError,
                     InconsistentRegionError, NoConvergenceError, StagnationError)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cavfield",
        description="Cavity reconstruction from one boundary measurement")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="TOML configuration file")
        p.add_argument("--out", default=None, help="output directory override")

    p = sub.add_parser("forward", help="one state solve plus VTK dump")
    add_common(p)
    p.add_argument("--case", default=None, help="benchmark cavity (default: none)")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("synth", help="generate a noisy measurement trace")
    add_common(p)
    p.add_argument("--case", default="disk", help="benchmark cavity name")
    p.add_argument("--eta", type=float, default=None, help="noise level override")
    p.add_argument("--seed", type=int, default=None, help="noise seed override")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("invert", help="full continuation reconstruction")
    add_common(p)
    p.add_argument("--meas", required=False, default=None, help="trace CSV path")
    p.add_argument("--truth", default=None, help="benchmark case for error metrics")
    p.add_argument("--allow-inverse-crime", action="store_true",
                   help="permit measurements synthesized on the reconstruction mesh")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("sweep", help="parameter study emitting a CSV curve")
    add_common(p)
    p.add_argument("--param", required=True, choices=("delta", "epsilon", "alpha"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--case", default="disk", help="benchmark cavity name")
    p.add_argument("--meas", default=None, help="trace CSV (epsilon/alpha sweeps)")
    p.add_argument("--allow-inverse-crime", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check", help="invariant and certificate suite")
    add_common(p)
    p.set_defaults(func=cmd_check)
    return parser


def _prepare(args, refine=1):
    cfg = load_config(args.config)
    if args.out is not None:
        from dataclasses import replace

        cfg = replace(cfg, outdir=args.out)
    outdir = Path(cfg.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg, refine=refine)
    return cfg, setup, outdir


def cmd_forward(args):
    cfg, setup, outdir = _prepare(args)
    if args.case:
        shape = synth.catalog_case(args.case).shape
        v = geometry.rasterize_cavity(setup.mesh, setup.labels, shape)
    else:
        v = np.ones(setup.mesh.num_nodes)
    sol = forward.solve_state(setup.mesh, setup.labels, setup.coeff, v,
                              setup.delta, setup.f, opts=setup.newton,
                              blocks=setup.blocks)
    out = artifacts.write_vtk(outdir / "state.vtk", setup.mesh,
                              {"u": sol.u, "v": v})
    artifacts.write_manifest(outdir, "forward", config_hash(cfg), setup.mesh_id,
                             cfg.seed, inputs={"case": args.case or ""},
                             outputs=[Path(out).name])
    print(f"forward solve converged in {sol.newton_iters} Newton iterations "
          f"(residual {sol.residual_norm:.3e}) -> {out}")
    return 0


def cmd_synth(args):
    cfg, setup, outdir = _prepare(args)
    eta = cfg.eta if args.eta is None else float(args.eta)
    seed = cfg.seed if args.seed is None else int(args.seed)
    case = synth.catalog_case(args.case)
    trace = synth.generate_measurement(setup, case.shape, eta, seed)
    csv_path, json_path = synth.write_trace(outdir / f"trace_{case.name}", trace)
    artifacts.write_manifest(outdir, "synth", config_hash(cfg), setup.mesh_id,
                             seed, inputs={"case": case.name, "eta": eta},
                             outputs=[Path(csv_path).name, Path(json_path).name])
    print(f"synthesized {case.name} trace (eta={eta}, realized L2 noise "
          f"{trace.realized_l2_noise:.3e}) -> {csv_path}")
    return 0


def _load_measurement(args, setup):
    if args.meas is None:
        raise ConfigError("this command needs a measurement file (--meas)")
    trace = synth.read_trace(args.meas)
    synth.check_inverse_crime(trace, setup.mesh,
                              allow=getattr(args, "allow_inverse_crime", False))
    return trace, synth.values_on_sigma(trace, setup.labels)


def cmd_invert(args):
    cfg, setup, outdir = _prepare(args)
    trace, meas_values = _load_measurement(args, setup)
    schedule = optimizer.ContinuationSchedule(
        epsilons=cfg.resolved_epsilons(setup.mesh), delta=cfg.delta,
        alpha=cfg.resolved_alpha())
    opt_base = cfg.optimizer_options(schedule.epsilons[0])
    v, stages = optimizer.run_continuation(setup, schedule, meas_values,
                                           opt_base=opt_base)
    recovered = optimizer.recovered_set(setup, v)
    outputs = []
    final_state = stages[-1].history.records[-1]
    outputs.append(Path(artifacts.write_vtk(outdir / "phase.vtk", setup.mesh,
                                            {"v": v})).name)
    outputs.append(Path(artifacts.write_polylines_csv(
        outdir / "recovered.csv", setup.mesh, recovered.boundary_polylines)).name)
    for k, stage in enumerate(stages):
        path = outdir / f"history_stage{k}.jsonl"
        stage.history.to_jsonl(path)
        outputs.append(path.name)

    report = {
        "J": final_state["J"], "misfit": final_state["misfit"],
        "gl": final_state["gl"], "alpha": schedule.alpha,
        "delta": schedule.delta,
        "stages": [{"eps": s.eps, "interface_width": s.interface_width,
                    "gl": s.gl, "J": s.J, "iterations": s.iterations}
                   for s in stages],
        "recovered_area": recovered.area,
        "recovered_perimeter": metrics.tv_perimeter(recovered),
        "stagnated": any(s.history.stagnated for s in stages),
    }
    if args.truth:
        truth = metrics.SetOnMesh.from_shape(
            setup.mesh, synth.catalog_case(args.truth).shape)
        sym = metrics.symmetric_difference_area(recovered, truth)
        report["truth"] = {
            "case": args.truth,
            "symmetric_difference": sym,
            "symmetric_difference_ratio": sym / truth.area if truth.area else float("inf"),
            "hausdorff": metrics.hausdorff(recovered, truth),
            "truth_area": truth.area,
            "truth_perimeter": metrics.tv_perimeter(truth),
        }
    outputs.append(Path(artifacts.write_json(outdir / "report.json", report)).name)
    artifacts.write_manifest(outdir, "invert", config_hash(cfg), setup.mesh_id,
                             cfg.seed,
                             inputs={"meas": Path(args.meas).name,
                                     "fine_mesh_id": trace.fine_mesh_id},
                             outputs=outputs)
    print(f"reconstruction finished: J={report['J']:.6e} "
          f"area={report['recovered_area']:.4f} -> {outdir / 'report.json'}")
    return 0


def cmd_sweep(args):
    cfg, setup, outdir = _prepare(args)
    values = [float(x) for x in args.values.split(",") if x.strip()]
    if not values:
        raise ConfigError("--values must list at least one number")
    rows, header = [], None
    if args.param == "delta":
        shape = synth.catalog_case(args.case).shape
        v = geometry.rasterize_cavity(setup.mesh, setup.labels, shape)
        report = optimizer.delta_sweep(setup, values, v)
        header = ["delta", "trace_error"]
        rows = [[r["delta"], r["trace_error"]] for r in report["rows"]]
    elif args.param == "epsilon":
        _, meas_values = _load_measurement(args, setup)
        schedule = optimizer.ContinuationSchedule(
            epsilons=tuple(values), delta=cfg.delta, alpha=cfg.resolved_alpha())
        opt_base = cfg.optimizer_options(values[0])
        _, stages = optimizer.run_continuation(setup, schedule, meas_values,
                                               opt_base=opt_base)
        header = ["epsilon", "interface_width", "gl", "misfit", "J"]
        rows = [[s.eps, s.interface_width, s.gl, s.misfit, s.J] for s in stages]
    else:
        _, meas_values = _load_measurement(args, setup)
        eps = cfg.resolved_epsilons(setup.mesh)[-1]
        header = ["alpha", "misfit", "gl", "recovered_area"]
        for alpha in values:
            opt = cfg.optimizer_options(eps)
            from dataclasses import replace

            opt = replace(opt, alpha=alpha)
            v, hist = optimizer.minimize_fixed_epsilon(
                setup, opt, np.ones(setup.mesh.num_nodes), meas_values)
            last = hist.records[-1]
            area = optimizer.recovered_set(setup, v).area
            rows.append([alpha, last["misfit"], last["gl"], area])
    path = artifacts.write_csv(outdir / f"sweep_{args.param}.csv", header, rows)
    artifacts.write_manifest(outdir, f"sweep:{args.param}", config_hash(cfg),
                             setup.mesh_id, cfg.seed,
                             inputs={"values": values}, outputs=[Path(path).name])
    print(f"sweep over {args.param} -> {path}")
    return 0


def run_check_suite(cfg, setup):
    """Invariant and certificate suite; returns (report, all_passed)."""
    checks = []

    def record(name, passed, **details):
        checks.append({"name": name, "passed": bool(passed), **details})

    mesh, labels = setup.mesh, setup.labels
    try:
        geometry.validate_mesh(mesh)
        area = float(mesh.cell_areas.sum())
        x0, y0, x1, y1 = mesh.rect
        exact = (x1 - x0) * (y1 - y0)
        record("mesh_invariants", abs(area - exact) <= 1e-12 * exact,
               area=area, exact=exact)
    except ValueError as exc:
        record("mesh_invariants", False, error=str(exc))

    spec = geometry.RegionSpec(omega1=cfg.omega1, omega2=cfg.omega2,
                               sigma_side=cfg.sigma_side, sigma_span=cfg.sigma_span)
    again = geometry.mark_regions(mesh, spec)
    record("region_marking_idempotent",
           np.array_equal(again.omega1_cells, labels.omega1_cells)
           and np.array_equal(again.sigma_edges, labels.sigma_edges)
           and again.d0 == labels.d0, d0=labels.d0)

    ones = np.ones(mesh.num_nodes)
    K = fem.assemble_weighted_stiffness(mesh, setup.coeff, ones, 1.0,
                                        blocks=setup.blocks)
    row_sums = np.abs(np.asarray(K.sum(axis=1))).max()
    record("stiffness_constant_nullspace", row_sums <= 1e-10, max_row_sum=float(row_sums))

    rng = np.random.default_rng(cfg.seed)
    u = rng.uniform(-1, 1, mesh.num_nodes)
    w = rng.normal(size=mesh.num_nodes)
    w /= np.linalg.norm(w)
    h = 1e-5
    rp = fem.assemble_reaction_residual(mesh, ones, u + h * w)
    rm = fem.assemble_reaction_residual(mesh, ones, u - h * w)
    jw = fem.assemble_reaction_jacobian(mesh, ones, u) @ w
    fd_err = np.linalg.norm((rp - rm) / (2 * h) - jw) / np.linalg.norm(jw)
    record("reaction_jacobian_fd", fd_err <= 1e-6, rel_error=float(fd_err))

    cert = metrics.operator_certificates(setup, trials=100, seed=cfg.seed)
    record("operator_certificates", cert["passed"],
           monotonicity_min=cert["monotonicity_min"],
           coercivity_min_margin=cert["coercivity_min_margin"])

    bound_results = {}
    bounds_ok = True
    for case in synth.catalog_cases():
        sol = forward.solve_cavity_reference(mesh, labels, setup.coeff,
                                             case.shape, setup.f, opts=setup.newton)
        rep = forward.check_state_bounds(mesh, setup.coeff, sol, setup.f)
        bound_results[case.name] = rep["passed"]
        bounds_ok = bounds_ok and rep["passed"]
    record("state_bounds_catalog", bounds_ok, cases=bound_results)

    apriori_ok = True
    for k in range(3):
        rx0 = 0.25 + 0.05 * k
        f_rand = fem.build_source(mesh, labels, 2.0 + 3.0 * k,
                                  (rx0, 0.0, rx0 + 0.3, 0.1))
        sol = forward.solve_state(mesh, labels, setup.coeff, ones, 1.0, f_rand,
                                  opts=setup.newton, blocks=setup.blocks)
        rep = forward.check_state_bounds(mesh, setup.coeff, sol, f_rand)
        apriori_ok = apriori_ok and rep["passed"]
    record("apriori_bound_samples", apriori_ok)

    sig = setup.sigma_mass
    r = rng.normal(size=mesh.num_nodes)
    record("sigma_mass_positive", float(r @ (sig @ r)) >= 0.0)

    disk = synth.catalog_case("disk").shape
    trace = synth.generate_measurement(setup, disk, eta=cfg.eta, seed=cfg.seed)
    meas_values = synth.values_on_sigma(trace, labels)
    opt = cfg.optimizer_options(cfg.resolved_epsilons(mesh)[-1])
    audit = adjoint.gradient_fd_audit(setup, opt, meas_values, n_directions=3,
                                      h_values=(1e-4, 1e-5, 1e-6), seed=cfg.seed)
    record("gradient_fd_audit", audit["passed"],
           min_rel_error=audit["min_rel_error"])

    passed = all(c["passed"] for c in checks)
    return {"checks": checks, "passed": passed}, passed


def cmd_check(args):
    cfg, setup, outdir = _prepare(args)
    report, passed = run_check_suite(cfg, setup)
    path = artifacts.write_json(outdir / "check_report.json", report)
    artifacts.write_manifest(outdir, "check", config_hash(cfg), setup.mesh_id,
                             cfg.seed, outputs=[Path(path).name])
    for c in report["checks"]:
        print(f"[{'PASS' if c['passed'] else 'FAIL'}] {c['name']}")
    print(f"check suite {'passed' if passed else 'FAILED'} -> {path}")
    return 0 if passed else 4


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InconsistentRegionError, ConstraintViolationError,
            DisconnectedDomainError, StagnationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NoConvergenceError as exc:
        print(f"solver did not converge: {exc} {exc.diagnostics}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
