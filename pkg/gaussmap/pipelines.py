"""The four batch pipelines behind the command line: transport, flow, verify and compare."""

import logging
import math
import time

import numpy as np
import pandas as pd

from gaussmap.artifacts import (
    ArtifactDir,
    area_figure,
    body_frame,
    cloud_frame,
    compare_figure,
    flow_figure,
    level_figure,
    level_file,
    map_frame,
    read_flow_samples,
    read_level_family,
    support_frame,
)
from gaussmap.config import build_source, build_target, canonical_json, record_levels
from gaussmap.duality import (
    DirectPsi,
    SupportPotential,
    check_graph_duality,
    check_ST,
    duality_diagnostics,
    psi_bound_violations,
)
from gaussmap.errors import GaussMapError, InputError, MapInversionError, SolverError, VerificationError
from gaussmap.flow import (
    FlowState,
    FlowTrace,
    area_rate,
    classical_flow,
    compare_with_levels,
    isoperimetric_ratios,
    mass_calibration,
    run_flow as integrate_flow,
)
from gaussmap.gauss_limit import (
    RANGE_TOL,
    GaussMapResult,
    PotentialField,
    assemble_map,
    convexity_defect,
    extract_levels,
    gauss_map,
    invert_map,
    limit_pairing,
    make_problem,
)
from gaussmap.geometry import body_from_support, isoperimetric_ratio, weighted_mass
from gaussmap.measures import WeightedCloud, discretize, ks_distance, radial_cdf
from gaussmap.schemas import (
    CheckResult,
    DualityDiagnostics,
    FlowIndex,
    FlowLevelEntry,
    LevelEntry,
    RunConfig,
    TransportSummary,
    VerifyReport,
)
from gaussmap.transport import wasserstein2

logger = logging.getLogger(__name__)

DUALITY_PITCHES = 5.0
COMPARE_FRACTION = 0.05
CONVEXITY_DEFECT_BOUND = 0.02
PUSHFORWARD_FACTOR = 2.0
GAP_BOUND = 1e-6
CLASSICAL_STEPS = 2000
CLASSICAL_SNAPSHOTS = 8
AREA_LAW_TOL = 0.01


def _elapsed(start_time: float) -> float:
    return round(time.time() - start_time, 2)


def write_transport_artifacts(out: ArtifactDir, result: GaussMapResult):
    problem = result.problem
    src, tgt = problem.source, problem.target
    r = problem.radius
    out.write_csv("source.csv", cloud_frame(src.points, src.weights))
    out.write_csv("target.csv", cloud_frame(tgt.points, tgt.weights))
    out.write_csv("phi.csv", cloud_frame(src.points, src.weights, phi=result.phi.values, phi_pre=result.continuation.phi_pre.values))
    out.write_csv("map.csv", map_frame(result.tmap.source, result.tmap.images))
    out.write_csv("pairing.csv", pd.DataFrame({"src_index": np.arange(len(src)), "tgt_index": result.tmap.pairing}))

    # duals of the last continuation step, in units where r = 1
    last = result.continuation.steps[-1]
    out.write_csv("duals_u.csv", pd.DataFrame({"index": np.arange(len(last.duals.u)), "u": last.duals.u}))
    out.write_csv("duals_v.csv", pd.DataFrame({"index": np.arange(len(last.duals.v)), "v": last.duals.v}))

    psi = DirectPsi(result.phi, result.map_family, r)
    out.write_csv("psi.csv", pd.DataFrame({"x": tgt.points[:, 0], "y": tgt.points[:, 1], "psi": psi(tgt.points)}))

    entries = []
    for k, (level, body) in enumerate(zip(result.levels.levels, result.levels.bodies)):
        name = level_file("levels", k)
        out.write_csv(name, body_frame(body))
        entries.append(LevelEntry(level=float(level), file=name, mass=weighted_mass(body, problem.rho0)))
    out.write_json("levels.json", {"levels": [e.model_dump() for e in entries]})
    out.write_json("continuation.json", result.summary.continuation)
    out.write_json("transport.json", result.summary)
    out.write_json("duality.json", duality_diagnostics(result))
    out.write_svg("levels.svg", level_figure(result.levels, problem.body))


def run_transport(config: RunConfig) -> dict:
    """Continuation, recalibration, level extraction and the assembled map, written to the output directory."""
    start_time = time.time()
    out = ArtifactDir(config.output_dir)
    try:
        logger.info("[transport] Building measures: %s source, target radius %g", config.source.shape, config.target.radius)
        rho0, rho1 = build_source(config), build_target(config)
        problem = make_problem(rho0, rho1, config.discretization.n, config.discretization.scheme, config.seed)

        tr = config.transport
        logger.info("[transport] Running continuation over t = %s with %d points", tr.t_schedule, len(problem.source))
        result = gauss_map(
            problem,
            tr.t_schedule,
            levels=config.levels,
            n_levels=tr.levels,
            map_levels=tr.map_levels,
            solver=tr.solver,
            epsilon=tr.epsilon,
            max_iter=tr.max_iter,
            resolution_floor=tr.resolution_floor,
        )

        logger.info("[transport] Writing artifacts to %s", out.root)
        write_transport_artifacts(out, result)
        out.write_manifest("transport", canonical_json(config))

        processing_time = _elapsed(start_time)
        logger.info("Successfully ran transport in %.2fs", processing_time)
        return {"status": "success", "output_dir": str(out.root), "processing_time_seconds": processing_time, "summary": result.summary}

    except GaussMapError as exc:
        if isinstance(exc, SolverError) and getattr(exc, "report", None) is not None:
            out.write_json("continuation.json", exc.report)
        logger.error("Transport failed after %.2fs: %s", _elapsed(start_time), exc.detail)
        raise


def _classical(config: RunConfig, out: ArtifactDir, rho0) -> FlowIndex:
    fc = config.flow
    A = rho0.domain
    lifetime = A.area / (2.0 * math.pi * fc.c)
    dt = fc.dlambda or lifetime / CLASSICAL_STEPS
    trace = classical_flow(A, fc.c, dt, fc.t_end, M=fc.angles, smoothing=fc.smoothing)
    out.write_csv("flow/area.csv", pd.DataFrame({"time": trace.levels, "area": trace.areas, "ratio": isoperimetric_ratios(trace)}))

    rate = area_rate(trace)
    expected = -2.0 * math.pi * fc.c
    if abs(rate - expected) > AREA_LAW_TOL * abs(expected):
        logger.warning("Classical area rate %.6g differs from %.6g by more than 1%%", rate, expected)
    else:
        logger.info("Classical area rate %.6g (expected %.6g)", rate, expected)

    picks = np.unique(np.linspace(0, len(trace.states) - 1, CLASSICAL_SNAPSHOTS).round().astype(int))
    index = FlowIndex(reading="classical", collapsed_at=trace.collapsed_at, halvings=trace.halvings, area_rate=rate)
    samples = []
    for k, i in enumerate(picks):
        state = trace.states[i]
        name = level_file("flow", k)
        out.write_csv(name, support_frame(state.s))
        samples.append((state.level, state.s))
        index.records.append(FlowLevelEntry(
            level=state.level,
            area=trace.areas[i],
            mass=weighted_mass(body_from_support(state.s), rho0),
            file=name,
            isoperimetric_ratio=isoperimetric_ratio(state.s),
        ))
    out.write_svg("flow/area.svg", area_figure(trace.levels, trace.areas))
    out.write_svg("flow.svg", flow_figure(samples, A, title="classical flow"))
    return index


def _transported(config: RunConfig, out: ArtifactDir, rho0, rho1) -> FlowIndex:
    fc = config.flow
    r = config.target.radius
    nu_cdf = radial_cdf(rho1)
    trace = integrate_flow(
        rho0.domain, rho0, rho1, r, record_levels(config, nu_cdf),
        M=fc.angles, dlambda=fc.dlambda, smoothing=fc.smoothing, reading=fc.reading,
    )
    index = FlowIndex(reading=fc.reading, collapsed_at=trace.collapsed_at, halvings=trace.halvings)
    for k, (state, area, mass) in enumerate(zip(trace.states, trace.areas, trace.masses)):
        name = level_file("flow", k)
        out.write_csv(name, support_frame(state.s))
        index.records.append(FlowLevelEntry(
            level=state.level, area=area, mass=mass, file=name, isoperimetric_ratio=isoperimetric_ratio(state.s),
        ))
    calibration = mass_calibration(trace, rho0, nu_cdf)
    out.write_csv("flow/mass.csv", pd.DataFrame([m.model_dump() for m in calibration]))
    worst = max(m.residual for m in calibration)
    logger.info("Flow mass calibration: worst residual %.4f over %d levels", worst, len(calibration))
    out.write_svg("flow.svg", flow_figure([(s.level, s.s) for s in trace.states], rho0.domain))
    return index


def run_flow(config: RunConfig) -> dict:
    """Gauss-curvature flow from ∂A, recorded at the configured levels (or over time for the classical flow)."""
    start_time = time.time()
    out = ArtifactDir(config.output_dir)
    try:
        rho0, rho1 = build_source(config), build_target(config)
        if config.flow.classical:
            logger.info("[flow] Classical flow with c=%g from the %s", config.flow.c, config.source.shape)
            index = _classical(config, out, rho0)
        else:
            logger.info("[flow] Transport flow (%s reading) from the %s", config.flow.reading, config.source.shape)
            index = _transported(config, out, rho0, rho1)
        out.write_json("flow.json", index)
        out.write_manifest("flow", canonical_json(config))

        processing_time = _elapsed(start_time)
        logger.info("Successfully ran flow (%d records) in %.2fs", len(index.records), processing_time)
        return {"status": "success", "output_dir": str(out.root), "processing_time_seconds": processing_time, "index": index}

    except GaussMapError as exc:
        logger.error("Flow failed after %.2fs: %s", _elapsed(start_time), exc.detail)
        raise


def _check(name: str, value: float, bound: float) -> CheckResult:
    return CheckResult(name=name, value=float(value), bound=float(bound), passed=bool(value <= bound))


def verification_checks(config: RunConfig, out: ArtifactDir) -> list[CheckResult]:
    """Recompute the limit-map invariants from the φ file on disk."""
    rho0, rho1 = build_source(config), build_target(config)
    r = config.target.radius
    nu_cdf = radial_cdf(rho1)
    summary = TransportSummary.model_validate(out.read_json("transport.json"))
    frame = out.read_csv("phi.csv", ("x", "y", "w", "phi"))
    tgt_frame = out.read_csv("target.csv", ("x", "y", "w"))
    source = WeightedCloud(frame[["x", "y"]].to_numpy(), frame["w"].to_numpy(), summary.pitch)
    target = WeightedCloud(tgt_frame[["x", "y"]].to_numpy(), tgt_frame["w"].to_numpy(), math.sqrt(rho1.domain.area / len(tgt_frame)))
    phi = PotentialField(source, frame["phi"].to_numpy(), kind="phi_limit", t=math.inf)
    pitch = summary.pitch
    checks = []

    excess = max(0.0, float(phi.values.max()) - r, -float(phi.values.min()))
    checks.append(_check("phi_range", excess, RANGE_TOL * r))
    checks.append(_check("ks_radial", ks_distance(phi.values, phi.weights, nu_cdf), 1.0 / len(source) + 1e-12))
    margins = [s.bound_margin for s in summary.continuation.steps]
    checks.append(_check("sup_bound", max(0.0, -min(margins)) if margins else 0.0, 1e-6 * r))
    if config.transport.solver == "exact":
        gaps = [abs(s.duality_gap) for s in summary.continuation.steps]
        checks.append(_check("duality_gap", max(gaps) if gaps else 0.0, GAP_BOUND))
    if out.exists("duality.json"):
        duality = DualityDiagnostics.model_validate(out.read_json("duality.json"))
        checks.append(_check("psi_t_bound", duality.bound_violations(), 0.0))
        if config.transport.solver == "exact":
            checks.append(_check("psi_t_upper", duality.upper_violations(), 0.0))

    if excess > RANGE_TOL * r:
        logger.warning("φ leaves [0, r]; map-level checks are skipped")
        return checks

    tr = config.transport
    map_values = nu_cdf.ppf(np.arange(1, tr.map_levels + 1) / float(tr.map_levels)) if tr.map_levels else np.unique(phi.values[phi.values > 0])
    map_family = extract_levels(phi, map_values)
    checks.append(_check("levels_nested", 0.0 if map_family.is_nested(tol=1e-9) else 1.0, 0.0))
    checks.append(_check("convexity_defect", convexity_defect(phi, map_family), CONVEXITY_DEFECT_BOUND))

    tmap = limit_pairing(assemble_map(phi, map_family), source.weights, target)
    baseline = wasserstein2(target, discretize(rho1, len(target), scheme="low-discrepancy", seed=config.seed))
    checks.append(_check("pushforward_w2", tmap.pushforward_w2, PUSHFORWARD_FACTOR * baseline))

    psi = DirectPsi(phi, map_family, r)
    psi_values = psi(target.points)
    checks.append(_check("psi_bound", psi_bound_violations(psi_values, target.points, rho0.domain.diameter), 0.0))
    checks.append(_check("graph_duality", check_graph_duality(psi, tmap).max, DUALITY_PITCHES * pitch * r))
    try:
        inverse = invert_map(tmap)
    except MapInversionError as exc:
        logger.warning("Inverse map unavailable: %s", exc.detail)
        checks.append(_check("map_inversion", 1.0, 0.0))
        return checks
    st = check_ST(SupportPotential(target.points, psi_values, "direct"), inverse)
    checks.append(_check("support_duality", st.max, DUALITY_PITCHES * pitch * r))
    return checks


def format_table(checks: list[CheckResult]) -> str:
    lines = [f"{'check':<20} {'value':>14} {'bound':>14}  result"]
    for c in checks:
        lines.append(f"{c.name:<20} {c.value:>14.6g} {c.bound:>14.6g}  {'pass' if c.passed else 'FAIL'}")
    return "\n".join(lines)


def run_verify(config: RunConfig) -> dict:
    """Re-check the transport artifacts; runs the transport first when none are present."""
    start_time = time.time()
    out = ArtifactDir(config.output_dir)
    try:
        if not out.exists("phi.csv"):
            logger.info("[verify] No transport artifacts in %s, running transport first", out.root)
            run_transport(config)
        report = VerifyReport(checks=verification_checks(config, out))
        print(format_table(report.checks))
        out.write_json("verify.json", report)
        out.write_manifest("verify", canonical_json(config))
        processing_time = _elapsed(start_time)
        if not report.passed:
            failures = report.failures()
            raise VerificationError(f"{len(failures)} checks failed: {', '.join(failures)}", failures)
        logger.info("Successfully verified %d checks in %.2fs", len(report.checks), processing_time)
        return {"status": "success", "output_dir": str(out.root), "processing_time_seconds": processing_time, "report": report}

    except GaussMapError as exc:
        logger.error("Verification failed after %.2fs: %s", _elapsed(start_time), exc.detail)
        raise


def run_compare(config: RunConfig) -> dict:
    """Per-level Hausdorff distance between the transport's sub-level hulls and the flow curves."""
    start_time = time.time()
    out = ArtifactDir(config.output_dir)
    try:
        if not out.exists("levels.json"):
            logger.info("[compare] No transport artifacts in %s, running transport first", out.root)
            run_transport(config)
        if not out.exists("flow.json"):
            logger.info("[compare] No flow artifacts in %s, running flow first", out.root)
            run_flow(config)
        if out.read_json("flow.json").get("reading") == "classical":
            raise InputError("flow artifacts come from the classical flow and have no levels to compare")

        rho0 = build_source(config)
        r = config.target.radius
        family = read_level_family(out)
        samples = read_flow_samples(out)
        trace = FlowTrace(states=[FlowState(s, level) for level, s in samples])
        bound = config.compare.bound or COMPARE_FRACTION * rho0.domain.diameter
        rows = compare_with_levels(trace, family, bound)

        lo, hi = config.compare.min_level * r, config.compare.max_level * r
        rows = [
            row if lo <= row.level <= hi or row.hausdorff is None
            else row.model_copy(update={"passed": None, "note": "outside the compared range"})
            for row in rows
        ]
        out.write_csv("compare.csv", pd.DataFrame([row.model_dump() for row in rows]))
        out.write_json("compare.json", {"bound": bound, "levels": [row.model_dump() for row in rows]})
        out.write_svg("compare.svg", compare_figure(family, samples, rho0.domain))
        out.write_manifest("compare", canonical_json(config))

        compared = [row for row in rows if row.passed is not None]
        for row in compared:
            logger.info("Level %.4f: Hausdorff %.4g (bound %.4g)", row.level, row.hausdorff, bound)
        if not compared:
            raise VerificationError("no common levels between transport and flow artifacts in the compared range")
        failed = [f"level {row.level:.4g}" for row in compared if not row.passed]
        if failed:
            raise VerificationError(f"{len(failed)} levels exceed the Hausdorff bound {bound:.4g}", failed)

        processing_time = _elapsed(start_time)
        logger.info("Successfully compared %d levels in %.2fs", len(compared), processing_time)
        return {"status": "success", "output_dir": str(out.root), "processing_time_seconds": processing_time, "rows": rows}

    except GaussMapError as exc:
        logger.error("Compare failed after %.2fs: %s", _elapsed(start_time), exc.detail)
        raise


PIPELINES = {
    "transport": run_transport,
    "flow": run_flow,
    "verify": run_verify,
    "compare": run_compare,
}
