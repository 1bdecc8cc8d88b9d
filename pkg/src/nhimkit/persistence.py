"""Persistence experiments: perturb, re-certify, recompute, measure drift.

A perturbation family is a per-coordinate expression vector p with a
distinguished size parameter; applying it to a map yields f + eps*p with the
inverse formulas dropped (backward steps fall back to Newton inversion).
Sweeps rerun the full pipeline per eps: topological checks first, and only
when they pass both graph transforms, the intersection, and the tangent
field, recording margins, convergence data, and C0/C1 drift against the
unperturbed baseline.  Rows never abort the sweep; failures are recorded.

The escape-time probe measures local maximality: points off the invariant
object leave the box in finite forward or backward time, points on it
survive, and backward steps that cannot be inverted count as flagged exits.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .model import GeometricModel, box_grid, grassmann_distance
from .mapdsl import (MapDefinition, map_eval_array, map_eval_jacobian_array,
                     map_inverse_eval_array, ParseError)
from .checks import run_topological_checks, CheckReport
from .transform import (ManifoldGrid, SectionGrid, iterate_transform,
                        intersect_graphs, zero_section)
from .tangent import TangentField, compute_tangent_by_cone_iteration
from .demos import DemoSystem

EPS_PARAM = "pert_eps"
BOX_TOL = 1e-12


class FamilyError(ValueError):
    """Perturbation family incompatible with the map it is applied to."""


@dataclass(frozen=True)
class PerturbationFamily:
    """Per-coordinate perturbation expressions with a distinguished size.

    expressions holds one source string per map coordinate.  Random
    trigonometric families record their generation parameters (degree,
    coefficient bound, seed) so every report can reproduce them.
    """

    expressions: tuple
    label: str = "custom"
    degree: Optional[int] = None
    bound: Optional[float] = None
    seed: Optional[int] = None

    @classmethod
    def constant(cls, values: Sequence[float]) -> "PerturbationFamily":
        """Constant shift family, e.g. (1, 0) shifts the first coordinate."""
        exprs = tuple(repr(float(v)) for v in values)
        return cls(exprs, label="shift" + repr(tuple(float(v) for v in values)))

    @classmethod
    def from_expressions(cls, expressions: Sequence[str],
                         label: str = "custom") -> "PerturbationFamily":
        return cls(tuple(str(e) for e in expressions), label=label)

    @classmethod
    def random_trig(cls, variables: Sequence[str], degree: int, bound: float,
                    seed: int) -> "PerturbationFamily":
        """Seeded random trigonometric polynomial in every variable.

        Coefficients are uniform in [-1,1] scaled by bound/(2*degree*nvars),
        so the sup-norm of each coordinate expression is at most bound.
        """
        if degree < 1:
            raise FamilyError(f"degree must be >= 1, got {degree}")
        rng = np.random.default_rng(seed)
        nvars = len(variables)
        scale = float(bound) / (2.0 * degree * nvars)
        exprs = []
        for _ in range(nvars):
            terms = []
            for v in variables:
                for d in range(1, degree + 1):
                    a = rng.uniform(-1.0, 1.0) * scale
                    b = rng.uniform(-1.0, 1.0) * scale
                    terms.append(f"{a!r}*cos({d}*{v})")
                    terms.append(f"{b!r}*sin({d}*{v})")
            exprs.append(" + ".join(terms))
        return cls(tuple(exprs), label=f"random-trig(degree={degree}, "
                                       f"bound={bound}, seed={seed})",
                   degree=int(degree), bound=float(bound), seed=int(seed))

    def describe(self) -> dict:
        return {"label": self.label, "expressions": list(self.expressions),
                "degree": self.degree, "bound": self.bound, "seed": self.seed}


def perturb(mapdef: MapDefinition, family: PerturbationFamily,
            eps: float) -> MapDefinition:
    """Coordinate-wise sum f + eps*p as a new map definition.

    The size enters as the reserved parameter pert_eps, so eps=0 evaluates
    identically to the original map.  Inverse formulas are dropped: the
    perturbed inverse is not known in closed form.
    """
    if len(family.expressions) != mapdef.dim:
        raise FamilyError(
            f"family has {len(family.expressions)} expressions for a "
            f"{mapdef.dim}-dimensional map")
    if EPS_PARAM in mapdef.params or EPS_PARAM in mapdef.variables:
        raise FamilyError(f"map already uses the reserved name {EPS_PARAM!r}")
    sources = mapdef.formula_sources()
    combined = [f"({src}) + {EPS_PARAM}*({p})"
                for src, p in zip(sources, family.expressions)]
    params = dict(mapdef.params)
    params[EPS_PARAM] = float(eps)
    try:
        return MapDefinition.parse(list(mapdef.variables), combined,
                                   params=params,
                                   periodic=list(mapdef.periodic))
    except ParseError as exc:
        raise FamilyError(f"family expression does not parse: {exc}") from exc


def measure_c1_size(original: MapDefinition, perturbed: MapDefinition,
                    model: GeometricModel, base_count: int = 32,
                    fiber_count: int = 9) -> float:
    """sup over a box grid of |f-g| + |Jf-Jg| (Euclidean and spectral norms)."""
    pts = box_grid(model, base_count, fiber_count)
    va = map_eval_array(original, pts, wrap=False)
    vb = map_eval_array(perturbed, pts, wrap=False)
    _, ja = map_eval_jacobian_array(original, pts)
    _, jb = map_eval_jacobian_array(perturbed, pts)
    dv = np.linalg.norm(va - vb, axis=1)
    dj = np.linalg.norm(ja - jb, ord=2, axis=(1, 2))
    return float((dv + dj).max())


# ---------------------------------------------------------------------------
# Distances between computed objects

def _fiber_values(obj: Union[ManifoldGrid, SectionGrid]) -> np.ndarray:
    if isinstance(obj, ManifoldGrid):
        n = obj.model.base_dim
        return np.concatenate([obj.xi_s.reshape(-1, obj.model.stable_dim),
                               obj.xi_u.reshape(-1, obj.model.unstable_dim)],
                              axis=1)
    if isinstance(obj, SectionGrid):
        return obj.flat_values()
    raise TypeError(f"expected ManifoldGrid or SectionGrid, got {type(obj).__name__}")


def c0_distance(a: Union[ManifoldGrid, SectionGrid],
                b: Union[ManifoldGrid, SectionGrid]) -> float:
    """Sup over the common grid of the fiber-value distance."""
    if type(a) is not type(b):
        raise TypeError("objects must be of the same kind")
    va = _fiber_values(a)
    vb = _fiber_values(b)
    if va.shape != vb.shape:
        raise ValueError(f"grids differ: {va.shape} vs {vb.shape}")
    if va.shape[1] == 0:
        return 0.0
    return float(np.linalg.norm(va - vb, axis=1).max(initial=0.0))


def _plane_stack(tangents) -> np.ndarray:
    if isinstance(tangents, TangentField):
        return tangents.planes
    return np.asarray(tangents, dtype=float)


def c1_distance(a, b, tangents_a, tangents_b) -> float:
    """C0 distance plus the worst Grassmann distance of the tangent planes."""
    pa = _plane_stack(tangents_a)
    pb = _plane_stack(tangents_b)
    if pa.shape != pb.shape:
        raise ValueError(f"tangent stacks differ: {pa.shape} vs {pb.shape}")
    worst = 0.0
    for i in range(pa.shape[0]):
        worst = max(worst, grassmann_distance(pa[i], pb[i]))
    return c0_distance(a, b) + worst


# ---------------------------------------------------------------------------
# Escape-time probe

@dataclass
class EscapeProbe:
    """First exit iterates per point; inf marks survival through k_max."""

    forward_exit: np.ndarray
    backward_exit: np.ndarray
    backward_inverse_failed: np.ndarray
    k_max: int


def _in_box(model: GeometricModel, pts: np.ndarray) -> np.ndarray:
    ok = np.isfinite(pts).all(axis=1)
    rs = np.asarray(model.radii_s)
    ru = np.asarray(model.radii_u)
    if rs.size:
        ok &= (np.abs(pts[:, model.sl_s]) <= rs + BOX_TOL).all(axis=1)
    if ru.size:
        ok &= (np.abs(pts[:, model.sl_u]) <= ru + BOX_TOL).all(axis=1)
    return ok


def escape_time_probe(mapdef: MapDefinition, model: GeometricModel,
                      points: np.ndarray, k_max: int) -> EscapeProbe:
    """First iterate at which each orbit leaves the box, in both directions.

    Backward steps go through the inverse (closed-form or Newton); a failed
    inversion counts as an exit at that step and is flagged separately.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, model.ambient_dim)
    inside = _in_box(model, pts)
    if not inside.all():
        bad = int(np.flatnonzero(~inside)[0])
        raise ValueError(f"probe point {bad} starts outside the box")
    count = pts.shape[0]
    fwd = np.full(count, np.inf)
    cur = pts.copy()
    active = np.arange(count)
    for k in range(1, k_max + 1):
        if active.size == 0:
            break
        cur = map_eval_array(mapdef, cur)
        keep = _in_box(model, cur)
        fwd[active[~keep]] = k
        active = active[keep]
        cur = cur[keep]

    bwd = np.full(count, np.inf)
    flagged = np.zeros(count, dtype=bool)
    cur = pts.copy()
    active = np.arange(count)
    for k in range(1, k_max + 1):
        if active.size == 0:
            break
        prev, ok, _ = map_inverse_eval_array(mapdef, cur, cur.copy())
        failed = ~ok
        bwd[active[failed]] = k
        flagged[active[failed]] = True
        keep_rows = ok
        prev = prev[keep_rows]
        active = active[keep_rows]
        keep = _in_box(model, prev)
        bwd[active[~keep]] = k
        active = active[keep]
        cur = prev[keep]
    return EscapeProbe(fwd, bwd, flagged, k_max)


# ---------------------------------------------------------------------------
# Sweep

@dataclass
class SweepSettings:
    """Solver and grid parameters for a persistence sweep.

    base_count/fiber_count default to the demo's own certification grid.
    tol_change_scale, when set, replaces tol_change by scale*eps on each
    positive-eps row: systems with a neutral normal rate stall polynomially,
    and an eps-proportional stopping threshold keeps the relative stall
    error uniform across decades.
    """

    base_count: Optional[int] = None
    fiber_count: Optional[int] = None
    tol_change: float = 1e-12
    tol_change_scale: Optional[float] = None
    tol_residual: float = 1e-10
    max_iter: int = 20000
    newton_tol: float = 1e-12
    newton_max: int = 50
    depth_k: int = 40
    check_base_count: Optional[int] = None
    check_fiber_count: Optional[int] = None
    threads: Optional[int] = None

    def tol_change_for(self, eps: float) -> float:
        if self.tol_change_scale is not None and eps > 0.0:
            return self.tol_change_scale * eps
        return self.tol_change

    def resolved_threads(self) -> int:
        if self.threads is not None:
            return max(1, int(self.threads))
        env = os.environ.get("NHIM_THREADS")
        if env:
            try:
                return max(1, int(env))
            except ValueError:
                return 1
        return 1


@dataclass
class SweepRow:
    """Everything recorded for one perturbation size."""

    eps: float
    runtime_s: float
    perturbation_c1: float
    checks_pass: bool
    margins: Optional[tuple] = None
    transforms: Optional[dict] = None
    intersect_residual: Optional[float] = None
    manifold_sup: Optional[tuple] = None
    in_box: Optional[bool] = None
    tangent_margins: Optional[dict] = None
    c0: Optional[float] = None
    c1: Optional[float] = None
    failure: Optional[str] = None


@dataclass
class SweepReport:
    """Per-eps rows plus the drift constants tying margins to eps."""

    demo_name: str
    family: dict
    eps_list: tuple
    rows: list
    baseline_checks_pass: bool
    baseline_margins: Optional[tuple] = None
    margin_drift: Optional[tuple] = None
    threads: int = 1
    settings: dict = field(default_factory=dict)


def _margins_tuple(report: CheckReport) -> tuple:
    return (report.margin_image_vs_stable_boundary,
            report.margin_unstable_boundary_escape,
            report.cone_margin_s,
            report.cone_margin_u)


@dataclass
class PipelineResult:
    checks: CheckReport
    manifold: Optional[ManifoldGrid] = None
    tangents: Optional[TangentField] = None
    transforms: Optional[dict] = None
    intersect_residual: Optional[float] = None


def compute_invariant_objects(mapdef: MapDefinition, model: GeometricModel,
                              base_count: int, fiber_count: int,
                              settings: SweepSettings,
                              tol_change: Optional[float] = None,
                              check_counts: Optional[tuple] = None,
                              ) -> PipelineResult:
    """Checks, then both graph transforms, intersection, and tangents.

    Transforms are skipped entirely when the checks fail.  A section kind
    whose value dimension is zero is trivial and contributes no transform;
    its side of the intersection is the whole fiber box.
    """
    cb, cf = check_counts if check_counts else (base_count, fiber_count)
    checks = run_topological_checks(model, mapdef, base_count=cb, fiber_count=cf)
    if not checks.passed:
        return PipelineResult(checks=checks)
    tol = settings.tol_change if tol_change is None else tol_change
    transforms = {}
    sec_u = None
    sec_s = None
    if model.stable_dim > 0:
        init = zero_section(model, "unstable", base_count, fiber_count)
        sec_u, rep = iterate_transform(
            mapdef, model, init, tol_change=tol,
            tol_residual=settings.tol_residual, max_iter=settings.max_iter,
            newton_tol=settings.newton_tol, newton_max=settings.newton_max)
        transforms["unstable"] = {
            "iterations": rep.iterations, "residual": rep.residual,
            "final_change": rep.final_change, "stopped_by": rep.stopped_by,
            "residual_ok": rep.residual_ok, "lipschitz": rep.lipschitz_global,
            "lipschitz_ok": rep.lipschitz_ok,
            "fast_path": rep.fast_path_used, "failure": rep.node_failure}
        if rep.node_failure is not None:
            raise RuntimeError(f"unstable transform failed: {rep.node_failure}")
    if model.unstable_dim > 0:
        init = zero_section(model, "stable", base_count, fiber_count)
        sec_s, rep = iterate_transform(
            mapdef, model, init, tol_change=tol,
            tol_residual=settings.tol_residual, max_iter=settings.max_iter,
            newton_tol=settings.newton_tol, newton_max=settings.newton_max)
        transforms["stable"] = {
            "iterations": rep.iterations, "residual": rep.residual,
            "final_change": rep.final_change, "stopped_by": rep.stopped_by,
            "residual_ok": rep.residual_ok, "lipschitz": rep.lipschitz_global,
            "lipschitz_ok": rep.lipschitz_ok,
            "fast_path": rep.fast_path_used, "failure": rep.node_failure}
        if rep.node_failure is not None:
            raise RuntimeError(f"stable transform failed: {rep.node_failure}")
    manifold, irep = intersect_graphs(sec_u, sec_s, model)
    tangents = compute_tangent_by_cone_iteration(mapdef, model, manifold, "N",
                                                 depth_k=settings.depth_k)
    return PipelineResult(checks=checks, manifold=manifold, tangents=tangents,
                          transforms=transforms,
                          intersect_residual=irep.residual)


def _sweep_row(demo: DemoSystem, family: PerturbationFamily, eps: float,
               settings: SweepSettings, base_count: int, fiber_count: int,
               check_counts: tuple, baseline: Optional[PipelineResult],
               ) -> SweepRow:
    start = time.perf_counter()
    mapdef = perturb(demo.mapdef, family, eps)
    c1_size = measure_c1_size(demo.mapdef, mapdef, demo.model) if eps else 0.0
    try:
        result = compute_invariant_objects(
            mapdef, demo.model, base_count, fiber_count, settings,
            tol_change=settings.tol_change_for(eps), check_counts=check_counts)
    except Exception as exc:
        return SweepRow(eps=eps, runtime_s=time.perf_counter() - start,
                        perturbation_c1=c1_size, checks_pass=False,
                        failure=f"{type(exc).__name__}: {exc}")
    row = SweepRow(eps=eps, runtime_s=0.0, perturbation_c1=c1_size,
                   checks_pass=result.checks.passed,
                   margins=_margins_tuple(result.checks))
    if result.manifold is not None:
        row.transforms = result.transforms
        row.intersect_residual = result.intersect_residual
        m = result.manifold
        row.manifold_sup = (
            float(np.abs(m.xi_s).max(initial=0.0)),
            float(np.abs(m.xi_u).max(initial=0.0)))
        row.in_box = True   # ManifoldGrid construction enforces containment
        row.tangent_margins = {
            cone: float(vals.min(initial=np.inf))
            for cone, vals in result.tangents.cone_margins.items()}
        if baseline is not None and baseline.manifold is not None:
            row.c0 = c0_distance(baseline.manifold, m)
            row.c1 = c1_distance(baseline.manifold, m,
                                 baseline.tangents, result.tangents)
    row.runtime_s = time.perf_counter() - start
    return row


def run_persistence_sweep(demo: DemoSystem, family: PerturbationFamily,
                          eps_list: Sequence[float],
                          settings: Optional[SweepSettings] = None,
                          ) -> SweepReport:
    """Rerun the full pipeline at every perturbation size.

    Rows are independent (each starts from the zero section) and may run on
    a thread pool sized by the settings or the NHIM_THREADS environment
    variable; results are merged in eps order regardless.  A failing row is
    recorded and the sweep continues.  When the unperturbed demo itself
    fails its checks, every row reports the check failure and no transform
    is attempted, mirroring the baseline.
    """
    settings = settings or SweepSettings()
    base_count = settings.base_count or demo.base_count
    fiber_count = settings.fiber_count or demo.fiber_count
    check_counts = (settings.check_base_count or base_count,
                    settings.check_fiber_count or fiber_count)
    try:
        baseline = compute_invariant_objects(
            demo.mapdef, demo.model, base_count, fiber_count, settings,
            check_counts=check_counts)
    except Exception:
        baseline = None
    threads = settings.resolved_threads()
    eps_tuple = tuple(float(e) for e in eps_list)

    def job(eps):
        return _sweep_row(demo, family, eps, settings, base_count, fiber_count,
                          check_counts, baseline)

    if threads > 1 and len(eps_tuple) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(job, eps_tuple))
    else:
        rows = [job(eps) for eps in eps_tuple]

    baseline_margins = (_margins_tuple(baseline.checks)
                        if baseline is not None else None)
    drift = None
    if baseline_margins is not None:
        consts = []
        for i in range(4):
            worst = 0.0
            for row in rows:
                if row.eps > 0.0 and row.margins is not None:
                    base_m = baseline_margins[i]
                    row_m = row.margins[i]
                    if np.isfinite(base_m) and np.isfinite(row_m):
                        worst = max(worst, abs(row_m - base_m) / row.eps)
            consts.append(worst)
        drift = tuple(consts)
    return SweepReport(
        demo_name=demo.name,
        family=family.describe(),
        eps_list=eps_tuple,
        rows=rows,
        baseline_checks_pass=(baseline is not None and baseline.checks.passed),
        baseline_margins=baseline_margins,
        margin_drift=drift,
        threads=threads,
        settings={
            "base_count": base_count, "fiber_count": fiber_count,
            "check_base_count": check_counts[0],
            "check_fiber_count": check_counts[1],
            "tol_change": settings.tol_change,
            "tol_change_scale": settings.tol_change_scale,
            "tol_residual": settings.tol_residual,
            "max_iter": settings.max_iter,
            "newton_tol": settings.newton_tol,
            "newton_max": settings.newton_max,
            "depth_k": settings.depth_k})
