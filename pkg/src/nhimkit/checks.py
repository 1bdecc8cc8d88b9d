"""Quantitative certification of box and cone conditions, plus rate checks.

Two independent routes to hyperbolicity live here.  The topological route
certifies, by dense sampling with reported worst-case margins, that the image
of the box avoids the stable boundary stratum, that the unstable stratum
escapes, and that the stable/unstable cone fields are strictly invariant
under the Jacobian (forward for the s-cone, inverse for the u-cone).  The
classical route estimates the invariant splitting by power iteration along
orbits of the invariant base manifold and tests the rate and domination
inequalities.  A system can pass the first and fail the second.

Margins are signed: positive is a strict pass, zero or negative is a fail.
Refining the sampling grid (base count doubled, fiber count 2c-1) keeps every
reported margin monotone non-increasing because the refined grid is a
superset of the coarse one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import (AmbientPoint, GeometricModel, PlaneBasis, box_grid,
                    cone_margin_array, grassmann_distance, fiber_grid, angle_grid)
from .mapdsl import (MapDefinition, map_eval_array, map_eval_jacobian_array,
                     map_inverse_eval_array)

DEFAULT_BASE_COUNT = 256
DEFAULT_FIBER_COUNT = 201
DEFAULT_DIRECTION_SAMPLES = 64

# |det J| below this is treated as a singular sample (fails the u-cone check)
SINGULAR_DET_TOL = 1e-14


class SplittingError(RuntimeError):
    """Power iteration could not produce a valid invariant splitting."""


@dataclass
class BoundaryMargins:
    """Signed clearances of the two box-boundary conditions."""

    margin_image_vs_stable_boundary: float
    margin_unstable_boundary_escape: float
    worst_point_stable: Optional[AmbientPoint]
    worst_point_unstable: Optional[AmbientPoint]
    sampling: str


@dataclass
class ConeMargins:
    """Worst-case cone invariance margins over grid points and directions."""

    cone_margin_s: float
    cone_margin_u: float
    worst_point_s: Optional[AmbientPoint]
    worst_point_u: Optional[AmbientPoint]
    sampling: str


@dataclass
class CheckReport:
    """Combined topological certification with one verdict.

    verdict is "pass" iff all four margins are strictly positive.
    """

    verdict: str
    margin_image_vs_stable_boundary: float
    margin_unstable_boundary_escape: float
    cone_margin_s: float
    cone_margin_u: float
    worst_points: dict
    sampling: str

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"


@dataclass
class SplittingEstimate:
    """Sampled invariant splitting: stable/unstable/base planes per point."""

    base_points: np.ndarray          # (P, n) angles
    planes_s: list                   # P PlaneBasis of dim s
    planes_u: list                   # P PlaneBasis of dim u
    planes_tn: list                  # P PlaneBasis of dim n
    contraction_rates: np.ndarray    # (P,) largest singular value of J on E^s
    expansion_rates: np.ndarray      # (P,) smallest singular value of J on E^u
    residual: float                  # max Grassmann defect of E^u equivariance
    power_iters: int

    def __post_init__(self):
        m = None
        for es, eu, tn in zip(self.planes_s, self.planes_u, self.planes_tn):
            m = es.ambient_dim
            stacked = np.hstack([es.basis, eu.basis, tn.basis])
            if stacked.shape[1] != m:
                raise SplittingError(
                    f"splitting dimensions {es.dim}+{eu.dim}+{tn.dim} do not sum to {m}")
            if stacked.shape[1]:
                smin = np.linalg.svd(stacked, compute_uv=False)[-1]
                if smin <= 1e-8:
                    raise SplittingError(
                        f"splitting planes are not transverse (smallest sv {smin:.2e})")


@dataclass
class ClassicalRates:
    """Rate and domination estimates over the sampled splitting.

    products[k] = (max_x ||J restricted to E^s|| * ||inverse of J on base||^k,
                   max_x ||inverse of J on E^u|| * ||J on base||^k) for 1<=k<=r.
    verdict is "pass" iff every quantity, including both lambdas, is < 1;
    lam is the maximum of them all.
    """

    lambda_s: float
    lambda_u: float
    products: dict
    r: int
    lam: float
    verdict: str

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"


# ---------------------------------------------------------------------------
# Box distance helpers (array-valued over (N, k) fiber blocks)

def _dist_to_box(xi: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Euclidean distance from each row to the solid box prod [-r_i, r_i]."""
    if xi.shape[1] == 0:
        return np.zeros(xi.shape[0])
    excess = np.maximum(np.abs(xi) - radii, 0.0)
    return np.linalg.norm(excess, axis=1)


def _dist_inside_to_boundary(xi: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Distance to the box boundary for rows inside the box (min slab gap)."""
    if xi.shape[1] == 0:
        return np.full(xi.shape[0], np.inf)
    return np.min(radii - np.abs(xi), axis=1)


def check_boundary_conditions(model: GeometricModel, mapdef: MapDefinition,
                              base_count: int = DEFAULT_BASE_COUNT,
                              fiber_count: int = DEFAULT_FIBER_COUNT,
                              ) -> BoundaryMargins:
    """Certify image-vs-boundary conditions by sampling, with signed margins.

    First margin: over a grid on the whole box, the signed distance from each
    image point to the stable boundary stratum (negative once the image's
    stable block leaves its fiber box).  Second margin: over a grid on the
    unstable-boundary stratum, the signed distance from each image to the box
    (negative while the image is still inside).  With no unstable directions
    the second check instead requires the image of the box to stay strictly
    interior, reporting the signed distance to the box boundary.
    """
    rs = np.asarray(model.radii_s)
    ru = np.asarray(model.radii_u)
    sampling = (f"box grid: {base_count} per angle x {fiber_count} per fiber axis; "
                f"stratum grid uses the same counts on each face")

    grid = box_grid(model, base_count, fiber_count)
    image = map_eval_array(mapdef, grid)
    img_s = image[:, model.sl_s]
    img_u = image[:, model.sl_u]

    if model.stable_dim == 0:
        margin1 = np.inf
        worst1 = None
    else:
        inside = np.all(np.abs(img_s) <= rs, axis=1)
        d_strat = np.where(inside,
                           _dist_inside_to_boundary(img_s, rs),
                           _dist_to_box(img_s, rs))
        d_u = _dist_to_box(img_u, ru)
        dist = np.hypot(d_strat, d_u)
        signed = np.where(inside, dist, -dist)
        k = int(np.argmin(signed))
        margin1 = float(signed[k]) + 0.0
        worst1 = AmbientPoint.from_vector(model, grid[k])

    if model.unstable_dim == 0:
        # containment form: every image strictly inside the box
        depth = _dist_inside_to_boundary(img_s, rs)
        out = _dist_to_box(img_s, rs)
        inside = np.all(np.abs(img_s) <= rs, axis=1)
        signed = np.where(inside, depth, -out)
        k = int(np.argmin(signed))
        margin2 = float(signed[k]) + 0.0
        worst2 = AmbientPoint.from_vector(model, grid[k])
    else:
        faces = _unstable_stratum_grid(model, base_count, fiber_count)
        fimg = map_eval_array(mapdef, faces)
        fs = fimg[:, model.sl_s]
        fu = fimg[:, model.sl_u]
        fib = np.hstack([fs, fu])
        radii = np.concatenate([rs, ru])
        inside = np.all(np.abs(fib) <= radii, axis=1)
        signed = np.where(inside,
                          -_dist_inside_to_boundary(fib, radii),
                          _dist_to_box(fib, radii))
        k = int(np.argmin(signed))
        margin2 = float(signed[k]) + 0.0
        worst2 = AmbientPoint.from_vector(model, faces[k])

    return BoundaryMargins(margin1, margin2, worst1, worst2, sampling)


def _unstable_stratum_grid(model: GeometricModel, base_count: int,
                           fiber_count: int) -> np.ndarray:
    """Grid covering the faces where one unstable coordinate sits at its radius."""
    base_axes = [angle_grid(base_count) for _ in range(model.base_dim)]
    s_axes = [fiber_grid(r, fiber_count) for r in model.radii_s]
    pieces = []
    for i, r_i in enumerate(model.radii_u):
        for sign in (-1.0, 1.0):
            u_axes = [fiber_grid(r, fiber_count) if j != i else np.array([sign * r_i])
                      for j, r in enumerate(model.radii_u)]
            axes = base_axes + s_axes + u_axes
            mesh = np.meshgrid(*axes, indexing="ij")
            pieces.append(np.stack([m.ravel() for m in mesh], axis=1))
    return np.concatenate(pieces, axis=0)


# ---------------------------------------------------------------------------
# Cone invariance

def _sphere_points(dim: int, count: int) -> np.ndarray:
    """Deterministic quasi-uniform unit vectors, shape (K, dim)."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        ang = (np.arange(count) + 0.5) * (2.0 * np.pi / count)
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    rng = np.random.default_rng(20240801)
    pts = rng.normal(size=(count, dim))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _cone_boundary_directions(model: GeometricModel, which: str,
                              direction_samples: int) -> np.ndarray:
    """Unit vectors on the cone boundary (bad norm = gamma * good norm), (K, m)."""
    bad = model.bad_slice(which)
    mask = np.zeros(model.ambient_dim, dtype=bool)
    mask[bad] = True
    dim_bad = int(mask.sum())
    dim_good = model.ambient_dim - dim_bad
    good_pts = _sphere_points(dim_good, direction_samples)
    bad_pts = _sphere_points(dim_bad, direction_samples)
    out = np.zeros((good_pts.shape[0] * bad_pts.shape[0], model.ambient_dim))
    k = 0
    for g in good_pts:
        for b in bad_pts:
            out[k, ~mask] = g
            out[k, mask] = model.gamma * b
            k += 1
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def _cone_weights(model: GeometricModel, which: str) -> np.ndarray:
    """Diagonal of the cone quadratic form: gamma^2 on good, -1 on bad axes."""
    w = np.full(model.ambient_dim, model.gamma ** 2)
    w[model.bad_slice(which)] = -1.0
    return w


def _extremal_boundary_candidates(model: GeometricModel, mats: np.ndarray,
                                  which: str) -> np.ndarray:
    """Per sample, the minimizer of the pushed cone form, radially projected
    onto the input cone boundary.  Rows that cannot be projected (a vanishing
    good or bad component) are returned as NaN and skipped by the caller."""
    w = _cone_weights(model, which)
    form = np.einsum("nji,j,njk->nik", mats, w, mats)
    form = 0.5 * (form + np.swapaxes(form, 1, 2))
    _, vecs = np.linalg.eigh(form)
    v = vecs[:, :, 0]
    mask = np.zeros(model.ambient_dim, dtype=bool)
    mask[model.bad_slice(which)] = True
    vg = np.where(~mask, v, 0.0)
    vb = np.where(mask, v, 0.0)
    ng = np.linalg.norm(vg, axis=1, keepdims=True)
    nb = np.linalg.norm(vb, axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        cand = vg / ng + model.gamma * vb / nb
        cand = cand / np.linalg.norm(cand, axis=1, keepdims=True)
    bad_rows = (ng[:, 0] < 1e-14) | (nb[:, 0] < 1e-14)
    cand[bad_rows] = np.nan
    return cand


def _min_pushed_margin(model: GeometricModel, mats: np.ndarray, dirs: np.ndarray,
                       which: str) -> tuple[float, int]:
    """Min cone margin of mats[n] @ d over samples n and directions d.

    Returns (margin, worst sample index).  Adds per-sample extremal candidate
    directions to the fixed direction set.  Norms of the pushed vectors are
    assembled from per-sample Gram matrices so the (samples x directions)
    stage is a single matrix product instead of a three-index tensor.
    """
    n, m, _ = mats.shape
    mask = np.zeros(m, dtype=bool)
    mask[model.bad_slice(which)] = True
    rows_bad = mats[:, mask, :]
    rows_good = mats[:, ~mask, :]
    gram_bad = np.einsum("nri,nrj->nij", rows_bad, rows_bad).reshape(n, m * m)
    gram_good = np.einsum("nri,nrj->nij", rows_good, rows_good).reshape(n, m * m)
    outer = (dirs[:, :, None] * dirs[:, None, :]).reshape(dirs.shape[0], m * m)

    per_sample = np.full(n, np.inf)
    for block in np.array_split(outer, max(1, outer.shape[0] // 64), axis=0):
        bad2 = np.clip(gram_bad @ block.T, 0.0, None)
        good2 = np.clip(gram_good @ block.T, 0.0, None)
        tot = np.sqrt(bad2 + good2)
        with np.errstate(invalid="ignore", divide="ignore"):
            margins = (model.gamma * np.sqrt(good2) - np.sqrt(bad2)) / tot
        margins = np.where(np.isfinite(margins), margins, np.inf)
        per_sample = np.minimum(per_sample, margins.min(axis=1))

    cand = _extremal_boundary_candidates(model, mats, which)
    ok = ~np.isnan(cand[:, 0])
    if ok.any():
        pushed_c = np.einsum("nij,nj->ni", mats[ok], cand[ok])
        margins_c = cone_margin_array(model, pushed_c, which)
        margins_c = np.where(np.isnan(margins_c), np.inf, margins_c)
        per_sample[ok] = np.minimum(per_sample[ok], margins_c)
    k = int(np.argmin(per_sample))
    return float(per_sample[k]), k


def check_cone_invariance(model: GeometricModel, mapdef: MapDefinition,
                          base_count: int = DEFAULT_BASE_COUNT,
                          fiber_count: int = DEFAULT_FIBER_COUNT,
                          direction_samples: int = DEFAULT_DIRECTION_SAMPLES,
                          ) -> ConeMargins:
    """Worst-case margins of strict cone invariance over a box grid.

    The stable cone is pushed forward through the Jacobian and its image
    margin measured; the unstable cone at the image point is pulled back
    through the inverse Jacobian and its preimage margin measured.  Both are
    evaluated on cone-boundary directions (sampled quasi-uniformly, plus the
    exact extremal direction of the pushed quadratic form per sample point).
    A singular Jacobian sample fails the unstable-side check at that point.
    """
    sampling = (f"box grid: {base_count} per angle x {fiber_count} per fiber axis; "
                f"{direction_samples} boundary directions per sphere factor "
                f"plus per-point extremal directions")
    grid = box_grid(model, base_count, fiber_count)
    _, jac = map_eval_jacobian_array(mapdef, grid)

    if model.stable_dim == 0 or model.base_dim + model.unstable_dim == 0:
        margin_s, worst_s = np.inf, None
    else:
        dirs_s = _cone_boundary_directions(model, "s", direction_samples)
        margin_s, k = _min_pushed_margin(model, jac, dirs_s, "s")
        worst_s = AmbientPoint.from_vector(model, grid[k])

    if model.unstable_dim == 0 or model.base_dim + model.stable_dim == 0:
        margin_u, worst_u = np.inf, None
    else:
        dets = np.linalg.det(jac)
        singular = np.abs(dets) < SINGULAR_DET_TOL
        if singular.any():
            k = int(np.flatnonzero(singular)[0])
            return ConeMargins(margin_s if model.stable_dim else np.inf,
                               -np.inf, worst_s,
                               AmbientPoint.from_vector(model, grid[k]),
                               sampling + "; singular Jacobian sample")
        inv = np.linalg.inv(jac)
        dirs_u = _cone_boundary_directions(model, "u", direction_samples)
        margin_u, k = _min_pushed_margin(model, inv, dirs_u, "u")
        worst_u = AmbientPoint.from_vector(model, grid[k])

    return ConeMargins(margin_s, margin_u, worst_s, worst_u, sampling)


def run_topological_checks(model: GeometricModel, mapdef: MapDefinition,
                           base_count: int = DEFAULT_BASE_COUNT,
                           fiber_count: int = DEFAULT_FIBER_COUNT,
                           direction_samples: int = DEFAULT_DIRECTION_SAMPLES,
                           ) -> CheckReport:
    """Run both box checks and both cone checks; pass iff all margins > 0."""
    bm = check_boundary_conditions(model, mapdef, base_count, fiber_count)
    cm = check_cone_invariance(model, mapdef, base_count, fiber_count,
                               direction_samples)
    margins = (bm.margin_image_vs_stable_boundary,
               bm.margin_unstable_boundary_escape,
               cm.cone_margin_s, cm.cone_margin_u)
    verdict = "pass" if all(m > 0.0 for m in margins) else "fail"
    worst = {
        "image_vs_stable_boundary": bm.worst_point_stable,
        "unstable_boundary_escape": bm.worst_point_unstable,
        "cone_s": cm.worst_point_s,
        "cone_u": cm.worst_point_u,
    }
    return CheckReport(verdict, margins[0], margins[1], margins[2], margins[3],
                       worst, bm.sampling + " | " + cm.sampling)


# ---------------------------------------------------------------------------
# Splitting estimation and classical rates

def _embed_base_points(model: GeometricModel, base_points: np.ndarray) -> np.ndarray:
    base_points = np.asarray(base_points, dtype=float)
    if model.base_dim == 0:
        return np.zeros((1, model.ambient_dim))
    base_points = base_points.reshape(-1, model.base_dim)
    out = np.zeros((base_points.shape[0], model.ambient_dim))
    out[:, model.sl_base] = base_points
    return out


def _coordinate_plane(model: GeometricModel, sl: slice, count: int) -> np.ndarray:
    m = model.ambient_dim
    basis = np.eye(m)[:, sl]
    return np.broadcast_to(basis, (count, m, basis.shape[1])).copy()


def _batched_qr(planes: np.ndarray) -> np.ndarray:
    if planes.shape[2] == 0:
        return planes
    q, r = np.linalg.qr(planes)
    diag = np.abs(np.diagonal(r, axis1=1, axis2=2))
    if np.any(diag <= 1e-13 * max(1.0, float(diag.max(initial=0.0)))):
        raise SplittingError("power iteration collapsed to a rank-deficient plane")
    return q


def _orbit_forward(mapdef: MapDefinition, pts: np.ndarray, steps: int) -> list[np.ndarray]:
    orbit = [pts]
    for _ in range(steps):
        orbit.append(map_eval_array(mapdef, orbit[-1]))
    return orbit


def _orbit_backward(mapdef: MapDefinition, pts: np.ndarray, steps: int) -> list[np.ndarray]:
    orbit = [pts]
    for _ in range(steps):
        prev, ok, res = map_inverse_eval_array(mapdef, orbit[-1], orbit[-1].copy())
        if not ok.all():
            bad = int(np.flatnonzero(~ok)[0])
            raise SplittingError(
                f"backward orbit failed at step {len(orbit)} sample {bad} "
                f"(residual {res[bad]:.2e})")
        orbit.append(prev)
    return orbit


def _push_planes_forward(mapdef: MapDefinition, orbit: list[np.ndarray],
                         planes: np.ndarray) -> np.ndarray:
    """Push seed planes along the orbit from its last entry to its first."""
    for pts in orbit[:0:-1]:
        _, jac = map_eval_jacobian_array(mapdef, pts)
        planes = _batched_qr(np.einsum("nij,njk->nik", jac, planes))
    return planes


def _pull_planes_backward(mapdef: MapDefinition, orbit: list[np.ndarray],
                          planes: np.ndarray) -> np.ndarray:
    """Pull seed planes from the orbit's far end back to its start."""
    for pts in orbit[-2::-1]:
        _, jac = map_eval_jacobian_array(mapdef, pts)
        try:
            inv = np.linalg.inv(jac)
        except np.linalg.LinAlgError as exc:
            raise SplittingError("singular Jacobian while pulling planes back") from exc
        planes = _batched_qr(np.einsum("nij,njk->nik", inv, planes))
    return planes


def estimate_splitting(model: GeometricModel, mapdef: MapDefinition,
                       base_points: Optional[np.ndarray] = None,
                       power_iters: int = 40) -> SplittingEstimate:
    """Estimate the invariant splitting at sampled base points.

    The unstable plane at x is the forward push of the unstable coordinate
    seed from the backward orbit point; the stable plane is the backward pull
    of the stable seed from the forward orbit point; the base plane is the
    coordinate plane (exact for product models).  Requires the zero section
    to be invariant: the map must send it to itself within 1e-10.
    """
    if base_points is None:
        base_points = angle_grid(64) if model.base_dim == 1 else np.zeros((1, model.base_dim))
    pts = _embed_base_points(model, base_points)
    p = pts.shape[0]

    img = map_eval_array(mapdef, pts)
    fiber_drift = np.abs(np.hstack([img[:, model.sl_s], img[:, model.sl_u]]))
    if fiber_drift.size and fiber_drift.max() > 1e-10:
        raise SplittingError(
            f"zero section is not invariant under the map "
            f"(max fiber drift {fiber_drift.max():.2e} > 1e-10)")

    bwd = _orbit_backward(mapdef, pts, power_iters)
    planes_u = _push_planes_forward(
        mapdef, bwd, _coordinate_plane(model, model.sl_u, p))

    fwd = _orbit_forward(mapdef, pts, power_iters)
    planes_s = _pull_planes_backward(
        mapdef, fwd, _coordinate_plane(model, model.sl_s, p))

    planes_tn = _coordinate_plane(model, model.sl_base, p)

    _, jac = map_eval_jacobian_array(mapdef, pts)
    if model.stable_dim:
        sv = np.linalg.svd(np.einsum("nij,njk->nik", jac, planes_s), compute_uv=False)
        contraction = sv[:, 0]
    else:
        contraction = np.zeros(p)
    if model.unstable_dim:
        sv = np.linalg.svd(np.einsum("nij,njk->nik", jac, planes_u), compute_uv=False)
        expansion = sv[:, -1]
    else:
        expansion = np.full(p, np.inf)

    # equivariance defect: pushforward of E^u vs a fresh estimate at the image
    pushed = _batched_qr(np.einsum("nij,njk->nik", jac, planes_u))
    bwd_img = _orbit_backward(mapdef, img, power_iters)
    planes_u_img = _push_planes_forward(
        mapdef, bwd_img, _coordinate_plane(model, model.sl_u, p))
    residual = 0.0
    for a, b in zip(pushed, planes_u_img):
        residual = max(residual, grassmann_distance(a, b))

    return SplittingEstimate(
        base_points=np.asarray(base_points, dtype=float).reshape(p if model.base_dim else 1, -1),
        planes_s=[PlaneBasis(b) for b in planes_s],
        planes_u=[PlaneBasis(b) for b in planes_u],
        planes_tn=[PlaneBasis(b) for b in planes_tn],
        contraction_rates=contraction,
        expansion_rates=expansion,
        residual=float(residual),
        power_iters=power_iters)


def check_classical_rates(model: GeometricModel, mapdef: MapDefinition,
                          splitting: SplittingEstimate, r: int = 1) -> ClassicalRates:
    """Test the rate and domination inequalities on the sampled splitting.

    lambda_s bounds the Jacobian on the stable planes, lambda_u the inverse
    Jacobian on the unstable planes; for a nontrivial base the domination
    products for powers 1..r are formed against the base-plane rates.  All
    quantities must be strictly below 1 to pass; lam reports their maximum.
    """
    pts = _embed_base_points(model, splitting.base_points)
    _, jac = map_eval_jacobian_array(mapdef, pts)

    def restricted_sv(planes: list, largest: bool) -> np.ndarray:
        out = np.empty(len(planes))
        for i, pb in enumerate(planes):
            prod = jac[i] @ pb.basis
            sv = np.linalg.svd(prod, compute_uv=False)
            out[i] = sv[0] if largest else sv[-1]
        return out

    quantities = []
    if model.stable_dim:
        lam_s_pt = restricted_sv(splitting.planes_s, largest=True)
        lambda_s = float(lam_s_pt.max())
        quantities.append(lambda_s)
    else:
        lam_s_pt = np.zeros(len(splitting.planes_s))
        lambda_s = 0.0
    if model.unstable_dim:
        smin = restricted_sv(splitting.planes_u, largest=False)
        if np.any(smin <= 0.0):
            raise SplittingError("Jacobian is singular on an unstable plane")
        lam_u_pt = 1.0 / smin
        lambda_u = float(lam_u_pt.max())
        quantities.append(lambda_u)
    else:
        lam_u_pt = np.zeros(len(splitting.planes_u))
        lambda_u = 0.0

    products: dict = {}
    if model.base_dim and r >= 1:
        tn_fwd = restricted_sv(splitting.planes_tn, largest=True)
        tn_min = restricted_sv(splitting.planes_tn, largest=False)
        if np.any(tn_min <= 0.0):
            raise SplittingError("Jacobian is singular on the base plane")
        tn_inv = 1.0 / tn_min
        for k in range(1, r + 1):
            ps = float((lam_s_pt * tn_inv ** k).max()) if model.stable_dim else 0.0
            pu = float((lam_u_pt * tn_fwd ** k).max()) if model.unstable_dim else 0.0
            products[k] = (ps, pu)
            quantities.extend(q for q in (ps, pu) if q > 0.0)

    lam = max(quantities) if quantities else 0.0
    verdict = "pass" if lam < 1.0 else "fail"
    return ClassicalRates(lambda_s, lambda_u, products, r, lam, verdict)
