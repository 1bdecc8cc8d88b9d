"""Tangent planes of computed invariant graphs, two ways.

The cone power iteration realizes the plane at z as a limit of pushed
coordinate planes along orbits through z: the center-unstable plane comes
from pushing base+unstable seed planes forward along a backward orbit, the
center-stable plane from pulling base+stable seeds back along a forward
orbit, and the manifold tangent from intersecting the two one-sided limits.
Convergence is measured on the Grassmannian by comparing depth k against
depth k-1; no contraction rate is assumed, the residual is reported as is.

The graph construction instead differentiates the computed section or
manifold directly by centered differences, second order in the grid step.
Agreement of the two constructions, equivariance under the tangent map, and
cone containment are the checkable claims; all three are exposed here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .model import (AmbientPoint, GeometricModel, PlaneBasis, TWO_PI,
                    grassmann_distance, plane_in_cone_margin)
from .mapdsl import (MapDefinition, map_eval_array, map_eval_jacobian_array,
                     map_inverse_eval_array)
from .transform import ManifoldGrid, SectionGrid

BOX_TOL = 1e-9
CONE_GRACE = 1e-9
DEFAULT_DEPTH = 40

_WHICH_CHOICES = ("N", "Nu", "Ns")


class TangentError(RuntimeError):
    """Plane collapse or cone violation during tangent computation."""


def _point_vector(point) -> np.ndarray:
    if isinstance(point, AmbientPoint):
        return point.as_vector()
    return np.asarray(point, dtype=float).reshape(-1)


def pushforward_plane(mapdef: MapDefinition, point, plane: PlaneBasis) -> PlaneBasis:
    """Column space of the Jacobian applied to the plane, re-orthonormalized."""
    vec = _point_vector(point)
    _, jac = map_eval_jacobian_array(mapdef, vec[None, :])
    image = jac[0] @ (plane.basis if isinstance(plane, PlaneBasis)
                      else np.asarray(plane, dtype=float))
    try:
        return PlaneBasis.from_span(image)
    except Exception as exc:
        raise TangentError(f"pushforward collapsed the plane rank: {exc}") from exc


# ---------------------------------------------------------------------------
# Orbits with per-point escape truncation

def _inside_box(model: GeometricModel, pts: np.ndarray) -> np.ndarray:
    ok = np.isfinite(pts).all(axis=1)
    rs = np.asarray(model.radii_s)
    ru = np.asarray(model.radii_u)
    if rs.size:
        ok &= (np.abs(pts[:, model.sl_s]) <= rs + BOX_TOL).all(axis=1)
    if ru.size:
        ok &= (np.abs(pts[:, model.sl_u]) <= ru + BOX_TOL).all(axis=1)
    return ok


def _orbit_backward_truncated(mapdef: MapDefinition, model: GeometricModel,
                              pts: np.ndarray, steps: int):
    """Backward orbit levels [z, z_{-1}, ..., z_{-steps}] with escape handling.

    A point whose inversion fails or leaves the box stops deepening; its
    achieved depth is recorded and later levels repeat its last valid point.
    """
    cur = pts.copy()
    orbit = [cur]
    depth = np.zeros(pts.shape[0], dtype=np.int64)
    active = _inside_box(model, pts)
    for j in range(1, steps + 1):
        nxt = cur.copy()
        idx = np.flatnonzero(active)
        if idx.size:
            prev, ok, _ = map_inverse_eval_array(mapdef, cur[idx], cur[idx].copy())
            good = ok & _inside_box(model, prev)
            nxt[idx[good]] = prev[good]
            depth[idx[good]] = j
            active[idx[~good]] = False
        orbit.append(nxt)
        cur = nxt
        if not active.any():
            orbit.extend([cur] * (steps - j))
            break
    return orbit, depth


def _orbit_forward_truncated(mapdef: MapDefinition, model: GeometricModel,
                             pts: np.ndarray, steps: int):
    """Forward orbit levels [z, g(z), ..., g^steps(z)] with escape handling."""
    cur = pts.copy()
    orbit = [cur]
    depth = np.zeros(pts.shape[0], dtype=np.int64)
    active = _inside_box(model, pts)
    for j in range(1, steps + 1):
        nxt = cur.copy()
        idx = np.flatnonzero(active)
        if idx.size:
            img = map_eval_array(mapdef, cur[idx])
            good = _inside_box(model, img)
            nxt[idx[good]] = img[good]
            depth[idx[good]] = j
            active[idx[~good]] = False
        orbit.append(nxt)
        cur = nxt
        if not active.any():
            orbit.extend([cur] * (steps - j))
            break
    return orbit, depth


def _qr_planes(planes: np.ndarray) -> np.ndarray:
    if planes.shape[2] == 0:
        return planes
    q, r = np.linalg.qr(planes)
    diag = np.abs(np.diagonal(r, axis1=1, axis2=2))
    if np.any(diag <= 1e-13 * max(1.0, float(diag.max(initial=0.0)))):
        raise TangentError("cone iteration collapsed to a rank-deficient plane")
    return q


def _push_forward_pair(mapdef: MapDefinition, orbit_b: list, seeds: np.ndarray,
                       depth: np.ndarray):
    """Push seeds from each point's deepest backward level up to the point.

    Returns the depth-d plane and the depth-(d-1) plane per point (the pair
    whose Grassmann distance is the convergence residual)."""
    pk = seeds.copy()
    pk1 = seeds.copy()
    steps = len(orbit_b) - 1
    for j in range(steps, 0, -1):
        idx1 = np.flatnonzero(depth >= j)
        if idx1.size == 0:
            continue
        _, jac = map_eval_jacobian_array(mapdef, orbit_b[j][idx1], check=False)
        pk[idx1] = _qr_planes(np.einsum("nij,njk->nik", jac, pk[idx1]))
        idx2 = np.flatnonzero(depth >= j + 1)
        if idx2.size:
            pos = np.searchsorted(idx1, idx2)
            pk1[idx2] = _qr_planes(np.einsum("nij,njk->nik", jac[pos], pk1[idx2]))
    return pk, pk1


def _pull_backward_pair(mapdef: MapDefinition, orbit_f: list, seeds: np.ndarray,
                        depth: np.ndarray):
    """Pull seeds from each point's deepest forward level back to the point."""
    pk = seeds.copy()
    pk1 = seeds.copy()
    steps = len(orbit_f) - 1
    for j in range(steps - 1, -1, -1):
        idx1 = np.flatnonzero(depth >= j + 1)
        if idx1.size == 0:
            continue
        _, jac = map_eval_jacobian_array(mapdef, orbit_f[j][idx1], check=False)
        try:
            inv = np.linalg.inv(jac)
        except np.linalg.LinAlgError as exc:
            raise TangentError("singular Jacobian while pulling planes back") from exc
        pk[idx1] = _qr_planes(np.einsum("nij,njk->nik", inv, pk[idx1]))
        idx2 = np.flatnonzero(depth >= j + 2)
        if idx2.size:
            pos = np.searchsorted(idx1, idx2)
            pk1[idx2] = _qr_planes(np.einsum("nij,njk->nik", inv[pos], pk1[idx2]))
    return pk, pk1


def _coordinate_seeds(model: GeometricModel, cols, count: int) -> np.ndarray:
    basis = np.eye(model.ambient_dim)[:, cols]
    return np.broadcast_to(basis, (count, model.ambient_dim, basis.shape[1])).copy()


def _intersect_plane_pairs(pf: np.ndarray, pb: np.ndarray, n: int) -> np.ndarray:
    """Intersection of column spaces per point: the n directions closest to
    lying in both planes (smallest eigenvectors of the summed complements)."""
    m = pf.shape[1]
    proj_f = np.einsum("nik,njk->nij", pf, pf)
    proj_b = np.einsum("nik,njk->nij", pb, pb)
    gap = 2.0 * np.eye(m) - proj_f - proj_b
    _, vecs = np.linalg.eigh(gap)
    return vecs[:, :, :n]


def _grassmann_batch(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    if pa.shape[2] == 0 and pb.shape[2] == 0:
        return np.zeros(pa.shape[0])
    diff = (np.einsum("nik,njk->nij", pa, pa) -
            np.einsum("nik,njk->nij", pb, pb))
    return np.linalg.norm(diff, ord=2, axis=(1, 2))


def _cone_planes_at_points(mapdef: MapDefinition, model: GeometricModel,
                           pts: np.ndarray, which: str, depth_k: int):
    """Planes, achieved depths, and Cauchy residuals at arbitrary points."""
    if which not in _WHICH_CHOICES:
        raise ValueError(f"which must be one of {_WHICH_CHOICES}, got {which!r}")
    m = model.ambient_dim
    n = model.base_dim
    count = pts.shape[0]
    full_depth = np.full(count, depth_k, dtype=np.int64)

    def forward_side():
        cols = np.r_[np.arange(n), np.arange(model.sl_u.start, model.sl_u.stop)]
        seeds = _coordinate_seeds(model, cols.astype(np.int64), count)
        if cols.size == m:
            return seeds, seeds, full_depth   # seed already fills the space
        orbit, depth = _orbit_backward_truncated(mapdef, model, pts, depth_k)
        pk, pk1 = _push_forward_pair(mapdef, orbit, seeds, depth)
        return pk, pk1, depth

    def backward_side():
        cols = np.r_[np.arange(n), np.arange(model.sl_s.start, model.sl_s.stop)]
        seeds = _coordinate_seeds(model, cols.astype(np.int64), count)
        if cols.size == m:
            return seeds, seeds, full_depth
        orbit, depth = _orbit_forward_truncated(mapdef, model, pts, depth_k)
        pk, pk1 = _pull_backward_pair(mapdef, orbit, seeds, depth)
        return pk, pk1, depth

    if which == "Nu":
        pk, pk1, depth = forward_side()
    elif which == "Ns":
        pk, pk1, depth = backward_side()
    else:
        fu, fu1, du = forward_side()
        bs, bs1, ds = backward_side()
        pk = _intersect_plane_pairs(fu, bs, n)
        pk1 = _intersect_plane_pairs(fu1, bs1, n)
        depth = np.minimum(du, ds)
    residual = _grassmann_batch(pk, pk1)
    return pk, depth, residual


@dataclass(eq=False)
class TangentField:
    """Planes per manifold node with their iteration depths and residuals.

    planes has shape (nodes, ambient_dim, plane_dim); cone_margins maps each
    relevant cone label to the per-node containment margin, all of which must
    be nonnegative (tiny numerical grace allowed).
    """

    model: GeometricModel
    which: str
    depth_requested: int
    planes: np.ndarray
    depth_achieved: np.ndarray
    residuals: np.ndarray
    points: np.ndarray
    cone_margins: dict = field(default_factory=dict)

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=float)
        self.depth_achieved = np.asarray(self.depth_achieved, dtype=np.int64)
        self.residuals = np.asarray(self.residuals, dtype=float)
        expected = {"N": self.model.base_dim,
                    "Nu": self.model.base_dim + self.model.unstable_dim,
                    "Ns": self.model.base_dim + self.model.stable_dim}[self.which]
        if self.planes.shape[1:] != (self.model.ambient_dim, expected):
            raise TangentError(
                f"plane stack has shape {self.planes.shape}, expected "
                f"(*, {self.model.ambient_dim}, {expected})")
        if not self.cone_margins:
            cones = {"Nu": ("s",), "Ns": ("u",), "N": ("s", "u")}[self.which]
            for cone in cones:
                margins = np.array([
                    plane_in_cone_margin(self.model, self.planes[i], cone)
                    for i in range(self.planes.shape[0])])
                self.cone_margins[cone] = margins
        for cone, margins in self.cone_margins.items():
            worst = float(np.min(margins, initial=np.inf))
            if worst < -CONE_GRACE:
                raise TangentError(
                    f"plane leaves the {cone}-cone (margin {worst:.3e})")

    def node_count(self) -> int:
        return self.planes.shape[0]

    def basis(self, node: int) -> PlaneBasis:
        return PlaneBasis(self.planes[node])

    @property
    def bases(self) -> list[PlaneBasis]:
        return [PlaneBasis(p) for p in self.planes]

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max(initial=0.0))

    @property
    def truncated(self) -> np.ndarray:
        return self.depth_achieved < self.depth_requested


def compute_tangent_by_cone_iteration(mapdef: MapDefinition, model: GeometricModel,
                                      manifold: ManifoldGrid, which: str,
                                      depth_k: int = DEFAULT_DEPTH) -> TangentField:
    """Cone power iteration at every manifold node.

    which selects the plane family: 'Nu' pushes base+unstable seeds forward
    along backward orbits, 'Ns' pulls base+stable seeds back along forward
    orbits, 'N' intersects the two one-sided limits.  Orbit escape before
    depth_k truncates that node's iteration at the achieved depth.
    """
    pts = manifold.node_points()
    planes, depth, residual = _cone_planes_at_points(mapdef, model, pts,
                                                     which, depth_k)
    return TangentField(model, which, depth_k, planes, depth, residual, pts)


# ---------------------------------------------------------------------------
# Graph differentiation

def _graph_domain_layout(obj: Union[SectionGrid, ManifoldGrid]):
    """(model, value grid, domain ambient columns, value ambient columns,
    periodic flags, steps per axis)."""
    if isinstance(obj, ManifoldGrid):
        model = obj.model
        n = model.base_dim
        vals = np.concatenate([
            obj.xi_s.reshape(obj.xi_s.shape[:n] + (-1,)),
            obj.xi_u.reshape(obj.xi_u.shape[:n] + (-1,))], axis=-1)
        dom_cols = np.arange(n)
        val_cols = np.arange(n, model.ambient_dim)
        periodic = [True] * n
        steps = [TWO_PI / obj.base_count] * n
        return model, vals, dom_cols, val_cols, periodic, steps
    if isinstance(obj, SectionGrid):
        model = obj.model
        n = model.base_dim
        if obj.kind == "unstable":
            fiber_cols = np.arange(model.sl_u.start, model.sl_u.stop)
            val_cols = np.arange(model.sl_s.start, model.sl_s.stop)
        else:
            fiber_cols = np.arange(model.sl_s.start, model.sl_s.stop)
            val_cols = np.arange(model.sl_u.start, model.sl_u.stop)
        dom_cols = np.concatenate([np.arange(n), fiber_cols])
        periodic = obj.periodic_axes()
        steps = obj._interp().steps
        return model, obj.values, dom_cols, val_cols, periodic, steps
    raise TypeError(f"expected SectionGrid or ManifoldGrid, got {type(obj).__name__}")


def _graph_derivatives(vals: np.ndarray, periodic, steps):
    """Centered-difference derivative grids per axis plus first-order flags.

    Non-periodic edge slices fall back to one-sided differences and are
    flagged; periodic axes difference through the wrap and stay second order.
    """
    shape = vals.shape[:-1]
    d = len(shape)
    derivs = []
    first_order = np.zeros(shape, dtype=bool)
    for i in range(d):
        h = steps[i]
        if periodic[i]:
            der = (np.roll(vals, -1, axis=i) - np.roll(vals, 1, axis=i)) / (2 * h)
        else:
            der = np.empty_like(vals)
            sl = [slice(None)] * (d + 1)
            sl_lo = list(sl); sl_lo[i] = slice(0, -2)
            sl_hi = list(sl); sl_hi[i] = slice(2, None)
            sl_mid = list(sl); sl_mid[i] = slice(1, -1)
            der[tuple(sl_mid)] = (vals[tuple(sl_hi)] - vals[tuple(sl_lo)]) / (2 * h)
            sl0 = list(sl); sl0[i] = 0
            sl1 = list(sl); sl1[i] = 1
            der[tuple(sl0)] = (vals[tuple(sl1)] - vals[tuple(sl0)]) / h
            slm1 = list(sl); slm1[i] = -1
            slm2 = list(sl); slm2[i] = -2
            der[tuple(slm1)] = (vals[tuple(slm1)] - vals[tuple(slm2)]) / h
            edge = list(sl[:-1])
            edge[i] = [0, shape[i] - 1]
            first_order[tuple(edge)] = True
        derivs.append(der)
    return derivs, first_order


def tangent_from_graph_all(obj: Union[SectionGrid, ManifoldGrid]):
    """Graph tangent planes at every node: (planes, first_order flags).

    The plane at a node is spanned by one column per domain axis, carrying a
    unit domain component plus the difference-quotient derivative of the
    values; columns are orthonormalized per node.
    """
    model, vals, dom_cols, val_cols, periodic, steps = _graph_domain_layout(obj)
    derivs, first_order = _graph_derivatives(vals, periodic, steps)
    shape = vals.shape[:-1]
    nodes = int(np.prod(shape)) if shape else 1
    d = len(dom_cols)
    m = model.ambient_dim
    span = np.zeros((nodes, m, d))
    for i in range(d):
        span[:, dom_cols[i], i] = 1.0
        span[:, val_cols, i] = derivs[i].reshape(nodes, -1)
    planes = _qr_planes(span)
    return planes, first_order.reshape(nodes)


def tangent_from_graph(obj: Union[SectionGrid, ManifoldGrid], node: int,
                       with_order: bool = False):
    """Graph tangent plane at one node (flat row-major index).

    With with_order=True also returns whether one-sided differences entered
    (only possible at boundary nodes of a non-periodic axis)."""
    planes, flags = tangent_from_graph_all(obj)
    basis = PlaneBasis(planes[node])
    if with_order:
        return basis, bool(flags[node])
    return basis


# ---------------------------------------------------------------------------
# Invariance verification

@dataclass
class TangentInvarianceReport:
    """Equivariance defect and grid-continuity modulus of a tangent field."""

    max_residual: float
    residuals: np.ndarray
    continuity_modulus: float

    def __float__(self) -> float:
        return self.max_residual


def _continuity_modulus(manifold: ManifoldGrid, planes: np.ndarray) -> float:
    n = manifold.model.base_dim
    if n == 0 or planes.shape[0] < 2:
        return 0.0
    shape = (manifold.base_count,) * n
    grid = planes.reshape(shape + planes.shape[1:])
    worst = 0.0
    for axis in range(n):
        rolled = np.roll(grid, -1, axis=axis)
        pa = grid.reshape(-1, *planes.shape[1:])
        pb = rolled.reshape(-1, *planes.shape[1:])
        worst = max(worst, float(_grassmann_batch(pa, pb).max(initial=0.0)))
    return worst


def verify_tangent_invariance(mapdef: MapDefinition, manifold: ManifoldGrid,
                              tangents: TangentField) -> TangentInvarianceReport:
    """Push each node's plane through the Jacobian and compare against a
    fresh cone iteration at the exact image point (no plane interpolation).

    Also reports the largest Grassmann distance between planes at adjacent
    base nodes, an empirical continuity modulus of the field.
    """
    model = tangents.model
    pts = tangents.points
    images = map_eval_array(mapdef, pts)
    _, jac = map_eval_jacobian_array(mapdef, pts)
    pushed = _qr_planes(np.einsum("nij,njk->nik", jac, tangents.planes))
    at_images, _, _ = _cone_planes_at_points(mapdef, model, images,
                                             tangents.which,
                                             tangents.depth_requested)
    residuals = _grassmann_batch(pushed, at_images)
    return TangentInvarianceReport(
        max_residual=float(residuals.max(initial=0.0)),
        residuals=residuals,
        continuity_modulus=_continuity_modulus(manifold, tangents.planes))
