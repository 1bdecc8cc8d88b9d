"""Graph transforms on discretized Lipschitz sections and their fixed points.

A section assigns to each node of a regular grid over the base-and-one-fiber
domain a value in the complementary fiber box: the unstable kind graphs
stable values over base x unstable, the stable kind graphs unstable values
over base x stable.  Both transforms act through the forward map only.

The unstable transform sends a graph to the part of its forward image over
the same domain: for each target node the preimage location on the old graph
is found by Newton iteration in the domain variables, and the new value is
the stable block of the image point.  The stable transform characterizes the
preimage graph implicitly: the new value at a node is the fiber offset whose
image lands back on the old graph, a Newton solve in the unstable variables
only.  The second formulation is algebraically the graph transform of the
inverse map but never requires inverse formulas.

Fixed points are found by plain iteration with dual stopping criteria: a
sup-norm change threshold and an iteration cap.  No contraction rate is
assumed; neutral directions stall polynomially and are reported as such.
The true fixed-point defect is always recomputed once on the returned
section.  Lipschitz constants are monitored, never enforced.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import (GeometricModel, TWO_PI, angle_grid, fiber_grid,
                    wrap_difference)
from .mapdsl import (MapDefinition, map_eval_array, map_eval_jacobian_array,
                     referenced_names)

FIBER_TOL = 1e-12
DEFAULT_LIP_SLACK = 0.05


class NewtonFailure(RuntimeError):
    """A node's preimage solve did not reach the residual tolerance."""

    def __init__(self, message: str, node: int, residual: float):
        super().__init__(message)
        self.node = node
        self.residual = residual


class ValueOutsideFiber(RuntimeError):
    """A transformed value left its fiber box (diagnostic, never clamped)."""

    def __init__(self, message: str, node: int, value: np.ndarray):
        super().__init__(message)
        self.node = node
        self.value = value


class NonInjectiveCover(RuntimeError):
    """Two distinct preimages solved the same target node."""

    def __init__(self, message: str, node: int, first: np.ndarray, second: np.ndarray):
        super().__init__(message)
        self.node = node
        self.first = first
        self.second = second


class NoIntersection(RuntimeError):
    """Graph intersection iteration left the box."""


# ---------------------------------------------------------------------------
# Regular-grid interpolation shared by sections and manifolds

class _RegularInterp:
    """Multilinear interpolation on a regular product grid.

    Periodic axes wrap; non-periodic axes extrapolate linearly from the edge
    cell.  Values array has shape grid_shape + (vdim,).
    """

    def __init__(self, axes: Sequence[np.ndarray], periodic: Sequence[bool],
                 values: np.ndarray):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.periodic = tuple(bool(p) for p in periodic)
        self.values = np.asarray(values, dtype=float)
        self.shape = tuple(len(a) for a in self.axes)
        self.vdim = self.values.shape[-1]
        if self.values.shape != self.shape + (self.vdim,):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"grid {self.shape} x ({self.vdim},)")
        self.steps = []
        for a, per in zip(self.axes, self.periodic):
            if per:
                self.steps.append(TWO_PI / len(a))
            else:
                if len(a) < 2:
                    raise ValueError("non-periodic axis needs at least 2 nodes")
                self.steps.append(float(a[1] - a[0]))
        self.flat = self.values.reshape(-1, self.vdim)
        self.strides = np.ones(len(self.shape), dtype=np.int64)
        for i in range(len(self.shape) - 2, -1, -1):
            self.strides[i] = self.strides[i + 1] * self.shape[i + 1]

    def _locate(self, pts: np.ndarray):
        """Cell corner indices (lo, hi) and local coordinates per axis."""
        lo, hi, t = [], [], []
        for i, (axis, per, h) in enumerate(zip(self.axes, self.periodic, self.steps)):
            x = pts[:, i]
            if per:
                pos = x / h
                cell = np.floor(pos).astype(np.int64)
                t.append(pos - cell)
                lo.append(np.mod(cell, len(axis)))
                hi.append(np.mod(cell + 1, len(axis)))
            else:
                pos = (x - axis[0]) / h
                cell = np.clip(np.floor(pos).astype(np.int64), 0, len(axis) - 2)
                t.append(pos - cell)  # unclamped: linear extrapolation outside
                lo.append(cell)
                hi.append(cell + 1)
        return lo, hi, t

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float).reshape(-1, len(self.axes) if self.axes else 0)
        if not self.axes:
            return np.broadcast_to(self.flat[0], (pts.shape[0], self.vdim)).copy()
        lo, hi, t = self._locate(pts)
        out = np.zeros((pts.shape[0], self.vdim))
        d = len(self.axes)
        for corner in itertools.product((0, 1), repeat=d):
            w = np.ones(pts.shape[0])
            idx = np.zeros(pts.shape[0], dtype=np.int64)
            for i, c in enumerate(corner):
                w = w * (t[i] if c else (1.0 - t[i]))
                idx += (hi[i] if c else lo[i]) * self.strides[i]
            out += w[:, None] * self.flat[idx]
        return out

    def with_gradient(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Values and gradients d value / d domain, shapes (N,v) and (N,v,d)."""
        pts = np.asarray(pts, dtype=float).reshape(-1, len(self.axes) if self.axes else 0)
        n = pts.shape[0]
        d = len(self.axes)
        if d == 0:
            vals = np.broadcast_to(self.flat[0], (n, self.vdim)).copy()
            return vals, np.zeros((n, self.vdim, 0))
        lo, hi, t = self._locate(pts)
        vals = np.zeros((n, self.vdim))
        grads = np.zeros((n, self.vdim, d))
        for corner in itertools.product((0, 1), repeat=d):
            factors = [(t[i] if c else (1.0 - t[i])) for i, c in enumerate(corner)]
            idx = np.zeros(n, dtype=np.int64)
            for i, c in enumerate(corner):
                idx += (hi[i] if c else lo[i]) * self.strides[i]
            v = self.flat[idx]
            w = np.ones(n)
            for f in factors:
                w = w * f
            vals += w[:, None] * v
            for i in range(d):
                sign = 1.0 if corner[i] else -1.0
                wi = np.full(n, sign / self.steps[i])
                for j in range(d):
                    if j != i:
                        wi = wi * factors[j]
                grads[:, :, i] += wi[:, None] * v
        return vals, grads


# ---------------------------------------------------------------------------
# Section grids

@dataclass(eq=False)
class SectionGrid:
    """Discretized section: values in one fiber box over base x other fiber.

    kind 'unstable' maps (base, unstable) nodes to stable values; 'stable'
    maps (base, stable) nodes to unstable values.  Node order is row-major
    over the axes (base angles first, then fiber coordinates).
    """

    model: GeometricModel
    kind: str
    base_count: int
    fiber_count: int
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in ("unstable", "stable"):
            raise ValueError(f"kind must be 'unstable' or 'stable', got {self.kind!r}")
        self.values = np.asarray(self.values, dtype=float)
        shape = self.grid_shape() + (self.value_dim(),)
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape}, expected {shape}")

    # domain structure -----------------------------------------------------
    def domain_radii(self) -> tuple[float, ...]:
        return self.model.radii_u if self.kind == "unstable" else self.model.radii_s

    def value_radii(self) -> tuple[float, ...]:
        return self.model.radii_s if self.kind == "unstable" else self.model.radii_u

    def domain_dim(self) -> int:
        return self.model.base_dim + len(self.domain_radii())

    def value_dim(self) -> int:
        return len(self.value_radii())

    def axes(self) -> list[np.ndarray]:
        out = [angle_grid(self.base_count) for _ in range(self.model.base_dim)]
        out.extend(fiber_grid(r, self.fiber_count) for r in self.domain_radii())
        return out

    def periodic_axes(self) -> list[bool]:
        return [True] * self.model.base_dim + [False] * len(self.domain_radii())

    def grid_shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.axes())

    def node_count(self) -> int:
        return int(np.prod(self.grid_shape())) if self.grid_shape() else 1

    def domain_nodes(self) -> np.ndarray:
        """All domain nodes as an (N, domain_dim) array, row-major order."""
        axes = self.axes()
        if not axes:
            return np.zeros((1, 0))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def flat_values(self) -> np.ndarray:
        return self.values.reshape(-1, self.value_dim())

    # construction helpers ---------------------------------------------------
    def with_values(self, flat: np.ndarray) -> "SectionGrid":
        vals = np.asarray(flat, dtype=float).reshape(self.grid_shape() + (self.value_dim(),))
        return SectionGrid(self.model, self.kind, self.base_count, self.fiber_count, vals)

    # evaluation -------------------------------------------------------------
    def _interp(self) -> _RegularInterp:
        return _RegularInterp(self.axes(), self.periodic_axes(), self.values)

    def interpolate(self, pts: np.ndarray) -> np.ndarray:
        return self._interp()(pts)

    def interpolate_with_gradient(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self._interp().with_gradient(pts)

    def fiber_violation(self) -> float:
        """Largest excess of any value outside its fiber box (0 if none)."""
        radii = np.asarray(self.value_radii())
        if radii.size == 0 or self.flat_values().size == 0:
            return 0.0
        return float(np.maximum(np.abs(self.flat_values()) - radii, 0.0).max())


def zero_section(model: GeometricModel, kind: str, base_count: int,
                 fiber_count: int) -> SectionGrid:
    """The zero section of the requested kind (the usual iteration seed)."""
    dom_fibers = model.unstable_dim if kind == "unstable" else model.stable_dim
    vdim = model.stable_dim if kind == "unstable" else model.unstable_dim
    shape = (base_count,) * model.base_dim + (fiber_count,) * dom_fibers + (vdim,)
    return SectionGrid(model, kind, base_count, fiber_count, np.zeros(shape))


def lipschitz_estimate(section: SectionGrid) -> tuple[float, np.ndarray]:
    """Discrete Lipschitz constant: max ratio over adjacent node pairs.

    Base axes include the wraparound pair.  Returns (global, per-node grid)
    where a node's entry is the max over edges incident to it.
    """
    vals = section.values
    shape = section.grid_shape()
    per_node = np.zeros(shape)
    periodic = section.periodic_axes()
    interp = section._interp()
    for i, per in enumerate(periodic):
        h = interp.steps[i]
        diff = np.linalg.norm(np.diff(vals, axis=i), axis=-1) / h
        sl_lo = tuple(slice(None) if j != i else slice(0, shape[i] - 1)
                      for j in range(len(shape)))
        sl_hi = tuple(slice(None) if j != i else slice(1, shape[i])
                      for j in range(len(shape)))
        np.maximum.at(per_node, sl_lo, diff)
        np.maximum.at(per_node, sl_hi, diff)
        if per and shape[i] > 1:
            wrap = np.linalg.norm(np.take(vals, 0, axis=i) -
                                  np.take(vals, shape[i] - 1, axis=i), axis=-1) / h
            sl_first = tuple(slice(None) if j != i else 0 for j in range(len(shape)))
            sl_last = tuple(slice(None) if j != i else shape[i] - 1
                            for j in range(len(shape)))
            np.maximum.at(per_node, sl_first, wrap)
            np.maximum.at(per_node, sl_last, wrap)
    return float(per_node.max(initial=0.0)), per_node


# ---------------------------------------------------------------------------
# Transform internals

@dataclass
class ApplyStats:
    """Per-application Newton bookkeeping."""

    newton_iterations: int
    max_residual: float
    seeds: np.ndarray          # converged unknowns, reusable as next seeds
    fallback_nodes: int


def _assemble_unstable_inputs(model: GeometricModel, w: np.ndarray,
                              sigma_vals: np.ndarray) -> np.ndarray:
    n = model.base_dim
    pts = np.empty((w.shape[0], model.ambient_dim))
    pts[:, model.sl_base] = w[:, :n]
    pts[:, model.sl_s] = sigma_vals
    pts[:, model.sl_u] = w[:, n:]
    return pts


def _domain_indices(model: GeometricModel, kind: str) -> np.ndarray:
    """Ambient coordinate indices of a section kind's domain block."""
    n = model.base_dim
    if kind == "unstable":
        fiber = np.arange(model.sl_u.start, model.sl_u.stop)
    else:
        fiber = np.arange(model.sl_s.start, model.sl_s.stop)
    return np.concatenate([np.arange(n), fiber]).astype(np.int64)


def _wrap_domain_residual(model: GeometricModel, diff: np.ndarray) -> np.ndarray:
    if model.base_dim:
        diff[:, : model.base_dim] = wrap_difference(diff[:, : model.base_dim])
    return diff


def _solve_batch(jac: np.ndarray, res: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(jac, res[..., None])[..., 0]
    except np.linalg.LinAlgError:
        step = np.zeros_like(res)
        for i in range(jac.shape[0]):
            try:
                step[i] = np.linalg.solve(jac[i], res[i])
            except np.linalg.LinAlgError:
                step[i] = np.nan
        return step


def _newton_unstable(mapdef: MapDefinition, model: GeometricModel,
                     section: SectionGrid, targets: np.ndarray, w0: np.ndarray,
                     newton_tol: float, newton_max: int):
    """Solve, per row, for domain point w with image domain-block == target.

    Returns (w, residual sup-norms, image stable blocks, iterations used)."""
    out_idx = _domain_indices(model, "unstable")
    n = model.base_dim
    interp = section._interp()
    w = w0.copy()
    nrows = w.shape[0]
    best_w = w.copy()
    best_res = np.full(nrows, np.inf)
    best_svals = np.zeros((nrows, model.stable_dim))
    active = np.ones(nrows, dtype=bool)
    iters = 0
    for _ in range(newton_max + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        sigma_vals, sigma_grads = interp.with_gradient(w[idx])
        pts = _assemble_unstable_inputs(model, w[idx], sigma_vals)
        vals, jac = map_eval_jacobian_array(mapdef, pts, wrap=False, check=False)
        finite = np.isfinite(vals).all(axis=1) & np.isfinite(jac).all(axis=(1, 2))
        res = vals[:, out_idx] - targets[idx]
        res = _wrap_domain_residual(model, res)
        res_norm = np.where(finite, np.abs(res).max(axis=1) if res.shape[1] else 0.0,
                            np.inf)
        improved = res_norm < best_res[idx]
        best_w[idx[improved]] = w[idx[improved]]
        best_res[idx[improved]] = res_norm[improved]
        best_svals[idx[improved]] = vals[improved][:, model.sl_s]
        done = (res_norm <= newton_tol) | ~finite
        active[idx[done]] = False
        keep = ~done
        idx = idx[keep]
        if idx.size == 0:
            break
        iters += 1
        jac_out = jac[keep][:, out_idx, :]
        direct = jac_out[:, :, out_idx]
        chain = np.einsum("pds,psk->pdk", jac_out[:, :, model.sl_s], sigma_grads[keep])
        step = _solve_batch(direct + chain, res[keep])
        bad = ~np.isfinite(step).all(axis=1)
        if bad.any():
            active[idx[bad]] = False
            step[bad] = 0.0
        w[idx] -= step
    return best_w, best_res, best_svals, iters


def _coarse_candidates(model: GeometricModel, section: SectionGrid,
                       per_axis: int = 8) -> np.ndarray:
    axes = []
    for _ in range(model.base_dim):
        axes.append(np.arange(per_axis) * (TWO_PI / per_axis))
    for r in section.domain_radii():
        axes.append(np.linspace(-r, r, per_axis))
    if not axes:
        return np.zeros((1, 0))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _coarse_seed(mapdef: MapDefinition, model: GeometricModel, section: SectionGrid,
                 targets: np.ndarray) -> np.ndarray:
    """Best coarse-grid seed per target by direct residual evaluation."""
    cand = _coarse_candidates(model, section)
    sigma_vals = section.interpolate(cand)
    pts = _assemble_unstable_inputs(model, cand, sigma_vals)
    vals = map_eval_array(mapdef, pts, wrap=False)
    out_idx = _domain_indices(model, "unstable")
    proj = vals[:, out_idx]
    seeds = np.empty((targets.shape[0], cand.shape[1]))
    for j, z in enumerate(targets):
        diff = proj - z
        diff = _wrap_domain_residual(model, diff)
        k = int(np.argmin(np.abs(diff).max(axis=1) if diff.shape[1] else
                          np.zeros(diff.shape[0])))
        seeds[j] = cand[k]
    return seeds


def apply_unstable_transform(mapdef: MapDefinition, model: GeometricModel,
                             section: SectionGrid,
                             newton_tol: float = 1e-12, newton_max: int = 50,
                             seeds: Optional[np.ndarray] = None,
                             verify_cover: bool = False,
                             ) -> tuple[SectionGrid, ApplyStats]:
    """One application of the forward graph transform to an unstable section.

    Per target node the preimage location on the current graph is solved by
    Newton in the domain variables; the new value is the stable block of the
    image.  Seeding order: caller seeds (previous iterate's correspondence),
    the node itself, nearest converged node, coarse search.  Values landing
    outside the stable box raise; with verify_cover a second solve from the
    coarse seed must agree with the first (graph property check).
    """
    if section.kind != "unstable":
        raise ValueError("apply_unstable_transform needs an unstable-kind section")
    targets = section.domain_nodes()
    w0 = seeds.copy() if seeds is not None else targets.copy()
    w, res, svals, iters = _newton_unstable(mapdef, model, section, targets, w0,
                                            newton_tol, newton_max)
    fallbacks = 0
    failed = res > newton_tol
    if failed.any() and (~failed).any():
        # reseed failures from the nearest converged node's solution
        fallbacks += int(failed.sum())
        good = np.flatnonzero(~failed)
        bad = np.flatnonzero(failed)
        diff = targets[bad][:, None, :] - targets[good][None, :, :]
        if model.base_dim:
            diff[:, :, : model.base_dim] = wrap_difference(diff[:, :, : model.base_dim])
        nearest = good[np.argmin(np.abs(diff).max(axis=2) if diff.shape[2] else
                                 np.zeros(diff.shape[:2]), axis=1)]
        shift = targets[bad] - targets[nearest]
        w_b, res_b, sv_b, it_b = _newton_unstable(
            mapdef, model, section, targets[bad], w[nearest] + shift,
            newton_tol, newton_max)
        iters += it_b
        w[bad], res[bad], svals[bad] = w_b, res_b, sv_b
        failed = res > newton_tol
    if failed.any():
        fallbacks += int(failed.sum())
        bad = np.flatnonzero(failed)
        w_b, res_b, sv_b, it_b = _newton_unstable(
            mapdef, model, section, targets[bad],
            _coarse_seed(mapdef, model, section, targets[bad]),
            newton_tol, newton_max)
        iters += it_b
        w[bad], res[bad], svals[bad] = w_b, res_b, sv_b
        failed = res > newton_tol
    if failed.any():
        node = int(np.flatnonzero(failed)[0])
        raise NewtonFailure(
            f"preimage solve failed at node {node} (residual {res[node]:.3e})",
            node, float(res[node]))

    radii = np.asarray(model.radii_s)
    if radii.size:
        excess = np.abs(svals) - radii
        if (excess > FIBER_TOL).any():
            node = int(np.argmax(excess.max(axis=1)))
            raise ValueOutsideFiber(
                f"transformed value at node {node} leaves the stable box "
                f"by {excess.max():.3e}", node, svals[node])

    if verify_cover:
        alt0 = _coarse_seed(mapdef, model, section, targets)
        w2, res2, _, _ = _newton_unstable(mapdef, model, section, targets, alt0,
                                          newton_tol, newton_max)
        both = (res <= newton_tol) & (res2 <= newton_tol)
        diff = np.abs(w2 - w)
        if model.base_dim:
            diff[:, : model.base_dim] = np.abs(
                wrap_difference(diff[:, : model.base_dim]))
        disagree = both & (diff.max(axis=1) > 1e-6)
        if disagree.any():
            node = int(np.flatnonzero(disagree)[0])
            raise NonInjectiveCover(
                f"two preimages found for node {node}", node, w[node], w2[node])

    new_section = section.with_values(svals)
    stats = ApplyStats(iters, float(res.max(initial=0.0)), w, fallbacks)
    return new_section, stats


def _newton_stable(mapdef: MapDefinition, model: GeometricModel,
                   section: SectionGrid, nodes: np.ndarray, eta0: np.ndarray,
                   newton_tol: float, newton_max: int):
    """Per row, solve for unstable offset eta with image on the current graph."""
    dom_idx = _domain_indices(model, "stable")
    u_rows = np.arange(model.sl_u.start, model.sl_u.stop)
    interp = section._interp()
    eta = eta0.copy()
    nrows = eta.shape[0]
    best = eta.copy()
    best_res = np.full(nrows, np.inf)
    active = np.ones(nrows, dtype=bool)
    iters = 0
    for _ in range(newton_max + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pts = np.empty((idx.size, model.ambient_dim))
        pts[:, dom_idx] = nodes[idx]
        pts[:, model.sl_u] = eta[idx]
        vals, jac = map_eval_jacobian_array(mapdef, pts, wrap=False, check=False)
        finite = np.isfinite(vals).all(axis=1) & np.isfinite(jac).all(axis=(1, 2))
        tau_vals, tau_grads = interp.with_gradient(vals[:, dom_idx])
        res = vals[:, model.sl_u] - tau_vals
        res_norm = np.where(finite, np.abs(res).max(axis=1), np.inf)
        improved = res_norm < best_res[idx]
        best[idx[improved]] = eta[idx[improved]]
        best_res[idx[improved]] = res_norm[improved]
        done = (res_norm <= newton_tol) | ~finite
        active[idx[done]] = False
        keep = ~done
        idx = idx[keep]
        if idx.size == 0:
            break
        iters += 1
        jac_uu = jac[keep][:, u_rows, :][:, :, u_rows]
        jac_dom_u = jac[keep][:, dom_idx, :][:, :, u_rows]
        chain = np.einsum("pvd,pdk->pvk", tau_grads[keep], jac_dom_u)
        step = _solve_batch(jac_uu - chain, res[keep])
        bad = ~np.isfinite(step).all(axis=1)
        if bad.any():
            active[idx[bad]] = False
            step[bad] = 0.0
        eta[idx] -= step
    return best, best_res, iters


def apply_stable_transform(mapdef: MapDefinition, model: GeometricModel,
                           section: SectionGrid,
                           newton_tol: float = 1e-12, newton_max: int = 50,
                           seeds: Optional[np.ndarray] = None,
                           ) -> tuple[SectionGrid, ApplyStats]:
    """One application of the backward graph transform to a stable section.

    The new value at a node is the unstable offset whose forward image lies
    on the current graph; this characterizes the preimage graph without
    evaluating any inverse.  Seeds default to the section's own values.
    """
    if section.kind != "stable":
        raise ValueError("apply_stable_transform needs a stable-kind section")
    nodes = section.domain_nodes()
    eta0 = seeds.copy() if seeds is not None else section.flat_values().copy()
    eta, res, iters = _newton_stable(mapdef, model, section, nodes, eta0,
                                     newton_tol, newton_max)
    fallbacks = 0
    failed = res > newton_tol
    if failed.any():
        fallbacks = int(failed.sum())
        bad = np.flatnonzero(failed)
        cands = [np.linspace(-r, r, 8) for r in model.radii_u]
        mesh = np.meshgrid(*cands, indexing="ij") if cands else []
        cand = (np.stack([m.ravel() for m in mesh], axis=1)
                if mesh else np.zeros((1, 0)))
        for j in bad:
            pts = np.empty((cand.shape[0], model.ambient_dim))
            pts[:, _domain_indices(model, "stable")] = nodes[j]
            pts[:, model.sl_u] = cand
            vals = map_eval_array(mapdef, pts, wrap=False)
            tau_vals = section.interpolate(vals[:, _domain_indices(model, "stable")])
            rr = np.abs(vals[:, model.sl_u] - tau_vals).max(axis=1)
            seed = cand[int(np.argmin(rr))][None, :]
            e2, r2, it2 = _newton_stable(mapdef, model, section, nodes[j:j + 1],
                                         seed, newton_tol, newton_max)
            iters += it2
            if r2[0] < res[j]:
                eta[j], res[j] = e2[0], r2[0]
        failed = res > newton_tol
    if failed.any():
        node = int(np.flatnonzero(failed)[0])
        raise NewtonFailure(
            f"graph-return solve failed at node {node} (residual {res[node]:.3e})",
            node, float(res[node]))

    radii = np.asarray(model.radii_u)
    if radii.size:
        excess = np.abs(eta) - radii
        if (excess > FIBER_TOL).any():
            node = int(np.argmax(excess.max(axis=1)))
            raise ValueOutsideFiber(
                f"transformed value at node {node} leaves the unstable box "
                f"by {excess.max():.3e}", node, eta[node])

    stats = ApplyStats(iters, float(res.max(initial=0.0)), eta, fallbacks)
    return section.with_values(eta), stats


def apply_transform(mapdef: MapDefinition, model: GeometricModel,
                    section: SectionGrid, **kw) -> tuple[SectionGrid, ApplyStats]:
    if section.kind == "unstable":
        return apply_unstable_transform(mapdef, model, section, **kw)
    return apply_stable_transform(mapdef, model, section, **kw)


# ---------------------------------------------------------------------------
# Fast path for skew-structured maps

def _skew_structure(mapdef: MapDefinition, model: GeometricModel, kind: str) -> bool:
    """True when the domain-block formulas never read the value-block variables.

    For such maps the preimage correspondence of the unstable transform (and
    the graph-return argument of the stable one) is independent of the
    section, so it can be solved once and frozen across iterations.
    """
    if kind == "unstable":
        value_vars = set(mapdef.variables[model.sl_s])
        dom_idx = _domain_indices(model, "unstable")
    else:
        value_vars = set(mapdef.variables[model.sl_u])
        dom_idx = _domain_indices(model, "stable")
    for i in dom_idx:
        if referenced_names(mapdef.formulas[i]) & value_vars:
            return False
    return True


class _FrozenUnstableStep:
    """Pre-solved correspondence for skew maps: iteration is interpolation
    plus evaluation of the stable formulas at fixed domain inputs."""

    def __init__(self, mapdef: MapDefinition, model: GeometricModel,
                 section: SectionGrid, w: np.ndarray):
        self.model = model
        self.section_template = section
        self.w = w
        interp = section._interp()
        lo, hi, t = interp._locate(w)
        d = len(interp.axes)
        corners = []
        for corner in itertools.product((0, 1), repeat=d):
            weight = np.ones(w.shape[0])
            idx = np.zeros(w.shape[0], dtype=np.int64)
            for i, c in enumerate(corner):
                weight = weight * (t[i] if c else (1.0 - t[i]))
                idx += (hi[i] if c else lo[i]) * interp.strides[i]
            corners.append((idx, weight))
        self.corners = corners
        n = model.base_dim
        self.col_base = [w[:, j] for j in range(n)]
        self.col_u = [w[:, n + j] for j in range(model.unstable_dim)]
        fns = mapdef.compiled()
        self.s_fns = [fns[j] for j in range(model.sl_s.start, model.sl_s.stop)]
        self.radii_s = np.asarray(model.radii_s)

    def step(self, flat_values: np.ndarray) -> np.ndarray:
        sigma = np.zeros((self.w.shape[0], flat_values.shape[1]))
        for idx, weight in self.corners:
            sigma += weight[:, None] * flat_values[idx]
        cols = list(self.col_base)
        cols.extend(sigma[:, j] for j in range(sigma.shape[1]))
        cols.extend(self.col_u)
        out = np.empty_like(flat_values)
        for j, fn in enumerate(self.s_fns):
            out[:, j] = fn(cols)
        return out


@dataclass
class TransformReport:
    """Iteration diary of a fixed-point run."""

    iterations: int
    stopped_by: str                 # change | max_iter | failure
    final_change: float
    residual: float
    residual_ok: bool
    lipschitz_global: float
    lipschitz_ok: bool
    change_trace: list              # (iteration, sup change) samples
    newton_iterations: int
    fallback_nodes: int
    node_failure: Optional[str]
    fast_path_used: bool
    tol_change: float
    tol_residual: float


def iterate_transform(mapdef: MapDefinition, model: GeometricModel,
                      init: SectionGrid,
                      tol_change: float = 1e-12, tol_residual: float = 1e-10,
                      max_iter: int = 10000,
                      newton_tol: float = 1e-12, newton_max: int = 50,
                      lip_slack: float = DEFAULT_LIP_SLACK,
                      fast_path: bool = True,
                      ) -> tuple[SectionGrid, TransformReport]:
    """Iterate a graph transform to its discrete fixed point.

    Stops when the sup-norm change drops below tol_change or at max_iter;
    the true fixed-point defect of the returned section is recomputed once
    at the end regardless of how the loop stopped.  Node-level failures end
    the run with the last good section and a failure report.  When the map's
    skew structure allows it, the preimage correspondence is solved once and
    the loop runs a frozen lightweight step (exact, not approximate); the
    final defect recomputation always goes through the full solver.
    """
    section = init
    if section.fiber_violation() > FIBER_TOL:
        raise ValueOutsideFiber("initial section has values outside its fiber box",
                                -1, section.flat_values())
    changes: list = []
    newton_total = 0
    fallbacks = 0
    node_failure = None
    stopped_by = "max_iter"
    final_change = np.inf
    fast = fast_path and _skew_structure(mapdef, model, section.kind)
    frozen = None
    seeds = None
    it = 0
    try:
        while it < max_iter:
            it += 1
            if frozen is not None:
                flat = frozen.step(section.flat_values())
                if (np.abs(flat) - frozen.radii_s > FIBER_TOL).any():
                    node = int(np.argmax((np.abs(flat) - frozen.radii_s).max(axis=1)))
                    raise ValueOutsideFiber(
                        "transformed value leaves the stable box", node, flat[node])
                new_section = section.with_values(flat)
            else:
                new_section, stats = apply_transform(
                    mapdef, model, section, newton_tol=newton_tol,
                    newton_max=newton_max, seeds=seeds)
                newton_total += stats.newton_iterations
                fallbacks += stats.fallback_nodes
                seeds = stats.seeds
                if (fast and section.kind == "unstable" and frozen is None
                        and stats.newton_iterations == 0 and it >= 2):
                    # correspondence is frozen: switch to the lightweight step
                    frozen = _FrozenUnstableStep(mapdef, model, section, stats.seeds)
            change = float(np.abs(new_section.flat_values() -
                                  section.flat_values()).max(initial=0.0))
            section = new_section
            final_change = change
            if it <= 64 or (it & (it - 1)) == 0 or change < tol_change:
                changes.append((it, change))
            if change < tol_change:
                stopped_by = "change"
                break
    except (NewtonFailure, ValueOutsideFiber, NonInjectiveCover) as exc:
        node_failure = f"{type(exc).__name__}: {exc}"
        stopped_by = "failure"

    # recompute the true defect through the full solver
    if node_failure is None:
        try:
            refreshed, stats = apply_transform(mapdef, model, section,
                                               newton_tol=newton_tol,
                                               newton_max=newton_max, seeds=seeds)
            newton_total += stats.newton_iterations
            residual = float(np.abs(refreshed.flat_values() -
                                    section.flat_values()).max(initial=0.0))
        except (NewtonFailure, ValueOutsideFiber, NonInjectiveCover) as exc:
            node_failure = f"{type(exc).__name__}: {exc}"
            stopped_by = "failure"
            residual = np.inf
    else:
        residual = np.inf

    lip, _ = lipschitz_estimate(section)
    report = TransformReport(
        iterations=it,
        stopped_by=stopped_by,
        final_change=final_change,
        residual=residual,
        residual_ok=bool(residual <= tol_residual),
        lipschitz_global=lip,
        lipschitz_ok=bool(lip <= 1.0 + lip_slack),
        change_trace=changes,
        newton_iterations=newton_total,
        fallback_nodes=fallbacks,
        node_failure=node_failure,
        fast_path_used=frozen is not None,
        tol_change=tol_change,
        tol_residual=tol_residual)
    return section, report


# ---------------------------------------------------------------------------
# Graph intersection

@dataclass(eq=False)
class ManifoldGrid:
    """Invariant-manifold candidate: fiber offsets per base node.

    xi_s and xi_u have shapes base_shape + (s,) and base_shape + (u,);
    tangent_bases, when set, is a list of PlaneBasis aligned with the
    row-major node order.
    """

    model: GeometricModel
    base_count: int
    xi_s: np.ndarray
    xi_u: np.ndarray
    tangent_bases: Optional[list] = None

    def __post_init__(self):
        shape = (self.base_count,) * self.model.base_dim
        self.xi_s = np.asarray(self.xi_s, dtype=float).reshape(shape + (self.model.stable_dim,))
        self.xi_u = np.asarray(self.xi_u, dtype=float).reshape(shape + (self.model.unstable_dim,))
        rs = np.asarray(self.model.radii_s)
        ru = np.asarray(self.model.radii_u)
        vs = (np.abs(self.xi_s) - rs).max() if self.xi_s.size else 0.0
        vu = (np.abs(self.xi_u) - ru).max() if self.xi_u.size else 0.0
        if max(vs, vu, 0.0) > FIBER_TOL:
            raise ValueOutsideFiber("manifold node outside the box", -1,
                                    np.array([max(vs, vu)]))

    def base_axes(self) -> list[np.ndarray]:
        return [angle_grid(self.base_count) for _ in range(self.model.base_dim)]

    def base_nodes(self) -> np.ndarray:
        axes = self.base_axes()
        if not axes:
            return np.zeros((1, 0))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def node_points(self) -> np.ndarray:
        """All nodes as ambient (N, m) points."""
        base = self.base_nodes()
        n = base.shape[0]
        out = np.empty((n, self.model.ambient_dim))
        out[:, self.model.sl_base] = base
        out[:, self.model.sl_s] = self.xi_s.reshape(n, -1)
        out[:, self.model.sl_u] = self.xi_u.reshape(n, -1)
        return out

    def interpolate(self, base_pts: np.ndarray) -> np.ndarray:
        """Fiber offsets (s then u) at arbitrary base points."""
        vals = np.concatenate([
            self.xi_s.reshape(self.xi_s.shape[: self.model.base_dim] + (-1,)),
            self.xi_u.reshape(self.xi_u.shape[: self.model.base_dim] + (-1,)),
        ], axis=-1)
        interp = _RegularInterp(self.base_axes(),
                                [True] * self.model.base_dim, vals)
        return interp(base_pts)


@dataclass
class IntersectReport:
    iterations: int
    residual: float
    slow_convergence: bool
    newton_used: bool


def intersect_graphs(section_u: Optional[SectionGrid],
                     section_s: Optional[SectionGrid],
                     model: GeometricModel,
                     tol: float = 1e-12, max_iter: int = 200,
                     ) -> tuple[ManifoldGrid, IntersectReport]:
    """Intersect converged unstable and stable graphs over each base node.

    Alternating substitution (contractive when the Lipschitz product is
    below one) with a Newton polish fallback; a missing section of a trivial
    kind (no fiber directions on its side) is treated as the whole box.
    """
    if section_u is None and section_s is None:
        raise ValueError("need at least one section")
    some = section_u if section_u is not None else section_s
    base_count = some.base_count
    if section_u is not None and section_s is not None:
        if section_u.base_count != section_s.base_count:
            raise ValueError("sections live on different base grids")
    axes = [angle_grid(base_count) for _ in range(model.base_dim)]
    if axes:
        mesh = np.meshgrid(*axes, indexing="ij")
        base = np.stack([m.ravel() for m in mesh], axis=1)
    else:
        base = np.zeros((1, 0))
    n = base.shape[0]
    xi_s = np.zeros((n, model.stable_dim))
    xi_u = np.zeros((n, model.unstable_dim))
    interp_u = section_u._interp() if section_u is not None else None
    interp_s = section_s._interp() if section_s is not None else None

    def eval_sigma_u(xu):
        if interp_u is None:
            return np.zeros((n, model.stable_dim))
        return interp_u(np.hstack([base, xu]))

    def eval_sigma_s(xs):
        if interp_s is None:
            return np.zeros((n, model.unstable_dim))
        return interp_s(np.hstack([base, xs]))

    slow = False
    newton_used = False
    prev_change = np.inf
    growth_streak = 0
    it = 0
    rs = np.asarray(model.radii_s)
    ru = np.asarray(model.radii_u)
    for it in range(1, max_iter + 1):
        new_s = eval_sigma_u(xi_u)
        new_u = eval_sigma_s(new_s)
        change = max(np.abs(new_s - xi_s).max(initial=0.0),
                     np.abs(new_u - xi_u).max(initial=0.0))
        xi_s, xi_u = new_s, new_u
        if (rs.size and (np.abs(xi_s) > rs + 1e-9).any()) or \
           (ru.size and (np.abs(xi_u) > ru + 1e-9).any()):
            raise NoIntersection("intersection iterate left the box")
        if change < tol * 0.5:
            break
        growth_streak = growth_streak + 1 if change >= prev_change else 0
        prev_change = change
        if growth_streak >= 3:
            slow = True
            break

    resid_s = eval_sigma_u(xi_u) - xi_s
    resid_u = eval_sigma_s(xi_s) - xi_u
    if max(np.abs(resid_s).max(initial=0.0), np.abs(resid_u).max(initial=0.0)) > tol:
        slow = True

    if slow:
        newton_used = True
        for _ in range(50):
            su, gu = (interp_u.with_gradient(np.hstack([base, xi_u]))
                      if interp_u is not None else
                      (np.zeros((n, model.stable_dim)),
                       np.zeros((n, model.stable_dim, model.base_dim + model.unstable_dim))))
            ss, gs = (interp_s.with_gradient(np.hstack([base, xi_s]))
                      if interp_s is not None else
                      (np.zeros((n, model.unstable_dim)),
                       np.zeros((n, model.unstable_dim, model.base_dim + model.stable_dim))))
            f_top = xi_s - su
            f_bot = xi_u - ss
            res = max(np.abs(f_top).max(initial=0.0), np.abs(f_bot).max(initial=0.0))
            if res <= tol:
                break
            s, u = model.stable_dim, model.unstable_dim
            jac = np.zeros((n, s + u, s + u))
            jac[:, :s, :s] = np.eye(s)
            jac[:, s:, s:] = np.eye(u)
            if u:
                jac[:, :s, s:] = -gu[:, :, model.base_dim:]
            if s:
                jac[:, s:, :s] = -gs[:, :, model.base_dim:]
            step = _solve_batch(jac, np.hstack([f_top, f_bot]))
            xi_s = xi_s - step[:, :s]
            xi_u = xi_u - step[:, s:]

    final_s = eval_sigma_u(xi_u)
    final_u = eval_sigma_s(xi_s)
    residual = max(np.abs(final_s - xi_s).max(initial=0.0),
                   np.abs(final_u - xi_u).max(initial=0.0))
    if (rs.size and (np.abs(xi_s) > rs + FIBER_TOL).any()) or \
       (ru.size and (np.abs(xi_u) > ru + FIBER_TOL).any()):
        raise NoIntersection("intersection point left the box")
    manifold = ManifoldGrid(model, base_count, xi_s, xi_u)
    return manifold, IntersectReport(it, float(residual), slow, newton_used)
