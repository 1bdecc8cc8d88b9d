"""Geometric box models, cone fields, and plane comparisons.

A model is a compact box neighbourhood B = N x B^s x B^u of a candidate
invariant manifold N, where N is a single point (base_dim = 0) or the flat
torus (R/2piZ)^n, and B^s, B^u are products of centred intervals
[-delta_i, delta_i].  All norms are the product Euclidean norm on
R^n x R^s x R^u, with arc-length (wraparound) distance on angular factors.

Two boundary strata drive the topological checks: the stable stratum
N x dB^s x B^u, which the image of B must never touch, and the unstable
stratum N x B^s x dB^u, whose image must clear B entirely.

Cones are parameterised by an aperture gamma in (0, 1].  The 's' cone at a
point bounds the stable component of a tangent vector by gamma times the
norm of the rest (base + unstable); the 'u' cone bounds the unstable
component by gamma times the norm of base + stable.  Margins are signed and
scale-invariant: positive means strictly inside the open cone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi

POINT_LABELS = ("Interior", "OnStableBoundary", "OnUnstableBoundary", "OnCorner", "Outside")

BOUNDARY_TOL = 1e-12


class ModelError(ValueError):
    """Raised when a geometric model is built from inconsistent data."""


def wrap_angles(a):
    """Reduce angles to the fundamental domain [0, 2pi)."""
    return np.mod(a, TWO_PI)


def wrap_difference(d):
    """Shortest signed angular difference, in (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(d, dtype=float), TWO_PI)


@dataclass(frozen=True)
class GeometricModel:
    """Box model B = N x B^s x B^u with cone aperture gamma."""

    base_dim: int
    stable_dim: int
    unstable_dim: int
    radii_s: tuple[float, ...]
    radii_u: tuple[float, ...]
    gamma: float = 1.0

    @property
    def ambient_dim(self) -> int:
        return self.base_dim + self.stable_dim + self.unstable_dim

    @property
    def sl_base(self) -> slice:
        return slice(0, self.base_dim)

    @property
    def sl_s(self) -> slice:
        return slice(self.base_dim, self.base_dim + self.stable_dim)

    @property
    def sl_u(self) -> slice:
        return slice(self.base_dim + self.stable_dim, self.ambient_dim)

    def periodic_mask(self) -> np.ndarray:
        """Boolean mask over ambient coordinates: True on angular coordinates."""
        mask = np.zeros(self.ambient_dim, dtype=bool)
        mask[: self.base_dim] = True
        return mask

    def bad_slice(self, which: str) -> slice:
        """Coordinate slice of the cone's bounded ('bad') component."""
        if which == "s":
            return self.sl_s
        if which == "u":
            return self.sl_u
        raise ValueError(f"which must be 's' or 'u', got {which!r}")


def make_model(base_dim: int,
               stable_dim: int,
               unstable_dim: int,
               radii_s: Sequence[float],
               radii_u: Sequence[float],
               gamma: float = 1.0) -> GeometricModel:
    """Validate and build a geometric model; errors name the offending field."""
    for name, value in (("base_dim", base_dim), ("stable_dim", stable_dim),
                        ("unstable_dim", unstable_dim)):
        if not isinstance(value, (int, np.integer)) or value < 0:
            raise ModelError(f"{name} must be a nonnegative integer, got {value!r}")
    radii_s = tuple(float(r) for r in radii_s)
    radii_u = tuple(float(r) for r in radii_u)
    if len(radii_s) != stable_dim:
        raise ModelError(f"radii_s has length {len(radii_s)}, expected stable_dim = {stable_dim}")
    if len(radii_u) != unstable_dim:
        raise ModelError(f"radii_u has length {len(radii_u)}, expected unstable_dim = {unstable_dim}")
    for name, radii in (("radii_s", radii_s), ("radii_u", radii_u)):
        if any(not np.isfinite(r) or r <= 0.0 for r in radii):
            raise ModelError(f"{name} must contain finite positive radii, got {radii}")
    gamma = float(gamma)
    if not (0.0 < gamma <= 1.0):
        raise ModelError(f"gamma must lie in (0, 1], got {gamma}")
    if base_dim + stable_dim + unstable_dim == 0:
        raise ModelError("model has ambient dimension 0: base_dim, stable_dim, unstable_dim all zero")
    return GeometricModel(int(base_dim), int(stable_dim), int(unstable_dim),
                          radii_s, radii_u, gamma)


@dataclass(eq=False)
class AmbientPoint:
    """Point of B: angular base coordinates plus stable/unstable fiber offsets.

    Base components are always stored reduced to [0, 2pi).
    """

    base: np.ndarray
    xi_s: np.ndarray
    xi_u: np.ndarray

    def __post_init__(self) -> None:
        self.base = wrap_angles(np.atleast_1d(np.asarray(self.base, dtype=float)))
        self.xi_s = np.atleast_1d(np.asarray(self.xi_s, dtype=float))
        self.xi_u = np.atleast_1d(np.asarray(self.xi_u, dtype=float))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.base, self.xi_s, self.xi_u])

    @classmethod
    def from_vector(cls, model: GeometricModel, vec: Sequence[float]) -> "AmbientPoint":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (model.ambient_dim,):
            raise ModelError(f"vector has shape {vec.shape}, expected ({model.ambient_dim},)")
        return cls(vec[model.sl_base], vec[model.sl_s], vec[model.sl_u])


@dataclass(eq=False)
class TangentVector:
    """Tangent vector split into base, stable, and unstable components."""

    d_base: np.ndarray
    d_s: np.ndarray
    d_u: np.ndarray

    def __post_init__(self) -> None:
        self.d_base = np.atleast_1d(np.asarray(self.d_base, dtype=float))
        self.d_s = np.atleast_1d(np.asarray(self.d_s, dtype=float))
        self.d_u = np.atleast_1d(np.asarray(self.d_u, dtype=float))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d_base, self.d_s, self.d_u])

    @classmethod
    def from_vector(cls, model: GeometricModel, vec: Sequence[float]) -> "TangentVector":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (model.ambient_dim,):
            raise ModelError(f"vector has shape {vec.shape}, expected ({model.ambient_dim},)")
        return cls(vec[model.sl_base], vec[model.sl_s], vec[model.sl_u])


@dataclass(eq=False)
class PlaneBasis:
    """Orthonormal basis of a tangent plane, stored as columns of an (m, k) array."""

    basis: np.ndarray

    def __post_init__(self) -> None:
        self.basis = np.asarray(self.basis, dtype=float)
        if self.basis.ndim != 2:
            raise ModelError(f"plane basis must be 2-d, got shape {self.basis.shape}")
        k = self.basis.shape[1]
        if k:
            gram = self.basis.T @ self.basis
            if not np.allclose(gram, np.eye(k), atol=1e-12, rtol=0.0):
                raise ModelError("plane basis columns are not orthonormal to 1e-12")

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T

    @classmethod
    def from_span(cls, vectors: np.ndarray, rank_tol: float = 1e-10) -> "PlaneBasis":
        """Orthonormalize spanning columns; raises if they are rank-deficient."""
        vectors = np.asarray(vectors, dtype=float)
        if vectors.ndim == 1:
            vectors = vectors[:, None]
        if vectors.shape[1] == 0:
            return cls(vectors.reshape(vectors.shape[0], 0))
        q, r = np.linalg.qr(vectors)
        diag = np.abs(np.diag(r))
        if np.any(diag <= rank_tol * max(1.0, diag.max(initial=0.0))):
            raise ModelError("spanning vectors are rank deficient; plane dimension would collapse")
        return cls(q)


def _as_basis(plane) -> np.ndarray:
    if isinstance(plane, PlaneBasis):
        return plane.basis
    arr = np.asarray(plane, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr


def classify_point(model: GeometricModel, point: AmbientPoint,
                   tol: float = BOUNDARY_TOL) -> str:
    """Classify a point against the box strata.

    Returns one of Interior, OnStableBoundary, OnUnstableBoundary, OnCorner,
    Outside.  The torus factor has no boundary, so only fiber offsets matter.
    A coordinate counts as on-boundary when it matches its radius within tol.
    """
    xs = np.abs(point.xi_s)
    xu = np.abs(point.xi_u)
    rs = np.asarray(model.radii_s)
    ru = np.asarray(model.radii_u)
    if xs.shape != rs.shape or xu.shape != ru.shape:
        raise ModelError("point fiber dimensions do not match the model")
    if np.any(xs > rs + tol) or np.any(xu > ru + tol):
        return "Outside"
    on_s = bool(model.stable_dim) and bool(np.any(xs >= rs - tol))
    on_u = bool(model.unstable_dim) and bool(np.any(xu >= ru - tol))
    if on_s and on_u:
        return "OnCorner"
    if on_s:
        return "OnStableBoundary"
    if on_u:
        return "OnUnstableBoundary"
    return "Interior"


def cone_margin(model: GeometricModel, v, which: str) -> float:
    """Signed, scale-invariant cone membership margin of a tangent vector.

    For which='s' the bounded component is the stable part and the margin is
    (gamma*||(d_base, d_u)|| - ||d_s||) / ||v||; which='u' bounds the unstable
    part by the rest.  Positive means strictly inside the open cone, zero on
    the cone boundary, negative outside.
    """
    vec = v.as_vector() if isinstance(v, TangentVector) else np.asarray(v, dtype=float)
    if vec.shape != (model.ambient_dim,):
        raise ModelError(f"vector has shape {vec.shape}, expected ({model.ambient_dim},)")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise ModelError("cone membership is undefined for the zero vector")
    bad = model.bad_slice(which)
    mask = np.zeros(model.ambient_dim, dtype=bool)
    mask[bad] = True
    bad_norm = float(np.linalg.norm(vec[mask]))
    good_norm = float(np.linalg.norm(vec[~mask]))
    return (model.gamma * good_norm - bad_norm) / norm


def cone_margin_array(model: GeometricModel, vecs: np.ndarray, which: str) -> np.ndarray:
    """Vectorized cone_margin over rows of an (N, m) array."""
    vecs = np.asarray(vecs, dtype=float)
    bad = model.bad_slice(which)
    mask = np.zeros(model.ambient_dim, dtype=bool)
    mask[bad] = True
    bad_norm = np.linalg.norm(vecs[..., mask], axis=-1)
    good_norm = np.linalg.norm(vecs[..., ~mask], axis=-1)
    norm = np.linalg.norm(vecs, axis=-1)
    with np.errstate(invalid="ignore"):
        return (model.gamma * good_norm - bad_norm) / norm


def plane_in_cone_margin(model: GeometricModel, plane, which: str) -> float:
    """Worst cone margin over all unit vectors of a plane, computed exactly.

    On a plane with orthonormal basis Q the margin of a unit vector w depends
    monotonically on ||P_good w|| (the good and bad projectors are
    complementary), so the minimiser of the quadratic form
    gamma^2 ||P_good w||^2 - ||P_bad w||^2 over unit vectors of the plane --
    the smallest eigenvector of Q^T diag(+-) Q -- is also the margin
    minimiser.  No direction sampling is involved.

    A zero-dimensional plane is vacuously inside every cone (returns +inf).
    """
    basis = _as_basis(plane)
    if basis.shape[0] != model.ambient_dim:
        raise ModelError(f"plane lives in dimension {basis.shape[0]}, expected {model.ambient_dim}")
    if basis.shape[1] == 0:
        return float("inf")
    bad = model.bad_slice(which)
    weights = np.full(model.ambient_dim, model.gamma ** 2)
    weights[bad] = -1.0
    form = basis.T @ (weights[:, None] * basis)
    eigvals, eigvecs = np.linalg.eigh(form)
    w = basis @ eigvecs[:, 0]
    w = w / np.linalg.norm(w)
    return cone_margin(model, w, which)


def grassmann_distance(plane_a, plane_b) -> float:
    """Operator-norm distance between the orthogonal projectors of two planes.

    For equal-dimensional planes this equals the sine of the largest
    principal angle and lies in [0, 1].
    """
    a = _as_basis(plane_a)
    b = _as_basis(plane_b)
    if a.shape[0] != b.shape[0]:
        raise ModelError("planes live in different ambient dimensions")
    pa = a @ a.T
    pb = b @ b.T
    diff = pa - pb
    if diff.size == 0:
        return 0.0
    return float(np.linalg.norm(diff, 2))


def angle_grid(count: int) -> np.ndarray:
    """count equally spaced angles covering the circle, endpoint excluded."""
    if count < 1:
        raise ModelError(f"angle grid needs at least 1 node, got {count}")
    return np.arange(count) * (TWO_PI / count)


def fiber_grid(radius: float, count: int) -> np.ndarray:
    """count equally spaced nodes on [-radius, radius], endpoints included."""
    if count < 2:
        raise ModelError(f"fiber grid needs at least 2 nodes, got {count}")
    return np.linspace(-radius, radius, count)


def box_grid(model: GeometricModel, base_count: int, fiber_count: int) -> np.ndarray:
    """Regular product grid on B, returned as an (N, m) array of points.

    Base axes get base_count nodes each (periodic, endpoint excluded); fiber
    axes get fiber_count nodes each (endpoints included).  Refining
    base_count -> 2*base_count and fiber_count -> 2*fiber_count - 1 yields a
    superset of the coarse grid, which keeps sampled minima monotone.
    """
    axes: list[np.ndarray] = []
    axes.extend(angle_grid(base_count) for _ in range(model.base_dim))
    axes.extend(fiber_grid(r, fiber_count) for r in model.radii_s)
    axes.extend(fiber_grid(r, fiber_count) for r in model.radii_u)
    if not axes:
        return np.zeros((1, 0))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)
