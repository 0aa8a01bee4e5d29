"""Problem definition layer: drift/diffusion fields, ball domains, tensor
grids, smooth cutoffs, and validation of the structural assumptions that
every downstream solver relies on (ellipticity, bounded-below divergence)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable

import numpy as np
from scipy.integrate import quad


class ModelValidationError(ValueError):
    """A field is structurally unusable (non-finite or asymmetric A)."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature failed to reach the requested tolerance."""

    def __init__(self, message: str, achieved: float):
        super().__init__(message)
        self.achieved = achieved


# ---------------------------------------------------------------------------
# polynomial helper (coefficient tables keyed by exponent tuples)
# ---------------------------------------------------------------------------


class Poly:
    """Multivariate polynomial as {exponent tuple: coefficient}."""

    def __init__(self, dim: int, terms: dict[tuple[int, ...], float]):
        self.dim = dim
        self.terms = {tuple(int(e) for e in k): float(v) for k, v in terms.items()}
        for k in self.terms:
            if len(k) != dim or any(e < 0 for e in k):
                raise ValueError(f"bad exponent tuple {k} for dim {dim}")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.zeros(x.shape[0])
        for exps, c in self.terms.items():
            term = np.full(x.shape[0], c)
            for d, e in enumerate(exps):
                if e:
                    term = term * x[:, d] ** e
            out += term
        return out

    def partial(self, d: int) -> "Poly":
        terms: dict[tuple[int, ...], float] = {}
        for exps, c in self.terms.items():
            if exps[d] == 0:
                continue
            new = list(exps)
            new[d] -= 1
            key = tuple(new)
            terms[key] = terms.get(key, 0.0) + c * exps[d]
        return Poly(self.dim, terms)

    def to_config(self) -> dict:
        return {" ".join(str(e) for e in k): v for k, v in self.terms.items()}

    @classmethod
    def from_config(cls, dim: int, table: dict) -> "Poly":
        terms = {tuple(int(t) for t in k.split()): float(v) for k, v in table.items()}
        return cls(dim, terms)


# ---------------------------------------------------------------------------
# drift fields
# ---------------------------------------------------------------------------


class DriftField:
    """Drift coefficient of the generator.

    Convention: the backward generator acts as
    ``(1/2) sum_ij a_ij d2/dx_i dx_j  -  b . grad`` and the simulated
    trajectories follow ``dx = -b(x) dt + Gamma dW``.  All builtins expose
    closed-form divergence and Jacobian so validation never depends on
    differencing error.
    """

    kind: str = "generic"

    def __call__(self, x: np.ndarray) -> np.ndarray:  # (N, dim) -> (N, dim)
        raise NotImplementedError

    def divergence(self, x: np.ndarray) -> np.ndarray:  # (N, dim) -> (N,)
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:  # (N, dim) -> (N, dim, dim)
        raise NotImplementedError

    def params(self) -> dict:
        raise NotImplementedError


class LinearDrift(DriftField):
    """b(x) = M x + c."""

    kind = "linear"

    def __init__(self, matrix, offset=None):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.dim = self.matrix.shape[0]
        if self.matrix.shape != (self.dim, self.dim):
            raise ValueError("drift matrix must be square")
        self.offset = (
            np.zeros(self.dim) if offset is None else np.asarray(offset, dtype=float)
        )

    def __call__(self, x):
        return np.atleast_2d(x) @ self.matrix.T + self.offset

    def divergence(self, x):
        return np.full(np.atleast_2d(x).shape[0], float(np.trace(self.matrix)))

    def jacobian(self, x):
        n = np.atleast_2d(x).shape[0]
        return np.broadcast_to(self.matrix, (n, self.dim, self.dim)).copy()

    def params(self):
        return {"matrix": self.matrix.tolist(), "offset": self.offset.tolist()}


class RotationalLinearDrift(LinearDrift):
    """Planar drift b(x) = alpha x + omega J x with J the 90-degree rotation."""

    kind = "rotational_linear"

    def __init__(self, alpha: float = 1.0, omega: float = 1.0):
        self.alpha = float(alpha)
        self.omega = float(omega)
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        super().__init__(self.alpha * np.eye(2) + self.omega * rot)

    def params(self):
        return {"alpha": self.alpha, "omega": self.omega}


class DoubleWellDrift(DriftField):
    """Separable bistable drift b_d(x) = cubic x_d^3 - linear x_d."""

    kind = "double_well"

    def __init__(self, dim: int = 1, cubic: float = 1.0, linear: float = 1.0):
        self.dim = int(dim)
        self.cubic = float(cubic)
        self.linear = float(linear)

    def __call__(self, x):
        x = np.atleast_2d(x)
        return self.cubic * x**3 - self.linear * x

    def divergence(self, x):
        x = np.atleast_2d(x)
        return np.sum(3.0 * self.cubic * x**2 - self.linear, axis=1)

    def jacobian(self, x):
        x = np.atleast_2d(x)
        n = x.shape[0]
        jac = np.zeros((n, self.dim, self.dim))
        diag = 3.0 * self.cubic * x**2 - self.linear
        for d in range(self.dim):
            jac[:, d, d] = diag[:, d]
        return jac

    def params(self):
        return {"dim": self.dim, "cubic": self.cubic, "linear": self.linear}


class GradPolyDrift(DriftField):
    """Gradient drift b = grad V for a polynomial potential V."""

    kind = "grad_poly"

    def __init__(self, potential: Poly):
        self.potential = potential
        self.dim = potential.dim
        self._grad = [potential.partial(d) for d in range(self.dim)]
        self._hess = [
            [self._grad[i].partial(j) for j in range(self.dim)]
            for i in range(self.dim)
        ]

    def __call__(self, x):
        x = np.atleast_2d(x)
        return np.stack([g(x) for g in self._grad], axis=1)

    def divergence(self, x):
        x = np.atleast_2d(x)
        return sum(self._hess[d][d](x) for d in range(self.dim))

    def jacobian(self, x):
        x = np.atleast_2d(x)
        n = x.shape[0]
        jac = np.empty((n, self.dim, self.dim))
        for i in range(self.dim):
            for j in range(self.dim):
                jac[:, i, j] = self._hess[i][j](x)
        return jac

    def params(self):
        return {"potential": self.potential.to_config()}


class PolynomialDrift(DriftField):
    """Componentwise polynomial drift from coefficient tables."""

    kind = "polynomial"

    def __init__(self, components: list[Poly]):
        self.components = components
        self.dim = len(components)
        if any(p.dim != self.dim for p in components):
            raise ValueError("component dimension mismatch")
        self._jac = [
            [components[i].partial(j) for j in range(self.dim)]
            for i in range(self.dim)
        ]

    def __call__(self, x):
        x = np.atleast_2d(x)
        return np.stack([p(x) for p in self.components], axis=1)

    def divergence(self, x):
        x = np.atleast_2d(x)
        return sum(self._jac[d][d](x) for d in range(self.dim))

    def jacobian(self, x):
        x = np.atleast_2d(x)
        n = x.shape[0]
        jac = np.empty((n, self.dim, self.dim))
        for i in range(self.dim):
            for j in range(self.dim):
                jac[:, i, j] = self._jac[i][j](x)
        return jac

    def params(self):
        return {"components": [p.to_config() for p in self.components]}


# ---------------------------------------------------------------------------
# diffusion fields
# ---------------------------------------------------------------------------


class ConstantDiffusion:
    """Constant symmetric diffusion matrix A = Gamma Gamma^T."""

    kind = "constant"
    is_constant = True

    def __init__(self, matrix):
        mat = np.atleast_2d(np.asarray(matrix, dtype=float))
        if not np.allclose(mat, mat.T, atol=1e-14):
            raise ModelValidationError("diffusion matrix must be symmetric")
        self.matrix = 0.5 * (mat + mat.T)
        self.dim = mat.shape[0]

    def __call__(self, x):
        n = np.atleast_2d(x).shape[0]
        return np.broadcast_to(self.matrix, (n, self.dim, self.dim))

    @cached_property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)

    @cached_property
    def sqrt_matrix(self) -> np.ndarray:
        """Symmetric square root, the noise amplitude Gamma."""
        w, v = np.linalg.eigh(self.matrix)
        if np.any(w <= 0):
            raise ModelValidationError("diffusion matrix must be positive definite")
        return (v * np.sqrt(w)) @ v.T

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())

    def params(self):
        return {"matrix": self.matrix.tolist()}


def scalar_diffusion(dim: int, value: float) -> ConstantDiffusion:
    diff = ConstantDiffusion(np.eye(dim) * float(value))
    diff.kind = "scalar"
    diff._scalar = float(value)
    return diff


def diagonal_diffusion(values) -> ConstantDiffusion:
    diff = ConstantDiffusion(np.diag(np.asarray(values, dtype=float)))
    diff.kind = "diagonal"
    return diff


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

PDE_DIM_CAP = 3


@dataclass(frozen=True)
class DiffusionModel:
    """A drift-diffusion problem: dimension, drift b, diffusion A, and the
    declared structural constants (mu0 bounds div b from below, ellipticity_r
    bounds the smallest eigenvalue of A)."""

    dim: int
    drift: DriftField
    diffusion: ConstantDiffusion
    mu0: float
    ellipticity_r: float

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if getattr(self.drift, "dim", self.dim) != self.dim:
            raise ValueError("drift dimension mismatch")
        if self.diffusion.dim != self.dim:
            raise ValueError("diffusion dimension mismatch")

    def require_pde_dim(self):
        if self.dim > PDE_DIM_CAP:
            raise ValueError(
                f"grid-based operations support dim <= {PDE_DIM_CAP}, got {self.dim}"
            )

    def sde_drift(self, x: np.ndarray) -> np.ndarray:
        """Drift of the simulated trajectories, -b(x)."""
        return -self.drift(x)

    def to_config(self) -> dict:
        return {
            "dim": self.dim,
            "drift": {"kind": self.drift.kind, "params": self.drift.params()},
            "diffusion": {
                "kind": self.diffusion.kind,
                "params": self.diffusion.params(),
            },
            "mu0": self.mu0,
            "ellipticity_r": self.ellipticity_r,
        }


_DRIFT_KINDS: dict[str, Callable[..., DriftField]] = {
    "linear": lambda dim, params: LinearDrift(
        params["matrix"], params.get("offset")
    ),
    "rotational_linear": lambda dim, params: RotationalLinearDrift(
        params.get("alpha", 1.0), params.get("omega", 1.0)
    ),
    "double_well": lambda dim, params: DoubleWellDrift(
        dim, params.get("cubic", 1.0), params.get("linear", 1.0)
    ),
    "grad_poly": lambda dim, params: GradPolyDrift(
        Poly.from_config(dim, params["potential"])
    ),
    "polynomial": lambda dim, params: PolynomialDrift(
        [Poly.from_config(dim, tbl) for tbl in params["components"]]
    ),
}

_DIFFUSION_KINDS: dict[str, Callable[..., ConstantDiffusion]] = {
    "constant": lambda dim, params: ConstantDiffusion(params["matrix"]),
    "scalar": lambda dim, params: scalar_diffusion(dim, params["value"]),
    "diagonal": lambda dim, params: diagonal_diffusion(params["values"]),
}


def drift_from_config(dim: int, spec: dict) -> DriftField:
    kind = spec.get("kind")
    if kind not in _DRIFT_KINDS:
        raise ValueError(f"unknown drift kind {kind!r}")
    return _DRIFT_KINDS[kind](dim, spec.get("params", {}))


def diffusion_from_config(dim: int, spec: dict) -> ConstantDiffusion:
    kind = spec.get("kind")
    if kind not in _DIFFUSION_KINDS:
        raise ValueError(f"unknown diffusion kind {kind!r}")
    return _DIFFUSION_KINDS[kind](dim, spec.get("params", {}))


def model_from_config(config: dict) -> tuple["DiffusionModel", "BallDomain"]:
    """Build (model, largest domain) from a config mapping.

    Required keys: ``dim``, ``drift{kind, params}``, ``diffusion{kind,
    params}``, ``domain{radius_scale, max_index, spacing}``, ``mu0``.
    """
    for key in ("dim", "drift", "diffusion", "domain", "mu0"):
        if key not in config:
            raise KeyError(f"config missing required key {key!r}")
    dim = int(config["dim"])
    drift = drift_from_config(dim, config["drift"])
    diffusion = diffusion_from_config(dim, config["diffusion"])
    ell = float(config.get("ellipticity_r", diffusion.min_eigenvalue()))
    model = DiffusionModel(
        dim=dim,
        drift=drift,
        diffusion=diffusion,
        mu0=float(config["mu0"]),
        ellipticity_r=ell,
    )
    dom = config["domain"]
    for key in ("radius_scale", "max_index", "spacing"):
        if key not in dom:
            raise KeyError(f"config domain missing required key {key!r}")
    domain = BallDomain(
        dim=dim,
        index=int(dom["max_index"]),
        scale=float(dom["radius_scale"]),
        spacing=float(dom["spacing"]),
    )
    return model, domain


# ---------------------------------------------------------------------------
# domains and grid functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BallDomain:
    """Tensor grid over the box [-R, R]^dim with R = scale * index.

    Nodes sit at integer multiples of the spacing, so the origin is always a
    node and grids of different indices (same spacing) are nested node sets.
    Nodes at Euclidean distance >= R are the absorbing layer; the strict
    interior carries the degrees of freedom.
    """

    dim: int
    index: int
    scale: float = 1.0
    spacing: float = 0.1

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("index must be >= 1")
        if self.dim < 1 or self.dim > PDE_DIM_CAP:
            raise ValueError(f"domain dim must be in 1..{PDE_DIM_CAP}")
        m = self.radius_steps
        if abs(self.scale * self.index / self.spacing - m) > 1e-9:
            raise ValueError(
                "radius must be an integer multiple of the spacing "
                f"(radius {self.scale * self.index}, spacing {self.spacing})"
            )

    @property
    def radius_steps(self) -> int:
        return int(round(self.scale * self.index / self.spacing))

    @property
    def radius(self) -> float:
        return self.radius_steps * self.spacing

    @property
    def nodes_per_axis(self) -> int:
        return 2 * self.radius_steps + 1

    @cached_property
    def axis(self) -> np.ndarray:
        m = self.radius_steps
        return (np.arange(-m, m + 1)) * self.spacing

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nodes_per_axis,) * self.dim

    @property
    def node_count(self) -> int:
        return self.nodes_per_axis**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape (node_count, dim), C-order flattening."""
        grids = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @cached_property
    def node_radii(self) -> np.ndarray:
        return np.linalg.norm(self.coords, axis=1)

    @cached_property
    def interior_mask(self) -> np.ndarray:
        return self.node_radii < self.radius - 1e-12

    @cached_property
    def interior_indices(self) -> np.ndarray:
        return np.flatnonzero(self.interior_mask)

    @cached_property
    def interior_lookup(self) -> np.ndarray:
        """Full-grid index -> interior row index (-1 on the absorbing layer)."""
        lut = -np.ones(self.node_count, dtype=np.int64)
        lut[self.interior_indices] = np.arange(self.interior_indices.size)
        return lut

    @property
    def interior_count(self) -> int:
        return int(self.interior_indices.size)

    def subdomain(self, index: int) -> "BallDomain":
        if index > self.index:
            raise ValueError("subdomain index exceeds host index")
        return BallDomain(self.dim, index, self.scale, self.spacing)

    def embedding_slices(self, sub: "BallDomain") -> tuple[slice, ...]:
        """Per-axis slices locating ``sub``'s nodes inside this grid."""
        if abs(sub.spacing - self.spacing) > 1e-15 or sub.dim != self.dim:
            raise ValueError("subdomain grid incompatible with host")
        off = self.radius_steps - sub.radius_steps
        if off < 0:
            raise ValueError("subdomain larger than host")
        return tuple(
            slice(off, off + sub.nodes_per_axis) for _ in range(self.dim)
        )

    def window_slices(self, halfwidth: float) -> tuple[slice, ...]:
        """Per-axis slices for the centered box [-halfwidth, halfwidth]^dim."""
        k = int(round(halfwidth / self.spacing))
        if k > self.radius_steps:
            raise ValueError("window exceeds domain")
        m = self.radius_steps
        return tuple(slice(m - k, m + k + 1) for _ in range(self.dim))

    def origin_index(self) -> int:
        m = self.radius_steps
        flat = 0
        for _ in range(self.dim):
            flat = flat * self.nodes_per_axis + m
        return flat


@dataclass
class GridFunction:
    """Values on the nodes of a BallDomain.

    ``kind`` records the intended semantics: "function" values are compared
    in sup norm, "density" values are nonnegative and integrate against the
    cell volume.
    """

    domain: BallDomain
    values: np.ndarray
    kind: str = "function"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.values.size != self.domain.node_count:
            raise ValueError(
                f"value count {self.values.size} != node count "
                f"{self.domain.node_count}"
            )
        if self.kind not in ("function", "density"):
            raise ValueError(f"unknown kind {self.kind!r}")

    def reshape(self) -> np.ndarray:
        return self.values.reshape(self.domain.shape)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def mass(self) -> float:
        return float(self.values.sum() * self.domain.cell_volume)

    def interior_values(self) -> np.ndarray:
        return self.values[self.domain.interior_indices]

    def window_values(self, halfwidth: float) -> np.ndarray:
        return self.reshape()[self.domain.window_slices(halfwidth)].ravel()

    def restrict(self, sub: BallDomain) -> "GridFunction":
        sl = self.domain.embedding_slices(sub)
        return GridFunction(sub, self.reshape()[sl].copy(), self.kind)

    def embed(self, host: BallDomain) -> "GridFunction":
        """Zero-extend onto a larger grid with the same spacing."""
        out = np.zeros(host.shape)
        out[host.embedding_slices(self.domain)] = self.reshape()
        return GridFunction(host, out.ravel(), self.kind)

    def copy(self) -> "GridFunction":
        return GridFunction(self.domain, self.values.copy(), self.kind)


def build_grid_function(
    expr: Callable[[np.ndarray], np.ndarray],
    domain: BallDomain,
    kind: str = "function",
) -> GridFunction:
    """Evaluate a scalar field nodewise.  ``expr`` receives (N, dim) points."""
    vals = np.asarray(expr(domain.coords), dtype=float).ravel()
    if vals.size == 1:
        vals = np.full(domain.node_count, float(vals))
    bad = ~np.isfinite(vals)
    if bad.any():
        where = domain.coords[np.argmax(bad)]
        raise ValueError(f"non-finite field value at node {where.tolist()}")
    return GridFunction(domain, vals, kind)


def grid_delta(domain: BallDomain, node: int | None = None) -> GridFunction:
    """Discrete delta density: mass 1 concentrated in one cell."""
    idx = domain.origin_index() if node is None else int(node)
    vals = np.zeros(domain.node_count)
    vals[idx] = 1.0 / domain.cell_volume
    return GridFunction(domain, vals, kind="density")


# ---------------------------------------------------------------------------
# smooth cutoffs
# ---------------------------------------------------------------------------


@dataclass
class CutoffFunction:
    """Radial mollified plateau for one ball index: identically 1 up to
    radius (index - 1/2) * scale, identically 0 from radius index * scale,
    smooth and monotone in between (as a function of |x|^2)."""

    index: int
    domain: BallDomain
    values: np.ndarray

    def as_grid_function(self) -> GridFunction:
        return GridFunction(self.domain, self.values)


def _bump_profile(lo: float, hi: float) -> Callable[[float], float]:
    def profile(t: float) -> float:
        if t <= lo or t >= hi:
            return 0.0
        return math.exp(1.0 / ((t - hi) * (t - lo)))

    return profile


def cutoff_profile_value(
    index: int, scale: float, radius: float, rtol: float = 1e-10
) -> float:
    """Cutoff value at distance ``radius`` from the origin, by adaptive
    quadrature of the defining 1-D bump profile in the |x|^2 variable."""
    r_in = scale * (index - 0.5)
    r_out = scale * index
    s = radius * radius
    lo, hi = r_in * r_in, r_out * r_out
    if s <= lo:
        return 1.0
    if s >= hi:
        return 0.0
    profile = _bump_profile(lo, hi)
    denom, denom_err = quad(profile, lo, hi, epsabs=0.0, epsrel=rtol, limit=200)
    if denom <= 0 or denom_err > 10 * rtol * denom:
        raise QuadratureError(
            f"profile normalisation did not converge (abserr {denom_err:g})",
            achieved=denom_err / max(denom, 1e-300),
        )
    num, num_err = quad(profile, s, hi, epsabs=denom * rtol, epsrel=rtol, limit=200)
    if num_err > 10 * rtol * denom:
        raise QuadratureError(
            f"profile integral did not converge (abserr {num_err:g})",
            achieved=num_err / denom,
        )
    return min(1.0, max(0.0, num / denom))


def cutoff_eval(index: int, domain: BallDomain, rtol: float = 1e-10) -> CutoffFunction:
    """Evaluate the smooth radial cutoff for ``index`` on a host grid."""
    if index < 1:
        raise ValueError("cutoff index must be >= 1")
    if domain.radius < domain.scale * index - 1e-12:
        raise ValueError(
            f"domain radius {domain.radius} too small for cutoff index {index}"
        )
    radii = domain.node_radii
    values = np.zeros(domain.node_count)
    r_in = domain.scale * (index - 0.5)
    r_out = domain.scale * index
    values[radii <= r_in] = 1.0
    band = (radii > r_in) & (radii < r_out)
    cache: dict[float, float] = {}
    for i in np.flatnonzero(band):
        key = round(float(radii[i]), 12)
        if key not in cache:
            cache[key] = cutoff_profile_value(index, domain.scale, radii[i], rtol)
        values[i] = cache[key]
    return CutoffFunction(index=index, domain=domain, values=values)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    samples: int
    seed: int
    min_rayleigh: float
    declared_ellipticity: float
    ellipticity_pass: bool
    min_divergence_fd: float
    min_divergence_analytic: float
    declared_mu0: float
    divergence_pass: bool
    fields_finite: bool

    @property
    def passed(self) -> bool:
        return self.ellipticity_pass and self.divergence_pass and self.fields_finite

    def to_text(self) -> str:
        lines = [
            f"samples                 {self.samples} (seed {self.seed})",
            f"min Rayleigh quotient   {self.min_rayleigh:.6g}"
            f"  (declared r = {self.declared_ellipticity:.6g})"
            f"  -> {'pass' if self.ellipticity_pass else 'FAIL'}",
            f"min div b (finite diff) {self.min_divergence_fd:.6g}"
            f"  (declared mu0 = {self.declared_mu0:.6g})"
            f"  -> {'pass' if self.divergence_pass else 'FAIL'}",
            f"min div b (analytic)    {self.min_divergence_analytic:.6g}",
            f"fields finite           {'pass' if self.fields_finite else 'FAIL'}",
            f"overall                 {'pass' if self.passed else 'FAIL'}",
        ]
        return "\n".join(lines)

    def to_record(self) -> dict:
        return {
            "samples": self.samples,
            "seed": self.seed,
            "min_rayleigh": self.min_rayleigh,
            "declared_ellipticity": self.declared_ellipticity,
            "ellipticity_pass": self.ellipticity_pass,
            "min_divergence_fd": self.min_divergence_fd,
            "min_divergence_analytic": self.min_divergence_analytic,
            "declared_mu0": self.declared_mu0,
            "divergence_pass": self.divergence_pass,
            "fields_finite": self.fields_finite,
            "passed": self.passed,
        }


def _fd_divergence(drift: DriftField, pts: np.ndarray) -> np.ndarray:
    n, dim = pts.shape
    div = np.zeros(n)
    for d in range(dim):
        step = 1e-5 * (1.0 + np.abs(pts[:, d]))
        plus = pts.copy()
        minus = pts.copy()
        plus[:, d] += step
        minus[:, d] -= step
        div += (drift(plus)[:, d] - drift(minus)[:, d]) / (2.0 * step)
    return div


def validate_model(
    model: DiffusionModel,
    domain: BallDomain,
    samples: int = 200,
    seed: int = 0,
    tol: float = 1e-9,
) -> ValidationReport:
    """Check the structural assumptions on sampled points of the domain.

    Raises ModelValidationError for structurally broken fields (asymmetric
    diffusion, non-finite values); assumption violations (ellipticity below
    the declared r, divergence below the declared mu0) are reported as
    failures, not exceptions.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    pts = rng.uniform(-domain.radius, domain.radius, size=(samples, model.dim))
    pts[0] = 0.0  # always include the origin

    bvals = model.drift(pts)
    avals = model.diffusion(pts)
    if not np.all(np.isfinite(bvals)):
        where = pts[~np.all(np.isfinite(bvals), axis=1)][0]
        raise ModelValidationError(f"non-finite drift at {where.tolist()}")
    if not np.all(np.isfinite(avals)):
        where = pts[~np.all(np.isfinite(avals), axis=(1, 2))][0]
        raise ModelValidationError(f"non-finite diffusion at {where.tolist()}")
    asym = np.abs(avals - np.transpose(avals, (0, 2, 1))).max(axis=(1, 2))
    scale = np.abs(avals).max(axis=(1, 2)) + 1.0
    bad = asym > 1e-12 * scale
    if bad.any():
        where = pts[np.argmax(bad)]
        raise ModelValidationError(f"non-symmetric diffusion at {where.tolist()}")

    # Rayleigh quotients over random directions plus the coordinate axes.
    xi = rng.standard_normal((samples, model.dim))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    directions = np.vstack([xi, np.eye(model.dim)])
    quotients = []
    for v in directions:
        quotients.append(np.einsum("i,nij,j->n", v, avals, v))
    min_rayleigh = float(np.min(quotients))

    div_fd = _fd_divergence(model.drift, pts)
    div_an = model.drift.divergence(pts)
    report = ValidationReport(
        samples=samples,
        seed=seed,
        min_rayleigh=min_rayleigh,
        declared_ellipticity=model.ellipticity_r,
        ellipticity_pass=bool(min_rayleigh >= model.ellipticity_r - tol),
        min_divergence_fd=float(div_fd.min()),
        min_divergence_analytic=float(div_an.min()),
        declared_mu0=model.mu0,
        divergence_pass=bool(div_fd.min() >= model.mu0 - 1e-6),
        fields_finite=True,
    )
    return report
