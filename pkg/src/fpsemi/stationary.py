"""Invariant densities of the forward operator, the time-averaged invariant
functional, and the escape (retained-mass) function of the absorbed process.

The absorbing truncation has no exact invariant density (mass leaks), so the
nullspace method closes the forward operator with zero-flux faces, solves
for its one-dimensional kernel with the mass normalisation built into the
linear system, and audits the truncation by the spectral gap of the
*absorbing* operator: if the smallest singular value is not cleanly
separated from the next one, the truncated problem does not distinguish a
retained mode from ordinary decay (a freely diffusing, null-recurrent model
is the canonical offender) and the solve refuses to hand back an artifact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import eigsh, splu

from .elliptic import (
    CENTRAL,
    FORWARD,
    assemble_forward_reflecting,
    assemble_generator,
)
from .model_core import BallDomain, DiffusionModel, GridFunction
from .semigroup import default_steps, evolve, evolve_forward, get_stepper

NULLSPACE = "nullspace"
TIME_AVERAGE = "time-average"

GAP_RATIO_FLOOR = 10.0


class StationaryAmbiguityError(RuntimeError):
    """The truncated operator has no cleanly separated retained mode."""

    def __init__(self, message: str, sigma_small: float, sigma_next: float):
        super().__init__(message)
        self.sigma_small = sigma_small
        self.sigma_next = sigma_next


class StationaryConvergenceError(RuntimeError):
    """Long-time average failed to settle within the horizon."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass
class StationaryDensity:
    density: GridFunction
    method: str
    residual: float  # sup norm of the absorbing forward operator on theta
    gap_ratio: float
    min_interior: float

    def variance(self) -> np.ndarray:
        dom = self.density.domain
        w = self.density.values * dom.cell_volume
        mean = w @ dom.coords
        centered = dom.coords - mean
        return (w[:, None] * centered**2).sum(axis=0)


def smallest_singular_values(op_matrix: sparse.spmatrix) -> tuple[float, float]:
    """Two smallest singular values, via the normal matrix with a safe
    negative shift (the normal matrix is PSD, so the shift cannot hit an
    eigenvalue)."""
    A = (op_matrix.T @ op_matrix).tocsc()
    scale = float(np.abs(op_matrix).sum(axis=1).max())
    shift = -1e-10 * scale * scale
    n = A.shape[0]
    v0 = np.full(n, 1.0 / math.sqrt(n))
    vals = eigsh(A, k=2, sigma=shift, which="LM", v0=v0,
                 return_eigenvectors=False)
    vals = np.sqrt(np.clip(np.sort(np.abs(vals)), 0.0, None))
    return float(vals[0]), float(vals[1])


def stationary_density(
    model: DiffusionModel,
    domain: BallDomain,
    method: str = NULLSPACE,
    scheme: str = CENTRAL,
    tol: float = 1e-7,
    horizon: float = 200.0,
    checkpoint_path=None,
    resume: bool = False,
) -> StationaryDensity:
    """Compute the normalised invariant density on the truncated domain.

    ``nullspace`` solves the zero-flux closure of the forward operator for
    its kernel direction (after the spectral-gap audit of the absorbing
    operator); ``time-average`` relaxes a broad initial density under the
    absorbing forward evolution until the L1 change per unit time drops
    below ``tol``.
    """
    model.require_pde_dim()
    absorbing = assemble_generator(model, domain, FORWARD, scheme)
    s1, s2 = smallest_singular_values(absorbing.matrix)
    ratio = s2 / max(s1, 1e-300)
    if ratio < GAP_RATIO_FLOOR:
        raise StationaryAmbiguityError(
            "no separated stationary mode on the truncation: smallest "
            f"singular values {s1:.3e} and {s2:.3e} (ratio {ratio:.2f} < "
            f"{GAP_RATIO_FLOOR:g}); the dynamics has no normalizable "
            "invariant density at this truncation",
            sigma_small=s1,
            sigma_next=s2,
        )

    if method == NULLSPACE:
        theta_int = _nullspace_density(model, domain, scheme)
    elif method == TIME_AVERAGE:
        theta_int = _time_average_density(
            model, domain, scheme, tol, horizon, checkpoint_path, resume
        )
    else:
        raise ValueError(f"unknown method {method!r}")

    vol = domain.cell_volume
    theta_int = theta_int / (theta_int.sum() * vol)
    min_interior = float(theta_int.min())
    if min_interior <= 0.0:
        raise StationaryAmbiguityError(
            f"computed density is not strictly positive (min {min_interior:.3e})",
            sigma_small=s1, sigma_next=s2,
        )
    residual = float(np.max(np.abs(absorbing.matrix @ theta_int)))
    full = np.zeros(domain.node_count)
    full[domain.interior_indices] = theta_int
    return StationaryDensity(
        density=GridFunction(domain, full, "density"),
        method=method,
        residual=residual,
        gap_ratio=float(ratio),
        min_interior=min_interior,
    )


def _nullspace_density(model, domain, scheme) -> np.ndarray:
    refl = assemble_forward_reflecting(model, domain, scheme)
    n = refl.size
    k = domain.interior_lookup[domain.origin_index()]
    B = refl.matrix.tolil()
    B[k, :] = domain.cell_volume  # replace one redundant row by the mass law
    rhs = np.zeros(n)
    rhs[k] = 1.0
    theta = splu(B.tocsc()).solve(rhs)
    # audit: the dropped row must be consistent with the kernel equation
    res = refl.matrix @ theta
    res[k] = 0.0
    if np.max(np.abs(res)) > 1e-8 * max(1.0, float(np.abs(theta).max())):
        raise StationaryAmbiguityError(
            f"kernel equation residual {np.max(np.abs(res)):.3e} too large",
            sigma_small=0.0, sigma_next=0.0,
        )
    return theta


def _time_average_density(model, domain, scheme, tol, horizon,
                          checkpoint_path, resume) -> np.ndarray:
    vol = domain.cell_volume
    n = domain.interior_count
    segment = 1.0
    steps = default_steps(segment, domain.spacing)
    t_done = 0.0
    u = np.full(n, 1.0 / (n * vol))
    if resume and checkpoint_path is not None:
        with open(checkpoint_path, "r", encoding="utf-8") as fh:
            state = json.load(fh)
        t_done = float(state["t"])
        u = np.asarray(state["values"], dtype=float)
    trace: list[float] = []
    st = get_stepper(model, domain, segment / steps, scheme)
    while t_done < horizon:
        new = u.copy()
        for _ in range(steps):
            new = st.step_forward(new)
        mass = new.sum() * vol
        if mass <= 0:
            raise StationaryConvergenceError("density mass vanished", trace)
        new = new / mass
        change = float(np.abs(new - u).sum() * vol / segment)
        trace.append(change)
        u = new
        t_done += segment
        if checkpoint_path is not None:
            with open(checkpoint_path, "w", encoding="utf-8") as fh:
                json.dump({"t": t_done, "values": u.tolist()}, fh)
        if change < tol:
            return u
    raise StationaryConvergenceError(
        f"L1 change per unit time still {trace[-1]:.3e} after horizon "
        f"{horizon:g}; the evolution is not settling on a density",
        trace,
    )


# ---------------------------------------------------------------------------
# invariant functional
# ---------------------------------------------------------------------------


@dataclass
class InvariantFunctional:
    """Time average of the evolution observed at one base point, stored as a
    weight vector so that evaluation is a dot product (hence exactly linear)."""

    base_index: int
    horizon: float
    steps: int
    weights: np.ndarray  # full-grid weights of the averaged row
    late_weights: np.ndarray  # same average stopped at 0.9 * horizon
    domain: BallDomain

    def __call__(self, f: GridFunction) -> float:
        return float(self.weights @ f.values)

    def drift(self, f: GridFunction) -> float:
        """Change of the running average over the last tenth of the horizon."""
        return abs(float((self.weights - self.late_weights) @ f.values))


def invariant_functional(
    model: DiffusionModel,
    domain: BallDomain,
    x0: int | None = None,
    horizon: float = 50.0,
    steps: int | None = None,
    scheme: str = CENTRAL,
) -> InvariantFunctional:
    """Trapezoidal time average of the evolution row at the base point.

    The averaged row is accumulated with the adjoint factors, so one pass
    yields the functional for every observable at once.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if x0 is None:
        x0 = domain.origin_index()
    r = domain.interior_lookup[x0]
    if r < 0:
        raise IndexError("base point is absorbing")
    steps = max(100, default_steps(horizon, domain.spacing)) if steps is None \
        else int(steps)
    dt = horizon / steps
    st = get_stepper(model, domain, dt, scheme)
    v = np.zeros(domain.interior_count)
    v[r] = 1.0
    acc = 0.5 * v.copy()  # trapezoid: half weight at s = 0
    late_acc = None
    late_steps = int(round(0.9 * steps))
    for k in range(1, steps + 1):
        v = st.step_forward(v)
        acc += v if k < steps else 0.5 * v
        if k == late_steps:
            # close the trapezoid at 0.9 T: drop half of the newest node
            late_acc = (acc - 0.5 * v) / late_steps
    weights_int = acc / steps
    weights = np.zeros(domain.node_count)
    weights[domain.interior_indices] = weights_int
    late_full = np.zeros(domain.node_count)
    if late_acc is not None:
        late_full[domain.interior_indices] = late_acc
    return InvariantFunctional(
        base_index=x0,
        horizon=horizon,
        steps=steps,
        weights=weights,
        late_weights=late_full,
        domain=domain,
    )


# ---------------------------------------------------------------------------
# escape function and invariance
# ---------------------------------------------------------------------------


@dataclass
class EscapeFunction:
    values: GridFunction
    stabilised_at: float
    last_change: float
    harmonic_residual: float
    trace: list[float] = field(default_factory=list)


def escape_function(
    model: DiffusionModel,
    domain: BallDomain,
    t_grid: list[float],
    tol: float = 1e-9,
    steps_per_segment: int | None = None,
    scheme: str = CENTRAL,
) -> EscapeFunction:
    """Long-time limit of the retained mass e(t, x), with the fixed-point
    audit kernel(t) e = e at matched step granularity."""
    if any(b <= a for a, b in zip(t_grid, t_grid[1:])) or t_grid[0] <= 0:
        raise ValueError("t_grid must be positive and strictly increasing")
    u = np.ones(domain.interior_count)
    prev_t = 0.0
    prev_u = u.copy()
    trace: list[float] = []
    seg_dt = None
    for t in t_grid:
        seg = t - prev_t
        seg_steps = (
            default_steps(seg, domain.spacing)
            if steps_per_segment is None
            else steps_per_segment
        )
        seg_dt = seg / seg_steps
        st = get_stepper(model, domain, seg_dt, scheme)
        for _ in range(seg_steps):
            u = st.step_backward(u)
        change = float(np.max(np.abs(u - prev_u)))
        trace.append(change)
        prev_u = u.copy()
        prev_t = t
    if trace[-1] >= tol:
        raise StationaryConvergenceError(
            f"escape function not stabilised: last change {trace[-1]:.3e} "
            f">= tol {tol:g}; extend t_grid",
            trace,
        )
    # harmonicity at matched granularity: one more segment must fix e
    st = get_stepper(model, domain, seg_dt, scheme)
    v = u.copy()
    extra_steps = max(1, int(round((t_grid[-1] - t_grid[-2]) / seg_dt))) \
        if len(t_grid) > 1 else 1
    for _ in range(extra_steps):
        v = st.step_backward(v)
    harmonic = float(np.max(np.abs(v - u)))
    full = np.zeros(domain.node_count)
    full[domain.interior_indices] = u
    return EscapeFunction(
        values=GridFunction(domain, full),
        stabilised_at=t_grid[-1],
        last_change=trace[-1],
        harmonic_residual=harmonic,
        trace=trace,
    )


def check_invariance(
    model: DiffusionModel,
    theta: StationaryDensity | GridFunction,
    t: float,
    steps: int | None = None,
    scheme: str = CENTRAL,
) -> float:
    """L1 distance between the forward-evolved density and itself."""
    g = theta.density if isinstance(theta, StationaryDensity) else theta
    if t == 0.0:
        return 0.0
    ev = evolve_forward(model, g.domain, t, g, steps, scheme)
    diff = np.abs(ev.result.values - g.values)[g.domain.interior_indices]
    return float(diff.sum() * g.domain.cell_volume)


def sub_invariance_margin(
    model: DiffusionModel,
    theta: StationaryDensity,
    t: float,
    steps: int | None = None,
    scheme: str = CENTRAL,
) -> float:
    """Cellwise margin theta - forward(t) theta under the absorbing kernel;
    nonnegative (to roundoff) because the absorbing evolution only removes
    mass from an invariant profile."""
    g = theta.density
    ev = evolve_forward(model, g.domain, t, g, steps, scheme)
    margin = g.values - ev.result.values
    return float(margin[g.domain.interior_indices].min())


def export_density_csv(theta: StationaryDensity, path, header: str = "") -> None:
    dom = theta.density.domain
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(header)
        cols = ",".join(f"x{d}" for d in range(dom.dim))
        fh.write(f"{cols},density\n")
        for xy, v in zip(dom.coords, theta.density.values):
            fh.write(",".join(f"{c:.17g}" for c in xy) + f",{v:.17g}\n")
