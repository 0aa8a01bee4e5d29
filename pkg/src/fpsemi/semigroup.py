"""Semigroup evolution on the truncated domain, transition kernels, and the
semigroup laws (composition, duality, sub-Markov mass).

The workhorse is the implicit-Euler resolvent power
    T(t) f  ~  [(m/t) R(m/t)]^m f,
one sparse solve per step with a cached factorisation.  Each factor is
positive and a sup-norm contraction (inherited from the M-matrix property
of the assembly), so positivity, contraction and monotone mass loss hold
exactly at the discrete level, not just asymptotically.  The Yosida
exponential e^{-lam t} e^{t lam^2 R(lam)} is available as a verification
mode.  The forward (density) evolution applies the transposed factors,
which makes the duality pairing an exact matrix identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .elliptic import BACKWARD, FORWARD, UPWIND, OperatorMatrix, assemble_generator
from .model_core import BallDomain, DiffusionModel, GridFunction

IMPLICIT_EULER = "implicit-euler-power"
YOSIDA = "yosida-exponential"

KERNEL_ROW_CAP = 10_000


class EvolutionError(RuntimeError):
    pass


class KernelSizeError(MemoryError):
    pass


def default_steps(t: float, spacing: float) -> int:
    """First-order time error balanced against O(h^2) space error."""
    return max(16, math.ceil(t / spacing))


@dataclass
class SemigroupEvolution:
    t: float
    steps: int
    method: str
    result: GridFunction
    lam: float | None = None
    mass_trace: list[float] = field(default_factory=list)


class _Stepper:
    """Cached LU factorisation of (I - dt L); solves both orientations."""

    def __init__(self, op: OperatorMatrix, dt: float):
        if op.orientation != BACKWARD:
            raise ValueError("stepper is built from the backward operator")
        self.op = op
        self.dt = dt
        A = (sparse.identity(op.size, format="csr") - dt * op.matrix).tocsc()
        self._lu = splu(A)

    def step_backward(self, u: np.ndarray) -> np.ndarray:
        return self._lu.solve(u)

    def step_forward(self, u: np.ndarray) -> np.ndarray:
        return self._lu.solve(u, trans="T")


_STEPPER_CACHE: dict[tuple, _Stepper] = {}


def get_stepper(
    model: DiffusionModel, domain: BallDomain, dt: float, scheme: str
) -> _Stepper:
    key = (json.dumps(model.to_config(), sort_keys=True), domain.dim,
           domain.index, domain.scale, domain.spacing, round(dt, 15), scheme)
    st = _STEPPER_CACHE.get(key)
    if st is None:
        op = assemble_generator(model, domain, BACKWARD, scheme)
        st = _Stepper(op, dt)
        if len(_STEPPER_CACHE) > 64:
            _STEPPER_CACHE.clear()
        _STEPPER_CACHE[key] = st
    return st


def evolve(
    model: DiffusionModel,
    domain: BallDomain,
    t: float,
    f: GridFunction,
    steps: int | None = None,
    method: str = IMPLICIT_EULER,
    scheme: str = UPWIND,
    lam: float | None = None,
) -> SemigroupEvolution:
    """Apply the backward semigroup to an observable on the truncated ball."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0.0:
        return SemigroupEvolution(t=0.0, steps=0, method=method, result=f.copy())
    steps = default_steps(t, domain.spacing) if steps is None else int(steps)
    if steps < 1:
        raise ValueError("steps must be >= 1")

    if method == IMPLICIT_EULER:
        st = get_stepper(model, domain, t / steps, scheme)
        u = f.values[domain.interior_indices].copy()
        for _ in range(steps):
            u = st.step_backward(u)
        out = np.zeros(domain.node_count)
        out[domain.interior_indices] = u
        return SemigroupEvolution(t=t, steps=steps, method=method,
                                  result=GridFunction(domain, out, f.kind))
    if method == YOSIDA:
        return _evolve_yosida(model, domain, t, f, steps, scheme, lam)
    raise ValueError(f"unknown method {method!r}")


def _evolve_yosida(model, domain, t, f, steps, scheme, lam) -> SemigroupEvolution:
    """Scaled Taylor summation of e^{-lam t} e^{t lam^2 R(lam)} f."""
    if lam is None:
        lam = max(4.0 * steps / t, 8.0 / t)
    op = assemble_generator(model, domain, BACKWARD, scheme)
    A = (sparse.identity(op.size, format="csr") * lam - op.matrix).tocsc()
    lu = splu(A)
    # iterate w_k = (lam R(lam))^k f, which stays bounded by ||f||, with the
    # scalar weights e^{-lam t} (lam t)^k / k!; both factors are stable.
    v = f.values[domain.interior_indices].copy()
    coeff = math.exp(-lam * t)
    if coeff == 0.0:
        raise EvolutionError(
            "Yosida prefactor underflows; use fewer steps / smaller lambda"
        )
    total = coeff * v
    z = t * lam
    max_terms = int(4 * z + 200)
    converged = False
    for k in range(1, max_terms + 1):
        v = lam * lu.solve(v)
        coeff *= z / k
        term = coeff * v
        total = total + term
        # ||lam R|| <= 1, so the remaining tail is geometric once k > lam t
        tail_ratio = z / (k + 1)
        if tail_ratio < 1.0:
            bound = np.max(np.abs(term)) * tail_ratio / (1.0 - tail_ratio)
            if bound < 1e-13 * max(1.0, np.max(np.abs(total))):
                converged = True
                break
    if not converged:
        raise EvolutionError(
            f"Yosida Taylor summation did not converge in {max_terms} terms; "
            "increase steps"
        )
    out = np.zeros(domain.node_count)
    out[domain.interior_indices] = total
    return SemigroupEvolution(t=t, steps=steps, method=YOSIDA,
                              result=GridFunction(domain, out, f.kind), lam=lam)


def evolve_forward(
    model: DiffusionModel,
    domain: BallDomain,
    t: float,
    g: GridFunction,
    steps: int | None = None,
    scheme: str = UPWIND,
) -> SemigroupEvolution:
    """Apply the forward (density) semigroup; total mass is non-increasing."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if np.any(g.values < -1e-12 * max(1.0, float(np.max(np.abs(g.values))))):
        raise ValueError("forward evolution expects a nonnegative density")
    if t == 0.0:
        return SemigroupEvolution(t=0.0, steps=0, method=IMPLICIT_EULER,
                                  result=g.copy())
    steps = default_steps(t, domain.spacing) if steps is None else int(steps)
    st = get_stepper(model, domain, t / steps, scheme)
    vol = domain.cell_volume
    u = g.values[domain.interior_indices].copy()
    masses = [float(u.sum() * vol)]
    floor = -1e-10 * max(1.0, float(u.max(initial=0.0)))
    for _ in range(steps):
        u = st.step_forward(u)
        if float(u.min(initial=0.0)) < floor:
            raise EvolutionError(
                f"negative density cell {u.min():.3e} under forward stepping; "
                "the scheme lost positivity"
            )
        masses.append(float(u.sum() * vol))
    for before, after in zip(masses, masses[1:]):
        if after > before + 1e-10 * max(1.0, before):
            raise EvolutionError("forward step increased total mass")
    out = np.zeros(domain.node_count)
    out[domain.interior_indices] = u
    return SemigroupEvolution(t=t, steps=steps, method=IMPLICIT_EULER,
                              result=GridFunction(domain, out, "density"),
                              mass_trace=masses)


# ---------------------------------------------------------------------------
# transition kernels
# ---------------------------------------------------------------------------


@dataclass
class TransitionKernel:
    """Dense sub-probability kernel over the interior nodes.

    ``matrix[i, j]`` approximates the mass moved from node i into the cell
    of node j over time t (backward orientation); the forward kernel is the
    transpose.  Rows are indexed like ``domain.interior_indices``.
    """

    t: float
    matrix: np.ndarray
    domain: BallDomain
    steps: int
    orientation: str
    cell_volume: float

    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    def row_for_node(self, flat_index: int) -> np.ndarray:
        r = self.domain.interior_lookup[flat_index]
        if r < 0:
            raise IndexError("node is absorbing")
        return self.matrix[r]


def transition_kernel(
    model: DiffusionModel,
    domain: BallDomain,
    t: float,
    steps: int | None = None,
    orientation: str = BACKWARD,
    scheme: str = UPWIND,
    row_cap: int = KERNEL_ROW_CAP,
) -> TransitionKernel:
    """Assemble the full kernel by propagating the identity columns."""
    if t <= 0:
        raise ValueError("t must be positive")
    n = domain.interior_count
    if n > row_cap:
        raise KernelSizeError(
            f"kernel needs {n} rows, above the cap {row_cap}; use a coarser "
            "grid or kernel_row for single rows"
        )
    steps = default_steps(t, domain.spacing) if steps is None else int(steps)
    st = get_stepper(model, domain, t / steps, scheme)
    K = np.eye(n)
    for _ in range(steps):
        K = st.step_backward(K)
    if orientation == FORWARD:
        K = np.ascontiguousarray(K.T)
    return TransitionKernel(t=t, matrix=K, domain=domain, steps=steps,
                            orientation=orientation,
                            cell_volume=domain.cell_volume)


def kernel_row(
    model: DiffusionModel,
    domain: BallDomain,
    t: float,
    flat_index: int | None = None,
    steps: int | None = None,
    scheme: str = UPWIND,
) -> np.ndarray:
    """Single kernel row p(t, x, .) without assembling the full matrix.

    The row of the backward kernel is obtained by propagating a point mass
    with the transposed factors.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if flat_index is None:
        flat_index = domain.origin_index()
    r = domain.interior_lookup[flat_index]
    if r < 0:
        raise IndexError("node is absorbing")
    steps = default_steps(t, domain.spacing) if steps is None else int(steps)
    st = get_stepper(model, domain, t / steps, scheme)
    u = np.zeros(domain.interior_count)
    u[r] = 1.0
    for _ in range(steps):
        u = st.step_forward(u)
    return u


def export_kernel(kernel: TransitionKernel, csv_path, meta_path,
                  threshold: float = 0.0, header: str = "") -> None:
    """Sparse triplet CSV (row_x, col_y, value) plus a metadata sidecar."""
    K = kernel.matrix
    with open(csv_path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(header)
        fh.write("row_x,col_y,value\n")
        rows, cols = np.nonzero(np.abs(K) > threshold)
        for r, c in zip(rows, cols):
            fh.write(f"{r},{c},{K[r, c]:.17g}\n")
    meta = {
        "t": kernel.t,
        "spacing": kernel.domain.spacing,
        "radius": kernel.domain.radius,
        "steps": kernel.steps,
        "orientation": kernel.orientation,
        "interior_nodes": int(K.shape[0]),
    }
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# semigroup laws
# ---------------------------------------------------------------------------


def check_chapman_kolmogorov(
    model: DiffusionModel,
    domain: BallDomain,
    t: float,
    s: float,
    f: GridFunction,
    steps_t: int,
    steps_s: int,
    steps_combined: int | None = None,
    scheme: str = UPWIND,
) -> float:
    """Sup norm of T(t+s) f - T(t) T(s) f over the interior."""
    if steps_combined is None:
        steps_combined = steps_t + steps_s
    both = evolve(model, domain, t + s, f, steps_combined, scheme=scheme)
    inner = evolve(model, domain, s, f, steps_s, scheme=scheme)
    outer = evolve(model, domain, t, inner.result, steps_t, scheme=scheme)
    diff = both.result.values - outer.result.values
    return float(np.max(np.abs(diff[domain.interior_indices])))


def check_duality(
    model: DiffusionModel,
    domain: BallDomain,
    t: float,
    f: GridFunction,
    g: GridFunction,
    steps: int | None = None,
    scheme: str = UPWIND,
) -> float:
    """|<T(t) f, g> - <f, forward(t) g>| with volume-weighted sums."""
    vol = domain.cell_volume
    Tf = evolve(model, domain, t, f, steps, scheme=scheme).result
    Tg = evolve_forward(model, domain, t, g, steps, scheme=scheme).result
    lhs = vol * float(np.dot(Tf.values, g.values))
    rhs = vol * float(np.dot(f.values, Tg.values))
    return abs(lhs - rhs)


def mass_function(
    model: DiffusionModel,
    domain: BallDomain,
    t_list: list[float],
    flat_index: int | None = None,
    steps_per_segment: int | None = None,
    scheme: str = UPWIND,
) -> list[float]:
    """Retained-mass values e(t, x) = integral of the kernel from x at the
    requested times; non-increasing by the sub-Markov property."""
    if any(b <= a for a, b in zip(t_list, t_list[1:])):
        raise ValueError("t_list must be strictly increasing")
    if flat_index is None:
        flat_index = domain.origin_index()
    values = []
    u = np.ones(domain.interior_count)
    prev_t = 0.0
    r = domain.interior_lookup[flat_index]
    if r < 0:
        raise IndexError("node is absorbing")
    for t in t_list:
        if t == 0.0:
            values.append(1.0)
            continue
        dt_seg = t - prev_t
        seg_steps = (
            default_steps(dt_seg, domain.spacing)
            if steps_per_segment is None
            else steps_per_segment
        )
        st = get_stepper(model, domain, dt_seg / seg_steps, scheme)
        for _ in range(seg_steps):
            u = st.step_backward(u)
        prev_t = t
        values.append(float(u[r]))
    return values
