"""Thermodynamic functionals of a density under the forward dynamics, and
the three-way reversibility test.

Conventions (fixed by the generator sign convention used repo-wide, where
trajectories follow dx = -b dt + Gamma dW):

* probability flux      J = -(1/2) A grad P - b P
* detailed-balance residual field
                        gamma = grad log P + 2 A^{-1} b
  (zero exactly when P is a reversible stationary density)
* entropy production    epr = (1/2) int gamma^T A gamma P dx
                            = 2 int J^T A^{-1} J / P dx  >= 0
* heat exchange rate    hdr = int 2 (A^{-1} b) . J dx
  the force-flux pairing with force 2 A^{-1} b.  With these signs the
  entropy ledger closes as  de/dt = epr + hdr,  and a stationary density
  satisfies epr + hdr = 0: production balanced by dissipation.  The
  Monte-Carlo heat-rate estimator (mc module) accumulates work along the
  simulated drift -b and therefore estimates -hdr = epr at stationarity.
* free energy           h[P] = u[P] - e[P],  u[P] = int U P dx,
  with U the line-integral potential of 2 A^{-1} b when that field is
  curl-free; then dh/dt = -epr <= 0 along the evolution.

Reversibility of the stationary process is equivalent to (i) symmetry of
the stationary two-point mass theta(x) p~(t, x, dy), (ii) symmetry of the
forward operator weighted by 1/theta, and (iii) epr = 0 at theta.  The
classifier runs all three and treats any disagreement as a discretisation
defect, not as data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .elliptic import CENTRAL, FORWARD, assemble_generator
from .model_core import BallDomain, DiffusionModel, GridFunction
from .semigroup import default_steps, evolve_forward, get_stepper

DENSITY_FLOOR_REL = 1e-12


class ConsistencyError(RuntimeError):
    """The three reversibility criteria disagreed."""

    def __init__(self, message: str, verdict: "ReversibilityVerdict"):
        super().__init__(message)
        self.verdict = verdict


# ---------------------------------------------------------------------------
# differential helpers
# ---------------------------------------------------------------------------


def grid_gradient(domain: BallDomain, values: np.ndarray) -> np.ndarray:
    """Central-difference gradient (one-sided at box edges), shape (N, dim)."""
    arr = np.asarray(values).reshape(domain.shape)
    if domain.dim == 1:
        grads = [np.gradient(arr, domain.spacing)]
    else:
        grads = np.gradient(arr, domain.spacing)
    return np.stack([g.ravel() for g in grads], axis=1)


def _a_inverse_times(model: DiffusionModel, vectors: np.ndarray) -> np.ndarray:
    return vectors @ model.diffusion.inverse.T


# ---------------------------------------------------------------------------
# flux, entropy, rates
# ---------------------------------------------------------------------------


@dataclass
class FluxField:
    components: np.ndarray  # (N, dim)
    source: GridFunction

    def component(self, d: int) -> GridFunction:
        return GridFunction(self.source.domain, self.components[:, d])

    def sup_norm(self) -> float:
        return float(np.max(np.linalg.norm(self.components, axis=1)))


def probability_flux(model: DiffusionModel, P: GridFunction) -> FluxField:
    """J = -(1/2) A grad P - b P, evaluated nodewise."""
    dom = P.domain
    grad = grid_gradient(dom, P.values)
    avals = model.diffusion(dom.coords)
    bvals = model.drift(dom.coords)
    J = -0.5 * np.einsum("nij,nj->ni", avals, grad) - bvals * P.values[:, None]
    return FluxField(components=J, source=P)


def entropy(P: GridFunction) -> float:
    """Differential entropy -int P log P with the 0 log 0 = 0 convention."""
    vals = P.values
    pos = vals > 0.0
    return float(-(vals[pos] * np.log(vals[pos])).sum() * P.domain.cell_volume)


@dataclass
class EprResult:
    value: float
    excluded_mass: float
    excluded_mass_warning: bool

    def __float__(self):
        return self.value


def _db_residual_field(model: DiffusionModel, P: GridFunction,
                       floor: float) -> tuple[np.ndarray, np.ndarray]:
    """gamma = grad log P + 2 A^{-1} b on cells with P >= floor."""
    dom = P.domain
    mask = P.values >= floor
    safe = np.where(P.values > 0.0, P.values, 1.0)
    grad_log = grid_gradient(dom, np.log(safe))
    gamma = grad_log + 2.0 * _a_inverse_times(model, model.drift(dom.coords))
    return gamma, mask


def entropy_production_rate(
    model: DiffusionModel, P: GridFunction, detail: bool = False
):
    """epr of P: the A-weighted square of the detailed-balance residual,
    P-weighted, over cells above the density floor."""
    dom = P.domain
    floor = DENSITY_FLOOR_REL * float(P.values.max(initial=0.0))
    gamma, mask = _db_residual_field(model, P, floor)
    avals = model.diffusion(dom.coords)
    quad = np.einsum("ni,nij,nj->n", gamma, avals, gamma)
    vol = dom.cell_volume
    value = float(0.5 * (quad[mask] * P.values[mask]).sum() * vol)
    total = float(P.values.sum() * vol)
    excluded = float(P.values[~mask].sum() * vol)
    res = EprResult(
        value=value,
        excluded_mass=excluded,
        excluded_mass_warning=bool(total > 0 and excluded > 0.01 * total),
    )
    return res if detail else res.value


def heat_dissipation_rate(model: DiffusionModel, P: GridFunction) -> float:
    """Force-flux pairing int 2 (A^{-1} b) . J dx by midpoint quadrature."""
    dom = P.domain
    J = probability_flux(model, P)
    force = 2.0 * _a_inverse_times(model, model.drift(dom.coords))
    return float(np.einsum("ni,ni->n", force, J.components).sum()
                 * dom.cell_volume)


def entropy_balance_check(
    model: DiffusionModel,
    P: GridFunction,
    dt: float,
    steps: int | None = None,
    scheme: str = CENTRAL,
) -> float:
    """|finite-difference entropy rate - (epr + hdr)| at P; O(dt) accurate."""
    dom = P.domain
    e0 = entropy(P)
    ev = evolve_forward(model, dom, dt, P, steps, scheme)
    e1 = entropy(ev.result)
    rate_fd = (e1 - e0) / dt
    rate_thermo = entropy_production_rate(model, P) + \
        heat_dissipation_rate(model, P)
    return float(abs(rate_fd - rate_thermo))


# ---------------------------------------------------------------------------
# free energy
# ---------------------------------------------------------------------------


@dataclass
class FreeEnergyResult:
    value: float | None
    internal_energy: float | None
    entropy: float
    curl_residual: float
    conservative: bool
    potential: GridFunction | None


def drift_curl_residual(model: DiffusionModel, domain: BallDomain) -> float:
    """Largest antisymmetric part of the Jacobian of A^{-1} b over the grid;
    zero iff the force field is curl-free (always in 1D)."""
    if model.dim == 1:
        return 0.0
    jac = model.drift.jacobian(domain.coords)  # (N, dim, dim)
    ainv = model.diffusion.inverse
    jac = np.einsum("ij,njk->nik", ainv, jac)
    anti = jac - np.transpose(jac, (0, 2, 1))
    return float(np.max(np.abs(anti)))


def line_integral_potential(
    model: DiffusionModel, domain: BallDomain, order: int = 48
) -> GridFunction:
    """U(x) = int_0^1 2 (A^{-1} b)(s x) . x ds for curl-free force fields."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    s = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    coords = domain.coords
    U = np.zeros(domain.node_count)
    for sq, wq in zip(s, w):
        F = 2.0 * _a_inverse_times(model, model.drift(sq * coords))
        U += wq * np.einsum("ni,ni->n", F, coords)
    return GridFunction(domain, U)


def free_energy(
    model: DiffusionModel,
    P: GridFunction,
    curl_tol: float = 1e-8,
) -> FreeEnergyResult:
    """h[P] = u[P] - e[P] for conservative drift; absent otherwise.

    Along the forward evolution dh/dt = -epr <= 0, with equality at the
    stationary density.
    """
    dom = P.domain
    e = entropy(P)
    curl = drift_curl_residual(model, dom)
    bscale = float(np.max(np.abs(model.drift(dom.coords)))) + 1.0
    if curl > curl_tol * bscale:
        return FreeEnergyResult(value=None, internal_energy=None, entropy=e,
                                curl_residual=curl, conservative=False,
                                potential=None)
    U = line_integral_potential(model, dom)
    u = float((U.values * P.values).sum() * dom.cell_volume)
    return FreeEnergyResult(value=u - e, internal_energy=u, entropy=e,
                            curl_residual=curl, conservative=True,
                            potential=U)


# ---------------------------------------------------------------------------
# Helmholtz-style decomposition anchored at the stationary density
# ---------------------------------------------------------------------------


@dataclass
class HelmholtzDecomposition:
    potential: GridFunction  # phi = -log theta (on the supported region)
    circulation: np.ndarray  # gamma = grad log theta + 2 A^{-1} b, (N, dim)
    mask: np.ndarray  # nodes where theta is above the floor
    circulation_sup: float  # sup |gamma| over the supported region
    circulation_weighted: float  # sqrt(int |gamma|^2 theta)


def helmholtz_decompose(
    model: DiffusionModel, theta: GridFunction
) -> HelmholtzDecomposition:
    """Split the force 2 A^{-1} b into -grad(phi) + gamma with phi = -log
    theta; gamma is the detailed-balance residual and vanishes exactly for
    reversible dynamics.  Scaling theta by a constant leaves gamma unchanged."""
    dom = theta.domain
    floor = DENSITY_FLOOR_REL * float(theta.values.max(initial=0.0))
    gamma, mask = _db_residual_field(model, theta, floor)
    safe = np.where(theta.values > 0.0, theta.values, 1.0)
    phi = GridFunction(dom, np.where(mask, -np.log(safe), 0.0))
    norms = np.linalg.norm(gamma, axis=1)
    sup = float(norms[mask].max(initial=0.0))
    weighted = float(
        math.sqrt(((norms[mask] ** 2) * theta.values[mask]).sum()
                  * dom.cell_volume)
    )
    return HelmholtzDecomposition(
        potential=phi, circulation=gamma, mask=mask,
        circulation_sup=sup, circulation_weighted=weighted,
    )


# ---------------------------------------------------------------------------
# probes and the three reversibility checks
# ---------------------------------------------------------------------------


def probe_pairs(
    domain: BallDomain, count: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic interior-supported bump pairs for symmetry checks.

    Each probe vanishes identically outside half the domain radius, so the
    boundary closure of the operators never enters the pairing.
    """
    rng = np.random.Generator(np.random.Philox(key=[seed, 97]))
    R = domain.radius
    pairs = []
    for _ in range(count):
        fg = []
        for _ in range(2):
            center = rng.uniform(-0.3 * R, 0.3 * R, size=domain.dim)
            width = rng.uniform(0.08 * R, 0.18 * R)
            d2 = np.sum((domain.coords - center) ** 2, axis=1)
            vals = np.exp(-d2 / (2.0 * width**2))
            vals[domain.node_radii > 0.5 * R] = 0.0
            fg.append(vals)
        pairs.append((fg[0], fg[1]))
    return pairs


def check_weighted_symmetry(
    model: DiffusionModel,
    domain: BallDomain,
    w: GridFunction,
    pairs: list[tuple[np.ndarray, np.ndarray]] | int = 8,
    scheme: str = CENTRAL,
    seed: int = 0,
) -> float:
    """Relative symmetry defect of the forward operator under the 1/w weight:
    max over probe pairs of |<f, Q g>_{1/w} - <g, Q f>_{1/w}| divided by the
    typical pairing magnitude."""
    if np.any(w.values[domain.interior_indices] <= 0.0):
        raise ValueError("weight must be strictly positive on the interior")
    if isinstance(pairs, int):
        pairs = probe_pairs(domain, pairs, seed)
    op = assemble_generator(model, domain, FORWARD, scheme)
    ii = domain.interior_indices
    vol = domain.cell_volume
    winv = 1.0 / w.values[ii]
    worst = 0.0
    scale = 0.0
    for f_full, g_full in pairs:
        f = f_full[ii]
        g = g_full[ii]
        qg = op.matrix @ g
        qf = op.matrix @ f
        lhs = vol * float(np.dot(f * winv, qg))
        rhs = vol * float(np.dot(g * winv, qf))
        worst = max(worst, abs(lhs - rhs))
        scale = max(scale, abs(lhs), abs(rhs))
    return worst / max(scale, 1e-300)


def _box_mass_indicator(domain: BallDomain, center: np.ndarray,
                        halfwidth: float) -> np.ndarray:
    inside = np.all(np.abs(domain.coords - center) <= halfwidth + 1e-12,
                    axis=1)
    return inside.astype(float)


def sample_boxes(domain: BallDomain, count: int, seed: int,
                 halfwidth: float | None = None) -> list[tuple[np.ndarray, float]]:
    rng = np.random.Generator(np.random.Philox(key=[seed, 131]))
    R = domain.radius
    hw = 0.1 * R if halfwidth is None else halfwidth
    out = []
    for _ in range(count):
        center = rng.uniform(-0.5 * R, 0.5 * R, size=domain.dim)
        out.append((center, hw))
    return out


def check_kernel_reversibility(
    model: DiffusionModel,
    domain: BallDomain,
    theta: GridFunction,
    t: float,
    set_pairs: list | int = 10,
    steps: int | None = None,
    scheme: str = CENTRAL,
    seed: int = 0,
) -> float:
    """Relative asymmetry of the stationary two-point mass over box pairs:
    S(A, B) = int_A theta(x) p~(t, x, B) dx versus S(B, A).

    The kernel masses are computed by propagating box indicators with the
    adjoint factors, so no full kernel is assembled.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if isinstance(set_pairs, int):
        boxes = sample_boxes(domain, 2 * set_pairs, seed)
        set_pairs = [(boxes[2 * i], boxes[2 * i + 1]) for i in range(set_pairs)]
    steps = default_steps(t, domain.spacing) if steps is None else int(steps)
    st = get_stepper(model, domain, t / steps, scheme)
    ii = domain.interior_indices
    vol = domain.cell_volume
    th = theta.values[ii]

    def joint_mass(box_from, box_to):
        # stationary two-time mass: start theta restricted to the source box,
        # push it forward, read off the mass inside the target box
        u = th * _box_mass_indicator(domain, *box_from)[ii]
        for _ in range(steps):
            u = st.step_forward(u)
        return vol * float(np.dot(u, _box_mass_indicator(domain, *box_to)[ii]))

    worst = 0.0
    scale = 0.0
    for box_a, box_b in set_pairs:
        s_ab = joint_mass(box_a, box_b)
        s_ba = joint_mass(box_b, box_a)
        worst = max(worst, abs(s_ab - s_ba))
        scale = max(scale, abs(s_ab), abs(s_ba))
    return worst / max(scale, 1e-300)


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


@dataclass
class ReversibilityTolerances:
    kernel: float = 1e-3
    symmetry: float = 1e-6  # relative to the probe pairing scale
    epr: float = 1e-4


@dataclass
class ReversibilityVerdict:
    kernel_residual: float
    symmetry_residual: float
    epr_value: float
    tolerances: ReversibilityTolerances
    kernel_pass: bool
    symmetry_pass: bool
    epr_pass: bool
    t: float

    @property
    def consistent(self) -> bool:
        return self.kernel_pass == self.symmetry_pass == self.epr_pass

    @property
    def reversible(self) -> bool:
        return self.kernel_pass and self.symmetry_pass and self.epr_pass

    def to_record(self) -> dict:
        return {
            "t": self.t,
            "kernel_residual": self.kernel_residual,
            "symmetry_residual": self.symmetry_residual,
            "epr_value": self.epr_value,
            "kernel_tolerance": self.tolerances.kernel,
            "symmetry_tolerance": self.tolerances.symmetry,
            "epr_tolerance": self.tolerances.epr,
            "kernel_pass": self.kernel_pass,
            "symmetry_pass": self.symmetry_pass,
            "epr_pass": self.epr_pass,
            "consistent": self.consistent,
            "reversible": self.reversible,
        }

    def to_text(self) -> str:
        rows = [
            ("two-point kernel symmetry", self.kernel_residual,
             self.tolerances.kernel, self.kernel_pass),
            ("weighted operator symmetry", self.symmetry_residual,
             self.tolerances.symmetry, self.symmetry_pass),
            ("entropy production at theta", self.epr_value,
             self.tolerances.epr, self.epr_pass),
        ]
        lines = [f"reversibility checks at t = {self.t:g}"]
        for name, value, tol, ok in rows:
            lines.append(
                f"  {name:28s} {value:12.4e}  tol {tol:8.1e}  "
                f"{'pass' if ok else 'fail'}"
            )
        lines.append(
            f"verdict: {'reversible' if self.reversible else 'irreversible'}"
            f"{'' if self.consistent else '  (INCONSISTENT)'}"
        )
        return "\n".join(lines)


def classify_reversibility(
    model: DiffusionModel,
    domain: BallDomain,
    t: float = 0.5,
    tolerances: ReversibilityTolerances | None = None,
    theta: GridFunction | None = None,
    scheme: str = CENTRAL,
    seed: int = 0,
    probes: int = 8,
    boxes: int = 10,
) -> ReversibilityVerdict:
    """Run the three equivalent reversibility criteria and require agreement.

    Disagreement among the three booleans indicates a discretisation defect
    and raises ConsistencyError with all residuals attached.
    """
    tolerances = tolerances or ReversibilityTolerances()
    if theta is None:
        from .stationary import stationary_density

        theta = stationary_density(model, domain, scheme=scheme).density
    kernel_res = check_kernel_reversibility(
        model, domain, theta, t, boxes, scheme=scheme, seed=seed
    )
    sym_res = check_weighted_symmetry(
        model, domain, theta, probes, scheme=scheme, seed=seed
    )
    epr_val = entropy_production_rate(model, theta)
    verdict = ReversibilityVerdict(
        kernel_residual=kernel_res,
        symmetry_residual=sym_res,
        epr_value=epr_val,
        tolerances=tolerances,
        kernel_pass=kernel_res <= tolerances.kernel,
        symmetry_pass=sym_res <= tolerances.symmetry,
        epr_pass=epr_val <= tolerances.epr,
        t=t,
    )
    if not verdict.consistent:
        raise ConsistencyError(
            "reversibility criteria disagree, which signals a discretisation "
            f"bug rather than a property of the model:\n{verdict.to_text()}",
            verdict,
        )
    return verdict


# ---------------------------------------------------------------------------
# aggregate report
# ---------------------------------------------------------------------------


@dataclass
class ThermoReport:
    entropy: float
    epr: float
    epr_excluded_mass: float
    hdr: float
    balance_residual: float | None
    free_energy: float | None
    internal_energy: float | None
    curl_residual: float
    circulation_sup: float
    circulation_weighted: float

    def to_record(self) -> dict:
        return {
            "entropy": self.entropy,
            "epr": self.epr,
            "epr_excluded_mass": self.epr_excluded_mass,
            "hdr": self.hdr,
            "balance_residual": self.balance_residual,
            "free_energy": self.free_energy,
            "internal_energy": self.internal_energy,
            "curl_residual": self.curl_residual,
            "circulation_sup": self.circulation_sup,
            "circulation_weighted": self.circulation_weighted,
        }

    def to_text(self) -> str:
        fe = "absent (non-conservative drift)" if self.free_energy is None \
            else f"{self.free_energy:.6g}"
        lines = [
            f"entropy                  {self.entropy:.6g}",
            f"entropy production rate  {self.epr:.6g}"
            f"  (excluded mass {self.epr_excluded_mass:.2e})",
            f"heat exchange rate       {self.hdr:.6g}",
            f"free energy              {fe}",
            f"drift curl residual      {self.curl_residual:.3e}",
            f"circulation sup norm     {self.circulation_sup:.3e}",
            f"circulation L2(theta)    {self.circulation_weighted:.3e}",
        ]
        if self.balance_residual is not None:
            lines.insert(3, f"entropy balance residual {self.balance_residual:.3e}")
        return "\n".join(lines)


def thermo_report(
    model: DiffusionModel,
    P: GridFunction,
    balance_dt: float | None = None,
    scheme: str = CENTRAL,
) -> ThermoReport:
    """One-stop thermodynamic summary of a density."""
    epr_res = entropy_production_rate(model, P, detail=True)
    hdr = heat_dissipation_rate(model, P)
    fe = free_energy(model, P)
    dec = helmholtz_decompose(model, P)
    balance = None
    if balance_dt is not None:
        balance = entropy_balance_check(model, P, balance_dt, scheme=scheme)
    return ThermoReport(
        entropy=fe.entropy,
        epr=epr_res.value,
        epr_excluded_mass=epr_res.excluded_mass,
        hdr=hdr,
        balance_residual=balance,
        free_energy=fe.value,
        internal_energy=fe.internal_energy,
        curl_residual=fe.curl_residual,
        circulation_sup=dec.circulation_sup,
        circulation_weighted=dec.circulation_weighted,
    )
