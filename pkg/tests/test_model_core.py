import numpy as np
import pytest

from fpsemi.model_core import (
    BallDomain,
    ConstantDiffusion,
    DiffusionModel,
    DoubleWellDrift,
    DriftField,
    GridFunction,
    LinearDrift,
    ModelValidationError,
    Poly,
    PolynomialDrift,
    RotationalLinearDrift,
    build_grid_function,
    cutoff_eval,
    cutoff_profile_value,
    grid_delta,
    model_from_config,
    scalar_diffusion,
    validate_model,
)


def ou_model(dim=1):
    return DiffusionModel(
        dim=dim,
        drift=LinearDrift(np.eye(dim)),
        diffusion=scalar_diffusion(dim, 1.0),
        mu0=float(dim),
        ellipticity_r=1.0,
    )


# ---------------------------------------------------------------------------
# domains and grid functions
# ---------------------------------------------------------------------------


def test_domain_odd_node_count_and_origin():
    dom = BallDomain(dim=1, index=6, scale=1.0, spacing=0.05)
    assert dom.nodes_per_axis == 241
    assert dom.nodes_per_axis % 2 == 1
    assert dom.axis[dom.radius_steps] == 0.0


def test_domain_rejects_misaligned_spacing():
    with pytest.raises(ValueError):
        BallDomain(dim=1, index=1, scale=1.0, spacing=0.3)


def test_subdomain_nodes_are_bitwise_nested():
    big = BallDomain(dim=2, index=4, scale=1.0, spacing=0.25)
    small = big.subdomain(2)
    sl = big.embedding_slices(small)
    sub_axis = big.axis[sl[0]]
    assert np.array_equal(sub_axis, small.axis)


def test_interior_mask_excludes_ball_boundary():
    dom = BallDomain(dim=2, index=1, scale=1.0, spacing=0.5)
    # corner nodes are outside the unit ball, axis endpoints on it
    interior = dom.coords[dom.interior_mask]
    assert np.all(np.linalg.norm(interior, axis=1) < 1.0)
    assert not dom.interior_mask[0]  # corner (-1, -1)


def test_build_grid_function_zero():
    dom = BallDomain(dim=1, index=2, scale=1.0, spacing=0.1)
    f = build_grid_function(lambda x: np.zeros(x.shape[0]), dom)
    assert np.all(f.values == 0.0)


def test_build_grid_function_gaussian_peak():
    dom = BallDomain(dim=1, index=6, scale=1.0, spacing=0.05)
    f = build_grid_function(lambda x: np.exp(-(x[:, 0] ** 2)), dom)
    assert f.values.size == 241
    assert f.values.max() == 1.0
    assert np.argmax(f.values) == dom.origin_index()


def test_build_grid_function_antisymmetric_product():
    dom = BallDomain(dim=2, index=2, scale=1.0, spacing=0.25)
    f = build_grid_function(lambda x: x[:, 0] * x[:, 1], dom)
    arr = f.reshape()
    assert np.allclose(arr, -arr[::-1, :])
    assert abs(f.values.sum()) < 1e-12


def test_build_grid_function_rejects_non_finite():
    dom = BallDomain(dim=1, index=1, scale=1.0, spacing=0.5)
    with np.errstate(divide="ignore"):
        with pytest.raises(ValueError, match="non-finite"):
            build_grid_function(lambda x: 1.0 / x[:, 0], dom)


def test_grid_delta_has_unit_mass():
    dom = BallDomain(dim=1, index=2, scale=1.0, spacing=0.1)
    d = grid_delta(dom)
    assert d.mass() == pytest.approx(1.0)
    assert d.values[dom.origin_index()] > 0


def test_restrict_and_embed_roundtrip():
    big = BallDomain(dim=1, index=3, scale=1.0, spacing=0.1)
    small = big.subdomain(2)
    f = build_grid_function(lambda x: np.cos(x[:, 0]), big)
    back = f.restrict(small).embed(big)
    inner = np.abs(big.coords[:, 0]) <= small.radius + 1e-12
    assert np.array_equal(back.values[inner], f.values[inner])
    assert np.all(back.values[~inner] == 0.0)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def test_validate_identity_ou_passes():
    dom = BallDomain(dim=1, index=4, scale=1.0, spacing=0.1)
    report = validate_model(ou_model(), dom, samples=100, seed=3)
    assert report.passed
    assert report.min_rayleigh == pytest.approx(1.0, abs=1e-12)
    assert report.min_divergence_fd == pytest.approx(1.0, rel=1e-6)


def test_validate_negative_square_drift_fails_divergence():
    # b(x) = -x^2 has div -2x, unbounded below on [-2, 2] against mu0 = 0
    drift = PolynomialDrift([Poly(1, {(2,): -1.0})])
    model = DiffusionModel(
        dim=1, drift=drift, diffusion=scalar_diffusion(1, 1.0),
        mu0=0.0, ellipticity_r=1.0,
    )
    dom = BallDomain(dim=1, index=2, scale=1.0, spacing=0.1)
    report = validate_model(model, dom, samples=200, seed=1)
    assert not report.divergence_pass
    assert not report.passed
    assert report.min_divergence_fd < -3.0


def test_validate_rotational_2d_passes_with_divergence_two():
    model = DiffusionModel(
        dim=2,
        drift=RotationalLinearDrift(alpha=1.0, omega=1.0),
        diffusion=scalar_diffusion(2, 1.0),
        mu0=2.0,
        ellipticity_r=1.0,
    )
    dom = BallDomain(dim=2, index=3, scale=1.0, spacing=0.25)
    report = validate_model(model, dom, samples=150, seed=7)
    assert report.passed
    assert report.min_divergence_fd == pytest.approx(2.0, abs=1e-5)
    assert report.min_divergence_analytic == pytest.approx(2.0, abs=1e-12)


def test_validate_rejects_asymmetric_diffusion():
    with pytest.raises(ModelValidationError, match="symmetric"):
        ConstantDiffusion([[1.0, 0.3], [0.0, 1.0]])


class _NaNDrift(DriftField):
    kind = "broken"
    dim = 1

    def __call__(self, x):
        out = np.atleast_2d(x).copy()
        out[0] = np.nan
        return out

    def divergence(self, x):
        return np.ones(np.atleast_2d(x).shape[0])


def test_validate_rejects_non_finite_drift():
    model = DiffusionModel(
        dim=1, drift=_NaNDrift(), diffusion=scalar_diffusion(1, 1.0),
        mu0=0.0, ellipticity_r=1.0,
    )
    dom = BallDomain(dim=1, index=1, scale=1.0, spacing=0.5)
    with pytest.raises(ModelValidationError, match="non-finite drift"):
        validate_model(model, dom, samples=10)


def test_validate_deterministic_given_seed():
    dom = BallDomain(dim=2, index=2, scale=1.0, spacing=0.25)
    model = DiffusionModel(
        dim=2, drift=LinearDrift(np.eye(2)), diffusion=scalar_diffusion(2, 2.0),
        mu0=2.0, ellipticity_r=2.0,
    )
    r1 = validate_model(model, dom, samples=64, seed=11)
    r2 = validate_model(model, dom, samples=64, seed=11)
    assert r1.to_record() == r2.to_record()


# ---------------------------------------------------------------------------
# cutoffs
# ---------------------------------------------------------------------------


def _cutoff_oracle(index: int, radius: float) -> float:
    # Independent fixed-order Gauss-Legendre quadrature of the bump profile.
    lo, hi = (index - 0.5) ** 2, float(index**2)

    def f(t):
        t = np.asarray(t)
        out = np.zeros_like(t)
        inside = (t > lo) & (t < hi)
        out[inside] = np.exp(1.0 / ((t[inside] - hi) * (t[inside] - lo)))
        return out

    def gl(a, b, n=400):
        x, w = np.polynomial.legendre.leggauss(n)
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        return half * np.sum(w * f(mid + half * x))

    s = radius * radius
    return gl(s, hi) / gl(lo, hi)


def test_cutoff_plateau_and_zero_regions_exact():
    dom = BallDomain(dim=1, index=3, scale=1.0, spacing=0.1)
    g = cutoff_eval(3, dom)
    radii = np.abs(dom.coords[:, 0])
    assert np.all(g.values[radii <= 2.4] == 1.0)
    assert np.all(g.values[radii >= 3.1 - 1e-12] == 0.0)


def test_cutoff_transition_value_matches_quadrature_oracle():
    val = cutoff_profile_value(3, 1.0, 2.75)
    assert 0.0 < val < 1.0
    assert val == pytest.approx(_cutoff_oracle(3, 2.75), abs=1e-8)


def test_cutoff_monotone_in_index():
    dom = BallDomain(dim=1, index=6, scale=1.0, spacing=0.1)
    prev = cutoff_eval(1, dom)
    for k in range(2, 7):
        cur = cutoff_eval(k, dom)
        assert np.all(cur.values >= prev.values - 1e-12)
        prev = cur


def test_cutoff_refinement_keeps_plateau_bitwise():
    coarse = BallDomain(dim=1, index=3, scale=1.0, spacing=0.1)
    fine = BallDomain(dim=1, index=3, scale=1.0, spacing=0.05)
    gc = cutoff_eval(3, coarse)
    gf = cutoff_eval(3, fine)
    shared = gf.values[::2]  # fine grid contains the coarse nodes
    radii = np.abs(coarse.coords[:, 0])
    flat = (radii <= 2.5) | (radii >= 3.0)
    assert np.array_equal(shared[flat], gc.values[flat])


def test_cutoff_requires_domain_to_contain_ball():
    dom = BallDomain(dim=1, index=2, scale=1.0, spacing=0.1)
    with pytest.raises(ValueError, match="too small"):
        cutoff_eval(3, dom)


# ---------------------------------------------------------------------------
# config round trip
# ---------------------------------------------------------------------------


def test_model_from_config_roundtrip():
    config = {
        "dim": 1,
        "drift": {"kind": "linear", "params": {"matrix": [[1.0]]}},
        "diffusion": {"kind": "scalar", "params": {"value": 1.0}},
        "domain": {"radius_scale": 1.0, "max_index": 6, "spacing": 0.05},
        "mu0": 1.0,
    }
    model, domain = model_from_config(config)
    assert model.dim == 1
    assert domain.radius == pytest.approx(6.0)
    b = model.drift(np.array([[2.0]]))
    assert b[0, 0] == pytest.approx(2.0)
    assert model.sde_drift(np.array([[2.0]]))[0, 0] == pytest.approx(-2.0)


def test_model_from_config_missing_key():
    with pytest.raises(KeyError, match="diffusion"):
        model_from_config({"dim": 1, "drift": {}, "domain": {}, "mu0": 0.0})


def test_double_well_divergence():
    drift = DoubleWellDrift(dim=2)
    x = np.array([[0.5, -1.0]])
    assert drift.divergence(x)[0] == pytest.approx(
        (3 * 0.25 - 1) + (3 * 1.0 - 1)
    )


def test_poly_partial_derivatives():
    # V = x^4/4 + x^2/2 -> V' = x^3 + x
    p = Poly(1, {(4,): 0.25, (2,): 0.5})
    dp = p.partial(0)
    x = np.array([[1.5]])
    assert dp(x)[0] == pytest.approx(1.5**3 + 1.5)


def test_pde_dim_cap_enforced():
    model = DiffusionModel(
        dim=4,
        drift=LinearDrift(np.eye(4)),
        diffusion=scalar_diffusion(4, 1.0),
        mu0=4.0,
        ellipticity_r=1.0,
    )
    with pytest.raises(ValueError, match="dim <= 3"):
        model.require_pde_dim()
