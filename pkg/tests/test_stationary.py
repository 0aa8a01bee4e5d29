import numpy as np
import pytest

from fpsemi.model_core import (
    BallDomain,
    DiffusionModel,
    GridFunction,
    LinearDrift,
    RotationalLinearDrift,
    build_grid_function,
    scalar_diffusion,
)
from fpsemi.semigroup import evolve
from fpsemi.stationary import (
    StationaryAmbiguityError,
    check_invariance,
    escape_function,
    export_density_csv,
    invariant_functional,
    stationary_density,
    sub_invariance_margin,
)


def ou(dim=1):
    return DiffusionModel(
        dim=dim, drift=LinearDrift(np.eye(dim)),
        diffusion=scalar_diffusion(dim, 1.0), mu0=float(dim),
        ellipticity_r=1.0,
    )


def brownian(dim=1):
    return DiffusionModel(
        dim=dim, drift=LinearDrift(np.zeros((dim, dim))),
        diffusion=scalar_diffusion(dim, 1.0), mu0=0.0, ellipticity_r=1.0,
    )


OU_DOM = BallDomain(dim=1, index=6, scale=1.0, spacing=0.05)


@pytest.fixture(scope="module")
def ou_theta():
    return stationary_density(ou(), OU_DOM)


def test_ou_density_gaussian_variance(ou_theta):
    assert ou_theta.min_interior > 0.0
    var = ou_theta.variance()[0]
    assert abs(var - 0.5) / 0.5 < 0.01
    assert ou_theta.density.mass() == pytest.approx(1.0, abs=1e-10)
    assert ou_theta.gap_ratio >= 10.0


def test_ou_density_matches_closed_form_pointwise(ou_theta):
    x = OU_DOM.coords[:, 0]
    exact = np.exp(-(x**2)) / np.sqrt(np.pi)
    exact[~OU_DOM.interior_mask] = 0.0
    exact /= exact.sum() * OU_DOM.cell_volume
    l1 = np.abs(ou_theta.density.values - exact).sum() * OU_DOM.cell_volume
    assert l1 < 5e-3


def test_brownian_truncation_raises_ambiguity():
    with pytest.raises(StationaryAmbiguityError) as err:
        stationary_density(brownian(), OU_DOM)
    assert err.value.sigma_next / max(err.value.sigma_small, 1e-300) < 10.0


def test_rotational_2d_density_is_isotropic_gaussian():
    model = DiffusionModel(
        dim=2, drift=RotationalLinearDrift(1.0, 1.0),
        diffusion=scalar_diffusion(2, 1.0), mu0=2.0, ellipticity_r=1.0,
    )
    dom = BallDomain(dim=2, index=2, scale=1.6, spacing=0.1)
    theta = stationary_density(model, dom)
    r2 = np.sum(dom.coords**2, axis=1)
    exact = np.exp(-r2)
    exact[~dom.interior_mask] = 0.0
    exact /= exact.sum() * dom.cell_volume
    l1 = np.abs(theta.density.values - exact).sum() * dom.cell_volume
    assert l1 < 0.01
    assert theta.min_interior > 0.0


def test_time_average_agrees_with_nullspace(ou_theta):
    ta = stationary_density(ou(), OU_DOM, method="time-average", tol=1e-8,
                            horizon=60.0)
    l1 = np.abs(ta.density.values - ou_theta.density.values).sum() \
        * OU_DOM.cell_volume
    assert l1 < 0.02


def test_time_average_checkpoint_resume(tmp_path):
    from fpsemi.stationary import StationaryConvergenceError

    path = tmp_path / "ckpt.json"
    dom = BallDomain(dim=1, index=3, scale=1.0, spacing=0.1)
    full = stationary_density(ou(), dom, method="time-average", tol=1e-8,
                              horizon=60.0)
    # interrupt a second run early, then resume it from the checkpoint
    with pytest.raises(StationaryConvergenceError):
        stationary_density(ou(), dom, method="time-average", tol=1e-8,
                           horizon=5.0, checkpoint_path=path)
    resumed = stationary_density(ou(), dom, method="time-average", tol=1e-8,
                                 horizon=60.0, checkpoint_path=path,
                                 resume=True)
    assert np.array_equal(full.density.values, resumed.density.values)


def test_invariance_of_stationary_density(ou_theta):
    res = check_invariance(ou(), ou_theta, 1.0)
    assert res < 1e-3


def test_invariance_time_zero_exact(ou_theta):
    assert check_invariance(ou(), ou_theta, 0.0) == 0.0


def test_perturbed_density_is_visibly_less_invariant(ou_theta):
    x = OU_DOM.coords[:, 0]
    tilt = ou_theta.density.values * (1.0 + 0.1 * np.tanh(x))
    tilt[~OU_DOM.interior_mask] = 0.0
    tilt /= tilt.sum() * OU_DOM.cell_volume
    perturbed = GridFunction(OU_DOM, tilt, "density")
    base = check_invariance(ou(), ou_theta, 1.0)
    res = check_invariance(ou(), perturbed, 1.0)
    assert res >= 5 * max(base, 1e-12)


def test_sub_invariance_cellwise(ou_theta):
    margin = sub_invariance_margin(ou(), ou_theta, 0.5)
    assert margin >= -1e-10


def test_invariant_functional_mass_and_drift():
    lam = invariant_functional(ou(), OU_DOM, horizon=20.0)
    f1 = build_grid_function(lambda x: np.ones(x.shape[0]), OU_DOM)
    val = lam(f1)
    assert 0.97 < val <= 1.0 + 1e-12
    assert lam.drift(f1) < 1e-3


def test_invariant_functional_semigroup_invariance():
    lam = invariant_functional(ou(), OU_DOM, horizon=20.0)
    f = build_grid_function(
        lambda x: np.exp(-((x[:, 0] - 0.5) ** 2) / 0.2), OU_DOM
    )
    t = 0.5
    tf = evolve(ou(), OU_DOM, t, f, scheme="central").result
    assert abs(lam(tf) - lam(f)) <= 2 * t * f.sup_norm() / 20.0


def test_invariant_functional_zero_and_linear():
    lam = invariant_functional(ou(), OU_DOM, horizon=10.0)
    zero = build_grid_function(lambda x: np.zeros(x.shape[0]), OU_DOM)
    assert lam(zero) == 0.0
    f = build_grid_function(lambda x: np.sin(x[:, 0]), OU_DOM)
    g = build_grid_function(lambda x: np.cos(x[:, 0]), OU_DOM)
    combo = GridFunction(OU_DOM, 2.0 * f.values - 3.0 * g.values)
    assert lam(combo) == pytest.approx(2 * lam(f) - 3 * lam(g), abs=1e-10)


def test_invariant_functional_bounded_by_sup():
    lam = invariant_functional(ou(), OU_DOM, horizon=10.0)
    f = build_grid_function(lambda x: np.sin(3 * x[:, 0]), OU_DOM)
    assert abs(lam(f)) <= f.sup_norm() + 1e-12


def test_escape_ou_retains_mass_interior():
    esc = escape_function(ou(), OU_DOM, [1.0, 2.0, 3.0], tol=1e-6)
    window = esc.values.window_values(2.0)
    assert np.all(window > 0.999)
    assert esc.harmonic_residual <= 1e-8


def test_escape_outward_drift_loses_mass():
    # generator drift term +x . grad: trajectories are pushed outward
    model = DiffusionModel(
        dim=1, drift=LinearDrift(-np.eye(1)),
        diffusion=scalar_diffusion(1, 1.0), mu0=-1.0, ellipticity_r=1.0,
    )
    dom = BallDomain(dim=1, index=2, scale=1.0, spacing=0.05)
    esc = escape_function(model, dom, [4.0, 8.0, 12.0, 16.0, 20.0], tol=1e-5)
    vals = esc.values.values
    mid = dom.origin_index()
    assert vals[mid] < 1.0
    # decreasing toward the boundary along the positive axis
    line = vals[mid:dom.node_count - 1]
    assert np.all(np.diff(line) <= 1e-12)


def test_export_density_csv(tmp_path, ou_theta):
    path = tmp_path / "theta.csv"
    export_density_csv(ou_theta, path, header="# hash\n")
    lines = path.read_text().splitlines()
    assert lines[0] == "# hash"
    assert lines[1] == "x0,density"
    assert len(lines) == 2 + OU_DOM.node_count
