import numpy as np
import pytest
from scipy import sparse

from fpsemi.elliptic import (
    BACKWARD,
    CENTRAL,
    FORWARD,
    UPWIND,
    AssemblyError,
    assemble_forward_reflecting,
    assemble_generator,
    check_maximum_principle,
    export_triplets,
    solve_local_resolvent,
)
from fpsemi.model_core import (
    BallDomain,
    ConstantDiffusion,
    DiffusionModel,
    GridFunction,
    LinearDrift,
    build_grid_function,
    cutoff_eval,
    scalar_diffusion,
)


def make_model(dim=1, a=1.0, drift_matrix=None, offset=None, mu0=0.0):
    mat = np.zeros((dim, dim)) if drift_matrix is None else np.asarray(drift_matrix)
    return DiffusionModel(
        dim=dim,
        drift=LinearDrift(mat, offset),
        diffusion=scalar_diffusion(dim, a),
        mu0=mu0,
        ellipticity_r=a,
    )


def ones(domain):
    return build_grid_function(lambda x: np.ones(x.shape[0]), domain)


def test_pure_diffusion_stencil_row():
    # A = 2, h = 0.1: -L row must be (-1/h^2, 2/h^2, -1/h^2)
    dom = BallDomain(dim=1, index=1, scale=1.0, spacing=0.1)
    op = assemble_generator(make_model(a=2.0), dom)
    row = (-op.matrix).toarray()[9]  # an interior row away from the boundary
    h2 = 0.1**2
    assert row[8] == pytest.approx(-1.0 / h2)
    assert row[9] == pytest.approx(2.0 / h2)
    assert row[10] == pytest.approx(-1.0 / h2)


def test_upwind_row_sums_equal_lambda_interior():
    # constant drift b = 1, A = 2: (lam I - L) rows away from the boundary
    # sum exactly to lam; boundary-adjacent rows dominate it.
    dom = BallDomain(dim=1, index=2, scale=1.0, spacing=0.1)
    model = make_model(a=2.0, offset=[1.0])
    op = assemble_generator(model, dom, scheme=UPWIND)
    lam = 0.7
    A = sparse.identity(op.size) * lam - op.matrix
    sums = np.asarray(A.sum(axis=1)).ravel()
    assert np.allclose(sums[1:-1], lam, atol=1e-11)
    assert np.all(sums >= lam - 1e-11)


def test_forward_is_transpose_of_backward():
    dom = BallDomain(dim=2, index=2, scale=1.0, spacing=0.25)
    model = make_model(dim=2, a=1.0, drift_matrix=np.eye(2))
    back = assemble_generator(model, dom, BACKWARD, CENTRAL)
    fwd = assemble_generator(model, dom, FORWARD, CENTRAL)
    diff = (fwd.matrix - back.matrix.T).toarray()
    assert np.max(np.abs(diff)) < 1e-12


def test_discrete_duality_inner_products():
    dom = BallDomain(dim=1, index=3, scale=1.0, spacing=0.1)
    model = make_model(a=1.0, drift_matrix=[[1.0]])
    back = assemble_generator(model, dom, BACKWARD, CENTRAL)
    fwd = assemble_generator(model, dom, FORWARD, CENTRAL)
    rng = np.random.Generator(np.random.Philox(key=[5, 0]))
    vol = dom.cell_volume
    for _ in range(5):
        f = rng.standard_normal(back.size)
        g = rng.standard_normal(back.size)
        lhs = vol * np.dot(back.matrix @ f, g)
        rhs = vol * np.dot(f, fwd.matrix @ g)
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def test_solver_zero_rhs_gives_zero():
    dom = BallDomain(dim=1, index=1, scale=1.0, spacing=0.05)
    op = assemble_generator(make_model(a=2.0), dom)
    f = build_grid_function(lambda x: np.zeros(x.shape[0]), dom)
    res = solve_local_resolvent(op, 1.0, f)
    assert np.all(res.solution.values == 0.0)


def closed_form_error(h):
    # (1 - d^2/dx^2) u = 1 on (-1, 1), u(+-1) = 0  (A = 2 so a/2 = 1)
    dom = BallDomain(dim=1, index=1, scale=1.0, spacing=h)
    op = assemble_generator(make_model(a=2.0), dom)
    res = solve_local_resolvent(op, 1.0, ones(dom))
    exact = 1.0 - 1.0 / np.cosh(1.0)
    return abs(res.solution.values[dom.origin_index()] - exact)


def test_local_resolvent_matches_closed_form():
    # u(0) = 1 - 1/cosh(1) ~ 0.351946
    assert closed_form_error(0.1) < 3e-4
    exact = 1.0 - 1.0 / np.cosh(1.0)
    assert exact == pytest.approx(0.351946, abs=1e-6)


def test_local_resolvent_second_order_convergence():
    errs = [closed_form_error(h) for h in (0.1, 0.05, 0.025)]
    for coarse, fine in zip(errs, errs[1:]):
        assert 3.0 < coarse / fine < 5.0


def test_resolvent_positivity_and_contraction():
    dom = BallDomain(dim=1, index=2, scale=1.0, spacing=0.05)
    model = make_model(a=1.0, drift_matrix=[[1.0]])
    op = assemble_generator(model, dom, scheme=UPWIND)
    g = cutoff_eval(2, dom)
    rng = np.random.Generator(np.random.Philox(key=[9, 0]))
    for lam in (0.5, 1.0, 3.0):
        for _ in range(3):
            c = rng.uniform(-1.0, 1.0)
            f = build_grid_function(
                lambda x, c=c: np.exp(-((x[:, 0] - c) ** 2) / 0.1), dom
            )
            res = solve_local_resolvent(op, lam, f, g)
            assert res.solution.values.min() >= -1e-12
            assert lam * res.solution.sup_norm() <= f.sup_norm() + 1e-10
            assert res.residual_norm <= 1e-10 * f.sup_norm()


def test_solution_vanishes_outside_ball():
    dom = BallDomain(dim=2, index=2, scale=1.0, spacing=0.25)
    op = assemble_generator(make_model(dim=2), dom)
    f = ones(dom)
    res = solve_local_resolvent(op, 1.0, f, cutoff_eval(2, dom))
    outside = ~dom.interior_mask
    assert np.all(res.solution.values[outside] == 0.0)


def test_maximum_principle_pure_diffusion_passes():
    dom = BallDomain(dim=1, index=2, scale=1.0, spacing=0.1)
    op = assemble_generator(make_model(a=1.0), dom, scheme=CENTRAL)
    report = check_maximum_principle(op, 1.0)
    assert report.passed


def test_maximum_principle_central_high_peclet_fails_then_upwind_passes():
    # |b| h / (a/2) = 30 * 0.1 / 0.5 = 6 > 2: central differencing loses the
    # M-matrix property, upwinding restores it.
    dom = BallDomain(dim=1, index=2, scale=1.0, spacing=0.1)
    model = make_model(a=1.0, offset=[30.0])
    central = assemble_generator(model, dom, scheme=CENTRAL)
    rep = check_maximum_principle(central, 1.0)
    assert not rep.passed
    assert rep.offending_node is not None
    upwind = assemble_generator(model, dom, scheme=UPWIND)
    assert check_maximum_principle(upwind, 1.0).passed


def test_mixed_diffusion_upwind_assembly_fails_loudly():
    model = DiffusionModel(
        dim=2,
        drift=LinearDrift(np.zeros((2, 2))),
        diffusion=ConstantDiffusion([[1.0, 0.5], [0.5, 1.0]]),
        mu0=0.0,
        ellipticity_r=0.5,
    )
    dom = BallDomain(dim=2, index=1, scale=1.0, spacing=0.25)
    with pytest.raises(AssemblyError, match="mixed-derivative"):
        assemble_generator(model, dom, scheme=UPWIND)
    assemble_generator(model, dom, scheme=CENTRAL)  # allowed, audited separately


def test_reflecting_matches_absorbing_transpose_in_deep_interior():
    dom = BallDomain(dim=1, index=3, scale=1.0, spacing=0.1)
    model = make_model(a=1.0, drift_matrix=[[1.0]])
    for scheme in (CENTRAL, UPWIND):
        absorbing = assemble_generator(model, dom, FORWARD, scheme)
        reflecting = assemble_forward_reflecting(model, dom, scheme)
        diff = (absorbing.matrix - reflecting.matrix).toarray()
        assert np.max(np.abs(diff[1:-1, :])) < 1e-12


def test_reflecting_columns_sum_to_zero():
    dom = BallDomain(dim=2, index=2, scale=1.0, spacing=0.25)
    model = make_model(dim=2, a=1.0, drift_matrix=np.eye(2))
    op = assemble_forward_reflecting(model, dom, CENTRAL)
    colsums = np.asarray(op.matrix.sum(axis=0)).ravel()
    assert np.max(np.abs(colsums)) < 1e-11


def test_reflecting_rejects_mixed_diffusion():
    model = DiffusionModel(
        dim=2,
        drift=LinearDrift(np.zeros((2, 2))),
        diffusion=ConstantDiffusion([[1.0, 0.2], [0.2, 1.0]]),
        mu0=0.0,
        ellipticity_r=0.5,
    )
    dom = BallDomain(dim=2, index=1, scale=1.0, spacing=0.25)
    with pytest.raises(AssemblyError, match="diagonal"):
        assemble_forward_reflecting(model, dom)


def test_export_triplets_roundtrip(tmp_path):
    dom = BallDomain(dim=1, index=1, scale=1.0, spacing=0.25)
    op = assemble_generator(make_model(), dom)
    path = tmp_path / "op.txt"
    export_triplets(op, path)
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    coo = op.matrix.tocoo()
    assert len(lines) == coo.nnz
    r, c, v = lines[0].split()
    rebuilt = sparse.coo_matrix(
        (
            [float(l.split()[2]) for l in lines],
            (
                [int(l.split()[0]) for l in lines],
                [int(l.split()[1]) for l in lines],
            ),
        ),
        shape=op.matrix.shape,
    )
    assert np.max(np.abs((rebuilt - op.matrix).toarray())) == 0.0
