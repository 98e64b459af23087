import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from porodec import femkit as fk
from porodec import sparsekit as sk
from porodec.config import RunConfig
from porodec.models import NetworkSystem, TwoFieldSystem, build_network, build_toy, build_two_field
from porodec.steppers import (
    IMPLICIT,
    SEMI_EXPLICIT,
    DivergenceDetected,
    ImplicitEuler,
    SemiExplicitEuler,
    TwoFieldState,
    implicit_step_network,
    implicit_step_two_field,
    initial_state,
    integrate,
    propagate,
    semi_explicit_step_network,
    semi_explicit_step_two_field,
    trajectory_rows,
    write_trajectory_csv,
)
from porodec.studies import compute_eoc


def mat(a):
    return sk.SparseMatrix(np.atleast_2d(np.asarray(a, dtype=float)))


def vload(values):
    values = np.asarray(values, dtype=float)
    return fk.VectorLoad(lambda t: values, lambda t: 0 * values)


def scalar_system(omega):
    # K_a = 1, D = omega, M_c = 1, K_b = 1, f = g = 0, p0 = 1, u0 = omega
    return TwoFieldSystem(mat(1), mat(1), mat(1), mat(omega), vload([0.0]), vload([0.0]),
                          np.array([omega]), np.array([1.0]))


def dense_system(seed, nu=4, npr=2, coupling=0.3):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(nu, nu))
    C = rng.normal(size=(npr, npr))
    Ka, Kb = B @ B.T + nu * np.eye(nu), C @ C.T + np.eye(npr)
    Mc = np.diag(rng.uniform(1, 2, npr))
    D = coupling * rng.normal(size=(npr, nu))
    fv, gv = rng.normal(size=nu), rng.normal(size=npr)
    f = fk.VectorLoad(lambda t: fv * math.cos(t), lambda t: -fv * math.sin(t))
    g = fk.VectorLoad(lambda t: gv * math.exp(-t), lambda t: -gv * math.exp(-t))
    p0 = rng.normal(size=npr)
    u0 = np.linalg.solve(Ka, f(0.0) + D.T @ p0)
    return TwoFieldSystem(mat(Ka), mat(Kb), mat(Mc), mat(D), f, g, u0, p0)


def test_scalar_semi_explicit_step():
    omega = 0.3
    state = semi_explicit_step_two_field(scalar_system(omega), TwoFieldState(0.0, np.array([omega]),
                                                                             np.array([1.0])), 0.5)
    assert state.u[0] == pytest.approx(omega, abs=1e-15)
    assert state.p[0] == pytest.approx(2 / 3, abs=1e-15)


def test_scalar_implicit_step():
    sys_ = scalar_system(0.1)
    state = implicit_step_two_field(sys_, initial_state(sys_), 0.5)
    assert state.p[0] == pytest.approx(1.01 / 1.51, abs=1e-14)
    # dense 2x2 block oracle [[K_a, -D^T], [D, M_c + tau K_b]]
    A = np.array([[1.0, -0.1], [0.1, 1.5]])
    u1, p1 = np.linalg.solve(A, [0.0, 0.1 * 0.1 + 1.0])
    assert state.u[0] == pytest.approx(u1, abs=1e-14) and state.p[0] == pytest.approx(p1, abs=1e-14)


def test_zero_coupling_schemes_coincide():
    sys_ = dense_system(0, coupling=0.0)
    a = integrate(sys_, SEMI_EXPLICIT, 0.05, 1.0)
    b = integrate(sys_, IMPLICIT, 0.05, 1.0)
    for k in ("u", "p"):
        assert np.abs(a.states[k] - b.states[k]).max() <= 1e-12


def test_zero_coupling_fem_collapse():
    cfg = RunConfig.from_preset("poro-5.1").with_overrides(["mesh.n=4", "params.alpha=0", "time.T=1"])
    sys_ = build_two_field(cfg)
    a = integrate(sys_, SEMI_EXPLICIT, 0.125, 1.0, capture_every=1)
    b = integrate(sys_, IMPLICIT, 0.125, 1.0, capture_every=1)
    assert np.abs(a.states["p"] - b.states["p"]).max() <= 1e-12 * np.abs(b.states["p"]).max()


def test_zero_data_zero_trajectory():
    sys_ = dense_system(1)
    zero = TwoFieldSystem(sys_.K_a, sys_.K_b, sys_.M_c, sys_.D, vload(np.zeros(4)), vload(np.zeros(2)),
                          np.zeros(4), np.zeros(2))
    for scheme in (SEMI_EXPLICIT, IMPLICIT):
        traj = integrate(zero, scheme, 0.1, 1.0)
        assert np.all(traj.states["u"] == 0) and np.all(traj.states["p"] == 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(-5, 5).filter(lambda s: abs(s) > 1e-3),
       st.sampled_from([SEMI_EXPLICIT, IMPLICIT]))
def test_linearity(seed, s, scheme):
    base = dense_system(seed)
    f, g = base.f, base.g
    scaled = TwoFieldSystem(base.K_a, base.K_b, base.M_c, base.D,
                            fk.VectorLoad(lambda t: s * f(t)), fk.VectorLoad(lambda t: s * g(t)),
                            s * base.u0, s * base.p0)
    a = integrate(base, scheme, 0.1, 1.0)
    b = integrate(scaled, scheme, 0.1, 1.0)
    for k in ("u", "p"):
        assert np.allclose(b.states[k], s * a.states[k], rtol=1e-9, atol=1e-10 * abs(s))


@pytest.mark.parametrize("scheme", [SEMI_EXPLICIT, IMPLICIT])
def test_residuals_within_tolerance(scheme):
    sys_ = build_two_field(RunConfig.from_preset("poro-5.1").with_overrides(["mesh.n=8"]))
    traj = integrate(sys_, scheme, 1 / 16, 1.0)
    assert traj.residuals.max() <= 10 * 1e-10
    assert traj.residual_names == ("elasticity", "pressure")


def test_block_residuals_after_back_substitution():
    sys_ = dense_system(2, nu=10, npr=8)
    state = initial_state(sys_)
    new = implicit_step_two_field(sys_, state, 0.1)
    Ka, D, Mc, Kb = (m.toarray() for m in (sys_.K_a, sys_.D, sys_.M_c, sys_.K_b))
    r1 = Ka @ new.u - D.T @ new.p - sys_.f(0.1)
    r2 = D @ (new.u - state.u) + Mc @ (new.p - state.p) + 0.1 * (Kb @ new.p - sys_.g(0.1))
    assert np.abs(r1).max() <= 1e-9 and np.abs(r2).max() <= 1e-9


def test_non_integer_step_count():
    with pytest.raises(ValueError, match="integer"):
        integrate(build_toy(0.1), SEMI_EXPLICIT, 0.3, 1.0)


def test_unstable_toy_fails():
    toy = build_toy(0.3)
    try:
        traj = integrate(toy, SEMI_EXPLICIT, 1e-2, 1.0)
    except DivergenceDetected as exc:
        assert exc.trajectory is not None
        return
    ref = propagate(toy, IMPLICIT, 1e-2 / 64, 1.0)
    z = np.concatenate((traj.final("u"), traj.final("p")))
    z_ref = np.concatenate((ref.u, ref.p))
    assert np.linalg.norm(z - z_ref) / np.linalg.norm(z_ref) > 1


def test_guard_raises_with_partial_trajectory():
    with pytest.raises(DivergenceDetected) as info:
        integrate(build_toy(0.3), SEMI_EXPLICIT, 1e-2, 1.0, guard=10.0)
    assert info.value.trajectory.n_steps == info.value.step


def test_stable_toy_accuracy():
    toy = build_toy(0.1)
    traj = integrate(toy, SEMI_EXPLICIT, 1e-3, 1.0)
    ref = propagate(toy, IMPLICIT, 1e-3 / 64, 1.0)
    z = np.concatenate((traj.final("u"), traj.final("p")))
    z_ref = np.concatenate((ref.u, ref.p))
    assert np.all(np.isfinite(z))
    assert np.linalg.norm(z - z_ref) / np.linalg.norm(z_ref) < 1e-2


def test_propagate_matches_integrate():
    toy = build_toy(0.15)
    traj = integrate(toy, SEMI_EXPLICIT, 0.01, 1.0)
    st_ = propagate(toy, SEMI_EXPLICIT, 0.01, 1.0)
    assert np.allclose(st_.p, traj.final("p"), rtol=1e-12) and np.allclose(st_.u, traj.final("u"), rtol=1e-12)


@pytest.mark.parametrize("scheme", [SEMI_EXPLICIT, IMPLICIT])
def test_first_order_in_time(scheme):
    toy = build_toy(0.1)
    taus = [0.1, 0.05, 0.025, 0.0125]
    ref = propagate(toy, IMPLICIT, taus[-1] / 64, 1.0)
    z_ref = np.concatenate((ref.u, ref.p))
    errs = []
    for tau in taus:
        s = propagate(toy, scheme, tau, 1.0)
        errs.append(np.linalg.norm(np.concatenate((s.u, s.p)) - z_ref))
    assert 0.8 <= compute_eoc(errs, taus).lsq <= 1.2


# ------------------------------------------------------------------ network

def tiny_network(alpha=(0.4, 0.7), beta=0.05, p0=(1.0, -0.5), g=(0.3, 0.0), f=(0.2, -0.1)):
    """Two networks, one pressure dof each, two fluxes and two displacements."""
    Ka = np.array([[3.0, -1.0], [-1.0, 2.0]])
    My = np.array([[2.0, 0.5], [0.5, 1.0]])
    D = [np.array([[alpha[0], 0.5 * alpha[0]]]), np.array([[-0.3 * alpha[1], alpha[1]]])]
    Dh = [np.array([[0.8, -0.2]]), np.array([[0.1, 0.6]])]
    p = np.array(p0).reshape(2, 1)
    fv = np.array(f)
    u0 = np.linalg.solve(Ka, fv + sum(Di.T @ pi for Di, pi in zip(D, p)))
    y0 = np.array([np.linalg.solve(My, Dhi.T @ pi) for Dhi, pi in zip(Dh, p)])
    gl = [vload([g[0]]), vload([g[1]])]
    B = np.array([[0.0, beta], [beta, 0.0]])
    return NetworkSystem(mat(Ka), mat(My), mat(1.5), mat(1.0), [mat(d) for d in D], [mat(d) for d in Dh],
                         B, vload(fv), gl, u0, y0, p)


def dense_network_step(sys_, state, tau, scheme):
    """Full block solve in (u, y1, y2, p1, p2) with numpy LU."""
    Ka, My, mc, wq = sys_.K_a.toarray(), sys_.M_y.toarray(), sys_.M_c.toarray()[0, 0], sys_.M_Q.toarray()[0, 0]
    D = [d.toarray() for d in sys_.D]
    Dh = [d.toarray() for d in sys_.D_hat]
    beta = sys_.beta
    nu, ny = 2, 2
    N = nu + 2 * ny + 2
    A = np.zeros((N, N))
    b = np.zeros(N)
    iu, iy, ip = slice(0, nu), [slice(nu + i * ny, nu + (i + 1) * ny) for i in range(2)], [nu + 2 * ny + i for i in range(2)]
    t1 = state.t + tau
    f1 = sys_.f(t1)
    A[iu, iu] = Ka
    b[iu] = f1
    if scheme == IMPLICIT:
        for i in range(2):
            A[iu, ip[i]] = -D[i][0]
    else:
        b[iu] += sum(D[i][0] * state.p[i][0] for i in range(2))
        u1 = np.linalg.solve(Ka, b[iu])
    for i in range(2):
        A[iy[i], iy[i]] = My
        A[iy[i], ip[i]] = -Dh[i][0]
        row = ip[i]
        A[row, iy[i]] = tau * Dh[i][0]
        A[row, ip[i]] += mc
        for j in range(2):
            if j != i:
                A[row, ip[i]] -= tau * beta[i, j] * wq
                A[row, ip[j]] += tau * beta[i, j] * wq
        b[row] = mc * state.p[i][0] + tau * sys_.g[i](t1)[0]
        if scheme == IMPLICIT:
            A[row, iu] = D[i][0]
            b[row] += D[i][0] @ state.u
        else:
            b[row] -= D[i][0] @ (u1 - state.u)
    if scheme != IMPLICIT:
        A[iu, iu] = np.eye(nu)
        b[iu] = u1
    z = np.linalg.solve(A, b)
    return z[iu], np.array([z[s] for s in iy]), np.array([[z[k]] for k in ip])


@pytest.mark.parametrize("scheme,step", [(SEMI_EXPLICIT, semi_explicit_step_network),
                                         (IMPLICIT, implicit_step_network)])
def test_network_step_matches_dense_oracle(scheme, step):
    sys_ = tiny_network()
    state = initial_state(sys_)
    for _ in range(5):
        u, y, p = dense_network_step(sys_, state, 0.1, scheme)
        new = step(sys_, state, 0.1)
        assert np.abs(new.u - u).max() <= 1e-10
        assert np.abs(new.y - y).max() <= 1e-10
        assert np.abs(new.p - p).max() <= 1e-10
        state = new


def test_network_zero_coupling_collapse():
    sys_ = tiny_network(alpha=(0.0, 0.0), beta=0.0)
    a = integrate(sys_, SEMI_EXPLICIT, 0.1, 1.0)
    b = integrate(sys_, IMPLICIT, 0.1, 1.0)
    for k in ("u", "y", "p"):
        assert np.abs(a.states[k] - b.states[k]).max() <= 1e-12


def test_network_zero_everything():
    sys_ = tiny_network(p0=(0.0, 0.0), g=(0.0, 0.0), f=(0.0, 0.0))
    traj = integrate(sys_, SEMI_EXPLICIT, 0.1, 1.0)
    assert all(np.all(v == 0) for v in traj.states.values())


def test_network_constant_pressures_stationary():
    cfg = RunConfig({
        "run": {"model": "network"}, "mesh": {"n": "4", "domain": "square"},
        "params": {"lambda": "7786.42", "mu": "3337.037", "kappa_over_nu": "3.75e-4, 1.57e-5",
                   "inv_M": "4.5e-2", "alpha": "0.99", "m": "2"},
        "loads": {"f_x": "0", "f_y": "0", "g": "0"}, "initial": {"p1": "650", "p2": "1000"}})
    sys_ = build_network(cfg)
    for scheme in (SEMI_EXPLICIT, IMPLICIT):
        traj = integrate(sys_, scheme, 0.25, 2.0, capture_every=1)
        assert np.abs(traj.states["p"][:, 0] - 650).max() <= 1e-8
        assert np.abs(traj.states["p"][:, 1] - 1000).max() <= 1e-8
        # constant P0 pressures are orthogonal to div of interior hats, so u stays at u0
        assert np.abs(traj.states["u"] - sys_.u0).max() <= 1e-12
        assert traj.residuals.max() <= 1e-9


def test_network_residuals_on_preset():
    with pytest.warns(UserWarning):
        sys_ = build_network(RunConfig.from_preset("network-5.2").with_overrides(["mesh.n=8"]))
    for scheme in (SEMI_EXPLICIT, IMPLICIT):
        traj = integrate(sys_, scheme, 0.125, 1.0)
        assert traj.residual_names == ("elasticity", "flux", "pressure")
        assert traj.residuals.max() <= 1e-8


# ------------------------------------------------------------ api surface

def test_estimators():
    toy = build_toy(0.1)
    est = SemiExplicitEuler(tau=0.01, T=1.0)
    assert est.get_params()["tau"] == 0.01
    assert clone(est).get_params() == est.get_params()
    final = est.fit(toy).predict()
    assert est.n_steps_ == 100
    ref = ImplicitEuler(tau=0.01, T=1.0).fit(toy).predict()
    assert abs(final["p"][0] - ref["p"][0]) < 1e-2


def test_trajectory_csv(tmp_path):
    traj = integrate(build_toy(0.1), SEMI_EXPLICIT, 0.25, 1.0)
    header, rows = trajectory_rows(traj)
    assert header == ["step", "t", "norm_u", "norm_p", "res_elasticity", "res_pressure"]
    assert len(rows) == 4
    path = tmp_path / "t.csv"
    write_trajectory_csv(traj, path)
    text = path.read_bytes()
    assert b"\r\n" not in text and text.splitlines()[0] == b"step,t,norm_u,norm_p,res_elasticity,res_pressure"
