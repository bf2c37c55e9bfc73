import numpy as np
import pytest

from ahcc.chart_fields import OneFormField, SymTensor2Field, build_grid, weighted_sup_norm
from ahcc.constraints import (BackgroundJacobian, ConstraintState, DirichletError,
                              SourceRecipe, linearized_apply, make_source,
                              metric_of, n_dof, numeric_jacobian_apply, pack,
                              random_direction, residual_both, residual_gauged,
                              residual_ungauged, source_S, state_to_physical, unpack,
                              zero_source)
from ahcc.operators import background_context, trace, trace_a


@pytest.fixture(scope="module")
def g17():
    return build_grid(3, 17)


@pytest.fixture(scope="module")
def bg17(g17):
    return background_context(g17)


def test_zero_amplitude_source_is_zero(g17):
    T = make_source(SourceRecipe(amplitude=0.0), g17)
    assert np.all(np.nan_to_num(T.field.data) == 0.0)


@pytest.mark.parametrize("profile", ["rho-power", "gaussian-bump"])
def test_source_deterministic(g17, profile):
    a = make_source(SourceRecipe(profile, 1e-3, seed=4), g17).field.data
    b = make_source(SourceRecipe(profile, 1e-3, seed=4), g17).field.data
    assert np.array_equal(a, b, equal_nan=True)
    c = make_source(SourceRecipe(profile, 1e-3, seed=5), g17).field.data
    assert not np.array_equal(a, c, equal_nan=True)


def test_source_amplitude_bounds(g17):
    eps = 1e-3
    T = make_source(SourceRecipe("rho-power", eps, decay=2.0), g17)
    assert eps / 2 <= weighted_sup_norm(T.field, 2.0) <= 2 * eps
    for profile in ("rho-power", "gaussian-bump"):
        T = make_source(SourceRecipe(profile, eps), g17)
        assert weighted_sup_norm(T.field, 0.0, g17.support) <= 2 * eps


def test_rho_power_source_decays_at_its_rate():
    from ahcc.verification import decay_fit

    g = build_grid(3, 33)
    T = make_source(SourceRecipe("rho-power", 1e-3, decay=1.5), g)
    assert decay_fit(T.field).exponent == pytest.approx(1.5, abs=0.02)


def test_recipe_validation():
    with pytest.raises(ValueError):
        SourceRecipe(profile="square")
    with pytest.raises(ValueError):
        SourceRecipe(amplitude=-1.0)


def test_S_trace_free_and_pure_trace(bg17, g17):
    rng = np.random.default_rng(0)
    T = SymTensor2Field(g17, np.where(g17.support, rng.normal(size=(6,) + g17.shape), np.nan))
    xi = OneFormField(g17, np.where(g17.support, rng.normal(size=(3,) + g17.shape), np.nan))
    S = source_S(bg17, T, xi)
    m = g17.level_mask(S.level)
    tr = trace(bg17, S).data[0][m]
    assert np.max(np.abs(tr)) <= 1e-12
    f = np.where(g17.support, np.sin(g17.x[0]), np.nan)
    pure = SymTensor2Field(g17, f * bg17.g)
    zero = OneFormField(g17, np.zeros((3,) + g17.shape))
    S0 = source_S(bg17, pure, zero)
    m = g17.level_mask(S0.level)
    assert np.max(np.abs(S0.data[:, m])) < 1e-12 * np.nanmax(np.abs(pure.data))


def test_S_equals_tracefree_T(bg17, g17):
    rng = np.random.default_rng(3)
    T = rng.normal(size=(3, 3) + g17.shape)
    T = 0.5 * (T + np.swapaxes(T, 0, 1))
    T = np.where(g17.support, T - trace_a(bg17, T) / 3 * bg17.g, np.nan)
    zero = OneFormField(g17, np.zeros((3,) + g17.shape))
    S = source_S(bg17, SymTensor2Field(g17, T), zero)
    m = g17.level_mask(S.level)
    assert np.allclose(S.full()[:, :, m], T[:, :, m], rtol=1e-13, atol=1e-13)


def test_residual_at_origin(g17):
    r = residual_gauged(ConstraintState.zero(g17), zero_source(g17))
    assert r.weighted_norm(1.5, g17.core()) < 1e-10


def test_residual_with_source_only():
    g = build_grid(3, 33)
    src = make_source(SourceRecipe(amplitude=1e-3), g)
    r = residual_gauged(ConstraintState.zero(g), src)
    bg = background_context(g)
    T = src.field.full()
    Ttf = T - trace_a(bg, T) / 3 * bg.g
    core = g.core()
    d1 = SymTensor2Field(g, r.E1.full() + Ttf, level=r.E1.level)
    assert weighted_sup_norm(d1, 0.0, core) < 1e-12
    from ahcc.operators import divergence_sym2

    dT = divergence_sym2(bg, SymTensor2Field(g, Ttf))
    diff = OneFormField(g, r.E2.data - dT.data, level=max(r.E2.level, dT.level))
    assert weighted_sup_norm(diff, 0.0, core) < 1e-12


def test_gauged_minus_ungauged_is_gauge_term(g17):
    src = make_source(SourceRecipe(amplitude=1e-2), g17)
    st = ConstraintState.zero(g17).axpy(1e-2, random_direction(g17, 3))
    gauged, ungauged, term = residual_both(st, src)
    m = g17.level_mask(term.level)
    d = ungauged.E1.data - gauged.E1.data - term.data
    assert np.max(np.abs(d[:, m])) <= 1e-12 * max(1.0, np.max(np.abs(term.data[:, m])))
    assert np.array_equal(residual_ungauged(st, src).E1.data, ungauged.E1.data,
                          equal_nan=True)


def test_dirichlet_violation(g17):
    st = ConstraintState.zero(g17)
    hb = st.hbar.data.copy()
    collar = np.argwhere(~g17.interior & g17.support)[0]
    hb[(0,) + tuple(collar)] = 1.0
    bad = ConstraintState(st.hbar.replace(hb), st.xibar)
    with pytest.raises(DirichletError):
        residual_gauged(bad, zero_source(g17))


def test_linearized_block_structure(bg17, g17):
    d = random_direction(g17, 0)
    dh, dxi = state_to_physical(d)
    zero_xi = OneFormField(g17, np.zeros_like(dxi.data))
    r = linearized_apply(bg17, dh, zero_xi)
    assert np.all(np.nan_to_num(r.E2.data) == 0.0)
    # linear in each argument
    r1 = linearized_apply(bg17, dh, dxi)
    r2 = linearized_apply(bg17, dh.replace(2 * dh.data), dxi.replace(2 * dxi.data))
    m = g17.level_mask(r1.level)
    assert np.allclose(r2.E1.data[:, m], 2 * r1.E1.data[:, m], rtol=1e-13, atol=1e-15)
    with pytest.raises(Exception):
        linearized_apply(bg17, d.hbar, d.xibar)


def test_numeric_jacobian_of_zero_direction(g17):
    z = ConstraintState.zero(g17)
    r = numeric_jacobian_apply(z, zero_source(g17), z, 1e-4)
    assert r.weighted_norm(0.0, g17.core()) == 0.0


def test_background_jacobian_matches_probe(g17, bg17):
    d = random_direction(g17, 1)
    dh, dxi = state_to_physical(d)
    exact = BackgroundJacobian(bg17).apply(dh, dxi)
    num = numeric_jacobian_apply(ConstraintState.zero(g17), zero_source(g17), d, 1e-4)
    core = g17.core()
    assert (num - exact).weighted_norm(1.5, core) <= 1e-7 * exact.weighted_norm(1.5, core)


def test_pack_round_trip_and_ndof():
    g9 = build_grid(3, 9, 0.9, 4)
    assert n_dof(g9) == 9 * g9.n_interior
    st = random_direction(g9, 0)
    v = pack(st)
    assert v.shape == (n_dof(g9),)
    back = unpack(v, g9)
    assert np.array_equal(back.hbar.data, st.hbar.data)
    assert np.array_equal(back.xibar.data, st.xibar.data)
    assert not np.any(pack(ConstraintState.zero(g9)))
    with pytest.raises(ValueError):
        unpack(v[:-1], g9)


def test_metric_of_zero_state_is_background(g17):
    m = metric_of(ConstraintState.zero(g17))
    from ahcc.chart_fields import metric_field

    assert np.array_equal(m.field.data, metric_field(g17).data, equal_nan=True)
