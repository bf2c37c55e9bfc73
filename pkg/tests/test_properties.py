import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ahcc.chart_fields import (OneFormField, ScalarField, SymTensor2Field, build_grid,
                               l2_inner, pack_sym, read_field, unpack_sym,
                               weighted_sup_norm, write_field)
from ahcc.config import ConfigError, SCHEMA, RunConfig
from ahcc.constraints import (linearized_apply, n_dof, pack, source_S, state_to_physical,
                              random_direction, unpack)
from ahcc.operators import background_context, trace
from ahcc.verification import decay_fit, random_tracefree_compact, rayleigh_quotient

G9 = build_grid(3, 9)
G13 = build_grid(3, 13)
G33 = build_grid(3, 33)
FLAT = build_grid(3, 13, conformal=False)
BG13 = background_context(G13)

seeds = st.integers(0, 2**32 - 1)
scales = st.floats(1e-6, 1e6, allow_nan=False)
PROFILE = dict(max_examples=25, deadline=None)


def rand_field(grid, rank, seed, region=None):
    rng = np.random.default_rng(seed)
    ncomp = {0: 1, 1: 3, 2: 6}[rank]
    region = grid.support if region is None else region
    data = np.where(region, rng.normal(size=(ncomp,) + grid.shape), np.nan)
    cls = {0: ScalarField, 1: OneFormField, 2: SymTensor2Field}[rank]
    return cls(grid, data)


@settings(**PROFILE)
@given(seeds)
def test_pack_unpack_bijection(seed):
    v = np.random.default_rng(seed).normal(size=n_dof(G9))
    assert np.array_equal(pack(unpack(v, G9)), v)


@settings(**PROFILE)
@given(st.integers(3, 6), seeds)
def test_sym_pack_round_trip(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n, 4))
    a = a + a.transpose(1, 0, 2)
    assert np.array_equal(unpack_sym(pack_sym(a), n), a)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([0, 1, 2]), seeds, st.booleans())
def test_field_file_round_trip(tmp_path_factory, rank, seed, rescaled):
    f = rand_field(G9, rank, seed, G9.interior)
    f = f.replace(np.nan_to_num(f.data), rescaled=rescaled)
    path = tmp_path_factory.mktemp("f") / "x.ahcf"
    write_field(path, f)
    back = read_field(path, G9)
    assert back.rank == rank and back.rescaled == rescaled
    assert np.array_equal(back.data, f.data)


@settings(**PROFILE)
@given(st.sampled_from([0, 1, 2]), seeds, scales, st.floats(0.0, 2.0))
def test_weighted_norm_homogeneous(rank, seed, c, s):
    f = rand_field(G9, rank, seed)
    a = weighted_sup_norm(f.replace(c * f.data), s)
    assert a == pytest.approx(c * weighted_sup_norm(f, s), rel=1e-12)


@settings(**PROFILE)
@given(st.sampled_from([0, 1, 2]), seeds, st.floats(0.0, 2.0), st.floats(0.0, 1.0))
def test_weighted_norm_monotone_in_s(rank, seed, s, ds):
    # rho <= 1/2 on the ball, so rho^-s grows with s
    f = rand_field(G9, rank, seed)
    assert weighted_sup_norm(f, s + ds) >= weighted_sup_norm(f, s) * (1 - 1e-14)


@settings(**PROFILE)
@given(st.sampled_from([0, 1, 2]), seeds, seeds, st.floats(-3, 3))
def test_l2_inner_symmetric_bilinear(rank, s1, s2, c):
    a, b = rand_field(G9, rank, s1), rand_field(G9, rank, s2)
    ab, ba = l2_inner(a, b), l2_inner(b, a)
    assert ab == pytest.approx(ba, rel=1e-12, abs=1e-12)
    assert l2_inner(a.replace(c * a.data), b) == pytest.approx(c * ab, rel=1e-10, abs=1e-10)
    assert l2_inner(a, a) >= 0


@settings(**PROFILE)
@given(seeds)
def test_plain_fd_exact_on_quartics(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=5)
    x, y, z = FLAT.x
    f = c[0] + c[1] * x + c[2] * x**2 * y + c[3] * y**3 * z + c[4] * x**4
    df = c[1] + 2 * c[2] * x * y + 4 * c[4] * x**3
    d = FLAT.diff(np.where(FLAT.support, f, np.nan)[None], 0, 0)[0]
    m = FLAT.level_mask(1)
    assert np.max(np.abs(d[m] - df[m])) <= 1e-11 * max(1.0, np.max(np.abs(c)))


@settings(**PROFILE)
@given(seeds, scales)
def test_source_S_always_trace_free(seed, c):
    T = rand_field(G13, 2, seed)
    T = T.replace(c * T.data)
    xi = rand_field(G13, 1, seed + 1)
    S = source_S(BG13, T, xi)
    m = G13.level_mask(S.level)
    tr = trace(BG13, S).data[0][m]
    assert np.max(np.abs(tr)) <= 1e-12 * max(1.0, np.nanmax(np.abs(S.data[:, m])))


@settings(max_examples=10, deadline=None)
@given(seeds, seeds, st.floats(-5, 5))
def test_linearized_apply_linear(s1, s2, c):
    a = state_to_physical(random_direction(G13, s1))
    b = state_to_physical(random_direction(G13, s2))
    comb = (a[0].replace(a[0].data + c * b[0].data), a[1].replace(a[1].data + c * b[1].data))
    ra, rb, rc = (linearized_apply(BG13, *x) for x in (a, b, comb))
    m = G13.level_mask(rc.level)
    for attr in ("E1", "E2"):
        lhs = getattr(rc, attr).data[:, m]
        rhs = getattr(ra, attr).data[:, m] + c * getattr(rb, attr).data[:, m]
        assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * np.max(np.abs(rhs)))


@settings(max_examples=10, deadline=None)
@given(seeds, st.floats(1e-3, 1e3))
def test_rayleigh_scale_invariant_and_positive(seed, c):
    u = random_tracefree_compact(BG13, seed)
    q = rayleigh_quotient(BG13, u)
    assert q > 0
    assert rayleigh_quotient(BG13, c * u) == pytest.approx(q, rel=1e-10)


@settings(**PROFILE)
@given(st.floats(0.0, 3.0), st.floats(1e-6, 1e3))
def test_decay_fit_recovers_power(p, amp):
    f = ScalarField(G33, np.where(G33.support, amp * G33.rho**p, np.nan))
    assert decay_fit(f).exponent == pytest.approx(p, abs=1e-9)


@settings(**PROFILE)
@given(st.sampled_from([k for k, v in SCHEMA.items() if isinstance(v, dict)]),
       st.text("abcdefghijklmnopqrstuvwxyz_", min_size=1, max_size=12))
def test_unknown_config_keys_rejected(table, key):
    if key in SCHEMA[table]:
        return
    with pytest.raises(ConfigError, match="unknown key"):
        RunConfig.from_dict({table: {key: 1}})
