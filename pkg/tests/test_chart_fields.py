import itertools

import numpy as np
import pytest

from ahcc.chart_fields import (COLLAR, EXTERIOR, INTERIOR, FieldFormatError, GridError,
                               OneFormField, ScalarField, SymTensor2Field, build_grid,
                               fd_partial, fd_weights, frame_norm, l2_inner, metric_field,
                               pack_sym, read_field, to_physical, to_rescaled, unpack_sym,
                               weighted_sup_norm, write_field)


def brute_force_interior(n, N, r_max, radius):
    h = 2 * r_max / (N - 1)
    coords = -r_max + h * np.arange(N)
    count = 0
    for idx in itertools.product(range(N), repeat=n):
        x = coords[list(idx)]
        if x @ x >= r_max**2 * (1 - 1e-14):
            continue
        ok = True
        for a in range(n):
            for j in range(-radius, radius + 1):
                k = idx[a] + j
                if not 0 <= k < N:
                    ok = False
                    break
                y = x.copy()
                y[a] = coords[k]
                if y @ y > r_max**2 * (1 + 1e-14):
                    ok = False
                    break
            if not ok:
                break
        count += ok
    return count


def test_origin_is_interior_for_odd_N():
    g = build_grid(3, 9, 0.9, 2)
    assert g.mask[g.node_index([0, 0, 0])] == INTERIOR
    assert np.allclose(g.x[(slice(None),) + g.node_index([0, 0, 0])], 0.0)


@pytest.mark.parametrize("N,order", [(9, 2), (17, 4), (33, 4)])
def test_interior_count_matches_enumeration(N, order):
    g = build_grid(3, N, 0.9, order)
    assert g.n_interior == brute_force_interior(3, N, 0.9, order // 2)


def test_interior_count_default_grid():
    assert build_grid(3, 33).n_interior == 12197


def test_mask_classes_nested():
    g = build_grid(3, 17)
    r = np.sqrt(g.r2)
    assert np.all(r[g.mask == INTERIOR] < 0.9)
    assert np.all(r[g.mask == COLLAR] <= 0.9 + 1e-12)
    assert np.all(r[g.mask == EXTERIOR] > 0.9)
    assert np.array_equal(g.mask, g.mask[::-1, ::-1, ::-1])


@pytest.mark.parametrize("bad", [dict(N=8), dict(N=7), dict(r_max=1.0), dict(r_max=0.0),
                                 dict(fd_order=3), dict(n=2)])
def test_build_grid_rejects(bad):
    args = dict(n=3, N=9, r_max=0.9, fd_order=4)
    args.update(bad)
    with pytest.raises(GridError):
        build_grid(**args)


def test_fd_weights_classic():
    assert np.allclose(fd_weights([-2, -1, 0, 1, 2]), [1 / 12, -2 / 3, 0, 2 / 3, -1 / 12])
    assert np.allclose(fd_weights([-1, 0, 1]), [-0.5, 0, 0.5])


def test_plain_fd_exact_on_quartic():
    g = build_grid(3, 17, conformal=False)
    x, y, z = g.x
    f = ScalarField(g, np.where(g.support, x**4 - 2 * x * y**3 + z**2, np.nan))
    d = g.diff(f.data, 0, 0)
    m = g.level_mask(1)
    assert np.max(np.abs((d[0] - (4 * x**3 - 2 * y**3))[m])) < 1e-11


def test_weighted_fd_exact_on_background_metric():
    # rho^2 g0 = delta is constant, so conformal derivatives of g0 are exact
    g = build_grid(3, 17)
    g0 = metric_field(g)
    rho = g.rho
    node = g.node_index([0.5, 0.0, 0.0])
    d = fd_partial(g0, 0, node)
    # d_x (rho^-2) = 2 x rho^-3
    expect = 2 * g.x[(0,) + node] / rho[node] ** 3
    assert d[0] == pytest.approx(expect, rel=1e-13)
    assert np.allclose(d[1:3], 0.0, atol=1e-12)


def test_fd_partial_rejects_exterior():
    g = build_grid(3, 17)
    f = ScalarField(g, np.where(g.support, 1.0, np.nan))
    with pytest.raises(GridError):
        fd_partial(f, 0, (0, 0, 0))


def test_frame_norm_oracles():
    g = build_grid(3, 37)
    node = g.node_index([0.5, 0.0, 0.0])
    assert frame_norm(metric_field(g), node) == pytest.approx(np.sqrt(3), rel=1e-14)
    w = OneFormField(g, np.where(g.support, np.stack([1 / g.rho, 0 * g.rho, 0 * g.rho]),
                                 np.nan))
    assert frame_norm(w, node) == pytest.approx(1.0, rel=1e-14)
    assert weighted_sup_norm(w, 0.0) == pytest.approx(1.0)


def test_weighted_sup_norm_of_rho_power():
    g = build_grid(3, 17)
    f = ScalarField(g, np.where(g.support, g.rho**1.5, np.nan))
    assert weighted_sup_norm(f, 1.5) == pytest.approx(1.0, rel=1e-14)
    assert weighted_sup_norm(f, 0.0) == pytest.approx(np.nanmax(g.rho[g.interior]) ** 1.5)


def test_rescale_round_trip():
    g = build_grid(3, 9)
    rng = np.random.default_rng(0)
    u = SymTensor2Field(g, np.where(g.support, rng.normal(size=(6,) + g.shape), np.nan))
    back = to_physical(to_rescaled(u))
    assert np.allclose(back.data[:, g.support], u.data[:, g.support], rtol=1e-14)
    with pytest.raises(GridError):
        to_physical(u)
    with pytest.raises(GridError):
        to_rescaled(to_rescaled(u))


def test_pack_unpack_round_trip():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 4, 5))
    a = a + a.transpose(1, 0, 2)
    assert np.array_equal(unpack_sym(pack_sym(a), 4), a)


def test_l2_inner_rank_mismatch():
    g = build_grid(3, 9)
    f = ScalarField(g, np.ones(g.shape))
    w = OneFormField(g, np.ones((3,) + g.shape))
    with pytest.raises(GridError):
        l2_inner(f, w)


def test_field_file_round_trip(tmp_path):
    g = build_grid(3, 9)
    rng = np.random.default_rng(2)
    data = np.where(g.interior, rng.normal(size=(6,) + g.shape), 0.0)
    f = SymTensor2Field(g, data, rescaled=True)
    path = tmp_path / "h.ahcf"
    write_field(path, f)
    raw = path.read_bytes()
    assert raw[:4] == b"AHCF"
    assert len(raw) == 4 + 4 * 3 + 8 + 4 + 1 + 8 * 6 * 9**3
    back = read_field(path, g)
    assert isinstance(back, SymTensor2Field) and back.rescaled
    assert np.array_equal(back.data, data)
    # components fastest-varying: first node holds all 6 components in a row
    first = np.frombuffer(raw, "<f8", count=6, offset=33)
    assert np.array_equal(first, data[(slice(None), 0, 0, 0)])


def test_field_file_errors(tmp_path):
    g = build_grid(3, 9)
    f = OneFormField(g, np.zeros((3,) + g.shape), rescaled=True)
    path = tmp_path / "xi.ahcf"
    write_field(path, f)
    with pytest.raises(FieldFormatError):
        read_field(path, build_grid(3, 11))
    bad = tmp_path / "bad.ahcf"
    bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FieldFormatError):
        read_field(bad)
    short = tmp_path / "short.ahcf"
    short.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(FieldFormatError):
        read_field(short)


def test_exterior_stored_as_zeros(tmp_path):
    g = build_grid(3, 9)
    path = tmp_path / "g0.ahcf"
    write_field(path, metric_field(g))
    back = read_field(path, g)
    assert np.all(back.data[:, g.mask == EXTERIOR] == 0.0)
    assert not back.rescaled
