"""Christoffel symbols and curvature of a physical metric on the grid.

Index conventions (all arrays carry component axes first):

* ``gamma[k, i, j]`` is the Christoffel symbol with upper index ``k``.
* ``riem[a, b, c, d]`` is the fully covariant Riemann tensor with
  ``R^a_{bcd} = d_c G^a_{db} - d_d G^a_{cb} + G^a_{ce} G^e_{db} - G^a_{de} G^e_{cb}``
  and ``riem[a, b, c, d] = g_ae R^e_{bcd}``.  With this choice the unit sphere
  has ``riem = g_ac g_bd - g_ad g_bc`` and the Ricci tensor is the contraction
  ``ric[b, d] = g^{ac} riem[a, b, c, d]``.

The Riemann action on symmetric tensors, ``(Riem u)_ij = riem[i, k, j, l] u^{kl}``,
uses this array directly.  The sign is pinned by requiring the analytic
linearisation of the constraint residual to agree with its numeric Jacobian.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .chart_fields import GridError, SymTensor2Field, pack_sym, sym_pairs


class MetricError(GridError):
    """The metric is not symmetric positive definite somewhere."""


def _sym_full(n):
    idx = np.zeros((n, n), dtype=int)
    for c, (i, j) in enumerate(sym_pairs(n)):
        idx[i, j] = idx[j, i] = c
    return idx


class MetricField:
    """Physical metric components with cached inverse and volume factor."""

    def __init__(self, field: SymTensor2Field):
        if field.rescaled:
            raise GridError("MetricField needs physical components")
        self.field = field
        self.grid = field.grid
        self.level = field.level
        self.g = field.full()
        self._check_spd()

    @classmethod
    def from_array(cls, grid, g, level=0):
        return cls(SymTensor2Field(grid, g, level=level))

    def _check_spd(self):
        grid = self.grid
        region = grid.level_mask(self.level)
        mats = np.moveaxis(self.g[:, :, region], -1, 0)
        if not np.all(np.isfinite(mats)):
            bad = np.flatnonzero(~np.all(np.isfinite(mats), axis=(1, 2)))[0]
            raise MetricError(f"non-finite metric at node {_node_of(grid, region, bad)}")
        eig = np.linalg.eigvalsh(mats)
        if np.any(eig[:, 0] <= 0):
            bad = int(np.argmin(eig[:, 0]))
            raise MetricError(
                f"metric not positive definite at node {_node_of(grid, region, bad)} "
                f"(smallest eigenvalue {eig[bad, 0]:.3e})")

    @cached_property
    def inv(self):
        g = np.moveaxis(self.g, (0, 1), (-2, -1))
        region = self.grid.level_mask(self.level)
        out = np.full_like(g, np.nan)
        out[region] = np.linalg.inv(g[region])
        return np.moveaxis(out, (-2, -1), (0, 1))

    @cached_property
    def sqrt_det(self):
        g = np.moveaxis(self.g, (0, 1), (-2, -1))
        region = self.grid.level_mask(self.level)
        out = np.full(self.grid.shape, np.nan)
        out[region] = np.sqrt(np.linalg.det(g[region]))
        return out

    @cached_property
    def checksum(self):
        return hashlib.sha1(np.nan_to_num(self.g).tobytes()).hexdigest()

    def raise_both(self, u):
        """``u^{kl}`` from covariant ``u_kl``."""
        return np.einsum("ka...,lb...,ab...->kl...", self.inv, self.inv, u)

    def trace(self, u):
        return np.einsum("ij...,ij...->...", self.inv, u)


def _node_of(grid, region, k):
    flat = np.flatnonzero(region.ravel())[k]
    return tuple(int(i) for i in np.unravel_index(flat, grid.shape))


@dataclass
class ChristoffelField:
    gamma: np.ndarray
    level: int

    def __post_init__(self):
        # symmetric in the lower pair by construction; enforce bitwise
        self.gamma = 0.5 * (self.gamma + np.swapaxes(self.gamma, 1, 2))


@dataclass
class CurvatureBundle:
    riem: np.ndarray
    ric: np.ndarray
    scalar: np.ndarray
    level: int


def metric_derivative(metric: MetricField):
    """``dg[c, i, j] = d_c g_ij`` (conformal weight 2)."""
    grid = metric.grid
    n = grid.n
    packed = metric.field.data
    d = np.stack([grid.diff(packed, a, metric.level, weight=2) for a in range(n)])
    return d[:, _sym_full(n)]


def christoffel(metric: MetricField) -> ChristoffelField:
    dg = metric_derivative(metric)
    # lowered[l, i, j] = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    lowered = 0.5 * (np.einsum("ijl...->lij...", dg)
                     + np.einsum("jil...->lij...", dg)
                     - dg)
    gamma = np.einsum("kl...,lij...->kij...", metric.inv, lowered)
    return ChristoffelField(gamma, metric.level + 1)


def curvature_bundle(metric: MetricField, chris: ChristoffelField) -> CurvatureBundle:
    grid = metric.grid
    n = grid.n
    G = chris.gamma
    level = chris.level
    # dG[c, a, d, b] = d_c G^a_db; Christoffels have conformal weight 1
    flat = G.reshape((n**3,) + grid.shape)
    dG = np.stack([grid.diff(flat, c, level, weight=1) for c in range(n)])
    dG = dG.reshape((n, n, n, n) + grid.shape)
    # R^a_{bcd} = d_c G^a_db - d_d G^a_cb + G^a_ce G^e_db - G^a_de G^e_cb
    term = np.einsum("cadb...->abcd...", dG)
    GG = np.einsum("ace...,edb...->abcd...", G, G)
    Rup = term - np.swapaxes(term, 2, 3) + GG - np.swapaxes(GG, 2, 3)
    del term, GG, dG
    riem = np.einsum("ae...,ebcd...->abcd...", metric.g, Rup)
    ric = np.einsum("abad...->bd...", Rup)
    ric = 0.5 * (ric + np.swapaxes(ric, 0, 1))
    scalar = np.einsum("bd...,bd...->...", metric.inv, ric)
    return CurvatureBundle(riem, ric, scalar, level + 1)


def _is_sym_tail(T, grid):
    rank = T.ndim - grid.n
    return rank >= 2 and np.array_equal(T, np.swapaxes(T, rank - 2, rank - 1),
                                        equal_nan=True)


def diff_components(T, axis, grid, level, weight):
    """Partial derivative of every component of ``T`` along ``axis``.

    When the last two component indices are symmetric only the packed
    upper triangle is differentiated.
    """
    rank = T.ndim - grid.n
    if rank == 0:
        return grid.diff(T[None], axis, level, weight=weight)[0]
    if _is_sym_tail(T, grid):
        n = grid.n
        head = T.shape[: rank - 2]
        lead = T.reshape((-1, n, n) + grid.shape)
        packed = np.concatenate([pack_sym(m) for m in lead])
        d = grid.diff(packed, axis, level, weight=weight)
        npk = n * (n + 1) // 2
        d = d.reshape((-1, npk) + grid.shape)[:, _sym_full(n)]
        return d.reshape(head + (n, n) + grid.shape)
    flat = T.reshape((-1,) + grid.shape)
    return grid.diff(flat, axis, level, weight=weight).reshape(T.shape)


def cov_deriv(T, chris: ChristoffelField, grid, level, rank=None, weight=None):
    """Covariant derivative of a covariant tensor array; derivative index first.

    ``(nabla T)[a, i1..ip] = d_a T_{i1..ip} - sum_m G^l_{a i_m} T_{..l..}``.
    ``level`` is the derivative level of ``T``; the result sits one level
    above ``max(level, chris.level)``.  ``weight`` overrides the conformal
    weight used by the stencil (default: the rank).
    """
    n = grid.n
    rank = T.ndim - grid.n if rank is None else rank
    weight = rank if weight is None else weight
    lvl = max(level, chris.level - 1)
    out = np.stack([diff_components(T, a, grid, lvl, weight) for a in range(n)])
    G = chris.gamma
    letters = "ijklmnop"[:rank]
    for m in range(rank):
        src = letters[:m] + "z" + letters[m + 1:]
        out = out - np.einsum(f"za{letters[m]}...,{src}...->a{letters}...", G, T)
    return out, lvl + 1


def cov_deriv_oneform(omega, chris, grid, level=0):
    """``nabla_i omega_j = d_i omega_j - G^k_ij omega_k``."""
    return cov_deriv(omega, chris, grid, level, rank=1)


def cov_deriv_sym2(u, chris, grid, level=0):
    """``nabla_k u_ij = d_k u_ij - G^l_ki u_lj - G^l_kj u_il``."""
    return cov_deriv(u, chris, grid, level, rank=2)
