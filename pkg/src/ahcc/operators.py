"""Linear differential operators over a fixed metric.

Sign conventions: ``laplacian`` is the positive rough Laplacian
``nabla^* nabla = -tr nabla^2``; ``(div u)_i = -nabla^j u_ji``;
``d*w = -nabla^i w_i``; ``(L w)_ij`` is the symmetrised covariant derivative
and ``Lo w = L w + (d*w / n) g`` its trace-free part.

``div`` is discretised in divergence form, ``-(1/sqrt g) d_i(sqrt g u^{ij})``
plus the Christoffel correction, and ``Lo`` differentiates its one-form with
the mirrored conformal weight.  Centered stencils of weight ``w`` and ``-w`` are
exact negative transposes of each other, so on compactly supported fields the
discrete pair satisfies ``<Lo w, u> = <w, div u>`` to rounding.

Each public operator takes an :class:`OperatorContext` and physical fields and
returns a physical field whose ``level`` records how many derivative passes
it went through.  The ``*_a`` helpers work on full component arrays and are
shared with the residual code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chart_fields import (Field, GridError, OneFormField, ScalarField,
                           SymTensor2Field, field_from_full, metric_field)
from .curvature import (ChristoffelField, CurvatureBundle, MetricField,
                        christoffel, cov_deriv, curvature_bundle,
                        diff_components)


@dataclass
class OperatorContext:
    metric: MetricField
    chris: ChristoffelField
    curv: CurvatureBundle | None
    grid: object
    checksum: str

    @classmethod
    def from_metric(cls, metric: MetricField, with_curvature=True):
        chris = christoffel(metric)
        curv = curvature_bundle(metric, chris) if with_curvature else None
        return cls(metric, chris, curv, metric.grid, metric.checksum)

    @property
    def n(self):
        return self.grid.n

    @property
    def g(self):
        return self.metric.g

    @property
    def ginv(self):
        return self.metric.inv

    def verify(self):
        if self.metric.checksum != self.checksum:
            raise GridError("operator context members derive from different metrics")


def background_context(grid):
    return OperatorContext.from_metric(MetricField(metric_field(grid)))


def flat_context(grid):
    eye = np.eye(grid.n).reshape((grid.n, grid.n) + (1,) * grid.n)
    g = np.where(grid.support, eye, np.nan)
    return OperatorContext.from_metric(MetricField.from_array(grid, g))


def _physical(field):
    if field.rescaled:
        raise GridError(f"{type(field).__name__} must carry physical components")
    return field.full(), field.level


# -- array level ----------------------------------------------------------------


def nabla_a(ctx, T, level, weight=None):
    return cov_deriv(T, ctx.chris, ctx.grid, level, weight=weight)


def _div_weight(n):
    # conformal weight of sqrt(g) u^{ij} for an AH 2-tensor
    return n - 2


def laplacian_a(ctx, u, level):
    # divergence form: -(1/sqrt g) d_a(sqrt g U^a) + G^z_{a i_m} U^a_{..z..},
    # U^a = g^{ab} nabla_b u
    grid = ctx.grid
    n = ctx.n
    p = u.ndim - n
    du, l1 = nabla_a(ctx, u, level)
    up = np.einsum("ab...,b...->a...", ctx.ginv, du)
    dens = ctx.metric.sqrt_det * up
    lvl = max(l1, ctx.metric.level)
    w = n + p - 1
    out = -sum(diff_components(dens[a], a, grid, lvl, w) for a in range(n))
    out = out / ctx.metric.sqrt_det
    letters = "ijkl"[:p]
    G = ctx.chris.gamma
    for m in range(p):
        src = letters[:m] + "z" + letters[m + 1:]
        out = out + np.einsum(f"za{letters[m]}...,a{src}...->{letters}...", G, up)
    return out, max(lvl + 1, ctx.chris.level)


def ric_action_a(ctx, u):
    # 1/2 (Ric_ik u^k_j + Ric_jk u^k_i)
    mixed = np.einsum("ka...,aj...->kj...", ctx.ginv, u)
    t = np.einsum("ik...,kj...->ij...", ctx.curv.ric, mixed)
    return 0.5 * (t + np.swapaxes(t, 0, 1))


def riem_action_a(ctx, u):
    up = ctx.metric.raise_both(u)
    return np.einsum("ikjl...,kl...->ij...", ctx.curv.riem, up)


def lichnerowicz_a(ctx, u, level):
    lap, lvl = laplacian_a(ctx, u, level)
    out = lap + 2.0 * (ric_action_a(ctx, u) - riem_action_a(ctx, u))
    return out, max(lvl, ctx.curv.level)


def divergence_sym2_a(ctx, u, level):
    grid = ctx.grid
    up = ctx.metric.raise_both(u)
    dens = ctx.metric.sqrt_det * up
    lvl = max(level, ctx.metric.level)
    w = _div_weight(ctx.n)
    flux = sum(grid.diff(dens[i], i, lvl, weight=w) for i in range(ctx.n))
    # nabla_i u^{ij} = (1/sqrt g) d_i(sqrt g u^{ij}) + G^j_ik u^{ik}
    nab = flux / ctx.metric.sqrt_det + np.einsum("jik...,ik...->j...",
                                                 ctx.chris.gamma, up)
    return -np.einsum("mj...,j...->m...", ctx.g, nab), max(lvl + 1, ctx.chris.level)


def codifferential_a(ctx, w, level):
    dw, lvl = nabla_a(ctx, w, level)
    return -np.einsum("ij...,ij...->...", ctx.ginv, dw), lvl


def killing_sym_a(ctx, w, level):
    dw, lvl = nabla_a(ctx, w, level)
    return 0.5 * (dw + np.swapaxes(dw, 0, 1)), lvl


def conformal_killing_a(ctx, w, level):
    dw, lvl = nabla_a(ctx, w, level, weight=-_div_weight(ctx.n))
    L = 0.5 * (dw + np.swapaxes(dw, 0, 1))
    dstar = -np.einsum("ij...,ij...->...", ctx.ginv, dw)
    return L + dstar / ctx.n * ctx.g, lvl


def trace_a(ctx, u):
    return np.einsum("ij...,ij...->...", ctx.ginv, u)


def gauge_B_a(ctx, h, level):
    div, lvl = divergence_sym2_a(ctx, h, level)
    tr = trace_a(ctx, h)
    tl = max(level, ctx.metric.level)
    dtr = ctx.grid.grad(tr, tl, weight=0)
    return div + 0.5 * dtr, max(lvl, tl + 1)


def vector_laplacian_a(ctx, w, level):
    lap, lvl = laplacian_a(ctx, w, level)
    # (Ric . w)_j = g^{kl} Ric_jl w_k
    ricw = np.einsum("kl...,jl...,k...->j...", ctx.ginv, ctx.curv.ric, w)
    return lap - ricw, max(lvl, ctx.curv.level)


# -- field level ----------------------------------------------------------------


def _wrap(ctx, arr, rank, level):
    return field_from_full(ctx.grid, arr, rank, level=level)


def laplacian(ctx, field: Field) -> Field:
    u, lvl = _physical(field)
    out, lvl = laplacian_a(ctx, u, lvl)
    return _wrap(ctx, out, field.rank, lvl)


def lichnerowicz(ctx, u: SymTensor2Field) -> SymTensor2Field:
    arr, lvl = _physical(u)
    out, lvl = lichnerowicz_a(ctx, arr, lvl)
    return _wrap(ctx, out, 2, lvl)


def divergence_sym2(ctx, u: SymTensor2Field) -> OneFormField:
    arr, lvl = _physical(u)
    out, lvl = divergence_sym2_a(ctx, arr, lvl)
    return _wrap(ctx, out, 1, lvl)


def codifferential(ctx, w: OneFormField) -> ScalarField:
    arr, lvl = _physical(w)
    out, lvl = codifferential_a(ctx, arr, lvl)
    return ScalarField(ctx.grid, out, level=lvl)


def killing_sym(ctx, w: OneFormField) -> SymTensor2Field:
    arr, lvl = _physical(w)
    out, lvl = killing_sym_a(ctx, arr, lvl)
    return _wrap(ctx, out, 2, lvl)


def conformal_killing(ctx, w: OneFormField) -> SymTensor2Field:
    arr, lvl = _physical(w)
    out, lvl = conformal_killing_a(ctx, arr, lvl)
    return _wrap(ctx, out, 2, lvl)


def gauge_B(ctx, h: SymTensor2Field) -> OneFormField:
    arr, lvl = _physical(h)
    out, lvl = gauge_B_a(ctx, arr, lvl)
    return _wrap(ctx, out, 1, lvl)


def vector_laplacian(ctx, w: OneFormField) -> OneFormField:
    arr, lvl = _physical(w)
    out, lvl = vector_laplacian_a(ctx, arr, lvl)
    return _wrap(ctx, out, 1, lvl)


def trace(ctx, u: SymTensor2Field) -> ScalarField:
    arr, lvl = _physical(u)
    return ScalarField(ctx.grid, trace_a(ctx, arr), level=max(lvl, ctx.metric.level))
