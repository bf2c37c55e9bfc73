import numpy as np
import pytest

from ahcc.constraints import (ConstraintState, ResidualPair, SourceRecipe, make_source,
                              pack, residual_gauged, state_to_physical, zero_source)
from ahcc.solver import (SolveReport, SolverConfig, SolverDivergence, continuation,
                         fgmres, ift_iterate, linear_solve, manufactured_recovery,
                         newton_fd, solve)


@pytest.mark.parametrize("bad", [dict(mode="picard"), dict(tol=0.0), dict(linear_tol=-1.0),
                                 dict(maxiter=0), dict(preconditioner="ilu"),
                                 dict(continuation_steps=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        SolverConfig(**bad)


def test_zero_rhs_gives_zero(grid17):
    z = residual_gauged(ConstraintState.zero(grid17), zero_source(grid17))
    zero = ResidualPair(z.E1.replace(np.zeros_like(z.E1.data)),
                        z.E2.replace(np.zeros_like(z.E2.data)))
    st, info = linear_solve(zero, grid=grid17)
    assert not np.any(pack(st))
    assert info["iterations_xi"] == 0 and info["iterations_h"] == 0


@pytest.mark.parametrize("solver", [ift_iterate, newton_fd])
def test_zero_source_converges_immediately(grid17, solver):
    st, rep = solver(zero_source(grid17))
    assert rep.converged and rep.iterations == 0
    assert len(rep.residual_history) == 1
    assert not np.any(pack(st))


def test_fgmres_dense():
    rng = np.random.default_rng(0)
    A = np.eye(30) * 4 + rng.normal(size=(30, 30)) * 0.3
    b = rng.normal(size=30)
    x, its, rel = fgmres(lambda v: A @ v, b, lambda v: v / 4, rtol=1e-12, maxiter=30)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-11
    assert rel < 1e-11 and its <= 30


def test_manufactured_recovery_small(grid17):
    info = manufactured_recovery(grid17, seed=2)
    assert info["relative_error"] < 1e-8
    assert info["relres_h"] <= 1e-10 and info["relres_xi"] <= 1e-10


def test_small_solve_report(small_solution):
    src, st, rep = small_solution
    assert rep.converged
    assert len(rep.residual_history) == rep.iterations + 1
    res = rep.residuals
    assert all(b < a for a, b in zip(res, res[1:]))
    assert res[-1] <= 1e-10
    for info in rep.linear_iterations:
        assert info["relres_xi"] <= 1e-10 and info["relres_h"] <= 1e-10
    assert 0 < rep.h_norm <= 50 * src.recipe.amplitude
    d = rep.to_dict()
    assert d["iterations"] == rep.iterations and d["converged"] is True


def test_newton_agrees_small(small_solution, grid17):
    src, st, _ = small_solution
    st2, rep2 = newton_fd(src)
    assert rep2.converged
    diff = st2.axpy(-1.0, st)
    region = grid17.interior
    from ahcc.chart_fields import weighted_sup_norm

    assert max(weighted_sup_norm(f, 1.5, region) for f in state_to_physical(diff)) <= 1e-9


def test_divergence_is_an_error_with_history(grid17):
    src = make_source(SourceRecipe(amplitude=10.0), grid17)
    with pytest.raises(SolverDivergence) as info:
        ift_iterate(src)
    rep = info.value.report
    assert isinstance(rep, SolveReport) and not rep.converged
    assert len(rep.residual_history) >= 1
    assert rep.message


def test_continuation_matches_direct(small_solution, grid17):
    src, st, _ = small_solution
    st2, rep2 = continuation(src, steps=2)
    assert rep2.amplitudes == [src.recipe.amplitude / 2, src.recipe.amplitude]
    assert np.max(np.abs(pack(st2) - pack(st))) < 1e-11
    st0, rep0 = continuation(make_source(SourceRecipe(amplitude=0.0), grid17), steps=3)
    assert not np.any(pack(st0))
    with pytest.raises(ValueError):
        continuation(src, steps=0)


def test_solve_is_deterministic(small_solution, grid17):
    src, st, rep = small_solution
    st2, rep2 = solve(src, SolverConfig())
    assert np.array_equal(pack(st2), pack(st))
    a, b = rep.to_dict(), rep2.to_dict()
    a.pop("wall_time")
    b.pop("wall_time")
    assert a == b
