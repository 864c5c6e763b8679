import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from indimart.decompose import (
    closed_tail,
    corpus_params,
    best_independent_approx,
    decompose_martingale,
    generate_random_martingale,
    self_consistency_defect,
    stage_decompose,
)
from indimart.errors import DomainError, PreconditionError
from indimart.space import (
    DiscreteLaw,
    Partition,
    WeightedSpace,
    cond_exp,
    conditional_law,
    is_martingale,
    law,
    lift,
    refine,
)
from indimart.verify import check_independence_of_past, run_full_report
from oracles import best_independent_objective


def four_points():
    return WeightedSpace.uniform(4), Partition([0, 0, 1, 1])


# single step


def test_trivial_partition_keeps_xi():
    sp = WeightedSpace(("a", "b", "c"), np.array([0.2, 0.3, 0.5]))
    xi = np.array([1.0, -2.0, 0.8])
    eta, r, bary = best_independent_approx(xi, Partition.trivial(3), sp)
    assert r.is_identity()
    assert np.array_equal(eta[:, 0], xi)
    assert bary.isclose(law(xi, sp))


def test_zero_increment():
    sp, A = four_points()
    eta, r, _ = best_independent_approx(np.zeros(4), A, sp)
    assert np.all(eta == 0)
    step = stage_decompose(np.zeros(4), A, sp)
    assert step.converged and len(step.stages) == 0


def test_worked_example_single_step():
    sp, A = four_points()
    xi = np.array([-1.0, 1.0, -2.0, 2.0])
    eta, r, bary = best_independent_approx(xi, A, sp)
    assert r.is_identity()
    assert bary.isclose(DiscreteLaw([[-1.5], [1.5]], [0.5, 0.5]))
    assert np.allclose(eta[:, 0], [-1.5, 1.5, -1.5, 1.5], atol=1e-15)
    # E[xi | eta = -1.5] = (-1 - 2) / 2
    assert np.mean(xi[eta[:, 0] < 0]) == pytest.approx(-1.5)
    assert self_consistency_defect(xi, eta, sp) <= 1e-15
    assert sp.norm_sq(xi - eta[:, 0]) == pytest.approx(
        best_independent_objective(xi, sp.weights, [np.array([0, 1]), np.array([2, 3])]), abs=1e-3
    )


def test_worked_example_stages():
    sp, A = four_points()
    step = stage_decompose(np.array([-1.0, 1.0, -2.0, 2.0]), A, sp)
    assert len(step.stages) == 2 and step.converged
    assert np.allclose(step.etas[0][:, 0], [-1.5, 1.5, -1.5, 1.5], atol=1e-15)
    assert np.allclose(step.etas[1][:, 0], [0.5, -0.5, -0.5, 0.5], atol=1e-15)
    norms = [s.eta_norm_sq for s in step.stages]
    assert abs(step.xi_norm_sq - 2.5) <= 1e-12
    assert abs(norms[0] - 2.25) <= 1e-12 and abs(norms[1] - 0.25) <= 1e-12


def test_precondition_nonzero_conditional_mean():
    sp, A = four_points()
    with pytest.raises(PreconditionError):
        best_independent_approx(np.array([1.0, 1.0, -2.0, 2.0]), A, sp)


def test_already_independent_is_one_stage():
    sp, A = four_points()
    step = stage_decompose(np.array([-1.0, 1.0, 1.0, -1.0]), A, sp)
    assert len(step.stages) == 1 and step.converged


def test_splitting_realizes_coupling():
    # block laws with different masses force a point to be split
    sp = WeightedSpace(("a", "b", "c", "d", "e"), np.array([0.1, 0.3, 0.2, 0.2, 0.2]))
    A = Partition([0, 0, 1, 1, 1])
    xi = np.array([-3.0, 1.0, -1.0, 0.0, 1.0])
    eta, r, bary = best_independent_approx(xi, A, sp)
    new = refine(sp, r)
    assert new.size > sp.size
    assert check_independence_of_past(eta, lift(A, r), new) <= 1e-12
    for block in lift(A, r).blocks():
        assert conditional_law(eta, block, new).isclose(bary, tol=1e-10)
    assert self_consistency_defect(lift(xi, r), eta, new) <= 1e-12


def test_information_partition_must_refine():
    sp, A = four_points()
    with pytest.raises(DomainError):
        best_independent_approx(np.array([-1.0, 1.0, -2.0, 2.0]), A, sp, info=Partition([0, 1, 1, 0]))


@st.composite
def centered_instances(draw):
    n = draw(st.integers(2, 7))
    raw = np.array(draw(st.lists(st.integers(1, 12), min_size=n, max_size=n)), dtype=float)
    sp = WeightedSpace(tuple(f"q{i}" for i in range(n)), raw / raw.sum())
    labels = draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
    A = Partition(labels)
    v = np.array(draw(st.lists(st.integers(-4, 4), min_size=n, max_size=n)), dtype=float)
    return sp, A, v - cond_exp(v, A, sp)[:, 0]


@settings(max_examples=150, deadline=None)
@given(centered_instances())
def test_best_approximation_properties(inst):
    sp, A, xi = inst
    eta, r, bary = best_independent_approx(xi, A, sp)
    new = refine(sp, r)
    xi_up = lift(xi, r)[:, 0]
    # independent of A, with the barycenter as law on every block
    assert check_independence_of_past(eta, lift(A, r), new) <= 1e-10
    assert law(eta, new).isclose(bary, tol=1e-9)
    # eta = E[xi | eta] and the Pythagorean split that follows
    assert self_consistency_defect(xi_up, eta, new) <= 1e-8
    res = xi_up - eta[:, 0]
    assert abs(sp.norm_sq(xi) - new.norm_sq(eta) - new.norm_sq(res)) <= 1e-9 * (1 + sp.norm_sq(xi))
    # mean zero given A is kept by the residual
    assert np.abs(cond_exp(res, lift(A, r), new)).max() <= 1e-9
    # L1 lower bound for m = 1
    assert np.sqrt(new.norm_sq(eta)) >= sp.l1_norm(xi) / 2 - 1e-8


@settings(max_examples=40, deadline=None)
@given(centered_instances())
def test_best_approximation_matches_lp(inst):
    sp, A, xi = inst
    eta, r, _ = best_independent_approx(xi, A, sp)
    engine = refine(sp, r).norm_sq(lift(xi, r)[:, 0] - eta[:, 0])
    oracle = best_independent_objective(xi, sp.weights, A.blocks())
    assert engine <= oracle + 1e-9
    assert oracle - engine <= 1e-3


# whole martingale


def test_worked_decomposition(example):
    sp, F, Xs = example
    d = decompose_martingale(Xs, F, sp)
    assert d.N == 2 and d.K == 2
    assert [s.n_stages for s in d.steps] == [1, 2]
    assert np.allclose(d.Y[0, 0, :, 0], [1, 1, -1, -1])
    assert np.allclose(d.Y[0, 1, :, 0], [-1.5, 1.5, -1.5, 1.5])
    assert np.allclose(d.Y[1, 0, :, 0], 0)
    assert np.allclose(d.Y[1, 1, :, 0], [0.5, -0.5, -0.5, 0.5])
    assert np.allclose(d.Z[1, 1], d.Y[1, 1])
    assert abs(d.norm_sq(d.X[1]) - 3.5) <= 1e-12
    assert abs(d.norm_sq(d.Z[0, 1]) - 3.25) <= 1e-12
    assert abs(d.norm_sq(d.Z[1, 1]) - 0.25) <= 1e-12
    lhs, rhs = closed_tail(d, 1, 2)
    assert lhs == pytest.approx(2.5) and rhs == pytest.approx(10.0)
    assert closed_tail(d, 2, 1) == (0.0, 0.0)


def test_closed_tail_index_errors(example):
    sp, F, Xs = example
    d = decompose_martingale(Xs, F, sp)
    with pytest.raises(IndexError):
        closed_tail(d, 3, 1)
    with pytest.raises(IndexError):
        closed_tail(d, 0, 0)


def test_zero_martingale():
    sp, F, Xs = generate_random_martingale(3, 2)
    d = decompose_martingale([np.zeros(sp.size)] * 2, F, sp)
    assert d.N == 0
    assert d.norm_table() == []
    assert all(s.converged and s.n_stages == 0 for s in d.steps)
    assert run_full_report(d).passed


def test_not_a_martingale():
    sp, F, Xs = generate_random_martingale(3, 2)
    with pytest.raises(PreconditionError):
        decompose_martingale([Xs[0] + 0.1, Xs[1]], F, sp)


def test_k1_matches_stage_decompose():
    sp, F, Xs = generate_random_martingale(5, 1, branching=3)
    d = decompose_martingale(Xs, F, sp)
    step = stage_decompose(Xs[0], F[0], sp)
    assert d.N == len(step.stages) == 1
    assert np.allclose(d.Y[0, 0], step.etas[0])


def test_truncated_run_carries_residual(example):
    sp, F, Xs = example
    d = decompose_martingale(Xs, F, sp, n_max=1)
    assert d.N == 1
    assert not d.steps[1].converged
    assert d.steps[1].terminal_residual_norm_sq == pytest.approx(0.25)
    assert abs(d.norm_sq(d.X[1]) - d.norm_sq(d.Z[0, 1]) - 0.25) <= 1e-12
    assert run_full_report(d).passed


def test_vector_valued_decomposition():
    sp, F, Xs = generate_random_martingale(11, 2, m=2, branching=2)
    d = decompose_martingale(Xs, F, sp, n_max=4)
    assert d.m == 2
    report = run_full_report(d)
    for name in ("martingale_Z", "independence_of_past", "mutual_independence", "increments", "boundedness"):
        assert report[name].passed, report.table()
    assert report["self_consistency"].note.startswith("reported only")
    assert all(b.approximate for s in d.steps[1:] for b in s.barycenters)


def test_point_budget_stops_step():
    sp, F, Xs = generate_random_martingale(11, 2, m=2, branching=2)
    d = decompose_martingale(Xs, F, sp, max_points=40)
    assert not d.steps[1].converged
    assert d.space.size <= 40 * 4
    assert run_full_report(d).passed


# generator


def test_generator_contract():
    sp, F, Xs = generate_random_martingale(42, 3, 1, 2)
    assert sp.size == 8
    assert is_martingale(Xs, F, sp) <= 1e-10
    sp1, _, X1 = generate_random_martingale(1, 1)
    assert sp1.size == 2 and abs(sp1.mean(X1[0])[0]) <= 1e-15
    again = generate_random_martingale(42, 3, 1, 2)
    assert again[0].ids == sp.ids and np.array_equal(again[0].weights, sp.weights)
    assert all(np.array_equal(a, b) for a, b in zip(again[2], Xs))
    _, _, X2 = generate_random_martingale(4, 2, m=2)
    assert all(X.shape[1] == 2 for X in X2)


@pytest.mark.parametrize("kwargs", [dict(K=0), dict(K=2, m=0), dict(K=2, branching=1), dict(K=2, distribution="cauchy")])
def test_generator_rejects_bad_parameters(kwargs):
    with pytest.raises(ValueError):
        generate_random_martingale(0, **kwargs)


@pytest.mark.parametrize("distribution", ["normal", "uniform", "integer"])
def test_generator_distributions(distribution):
    sp, F, Xs = generate_random_martingale(2, 2, branching=(3, 2), distribution=distribution)
    assert sp.size == 6
    assert is_martingale(Xs, F, sp) <= 1e-10


def test_corpus_parameters_in_range():
    for seed in range(1, 51):
        K, fan = corpus_params(seed)
        assert 1 <= K <= 4 and len(fan) == K
        assert all(b in (2, 3) for b in fan) and np.prod(fan) <= 64
