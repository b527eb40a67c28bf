import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import sphere_search

from lmdp.errors import ConfigError, DegenerateCalibrationError, EmptyBatchError, NoPreferredDirectionError
from lmdp.nn import PerExampleGradient
from lmdp.reweight import (
    BiasProblem,
    bias_objective,
    calibrate_and_normalize,
    heuristic_weights,
    init_weights,
    lagrange_weights,
    solve_lagrange,
)


def _g(*blocks):
    return PerExampleGradient([np.asarray(b, dtype=np.float64) for b in blocks])


def test_init_weights_hand_example():
    g = _g([3.0, 0.0], [0.0, 4.0])  # layer norms 3, 4; ||G|| = 5 < C
    np.testing.assert_allclose(init_weights([g], 10.0), [0.6, 0.8], atol=1e-15)


def test_init_weights_single_layer_unclipped():
    assert init_weights([_g([0.1, 0.2])], 1.0).tolist() == [1.0]


def test_init_weights_duplicate_examples():
    g = _g([1.0, 2.0], [3.0])
    assert init_weights([g, g], 0.5).tolist() == init_weights([g], 0.5).tolist()


def test_init_weights_zero_example_contributes_zero():
    g = _g([3.0], [4.0])
    z = _g([0.0], [0.0])
    np.testing.assert_allclose(init_weights([g, z], 10.0), [0.3, 0.4], atol=1e-15)
    with pytest.raises(EmptyBatchError):
        init_weights([], 1.0)


def test_calibrate_examples():
    np.testing.assert_allclose(calibrate_and_normalize([0.6, 0.8], [0.5, 0.25], 1),
                               [0.832050, 0.554700], atol=1e-6)
    np.testing.assert_allclose(calibrate_and_normalize([0.5, 0.5], [0.4, 0.2], 2),
                               [0.970143, 0.242536], atol=1e-6)


def test_calibrate_equal_risks_keep_direction():
    raw = np.array([0.2, 0.5, 1.3])
    np.testing.assert_allclose(calibrate_and_normalize(raw, [0.3] * 3, 4), raw / np.linalg.norm(raw), atol=1e-15)


def test_calibrate_errors():
    with pytest.raises(DegenerateCalibrationError):
        calibrate_and_normalize([0.0, 1.0], [0.5, 0.0], 1)
    with pytest.raises(ConfigError):
        calibrate_and_normalize([1.0, 1.0], [0.5, 0.5], 0.5)
    with pytest.raises(ConfigError):
        calibrate_and_normalize([1.0, 1.0], [0.5, 1.5], 1)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), r=st.floats(1.0, 8.0))
def test_heuristic_weights_unit_norm(seed, r):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 6))
    grads = [_g(*[rng.normal(size=3) * rng.uniform(0.01, 5) for _ in range(depth)]) for _ in range(4)]
    w = heuristic_weights(grads, float(rng.uniform(0.1, 3)), rng.uniform(0.05, 1.0, size=depth), r)
    assert abs(np.dot(w, w) - 1.0) <= 1e-10
    assert np.all(w >= 0)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), r1=st.floats(1.0, 6.0), dr=st.floats(0.0, 4.0))
def test_emphasis_monotonicity(seed, r1, dr):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0.1, 2.0, size=4)
    er = rng.uniform(0.05, 1.0, size=4)
    lo, hi = np.argmin(er), np.argmax(er)
    if er[lo] == er[hi]:
        return
    w1 = calibrate_and_normalize(raw, er, r1)
    w2 = calibrate_and_normalize(raw, er, r1 + dr)
    assert w2[lo] / w2[hi] <= w1[lo] / w1[hi] * (1 + 1e-12)


def test_lagrange_single_layer():
    p = BiasProblem([np.array([2.0, 0.0])], [np.array([1.0, 1.0])])  # A = 4, B = 2
    sol = solve_lagrange(p)
    assert sol.weights.tolist() == [1.0]
    assert abs(sol.lam - (p.A[0] - p.B[0])) <= 1e-12


def test_lagrange_symmetric():
    b = 0.7
    p = BiasProblem([np.array([1.0]), np.array([1.0])], [np.array([b]), np.array([b])])
    np.testing.assert_allclose(lagrange_weights(p), [2**-0.5, 2**-0.5], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_lagrange_three_layers_against_sphere_search(seed):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.1, 4.0, size=3)
    B = rng.normal(size=3)
    B[rng.integers(0, 3)] *= -1
    u = [np.array([np.sqrt(a), 0.0]) for a in A]
    f = [np.array([b / np.sqrt(a), rng.normal()]) for a, b in zip(A, B)]
    p = BiasProblem(u, f)
    np.testing.assert_allclose(p.A, A)
    np.testing.assert_allclose(p.B, B)
    const = sum(float(np.dot(x, x)) for x in f)
    best = sphere_search(p.A, p.B, const, 10**6, rng)
    assert bias_objective(p, lagrange_weights(p)) <= best + 1e-6


def _random_problem(rng, depth=None):
    depth = depth or int(rng.integers(1, 5))
    sizes = rng.integers(1, 5, size=depth)
    return BiasProblem([rng.normal(size=s) * rng.uniform(0.1, 3) for s in sizes],
                       [rng.normal(size=s) * rng.uniform(0.1, 3) for s in sizes])


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_lagrange_invariants(seed):
    rng = np.random.default_rng(seed)
    p = _random_problem(rng)
    sol = solve_lagrange(p)
    w = sol.weights
    assert abs(np.dot(w, w) - 1.0) <= 1e-10
    assert sol.residual <= 1e-12
    nz = p.B != 0
    assert np.all(p.A[nz] - sol.lam > 0)
    # stationarity: w_l (A_l - lam) = B_l up to the final renormalisation
    np.testing.assert_allclose(w * (p.A - sol.lam), p.B, rtol=1e-9, atol=1e-12)
    # strictly no worse than every coordinate direction and the heuristic-like uniform vector
    ref = [np.eye(p.depth)[l] * np.sign(p.B[l] or 1.0) for l in range(p.depth)]
    ref.append(np.ones(p.depth) / np.sqrt(p.depth))
    obj = bias_objective(p, w)
    assert all(obj <= bias_objective(p, v) + 1e-12 for v in ref)


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_bisection_bracket_straddles_one(seed):
    rng = np.random.default_rng(seed)
    p = _random_problem(rng)
    nz = p.B != 0
    a_min = p.A[nz].min()

    def h(lam):
        return float(np.sum((p.B[nz] / (p.A[nz] - lam)) ** 2))

    lo = a_min - np.sum(np.abs(p.B)) - 1
    hi = a_min - 1e-12
    assert h(lo) < 1.0
    if np.all(np.abs(p.B[nz]) > 1e-6):
        assert h(hi) > 1.0
    # strictly increasing on the bracket
    grid = np.linspace(lo, a_min - 1e-6, 200)
    vals = [h(x) for x in grid]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_zero_inner_product_layer_with_smallest_A():
    # A = (0.1, 4), B = (0, 1): putting all weight on layer 2 is a stationary point but not the minimum
    p = BiasProblem([np.array([np.sqrt(0.1), 0.0]), np.array([2.0])],
                    [np.array([0.0, 1.0]), np.array([0.5])])
    np.testing.assert_allclose(p.A, [0.1, 4.0])
    np.testing.assert_allclose(p.B, [0.0, 1.0])
    sol = solve_lagrange(p)
    assert sol.hard_case
    best = sphere_search(p.A, p.B, sum(np.dot(x, x) for x in p.f), 10**6, np.random.default_rng(0))
    obj = bias_objective(p, sol.weights)
    assert obj <= best + 1e-9
    assert obj < bias_objective(p, [0.0, 1.0])
    assert abs(np.dot(sol.weights, sol.weights) - 1.0) <= 1e-12


def test_lagrange_needs_a_preferred_direction():
    p = BiasProblem([np.array([1.0, 0.0])], [np.array([0.0, 1.0])])
    with pytest.raises(NoPreferredDirectionError):
        lagrange_weights(p)


def test_bias_objective_examples():
    rng = np.random.default_rng(9)
    u = [rng.normal(size=3), rng.normal(size=2)]
    w = np.array([0.6, -0.8])
    zero = BiasProblem(u, [w[0] * u[0], w[1] * u[1]])
    assert bias_objective(zero, w) <= 1e-30
    only = BiasProblem(u, [np.zeros(3), np.zeros(2)])
    assert abs(bias_objective(only, [1.0, 0.0]) - np.dot(u[0], u[0])) <= 1e-15
    f = [rng.normal(size=3), rng.normal(size=2)]
    p = BiasProblem(u, f)
    want = sum((w[l] * u[l][j] - f[l][j]) ** 2 for l in range(2) for j in range(len(u[l])))
    assert abs(bias_objective(p, w) - want) <= 1e-12


def test_bias_problem_from_gradients_matches_direct_estimate():
    rng = np.random.default_rng(10)
    grads = [_g(rng.normal(size=3) * 2, rng.normal(size=2)) for _ in range(5)]
    C = 1.0
    p = BiasProblem.from_gradients(grads, C)
    for l in range(2):
        u = sum(min(C, g.global_norm) * g.blocks[l] / g.layer_norms[l] for g in grads) / 5
        f = sum(g.blocks[l] for g in grads) / 5
        np.testing.assert_allclose(p.u[l], u, atol=1e-14)
        np.testing.assert_allclose(p.f[l], f, atol=1e-14)
