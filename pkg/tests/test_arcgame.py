import numpy as np
import pytest
from scipy.optimize import linprog

from arccap.arcgame import (
    ArcConfig,
    ArcWeights,
    MixedStrategy,
    adversary_best_response,
    all_labelings,
    double_oracle,
    full_matrix_game,
    game_regret,
    hamming,
    joint_features,
    node_marginals,
    potentials,
    predictor_best_response,
    solve_matrix_game,
    train_weights,
)
from arccap.data import Region, RegionGraph, build_region_graph
from arccap.errors import ConvergenceError, ValidationError
from arccap.graphcut import BinaryEnergy, energy_value, minimize_energy
from arccap.selfcheck import random_energy


def lp_value(payoff):
    """Game value by scipy's LP solver, independent of the in-house simplex."""
    m, k = payoff.shape
    # variables: row mix (m), value v; maximize v s.t. p^T A >= v
    c = np.zeros(m + 1)
    c[-1] = -1.0
    a_ub = np.hstack([-payoff.T, np.ones((k, 1))])
    a_eq = np.concatenate([np.ones(m), [0.0]])[None]
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(k), A_eq=a_eq, b_eq=[1.0],
                  bounds=[(0, None)] * m + [(None, None)], method="highs")
    return res.x[-1]


def test_hamming():
    assert hamming([0, 1, 1], [1, 1, 0]) == 2
    assert hamming([1, 0, 1], [1, 0, 1]) == 0
    assert hamming([0] * 5, [1] * 5) == 5
    with pytest.raises(ValidationError):
        hamming([0, 1], [0])


def test_matrix_game_examples():
    row, col, v = solve_matrix_game([[1.0]])
    assert v == pytest.approx(1.0) and list(row) == [1.0] and list(col) == [1.0]

    row, col, v = solve_matrix_game([[1, -1], [-1, 1]])
    assert v == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(row, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(col, [0.5, 0.5], atol=1e-12)

    # closed form: equalize 3p = p + 2(1-p) and 3q + (1-q) = 2(1-q)
    row, col, v = solve_matrix_game([[3, 1], [0, 2]])
    assert v == pytest.approx(1.5, abs=1e-12)
    np.testing.assert_allclose(row, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(col, [0.25, 0.75], atol=1e-12)


def test_matrix_game_random_against_lp():
    rng = np.random.default_rng(0)
    for _ in range(100):
        m, k = rng.integers(1, 9, size=2)
        payoff = rng.normal(size=(m, k))
        if rng.random() < 0.3:
            payoff = np.round(payoff)  # degenerate games with ties
        row, col, v = solve_matrix_game(payoff, tol=1e-9)
        value, regret = game_regret(payoff, row, col)
        assert regret <= 1e-9
        assert abs(v - lp_value(payoff)) <= 1e-8
        # value lies between the maximin of the row mix and minimax of the column mix
        assert (row @ payoff).min() - 1e-9 <= v <= (payoff @ col).max() + 1e-9


def test_matrix_game_rejects_bad_input():
    with pytest.raises(ValidationError):
        solve_matrix_game(np.zeros((0, 2)))
    with pytest.raises(ValidationError):
        solve_matrix_game([[np.nan]])


def test_mixed_strategy_validation():
    with pytest.raises(ValidationError):
        MixedStrategy([[0, 1], [0, 1]], [0.5, 0.5])
    with pytest.raises(ValidationError):
        MixedStrategy([[0, 1], [1, 1]], [0.5, 0.6])
    with pytest.raises(ValidationError):
        MixedStrategy([[0, 1], [1]], [0.5, 0.5])


def test_node_marginals():
    s = MixedStrategy([[1, 0], [1, 1]], [0.25, 0.75])
    np.testing.assert_allclose(node_marginals(s), [1.0, 0.75])
    np.testing.assert_array_equal(node_marginals(MixedStrategy.pure([0, 1, 1])), [0.0, 1.0, 1.0])
    ys = all_labelings(4)
    np.testing.assert_allclose(node_marginals(MixedStrategy(ys, np.full(16, 1 / 16))), 0.5)


def test_node_marginals_linear():
    rng = np.random.default_rng(1)
    ys = all_labelings(3)
    p, q = rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(8))
    mix = 0.3 * p + 0.7 * q
    lhs = node_marginals(MixedStrategy(ys, mix))
    rhs = 0.3 * node_marginals(MixedStrategy(ys, p)) + 0.7 * node_marginals(MixedStrategy(ys, q))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    assert np.all((lhs >= 0) & (lhs <= 1))


def test_adversary_uniform_marginals_is_map():
    rng = np.random.default_rng(2)
    for _ in range(20):
        e = random_energy(rng, 6)
        y, _ = minimize_energy(e)
        np.testing.assert_array_equal(adversary_best_response(e, np.full(6, 0.5)), y)


def test_adversary_loss_bonus_vs_unary():
    e = BinaryEnergy((10.0,) * 4)
    np.testing.assert_array_equal(adversary_best_response(e, np.zeros(4)), [0, 0, 0, 0])
    e = BinaryEnergy((0.5,) * 4)
    np.testing.assert_array_equal(adversary_best_response(e, np.zeros(4)), [1, 1, 1, 1])


def test_adversary_matches_exhaustive():
    rng = np.random.default_rng(3)
    for _ in range(120):
        n = int(rng.integers(1, 11))
        e = random_energy(rng, n, density=rng.uniform(0.2, 1))
        # predictor as an explicit mixture; expectations taken over its atoms
        support = [rng.integers(0, 2, size=n) for _ in range(3)]
        probs = rng.dirichlet(np.ones(3))
        marg = sum(p * y for p, y in zip(probs, support))

        def objective(y):
            return sum(p * hamming(s, y) for p, s in zip(probs, support)) - energy_value(e, y)

        best = max(objective(y) for y in all_labelings(n))
        got = adversary_best_response(e, np.clip(marg, 0, 1))
        assert objective(got) == pytest.approx(best, abs=1e-9)


def test_predictor_best_response():
    np.testing.assert_array_equal(predictor_best_response([0.8, 0.2]), [1, 0])
    np.testing.assert_array_equal(predictor_best_response([0.5, 0.5]), [0, 0])
    with pytest.raises(ValidationError):
        predictor_best_response([1.2])
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = int(rng.integers(1, 9))
        support = [rng.integers(0, 2, size=n) for _ in range(4)]
        probs = rng.dirichlet(np.ones(4))
        marg = sum(p * y for p, y in zip(probs, support))

        def loss(yhat):
            return sum(p * hamming(yhat, s) for p, s in zip(probs, support))

        best = min(loss(y) for y in all_labelings(n))
        assert loss(predictor_best_response(np.clip(marg, 0, 1))) == pytest.approx(best, abs=1e-12)


def test_double_oracle_dominant_labeling():
    e = BinaryEnergy((-5.0, 5.0), ((0, 1, 0.1),))
    res = double_oracle(e)
    ref = full_matrix_game(e)
    assert res.regret <= 1e-12
    assert len(res.predictor.support) == 1 and len(res.adversary.support) == 1
    np.testing.assert_array_equal(res.predictor.support[0], [1, 0])
    np.testing.assert_array_equal(res.adversary.support[0], [1, 0])
    assert res.value == pytest.approx(ref.value, abs=1e-9)


def test_double_oracle_single_node():
    # payoff [[0, 1], [1, 0]]: value 1/2
    res = double_oracle(BinaryEnergy((0.0,)))
    assert res.value == pytest.approx(0.5, abs=1e-9)


def test_double_oracle_against_full_matrix():
    rng = np.random.default_rng(5)
    for _ in range(40):
        n = int(rng.integers(1, 5))
        e = random_energy(rng, n)
        res = double_oracle(e, tol=1e-6)
        payoff = np.array([[hamming(p, a) - energy_value(e, a) for p in all_labelings(n)]
                           for a in all_labelings(n)])
        assert res.regret <= 1e-6
        assert abs(res.value - lp_value(payoff)) <= 1e-6


def test_double_oracle_relabeling_invariance():
    rng = np.random.default_rng(6)
    for _ in range(20):
        n = 4
        e = random_energy(rng, n)
        perm = rng.permutation(n)
        inv = np.argsort(perm)
        unary = tuple(e.unary[perm[i]] for i in range(n))
        pairs = tuple((min(inv[i], inv[j]), max(inv[i], inv[j]), w) for i, j, w in e.pairwise)
        e2 = BinaryEnergy(unary, pairs)
        assert double_oracle(e2).value == pytest.approx(double_oracle(e).value, abs=1e-6)


def test_double_oracle_iteration_budget():
    e = random_energy(np.random.default_rng(7), 8, pair=0.05)
    with pytest.raises(ConvergenceError):
        double_oracle(e, tol=1e-6, max_iter=1)


def _graph(node_features, edge_features=None):
    regions = [Region((0.0, 0.0, 1.0, 1.0), np.asarray(f, dtype=float)) for f in node_features]
    n = len(regions)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if edge_features is None:
        edge_features = np.zeros((len(edges), 2))
    return RegionGraph(regions, edges, np.asarray(edge_features, dtype=float))


def test_potentials_signs_and_clamp():
    g = _graph([[1.0], [-2.0]], [[1.0, 0.0]])
    e = potentials(ArcWeights([0.5], [-3.0, 0.0]), g)
    assert e.unary == (-0.5, 1.0)
    assert e.pairwise == ((0, 1, 0.0),)
    e = potentials(ArcWeights([0.5], [2.0, 0.0]), g)
    assert e.pairwise == ((0, 1, 2.0),)


def test_joint_features():
    g = _graph([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]], [[1, 0], [0, 1], [2, 2]])
    # only pair (0, 2) agrees
    np.testing.assert_allclose(joint_features(g, [1, 0, 1]), [2.0, 1.0, 0.0, 1.0])


def test_train_zero_features_unchanged():
    g = _graph(np.zeros((3, 2)))
    init = ArcWeights([0.3, -0.2], [0.1, 0.4])
    w = train_weights([(g, np.array([1, 0, 1]))], ArcConfig(epochs=4), init=init)
    np.testing.assert_array_equal(w.node_weights, init.node_weights)
    np.testing.assert_array_equal(w.edge_weights, init.edge_weights)


def test_train_zero_rate_unchanged():
    g = build_region_graph([{"box": [0, 0, 4, 4], "features": [1, 2]},
                            {"box": [2, 2, 4, 4], "features": [1, -1]}])
    init = ArcWeights([0.3, -0.2], [0.1, 0.4])
    w = train_weights([(g, np.array([1, 0]))], ArcConfig(epochs=3, eta0=0.0), init=init)
    np.testing.assert_array_equal(w.node_weights, init.node_weights)
    np.testing.assert_array_equal(w.edge_weights, init.edge_weights)


def test_train_gap_decreases_separable():
    # five isolated nodes; each epoch pushes one more node past the pure threshold
    s = [2.8, -1.9, 1.4, -1.3, 1.1]
    g = _graph([[v] for v in s])
    gold = np.array([1, 0, 1, 0, 1])
    w = train_weights([(g, gold)], ArcConfig(epochs=5), game_solver=full_matrix_game)
    gaps = w.gap_history
    assert len(gaps) == 5
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    np.testing.assert_allclose(gaps, [4.25, 2.85, 1.9, 1.2, 0.55], atol=1e-6)
    assert w.node_weights[0] > 0


def test_train_validates_dimensions():
    g1 = _graph([[1.0, 0.0], [0.0, 1.0]])
    g2 = _graph([[1.0], [0.0]])
    with pytest.raises(ValidationError):
        train_weights([(g1, np.array([1, 0])), (g2, np.array([1, 0]))])
    with pytest.raises(ValidationError):
        train_weights([(g1, np.array([1, 0, 1]))])


def test_train_threads_deterministic():
    rng = np.random.default_rng(8)
    examples = []
    for _ in range(6):
        regions = [{"box": list(rng.uniform(0, 50, size=2)) + [10, 10], "features": list(rng.normal(size=3))}
                   for _ in range(3)]
        examples.append((build_region_graph(regions), rng.integers(0, 2, size=3)))
    a = train_weights(examples, ArcConfig(epochs=4, threads=1))
    b = train_weights(examples, ArcConfig(epochs=4, threads=3))
    assert a.node_weights.tobytes() == b.node_weights.tobytes()
    assert a.edge_weights.tobytes() == b.edge_weights.tobytes()
