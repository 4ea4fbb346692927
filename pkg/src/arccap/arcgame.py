"""Adversarial robust cut (ARC) prediction game and its moment-matching learner.

The predictor picks a distribution over labelings, the adversary picks a
worst-case approximation of the labels. The payoff to the adversary is

    E[hamming(y_hat, y_check)] - E_adv[energy(y_check)]

Both best responses are exact: the predictor's decomposes per node, the
adversary's is a min cut on an energy with loss-augmented unaries.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from .errors import ConvergenceError, NumericError, ValidationError
from .graphcut import BinaryEnergy, energy_value, minimize_energy

log = logging.getLogger(__name__)


@dataclass
class MixedStrategy:
    support: list
    probs: np.ndarray

    def __post_init__(self):
        self.support = [np.asarray(y, dtype=np.int8) for y in self.support]
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.support) != len(self.probs) or not self.support:
            raise ValidationError("support and probs must be non-empty and aligned")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValidationError("probs must be a distribution")
        n = len(self.support[0])
        if any(len(y) != n for y in self.support):
            raise ValidationError("support labelings differ in length")
        if len({y.tobytes() for y in self.support}) != len(self.support):
            raise ValidationError("support labelings must be distinct")

    @classmethod
    def pure(cls, y):
        return cls([y], [1.0])


@dataclass
class GameResult:
    predictor: MixedStrategy
    adversary: MixedStrategy
    value: float
    regret: float
    iterations: int = 0


@dataclass
class ArcWeights:
    node_weights: np.ndarray
    edge_weights: np.ndarray
    gap_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        self.node_weights = np.asarray(self.node_weights, dtype=float)
        self.edge_weights = np.asarray(self.edge_weights, dtype=float)
        if not (np.all(np.isfinite(self.node_weights)) and np.all(np.isfinite(self.edge_weights))):
            raise NumericError("ARC weights must be finite")

    def to_tensors(self):
        return {"arc.node_weights": self.node_weights, "arc.edge_weights": self.edge_weights}

    @classmethod
    def from_tensors(cls, tensors):
        try:
            return cls(tensors["arc.node_weights"], tensors["arc.edge_weights"])
        except KeyError as exc:
            raise ValidationError(f"checkpoint lacks tensor {exc.args[0]}") from None


@dataclass
class ArcConfig:
    epochs: int = 50
    eta0: float = 0.1
    tol: float = 1e-6
    max_iter: int = 200
    threads: int = 1


def hamming(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError(f"labelings have different lengths {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


# -- restricted matrix games ------------------------------------------------

def _simplex_game(payoff, pivot_tol=1e-12, max_pivots=None):
    """Solve max_p min_q p^T A q with a dense tableau simplex (Bland's rule).

    Uses the classical reduction: shift A to be strictly positive, then
    maximize sum(y) s.t. A y <= 1, y >= 0. The column mixture is y/sum(y),
    the row mixture comes from the slack reduced costs (the dual solution).
    """
    m, k = payoff.shape
    shift = payoff.min() - 1.0
    a = payoff - shift
    tab = np.zeros((m + 1, k + m + 1))
    tab[:m, :k] = a
    tab[:m, k:k + m] = np.eye(m)
    tab[:m, -1] = 1.0
    tab[m, :k] = -1.0
    basis = list(range(k, k + m))
    max_pivots = max_pivots or 50 * (m + k) + 100
    for _ in range(max_pivots):
        entering = next((j for j in range(k + m) if tab[m, j] < -pivot_tol), None)
        if entering is None:
            break
        col = tab[:m, entering]
        best, leave = math.inf, None
        for i in range(m):
            if col[i] > pivot_tol:
                ratio = tab[i, -1] / col[i]
                if ratio < best - 1e-15 or (abs(ratio - best) <= 1e-15 and basis[i] < basis[leave]):
                    best, leave = ratio, i
        if leave is None:
            raise ConvergenceError("restricted game LP is unbounded")
        tab[leave] /= tab[leave, entering]
        for i in range(m + 1):
            if i != leave and tab[i, entering] != 0.0:
                tab[i] -= tab[i, entering] * tab[leave]
        basis[leave] = entering
    else:
        raise ConvergenceError("simplex pivot budget exhausted")

    y = np.zeros(k)
    for i, b in enumerate(basis):
        if b < k:
            y[b] = max(tab[i, -1], 0.0)
    dual = np.maximum(tab[m, k:k + m], 0.0)
    if y.sum() <= 0 or dual.sum() <= 0:
        raise ConvergenceError("degenerate restricted game solution")
    return dual / dual.sum(), y / y.sum()


def game_regret(payoff, row_mix, col_mix):
    """Value p^T A q and the largest pure-strategy deviation gain."""
    value = float(row_mix @ payoff @ col_mix)
    row_gain = float(np.max(payoff @ col_mix)) - value
    col_gain = value - float(np.min(row_mix @ payoff))
    return value, max(row_gain, col_gain, 0.0)


def solve_matrix_game(payoff, tol=1e-9):
    """Equilibrium of a zero-sum game; the row player maximizes.

    Returns ``(row_mix, col_mix, value)``. Raises ConvergenceError when the
    returned pair is not a ``tol``-equilibrium.
    """
    payoff = np.asarray(payoff, dtype=float)
    if payoff.ndim != 2 or payoff.size == 0:
        raise ValidationError("payoff must be a non-empty matrix")
    if not np.all(np.isfinite(payoff)):
        raise ValidationError("payoff entries must be finite")
    row_mix, col_mix = _simplex_game(payoff)
    value, regret = game_regret(payoff, row_mix, col_mix)
    if regret > tol:
        raise ConvergenceError("matrix game tolerance not reached", regret)
    return row_mix, col_mix, value


# -- best responses ---------------------------------------------------------

def _check_marginals(m, n=None):
    m = np.asarray(m, dtype=float)
    if m.ndim != 1 or (n is not None and len(m) != n):
        raise ValidationError("marginal vector has the wrong shape")
    if np.any(~np.isfinite(m)) or np.any(m < 0) or np.any(m > 1):
        raise ValidationError("marginals must lie in [0, 1]")
    return m


def node_marginals(s):
    m = np.zeros(len(s.support[0]))
    for p, y in zip(s.probs, s.support):
        m += p * y
    return np.clip(m, 0.0, 1.0)


def adversary_best_response(e, predictor_marginals):
    """argmax_y E_pred[hamming(y_hat, y)] - energy(y), by one min cut.

    Expected Hamming is sum_i m_i + y_i (1 - 2 m_i), so the bonus folds into
    the unaries and the pairwise part is untouched.
    """
    m = _check_marginals(predictor_marginals, e.n)
    unary = tuple(u - (1.0 - 2.0 * mi) for u, mi in zip(e.unary, m))
    y, _ = minimize_energy(BinaryEnergy(unary, e.pairwise))
    return y


def predictor_best_response(adversary_marginals):
    m = _check_marginals(adversary_marginals)
    return (m > 0.5).astype(np.int8)


def game_payoff(e, predictor, adversary):
    """Adversary payoff for a pair of pure labelings."""
    return hamming(predictor, adversary) - energy_value(e, adversary)


def _expected_payoff_adv(e, pred_marg, y):
    # E_pred[hamming(., y)] - energy(y), using per-node decomposition
    return float(np.sum(pred_marg) + np.dot(y, 1.0 - 2.0 * pred_marg)) - energy_value(e, y)


def double_oracle(e, tol=1e-6, max_iter=200):
    """Equilibrium of the ARC game by double oracle with exact best responses."""
    if tol <= 0:
        raise ValidationError("tol must be positive")
    e.validate()
    y0, _ = minimize_energy(e)
    preds, advs = [y0], [y0]
    adv_energy = [energy_value(e, y0)]
    regret = math.inf
    for it in range(1, max_iter + 1):
        payoff = np.array(
            [[hamming(p, a) - ea for p in preds] for a, ea in zip(advs, adv_energy)]
        )
        adv_mix, pred_mix, value = solve_matrix_game(payoff, tol=1e-9)
        pred_marg = sum(p * y for p, y in zip(pred_mix, preds))
        adv_marg = sum(p * y for p, y in zip(adv_mix, advs))

        y_adv = adversary_best_response(e, np.clip(pred_marg, 0.0, 1.0))
        adv_gain = _expected_payoff_adv(e, pred_marg, y_adv) - value
        y_pred = predictor_best_response(np.clip(adv_marg, 0.0, 1.0))
        # expected hamming of a fixed prediction against the adversary mixture
        exp_loss = float(np.sum(adv_marg) + np.dot(y_pred, 1.0 - 2.0 * adv_marg))
        pred_gain = value - (exp_loss - float(np.dot(adv_mix, adv_energy)))
        regret = max(adv_gain, pred_gain, 0.0)
        log.debug("double oracle iter %d value %.6g regret %.3g", it, value, regret)
        if regret <= tol:
            return GameResult(
                _mixture(preds, pred_mix), _mixture(advs, adv_mix), value, regret, it
            )
        grew = False
        if adv_gain > tol and not any(np.array_equal(y_adv, a) for a in advs):
            advs.append(y_adv)
            adv_energy.append(energy_value(e, y_adv))
            grew = True
        if pred_gain > tol and not any(np.array_equal(y_pred, p) for p in preds):
            preds.append(y_pred)
            grew = True
        if not grew:
            raise ConvergenceError("best responses already in support but regret above tol", regret)
    raise ConvergenceError(f"double oracle did not converge in {max_iter} iterations", regret)


def _mixture(support, probs):
    # drop numerically-zero atoms and renormalize
    keep = [i for i, p in enumerate(probs) if p > 1e-15]
    p = np.array([probs[i] for i in keep])
    return MixedStrategy([support[i] for i in keep], p / p.sum())


def all_labelings(n):
    return [np.array([(c >> (n - 1 - i)) & 1 for i in range(n)], dtype=np.int8) for c in range(2 ** n)]


def full_matrix_game(e, tol=1e-9):
    """Reference solver: the whole 2^n x 2^n game in one LP. Only for small n."""
    ys = all_labelings(e.n)
    energies = [energy_value(e, y) for y in ys]
    payoff = np.array([[hamming(p, a) - ea for p in ys] for a, ea in zip(ys, energies)])
    adv_mix, pred_mix, value = solve_matrix_game(payoff, tol)
    _, regret = game_regret(payoff, adv_mix, pred_mix)
    return GameResult(_mixture(ys, pred_mix), _mixture(ys, adv_mix), value, regret)


# -- learning ---------------------------------------------------------------

def potentials(weights, graph):
    """Energy induced by the weights on a region graph.

    Node score theta_i = node_weights . f_i rewards label 1, so the canonical
    unary cost is -theta_i. Agreement scores become disagreement penalties,
    clamped at zero to keep the energy submodular.
    """
    theta = graph.node_features @ weights.node_weights
    pairs = []
    if len(graph.edges):
        agree = graph.edge_features @ weights.edge_weights
        pairs = [(i, j, max(0.0, float(w))) for (i, j), w in zip(graph.edges, agree)]
    return BinaryEnergy(tuple(-theta), tuple(pairs))


def joint_features(graph, y):
    y = np.asarray(y, dtype=float)
    node = graph.node_features.T @ y
    if len(graph.edges):
        agree = np.array([1.0 if y[i] == y[j] else 0.0 for i, j in graph.edges])
        edge = graph.edge_features.T @ agree
    else:
        edge = np.zeros(graph.edge_features.shape[1])
    return np.concatenate([node, edge])


def expected_features(graph, strategy):
    return sum(p * joint_features(graph, y) for p, y in zip(strategy.probs, strategy.support))


def train_weights(examples, hyper=None, init=None, game_solver=None):
    """Moment-matching subgradient descent on the ARC objective.

    ``examples`` is a list of ``(RegionGraph, gold labeling)``. Each epoch
    takes one step w <- w - eta_t (E_adv[phi] - phi_gold) averaged over
    examples, eta_t = eta0 / sqrt(t). The average of the iterates is
    returned; per-epoch feature-matching gaps are kept on ``gap_history``.
    """
    hyper = hyper or ArcConfig()
    if not examples:
        raise ValidationError("no training examples")
    fdim = examples[0][0].node_features.shape[1]
    gdim = examples[0][0].edge_features.shape[1]
    for k, (g, y) in enumerate(examples):
        if g.node_features.shape[1] != fdim or g.edge_features.shape[1] != gdim:
            raise ValidationError(f"example {k} has inconsistent feature dimensions")
        if len(y) != g.n:
            raise ValidationError(f"example {k} gold labeling length {len(y)} != {g.n} regions")
    if init is None:
        w = np.zeros(fdim + gdim)
    else:
        w = np.concatenate([init.node_weights, init.edge_weights]).astype(float)
        if w.shape != (fdim + gdim,):
            raise ValidationError("initial weights do not match feature dimensions")
    if game_solver is None:
        def game_solver(e):
            return double_oracle(e, hyper.tol, hyper.max_iter)

    gold = [joint_features(g, y) for g, y in examples]
    avg = np.zeros_like(w)
    gaps = []

    def expectation(graph):
        current = ArcWeights(w[:fdim], w[fdim:])
        result = game_solver(potentials(current, graph))
        return expected_features(graph, result.adversary)

    pool = ThreadPoolExecutor(hyper.threads) if hyper.threads > 1 else None
    try:
        for t in range(1, hyper.epochs + 1):
            graphs = [g for g, _ in examples]
            expected = list(pool.map(expectation, graphs)) if pool else [expectation(g) for g in graphs]
            grad = np.zeros_like(w)
            for ex, go in zip(expected, gold):
                grad += ex - go
            grad /= len(examples)
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite subgradient at epoch {t}")
            gap = float(np.linalg.norm(grad))
            gaps.append(gap)
            log.info("arc epoch %d feature gap %.6f", t, gap)
            w = w - hyper.eta0 / math.sqrt(t) * grad
            avg += (w - avg) / t
    finally:
        if pool:
            pool.shutdown()
    if hyper.epochs == 0:
        avg = w
    return ArcWeights(avg[:fdim], avg[fdim:], tuple(gaps))


def predict_marginals(weights, graph, tol=1e-6, max_iter=200):
    """Node marginals of the predictor's equilibrium strategy on a graph."""
    result = double_oracle(potentials(weights, graph), tol, max_iter)
    return node_marginals(result.predictor)
