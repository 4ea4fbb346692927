"""Oracle suites run by ``arccap selfcheck``.

Each suite checks a fast path against an independent brute-force route on
small random instances.
"""

import itertools
import time

import numpy as np

from .arcgame import double_oracle, full_matrix_game
from .convcap import ImageFeatures, ModelConfig, grad_check, init_params
from .decode import DecodeConfig, beam_search
from .graphcut import BinaryEnergy, brute_force_minimum, minimize_energy


def random_energy(rng, n, unary=2.0, pair=1.0, density=1.0):
    pairs = [(i, j, rng.uniform(0, pair)) for i in range(n) for j in range(i + 1, n)
             if rng.random() < density]
    return BinaryEnergy(tuple(rng.uniform(-unary, unary, size=n)), tuple(pairs))


def toy_scorer(rng, vocab, sharp=2.0):
    """Random bigram-style scorer: log-probs depend on the last token only."""
    table = rng.normal(scale=sharp, size=(vocab, vocab))
    table -= np.log(np.exp(table).sum(axis=1, keepdims=True))
    return lambda prefix: table[prefix[-1]]


def exhaustive_best(scorer, vocab, max_len, start=1, end=2):
    """Best complete sequence by enumerating every token string.

    A sequence is complete when it ends in ``end`` or has ``max_len`` tokens
    (after the start token). Ties go to the lexicographically smaller one.
    """
    best = None
    for length in range(1, max_len + 1):
        for body in itertools.product(range(vocab), repeat=length):
            if end in body[:-1]:
                continue
            if length < max_len and body[-1] != end:
                continue
            tokens = (start,) + body
            score = sum(scorer(tokens[:k])[tokens[k]] for k in range(1, len(tokens)))
            if best is None or (-score, tokens) < (-best[1], best[0]):
                best = (tokens, score)
    return best


def greedy(scorer, max_len, start=1, end=2):
    tokens, score = (start,), 0.0
    while len(tokens) - 1 < max_len:
        row = np.asarray(scorer(tokens))
        w = int(np.argmax(row))
        tokens, score = tokens + (w,), score + row[w]
        if w == end:
            break
    return tokens, score


def check_cuts(instances=200, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        e = random_energy(rng, int(rng.integers(1, 13)), density=rng.uniform(0.2, 1.0))
        y, v = minimize_energy(e)
        y_bf, v_bf = brute_force_minimum(e)
        if v != v_bf or not np.array_equal(y, y_bf):
            return False
    return True


def check_games(instances=50, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        e = random_energy(rng, int(rng.integers(1, 5)))
        res = double_oracle(e, tol=1e-6)
        ref = full_matrix_game(e)
        if abs(res.value - ref.value) > 1e-6 or res.regret > 1e-6:
            return False
    return True


def toy_model_batch(seed=0, init_scale=0.5):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=12, feat_dim=6, dim=8, attn_dim=4, layers=3, width=3,
                      seed=seed, init_scale=init_scale, use_dropout=False)
    batch = [(ImageFeatures.from_cells(rng.normal(size=(g, 6))), list(rng.integers(4, 12, size=n)))
             for g, n in ((3, 5), (2, 3), (4, 7))]
    return init_params(cfg), batch


def check_gradients(seed=0):
    params, batch = toy_model_batch(seed)
    return grad_check(params, batch, eps=1e-5, coords=100, seed=seed) < 1e-4


def check_beam(instances=50, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(instances):
        vocab, max_len = int(rng.integers(3, 6)), int(rng.integers(1, 5))
        scorer = toy_scorer(rng, vocab)
        wide = beam_search(scorer, DecodeConfig(beam_size=vocab ** max_len, max_len=max_len))
        if wide[0][0] != exhaustive_best(scorer, vocab, max_len)[0]:
            return False
        narrow = beam_search(scorer, DecodeConfig(beam_size=1, max_len=max_len))
        if narrow[0][0] != greedy(scorer, max_len)[0]:
            return False
    return True


SUITES = (
    ("min-cut vs brute force", check_cuts),
    ("double oracle vs full matrix game", check_games),
    ("captioner gradient check", check_gradients),
    ("beam search vs exhaustive / greedy", check_beam),
)


def run_all(stream):
    ok = True
    for name, suite in SUITES:
        t0 = time.perf_counter()
        passed = suite()
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}  ({time.perf_counter() - t0:.1f}s)", file=stream)
    return ok
