"""Beam-search decoding with fusion of ARC node marginals into token scores."""

from dataclasses import dataclass
import math

import numpy as np

from .data import END, START
from .errors import ValidationError


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 2
    max_len: int = 17
    fusion_lambda: float = 0.3
    fusion_epsilon: float = 1e-6

    def validate(self):
        if self.beam_size < 1:
            raise ValidationError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValidationError("max_len must be >= 1")
        if self.fusion_lambda < 0 or not math.isfinite(self.fusion_lambda):
            raise ValidationError("fusion_lambda must be a finite value >= 0")
        if not self.fusion_epsilon > 0:
            raise ValidationError("fusion_epsilon must be positive")


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple       # includes the start token
    score: float
    completed: bool = False

    @property
    def words(self):
        body = self.tokens[1:]
        return body[:-1] if body and body[-1] == END else body


def fuse(emission, attribute_marginals, cfg):
    """Add lambda * ln(eps + m(w)) to every token w that has an ARC marginal."""
    scores = np.array(emission, dtype=float)
    for token, m in attribute_marginals.items():
        if not 0.0 <= m <= 1.0:
            raise ValidationError(f"marginal {m!r} for token {token} outside [0, 1]")
    if cfg.fusion_lambda == 0:
        return scores
    for token, m in attribute_marginals.items():
        scores[token] += cfg.fusion_lambda * math.log(cfg.fusion_epsilon + m)
    return scores


def beam_search(scorer, cfg, batch_scorer=None, start=START, end=END):
    """Ranked completed hypotheses as ``[(tokens, score), ...]``.

    ``scorer`` maps a token prefix (starting with ``start``) to a vector of
    per-token log-scores. ``batch_scorer``, if given, scores a list of
    equal-length prefixes at once. Ranking uses total log-score with no
    length normalization; ties go to the lexicographically smaller sequence.
    """
    cfg.validate()
    live = [Hypothesis((start,), 0.0)]
    done = []
    vocab = None
    for _ in range(cfg.max_len):
        prefixes = [h.tokens for h in live]
        rows = batch_scorer(prefixes) if batch_scorer else [scorer(p) for p in prefixes]
        candidates = []
        for hyp, row in zip(live, rows):
            row = np.asarray(row, dtype=float)
            if vocab is None:
                vocab = row.shape
            if row.ndim != 1 or row.shape != vocab or row.size == 0:
                raise ValidationError(f"scorer returned shape {row.shape}, expected {vocab}")
            for w in np.flatnonzero(row > -np.inf):
                candidates.append((hyp.score + row[w], hyp.tokens + (int(w),)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, tokens in candidates[: cfg.beam_size]:
            if tokens[-1] == end or len(tokens) - 1 == cfg.max_len:
                done.append(Hypothesis(tokens, score, True))
            else:
                live.append(Hypothesis(tokens, score))
        if not live:
            break
    done.sort(key=lambda h: (-h.score, h.tokens))
    return [(h.tokens, h.score) for h in done]


def model_scorer(params, image, token_marginals, cfg):
    """Batch scorer over the captioner with optional ARC fusion."""
    from .convcap import forward_many

    def score(prefixes):
        rows = forward_many(params, image, prefixes)
        return [fuse(r, token_marginals, cfg) for r in rows]

    return score


def decode_image(params, image, token_marginals, cfg):
    """Best caption (word ids, no specials) and its score for one image."""
    ranked = beam_search(None, cfg, batch_scorer=model_scorer(params, image, token_marginals, cfg))
    if not ranked:
        return [], -math.inf
    tokens, score = ranked[0]
    return list(Hypothesis(tokens, score).words), score
