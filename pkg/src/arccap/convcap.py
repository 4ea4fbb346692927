"""Masked-convolution captioner on dense float64 arrays with hand-written backprop.

Each block is: weight-normalized causal convolution -> gated linear unit ->
attention over image cells -> residual add -> dropout. Every extra beyond
the bare convolution can be switched off through ``ModelConfig`` flags.
"""

from dataclasses import asdict, dataclass, replace
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .container import EmissionLattice
from .data import END, PAD, START
from .errors import NumericError, ValidationError

CLIP_NORM = 5.0


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feat_dim: int
    dim: int = 64
    attn_dim: int = 32
    layers: int = 3
    width: int = 5
    dropout: float = 0.1
    max_len: int = 17
    weight_norm: bool = True
    use_dropout: bool = True
    residual: bool = True
    attention: bool = True
    seed: int = 0
    init_scale: float = 0.05

    def validate(self):
        if self.vocab_size < 1 or self.dim < 1 or self.feat_dim < 1:
            raise ValidationError("vocab_size, dim and feat_dim must be positive")
        if self.width < 1 or self.layers < 0:
            raise ValidationError("kernel width must be >= 1 and layers >= 0")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout rate must be in [0, 1)")


@dataclass(frozen=True)
class ImageFeatures:
    cells: np.ndarray       # G x F
    pooled: np.ndarray      # F

    def __post_init__(self):
        cells = np.atleast_2d(np.asarray(self.cells, dtype=float))
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "pooled", np.asarray(self.pooled, dtype=float))
        if cells.shape[0] < 1:
            raise ValidationError("image needs at least one cell")
        if self.pooled.shape != (cells.shape[1],):
            raise ValidationError("pooled vector must match cell feature dims")
        if not (np.all(np.isfinite(cells)) and np.all(np.isfinite(self.pooled))):
            raise ValidationError("image features must be finite")

    @classmethod
    def from_cells(cls, cells):
        cells = np.atleast_2d(np.asarray(cells, dtype=float))
        return cls(cells, cells.mean(axis=0))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict
    step: int = 0

    def copy(self):
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.step)

    def to_tensors(self):
        meta = {f"meta.{k}": float(v) for k, v in asdict(self.config).items()}
        meta["meta.step"] = float(self.step)
        return {**meta, **self.tensors}

    @classmethod
    def from_tensors(cls, tensors):
        kwargs = {}
        for name in ModelConfig.__dataclass_fields__:
            key = f"meta.{name}"
            if key not in tensors:
                raise ValidationError(f"checkpoint lacks {key}")
            kind = ModelConfig.__dataclass_fields__[name].type
            kwargs[name] = kind(float(tensors[key]))
        config = ModelConfig(**kwargs)
        params = {k: np.array(v) for k, v in tensors.items() if not k.startswith("meta.")}
        return cls(config, params, int(tensors.get("meta.step", 0)))


def init_params(config):
    config.validate()
    rng = np.random.default_rng(config.seed)
    s = config.init_scale
    V, D, F, A, K = config.vocab_size, config.dim, config.feat_dim, config.attn_dim, config.width

    def u(*shape):
        return rng.uniform(-s, s, size=shape)

    t = {"embed": u(V, D), "img_proj": u(F, D)}
    for l in range(config.layers):
        v = u(K, D, 2 * D)
        t[f"conv{l}.v"] = v
        t[f"conv{l}.g"] = np.sqrt((v ** 2).sum(axis=(0, 1)))
        t[f"conv{l}.b"] = np.zeros(2 * D)
        t[f"attn{l}.q"] = u(D, A)
        t[f"attn{l}.k"] = u(F, A)
        t[f"attn{l}.c"] = u(F, D)
    t["out.w"] = u(D, V)
    t["out.b"] = np.zeros(V)
    return ModelParams(config, t)


# -- building blocks ----------------------------------------------------------

def weight_norm(v, g):
    """g * v / ||v||."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise NumericError("weight norm of a zero vector")
    return g * v / norm


def _kernel(v, g):
    # weight norm per output channel of a (K, D, D') kernel
    norm = np.sqrt((v ** 2).sum(axis=(0, 1)))
    if np.any(norm == 0):
        raise NumericError("weight norm of a zero kernel channel")
    return v * (g / norm), norm


def _im2col(h, width):
    B, T, D = h.shape
    padded = np.concatenate([np.zeros((B, width - 1, D)), h], axis=1)
    # (B, T, D, K) -> (B, T, K, D)
    return sliding_window_view(padded, width, axis=1).transpose(0, 1, 3, 2)


def masked_conv(inputs, kernel):
    """Causal convolution: output t sees inputs t-width+1 .. t.

    ``kernel[k]`` multiplies the input at offset ``k - (width - 1)``, so the
    last tap is the current position. Accepts T x D or B x T x D inputs.
    """
    x = np.asarray(inputs, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if kernel.ndim != 3 or kernel.shape[0] < 1 or kernel.shape[1] != x.shape[-1]:
        raise ValidationError(f"kernel shape {kernel.shape} incompatible with input dim {x.shape[-1]}")
    K, D, Dout = kernel.shape
    cols = _im2col(x, K)
    out = cols.reshape(*cols.shape[:2], K * D) @ kernel.reshape(K * D, Dout)
    return out[0] if squeeze else out


def softmax(scores, axis=-1):
    scores = np.asarray(scores, dtype=float)
    z = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def attend(query, features, wq, wk):
    """Scaled dot-product attention of one query over the image cells."""
    query = np.asarray(query, dtype=float)
    if wq.shape[0] != query.shape[0] or wk.shape[0] != features.cells.shape[1] or wq.shape[1] != wk.shape[1]:
        raise ValidationError("attention projection dims are inconsistent")
    scores = (features.cells @ wk) @ (query @ wq) / math.sqrt(wq.shape[1])
    weights = softmax(scores)
    return weights @ features.cells, weights


# -- batched forward / backward -----------------------------------------------

def _batch_images(images):
    G = max(im.cells.shape[0] for im in images)
    F = images[0].cells.shape[1]
    cells = np.zeros((len(images), G, F))
    mask = np.zeros((len(images), G), dtype=bool)
    for b, im in enumerate(images):
        if im.cells.shape[1] != F:
            raise ValidationError("images in a batch have different feature dims")
        cells[b, :len(im.cells)] = im.cells
        mask[b, :len(im.cells)] = True
    pooled = np.stack([im.pooled for im in images])
    return cells, mask, pooled


def _check_tokens(config, X):
    if np.any(X < 0) or np.any(X >= config.vocab_size):
        bad = X[(X < 0) | (X >= config.vocab_size)][0]
        raise ValidationError(f"unknown token id {bad}")


def _forward(params, X, images, train=False, rng=None):
    """Log-probabilities B x T x V for token inputs X (B x T), plus a cache."""
    cfg, p = params.config, params.tensors
    _check_tokens(cfg, X)
    cells, cmask, pooled = _batch_images(images)
    if cells.shape[2] != cfg.feat_dim:
        raise ValidationError(f"image feature dim {cells.shape[2]} != model feat_dim {cfg.feat_dim}")
    D = cfg.dim
    h = p["embed"][X] + (pooled @ p["img_proj"])[:, None, :]
    drop = train and cfg.use_dropout and cfg.dropout > 0
    cache = {"X": X, "cells": cells, "pooled": pooled, "layers": []}
    for l in range(cfg.layers):
        lc = {"h_in": h}
        if cfg.weight_norm:
            W, norm = _kernel(p[f"conv{l}.v"], p[f"conv{l}.g"])
            lc["norm"] = norm
        else:
            W = p[f"conv{l}.v"]
        lc["W"] = W
        cols = _im2col(h, cfg.width)
        a = cols.reshape(*cols.shape[:2], -1) @ W.reshape(-1, 2 * D) + p[f"conv{l}.b"]
        lc["cols"] = cols
        a1, a2 = a[..., :D], a[..., D:]
        sig = 1.0 / (1.0 + np.exp(-a2))
        z = a1 * sig
        lc.update(a1=a1, sig=sig, z=z)
        if cfg.attention:
            scale = 1.0 / math.sqrt(cfg.attn_dim)
            q = z @ p[f"attn{l}.q"]
            k = cells @ p[f"attn{l}.k"]
            s = np.einsum("bta,bga->btg", q, k) * scale
            s = np.where(cmask[:, None, :], s, -np.inf)
            alpha = softmax(s)
            ctx = alpha @ cells
            lc.update(q=q, k=k, alpha=alpha, ctx=ctx, scale=scale)
            z = z + ctx @ p[f"attn{l}.c"]
        u = h + z if cfg.residual else z
        if drop:
            keep = (rng.random(u.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            lc["keep"] = keep
            u = u * keep
        cache["layers"].append(lc)
        h = u
    cache["h_out"] = h
    logits = h @ p["out.w"] + p["out.b"]
    return log_softmax(logits), cache


def _backward(params, cache, dlogits):
    cfg, p = params.config, params.tensors
    D = cfg.dim
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    grads["out.w"] = np.einsum("btd,btv->dv", cache["h_out"], dlogits)
    grads["out.b"] = dlogits.sum(axis=(0, 1))
    dh = dlogits @ p["out.w"].T
    cells = cache["cells"]
    for l in reversed(range(cfg.layers)):
        lc = cache["layers"][l]
        du = dh * lc["keep"] if "keep" in lc else dh
        dz = du
        dh_prev = du.copy() if cfg.residual else np.zeros_like(du)
        dz_pre = dz
        if cfg.attention:
            grads[f"attn{l}.c"] = np.einsum("btf,btd->fd", lc["ctx"], dz)
            dctx = dz @ p[f"attn{l}.c"].T
            alpha = lc["alpha"]
            dalpha = np.einsum("btf,bgf->btg", dctx, cells)
            ds = alpha * (dalpha - (alpha * dalpha).sum(axis=-1, keepdims=True))
            ds = ds * lc["scale"]
            dq = np.einsum("btg,bga->bta", ds, lc["k"])
            dk = np.einsum("btg,bta->bga", ds, lc["q"])
            grads[f"attn{l}.k"] = np.einsum("bgf,bga->fa", cells, dk)
            grads[f"attn{l}.q"] = np.einsum("btd,bta->da", lc["z"], dq)
            dz_pre = dz + dq @ p[f"attn{l}.q"].T
        sig = lc["sig"]
        da = np.concatenate([dz_pre * sig, dz_pre * lc["a1"] * sig * (1.0 - sig)], axis=-1)
        grads[f"conv{l}.b"] = da.sum(axis=(0, 1))
        cols = lc["cols"]
        B, T, K, Din = cols.shape
        W2 = lc["W"].reshape(K * Din, 2 * D)
        dW = (cols.reshape(B * T, K * Din).T @ da.reshape(B * T, 2 * D)).reshape(K, Din, 2 * D)
        if cfg.weight_norm:
            v, g, norm = p[f"conv{l}.v"], p[f"conv{l}.g"], lc["norm"]
            dg = (dW * v).sum(axis=(0, 1)) / norm
            grads[f"conv{l}.g"] = dg
            grads[f"conv{l}.v"] = dW * (g / norm) - v * (g * dg / norm ** 2)
        else:
            grads[f"conv{l}.v"] = dW
        dcols = (da.reshape(B * T, 2 * D) @ W2.T).reshape(B, T, K, Din)
        dpad = np.zeros((B, T + K - 1, Din))
        for k in range(K):
            dpad[:, k:k + T] += dcols[:, :, k]
        dh = dh_prev + dpad[:, K - 1:]
    np.add.at(grads["embed"], cache["X"], dh)
    grads["img_proj"] = cache["pooled"].T @ dh.sum(axis=1)
    return grads


def _teacher_forcing(config, batch):
    """Inputs (start + words), targets (words + end), padded; plus loss mask."""
    seqs = []
    for _, words in batch:
        words = list(words)[: config.max_len - 1]
        seqs.append(([START] + words, words + [END]))
    T = max(len(x) for x, _ in seqs)
    X = np.full((len(batch), T), PAD, dtype=np.int64)
    Y = np.full((len(batch), T), PAD, dtype=np.int64)
    M = np.zeros((len(batch), T))
    for b, (x, y) in enumerate(seqs):
        X[b, :len(x)] = x
        Y[b, :len(y)] = y
        M[b, :len(y)] = 1.0
    return X, Y, M


def loss_and_grads(params, batch, train=False, rng=None, need_grads=True, reduction="caption"):
    """Teacher-forced cross-entropy and its exact gradient.

    ``batch`` is a list of ``(ImageFeatures, word ids)``; word ids exclude the
    start and end tokens. ``reduction="caption"`` sums over positions and
    averages over captions (the training objective); ``"token"`` averages
    over all target tokens.
    """
    if not batch:
        raise ValidationError("batch must not be empty")
    X, Y, M = _teacher_forcing(params.config, batch)
    logp, cache = _forward(params, X, [im for im, _ in batch], train, rng)
    denom = M.sum() if reduction == "token" else float(len(batch))
    picked = np.take_along_axis(logp, Y[..., None], axis=-1)[..., 0]
    loss = float(-(picked * M).sum() / denom)
    if not math.isfinite(loss):
        raise NumericError("non-finite training loss")
    if not need_grads:
        return loss, None
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, Y[..., None], np.take_along_axis(dlogits, Y[..., None], -1) - 1.0, -1)
    dlogits *= (M / denom)[..., None]
    return loss, _backward(params, cache, dlogits)


def token_loss(params, batch):
    """Mean per-token cross-entropy in eval mode."""
    return loss_and_grads(params, batch, need_grads=False, reduction="token")[0]


def train_step(params, batch, lr, rng=None):
    """One clipped gradient-descent step; returns ``(new_params, loss)``.

    The reported loss is the mean per-token cross-entropy of the batch
    (computed in the same dropout pass as the gradient).
    """
    if lr < 0:
        raise ValidationError("learning rate must be non-negative")
    if rng is None:
        rng = np.random.default_rng([params.config.seed, params.step])
    loss, grads = loss_and_grads(params, batch, train=True, rng=rng)
    n_tok = sum(min(len(words), params.config.max_len - 1) + 1 for _, words in batch)
    total = math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    if not math.isfinite(total):
        raise NumericError("non-finite gradient norm")
    scale = lr * min(1.0, CLIP_NORM / total) if total > 0 else lr
    new = {k: v - scale * grads[k] for k, v in params.tensors.items()}
    return ModelParams(params.config, new, params.step + 1), loss * len(batch) / n_tok


def forward(params, image, tokens):
    """Next-token log-probabilities (V) after the prefix ``tokens``."""
    return emission_lattice(params, image, tokens).logp[-1]


def emission_lattice(params, image, tokens):
    """Log-probability rows for every position of the prefix (eval mode)."""
    tokens = list(tokens)
    if not tokens or tokens[0] != START:
        raise ValidationError("token prefix must begin with the start token")
    if len(tokens) > params.config.max_len:
        raise ValidationError(f"prefix length {len(tokens)} exceeds max_len {params.config.max_len}")
    logp, _ = _forward(params, np.array([tokens], dtype=np.int64), [image])
    return EmissionLattice(logp[0])


def forward_many(params, image, prefixes):
    """Next-token log-probabilities for several equal-length prefixes of one image."""
    X = np.array(prefixes, dtype=np.int64)
    logp, _ = _forward(params, X, [image] * len(prefixes))
    return logp[:, -1]


# -- gradient checking --------------------------------------------------------

def finite_difference(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at the array ``x``."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f(x)
        x[idx] = old - eps
        fm = f(x)
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a) + abs(b), floor)


def grad_check(params, batch, eps=1e-5, coords=64, seed=0):
    """Max relative error between analytic and central-difference gradients.

    Checks ``coords`` randomly chosen parameter entries (at least 50), with
    dropout disabled.
    """
    params = ModelParams(replace(params.config, use_dropout=False), params.copy().tensors, params.step)
    _, grads = loss_and_grads(params, batch)
    rng = np.random.default_rng(seed)
    names = sorted(params.tensors)
    sizes = np.array([params.tensors[n].size for n in names])
    picks = rng.choice(int(sizes.sum()), size=min(max(coords, 50), int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in np.sort(picks):
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, i = names[t], int(flat - offsets[t])
        arr = params.tensors[name].reshape(-1)
        old = arr[i]
        arr[i] = old + eps
        fp, _ = loss_and_grads(params, batch, need_grads=False)
        arr[i] = old - eps
        fm, _ = loss_and_grads(params, batch, need_grads=False)
        arr[i] = old
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(grads[name].reshape(-1)[i], numeric))
    return worst
