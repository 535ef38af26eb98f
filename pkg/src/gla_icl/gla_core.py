"""Gated linear attention forward passes for single prompts and prompt batches.

Token convention: a prompt is ``Z`` with tokens ``z_i = [x_i; y_i]`` as columns
(single-prompt API) or as rows of a ``(B, n+1, d+1)`` array (batch API). The
query token carries a zero label.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .task_gen import ConfigError, Prompt, PromptBatch


@dataclass(frozen=True, eq=False)
class GlaParams:
    """Merged-key/query parameterisation: ``o_i = W_V (sum_j lam^{i-j} z_j z_j^T) W_KQ z_i``."""

    w_v: np.ndarray
    w_kq: np.ndarray
    lam: float

    def __post_init__(self):
        w_v = np.array(self.w_v, dtype=float)
        w_kq = np.array(self.w_kq, dtype=float)
        if w_v.ndim != 2 or w_v.shape[0] != w_v.shape[1] or w_v.shape != w_kq.shape:
            raise ConfigError(f"W_V {w_v.shape} and W_KQ {w_kq.shape} must be equal square matrices")
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError(f"lam must lie in (0, 1], got {self.lam}")
        object.__setattr__(self, "w_v", w_v)
        object.__setattr__(self, "w_kq", w_kq)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def d(self) -> int:
        return self.w_v.shape[0] - 1

    @classmethod
    def zeros(cls, d: int, lam: float) -> "GlaParams":
        return cls(np.zeros((d + 1, d + 1)), np.zeros((d + 1, d + 1)), lam)

    @classmethod
    def gaussian(cls, d: int, lam: float, rng: np.random.Generator, scale: float = 1.0) -> "GlaParams":
        """Entries i.i.d. ``N(0, scale^2 / (d+1))``."""
        s = scale / np.sqrt(d + 1)
        return cls(s * rng.standard_normal((d + 1, d + 1)), s * rng.standard_normal((d + 1, d + 1)), lam)

    def value_row(self) -> np.ndarray:
        """Last row of W_V, the only part of W_V that reaches the prediction."""
        return self.w_v[-1]

    def key_block(self) -> np.ndarray:
        """First d columns of W_KQ, the only part of W_KQ that reaches the prediction."""
        return self.w_kq[:, :-1]


@dataclass(frozen=True, eq=False)
class ReducedParams:
    u11: np.ndarray
    u_neg1: float

    def __post_init__(self):
        u11 = np.array(self.u11, dtype=float)
        if u11.ndim != 2 or u11.shape[0] != u11.shape[1]:
            raise ConfigError(f"u11 must be square, got {u11.shape}")
        if not (np.all(np.isfinite(u11)) and np.isfinite(self.u_neg1)):
            raise ConfigError("reduced parameters must be finite")
        object.__setattr__(self, "u11", u11)
        object.__setattr__(self, "u_neg1", float(self.u_neg1))

    @property
    def d(self) -> int:
        return self.u11.shape[0]

    def product(self) -> np.ndarray:
        return self.u_neg1 * self.u11

    def balancedness(self) -> float:
        """``u^2 - ||U11||_F^2``; conserved by gradient flow."""
        return self.u_neg1 ** 2 - float(np.sum(self.u11 ** 2))

    def to_vector(self) -> np.ndarray:
        return np.append(self.u11.ravel(), self.u_neg1)

    @classmethod
    def from_vector(cls, vec: np.ndarray, d: int) -> "ReducedParams":
        return cls(vec[: d * d].reshape(d, d), vec[-1])


def embed(rp: ReducedParams, lam: float) -> GlaParams:
    """Place ``u_neg1`` at the bottom-right of W_V and ``U11`` at the top-left of W_KQ."""
    d = rp.d
    w_v = np.zeros((d + 1, d + 1))
    w_kq = np.zeros((d + 1, d + 1))
    w_v[d, d] = rp.u_neg1
    w_kq[:d, :d] = rp.u11
    return GlaParams(w_v, w_kq, lam)


def _check_dims(d: int, prompt: Prompt):
    if prompt.d != d:
        raise ConfigError(f"parameters are for d={d} but prompt has d={prompt.d}")


def _scan_tokens(params: GlaParams, rows: np.ndarray) -> np.ndarray:
    """Recurrent scan over token rows ``(B, T, d+1)``; returns outputs ``(B, T, d+1)``."""
    rows = np.ascontiguousarray(rows, dtype=float)
    values = np.ascontiguousarray(rows @ params.w_v.T)
    queries = np.ascontiguousarray(rows @ params.w_kq.T)
    return kernels.gla_scan(values, rows, queries, params.lam)


def forward_scan(params: GlaParams, prompt: Prompt) -> np.ndarray:
    """Outputs ``o_1..o_{n+1}`` as rows of an ``(n+1, d+1)`` array."""
    _check_dims(params.d, prompt)
    return _scan_tokens(params, prompt.tokens.T[None])[0]


def predict(params: GlaParams, prompt: Prompt) -> float:
    return float(forward_scan(params, prompt)[-1, -1])


def decay_weights(lam: float, length: int) -> np.ndarray:
    """``lam^{length-1}, ..., lam, 1``: the weight of each position as seen from the last one."""
    return np.exp(np.arange(length - 1, -1, -1) * np.log(lam))


def predict_unrolled(params: GlaParams, prompt: Prompt) -> float:
    """The prediction from the unrolled decayed Gram matrix; a debug path for the scan."""
    _check_dims(params.d, prompt)
    z = prompt.tokens
    gram = (z * decay_weights(params.lam, z.shape[1])) @ z.T
    return float(params.value_row() @ gram @ params.key_block() @ z[:-1, -1])


def predict_reduced(rp: ReducedParams, prompt: Prompt, lam: float) -> float:
    _check_dims(rp.d, prompt)
    x, y = prompt.inputs[:, :-1], prompt.labels
    weighted = x @ (y * decay_weights(lam, prompt.n + 1)[:-1])
    return float(rp.u_neg1 * weighted @ rp.u11 @ prompt.inputs[:, -1])


def quadratic_form_matrix(prompt: Prompt, lam: float) -> np.ndarray:
    """``H = X kron G / 2`` acting on ``vec(U)`` (column-major)."""
    z = prompt.tokens
    d = prompt.d
    gram = (z * decay_weights(lam, z.shape[1])) @ z.T
    xmat = np.zeros((d + 1, d + 1))
    xmat[:d, d] = z[:d, -1]
    xmat[d, :d] = z[:d, -1]
    return 0.5 * np.kron(xmat, gram)


def quadratic_form_prediction(rp: ReducedParams, prompt: Prompt, lam: float) -> float:
    _check_dims(rp.d, prompt)
    d = rp.d
    full = np.zeros((d + 1, d + 1))
    full[:d, :d] = rp.u11
    full[d, d] = rp.u_neg1
    return quadratic_form_general(full, prompt, lam)


def quadratic_form_general(full_u: np.ndarray, prompt: Prompt, lam: float) -> float:
    """``vec(U)^T H vec(U)`` for an arbitrary ``(d+1)x(d+1)`` block matrix ``U``."""
    u = np.asarray(full_u, dtype=float).ravel(order="F")
    return float(u @ quadratic_form_matrix(prompt, lam) @ u)


# batch API, used by training and Monte Carlo


def reduced_features(batch: PromptBatch, lam: float) -> np.ndarray:
    """``r_b = sum_{i<=n} lam^{n+1-i} y_i x_i`` for each prompt, shape ``(B, d)``."""
    w = decay_weights(lam, batch.x.shape[1])[:-1]
    return np.einsum("bi,bij->bj", batch.context_y * w, batch.context_x)


def predict_reduced_batch(rp: ReducedParams, batch: PromptBatch, lam: float,
                          features: np.ndarray | None = None) -> np.ndarray:
    r = reduced_features(batch, lam) if features is None else features
    return rp.u_neg1 * np.einsum("bi,ij,bj->b", r, rp.u11, batch.query_x)


def _bilinear_terms(params: GlaParams, x: np.ndarray, y: np.ndarray):
    """Per-token value and key scores ``a_t = v . z_t``, ``b_t = z_t . (K x_q)``; ``y`` has a zero query slot."""
    d = params.d
    v = params.value_row()
    kq = params.key_block() @ x[:, -1].T  # (d+1, B)
    a = np.matmul(x, v[:d]) + v[d] * y
    b = np.matmul(x, kq[:d].T[:, :, None])[..., 0] + kq[d][:, None] * y
    return a, b


def _split_tokens(tokens: np.ndarray):
    return tokens[..., :-1], tokens[..., -1]


def predict_batch(params: GlaParams, tokens: np.ndarray) -> np.ndarray:
    """Prediction per prompt for token rows ``(B, n+1, d+1)``, via the bilinear unrolled form."""
    a, b = _bilinear_terms(params, *_split_tokens(tokens))
    return (a * b) @ decay_weights(params.lam, tokens.shape[1])


def predict_xy_with_grad(params: GlaParams, x: np.ndarray, y: np.ndarray):
    """As :func:`predict_batch_with_grad` on inputs ``x`` (B, T, d) and labels ``y`` (B, T), query slot zero."""
    w = decay_weights(params.lam, x.shape[1])
    a, b = _bilinear_terms(params, x, y)
    yhat = (a * b) @ w
    bw, aw = b * w, a * w
    dv = np.concatenate([np.matmul(bw[:, None, :], x)[:, 0], np.einsum("bt,bt->b", bw, y)[:, None]], axis=1)
    dk_left = np.concatenate([np.matmul(aw[:, None, :], x)[:, 0], np.einsum("bt,bt->b", aw, y)[:, None]], axis=1)
    return yhat, dv, dk_left


def predict_batch_with_grad(params: GlaParams, tokens: np.ndarray):
    """Predictions plus the pieces of their gradient with respect to the trainable blocks.

    Returns ``(yhat (B,), dv (B, d+1), dk_left (B, d+1))``; the gradient of
    ``yhat_b`` with respect to the key block is ``outer(dk_left_b, x_query_b)``.
    """
    return predict_xy_with_grad(params, *_split_tokens(tokens))


# multilayer stack


def _layer_matrix_form(params: GlaParams, z: np.ndarray):
    """One causal layer in matrix form on rows ``(B, T, p)``; returns output and caches."""
    t = z.shape[1]
    idx = np.arange(t)
    mask = np.where(idx[:, None] >= idx[None, :], params.lam ** np.abs(idx[:, None] - idx[None, :]), 0.0)
    scores = np.einsum("bip,bjp->bij", z, z @ params.w_kq)  # z_i^T W_KQ^T z_j
    attn = mask * scores
    mixed = attn @ z
    return mixed @ params.w_v.T, (mask, attn, mixed)


def _validate_stack(layers: Sequence[GlaParams], d: int):
    if not layers:
        raise ConfigError("a stack needs at least one layer")
    for k, layer in enumerate(layers):
        if layer.d != d:
            raise ConfigError(f"layer {k} has d={layer.d}, expected {d}")


def stack_forward_batch(layers: Sequence[GlaParams], tokens: np.ndarray) -> np.ndarray:
    """Residual stack; each layer sees a zero query label and its query-slot output is accumulated."""
    _validate_stack(layers, tokens.shape[2] - 1)
    z = np.array(tokens, dtype=float)
    z[:, -1, -1] = 0.0
    pred = np.zeros(z.shape[0])
    for layer in layers:
        out, _ = _layer_matrix_form(layer, z)
        pred += out[:, -1, -1]
        z = z + out
        z[:, -1, -1] = 0.0
    return pred


def stack_forward(layers: Sequence[GlaParams], prompt: Prompt) -> float:
    _validate_stack(layers, prompt.d)
    z = prompt.tokens.T.copy()
    pred = 0.0
    for layer in layers:
        out = _scan_tokens(layer, z[None])[0]
        pred += out[-1, -1]
        z = z + out
        z[-1, -1] = 0.0
    return float(pred)


def stack_loss_and_grads(layers: Sequence[GlaParams], tokens: np.ndarray, targets: np.ndarray):
    """Loss ``(1/2B) sum (yhat - y)^2`` of the stack and its gradients.

    Returns ``(loss, [(dW_V, dW_KQ) per layer])`` computed by reverse-mode
    differentiation of :func:`stack_forward_batch`.
    """
    _validate_stack(layers, tokens.shape[2] - 1)
    nb = tokens.shape[0]
    z = np.array(tokens, dtype=float)
    z[:, -1, -1] = 0.0
    inputs, caches = [], []
    pred = np.zeros(nb)
    for layer in layers:
        out, cache = _layer_matrix_form(layer, z)
        inputs.append(z)
        caches.append(cache)
        pred += out[:, -1, -1]
        z = z + out
        z[:, -1, -1] = 0.0
    resid = pred - targets
    loss = 0.5 * float(resid @ resid) / nb
    dpred = resid / nb

    grads = [None] * len(layers)
    dz_next = np.zeros_like(z)
    for k in range(len(layers) - 1, -1, -1):
        layer, z_in = layers[k], inputs[k]
        mask, attn, mixed = caches[k]
        dz_next[:, -1, -1] = 0.0  # the slot is overwritten after this layer
        d_out = dz_next.copy()
        d_out[:, -1, -1] += dpred
        dw_v = np.einsum("bti,btj->ij", d_out, mixed)
        d_mixed = d_out @ layer.w_v
        d_attn = np.einsum("bip,bjp->bij", d_mixed, z_in)
        dz = dz_next + attn.transpose(0, 2, 1) @ d_mixed
        d_scores = mask * d_attn
        # scores = z K z^T with K = W_KQ^T
        kmat = layer.w_kq.T
        dk = np.einsum("bip,biq->pq", z_in, d_scores @ z_in)
        dz += d_scores @ z_in @ kmat.T + d_scores.transpose(0, 2, 1) @ z_in @ kmat
        grads[k] = (dw_v, dk.T)
        dz_next = dz
    return loss, grads
