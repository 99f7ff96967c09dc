"""Contrastive predictive coding over sequences of epoch latents.

For a sequence ``h_0 .. h_T`` with context horizon ``t``::

    c_t     = A mean(h_0 .. h_t) + a
    z_{t+k} = F_k c_t + g_k                  k = 1, 2, 3
    loss    = -mean_{b,k} log softmax_j( h_{j,t+k} . z_{b,t+k} )[b]

where ``j`` runs over every sequence in the batch, so the positive for
sequence ``b`` competes against the same-offset latents of all other
sequences.  Latents are produced by the learner's trunk ``h = P x + p``;
adaptation updates that trunk together with the CPC parameters and leaves
the classifier head alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .learner import LearnerParams, learner_for, log_softmax, softmax

N_STEPS = 3


@dataclass(frozen=True)
class CpcParams:
    ctx: np.ndarray        # [d, d]
    ctx_bias: np.ndarray   # [d]
    heads: np.ndarray      # [3, d, d]
    head_bias: np.ndarray  # [3, d]

    def __post_init__(self):
        d = self.ctx.shape[0]
        if self.ctx.shape != (d, d) or self.ctx_bias.shape != (d,):
            raise ValueError("context map must be [d, d] with a [d] bias")
        if self.heads.shape != (N_STEPS, d, d) or self.head_bias.shape != (N_STEPS, d):
            raise ValueError(f"need {N_STEPS} predictor heads of shape [d, d]")

    @property
    def dim(self) -> int:
        return self.ctx.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.ctx.ravel(), self.ctx_bias, self.heads.ravel(), self.head_bias.ravel()])

    @classmethod
    def from_flat(cls, v: np.ndarray, d: int) -> "CpcParams":
        v = np.asarray(v, dtype=float)
        a, b = d * d, d * d + d
        c = b + N_STEPS * d * d
        return cls(
            v[:a].reshape(d, d).copy(),
            v[a:b].copy(),
            v[b:c].reshape(N_STEPS, d, d).copy(),
            v[c:].reshape(N_STEPS, d).copy(),
        )


def init_cpc(dim: int, seed: int = 0, scale: float = 0.1) -> CpcParams:
    rng = np.random.default_rng(seed)
    heads = scale / np.sqrt(dim) * rng.standard_normal((N_STEPS, dim, dim))
    return CpcParams(np.eye(dim), np.zeros(dim), heads, np.zeros((N_STEPS, dim)))


def info_nce(preds: np.ndarray, candidates: np.ndarray) -> float:
    """Mean ``-log softmax`` score of each prediction's own candidate.

    ``preds[b]`` is scored against every row of ``candidates``; row ``b`` is
    the positive.  A single candidate gives exactly 0.
    """
    scores = np.atleast_2d(preds) @ np.atleast_2d(candidates).T
    lp = log_softmax(scores)
    return float(-np.mean(np.diag(lp)))


def default_context(seq_len: int) -> int:
    return seq_len - 1 - N_STEPS


def _check(latents: np.ndarray, context: int | None) -> tuple[np.ndarray, int]:
    latents = np.asarray(latents, dtype=float)
    if latents.ndim != 3:
        raise ValueError("sequences must be an array [batch, length, dim]")
    B, L, _ = latents.shape
    if B < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 sequences")
    if context is None:
        context = default_context(L)
    if context < 0 or L - 1 < context + N_STEPS:
        raise ValueError(f"sequence length {L} too short for context {context} + {N_STEPS} steps")
    if not np.all(np.isfinite(latents)):
        raise ValueError("non-finite latents")
    return latents, context


def cpc_loss_and_grad(
    cpc: CpcParams, latents: np.ndarray, context: int | None = None
) -> tuple[float, CpcParams, np.ndarray]:
    """Loss, gradient w.r.t. the CPC parameters, and gradient w.r.t. the latents."""
    H, t = _check(latents, context)
    B = H.shape[0]
    hist = H[:, : t + 1].mean(axis=1)
    c = hist @ cpc.ctx.T + cpc.ctx_bias

    loss = 0.0
    d_H = np.zeros_like(H)
    d_c = np.zeros_like(c)
    g_heads = np.zeros_like(cpc.heads)
    g_hb = np.zeros_like(cpc.head_bias)
    norm = 1.0 / (B * N_STEPS)
    for k in range(N_STEPS):
        target = H[:, t + 1 + k]
        z = c @ cpc.heads[k].T + cpc.head_bias[k]
        scores = z @ target.T
        loss -= float(np.trace(log_softmax(scores))) * norm
        d_s = (softmax(scores) - np.eye(B)) * norm
        d_z = d_s @ target
        d_H[:, t + 1 + k] += d_s.T @ z
        g_heads[k] = d_z.T @ c
        g_hb[k] = d_z.sum(axis=0)
        d_c += d_z @ cpc.heads[k]
    g_ctx = d_c.T @ hist
    g_cb = d_c.sum(axis=0)
    d_hist = d_c @ cpc.ctx
    d_H[:, : t + 1] += d_hist[:, None, :] / (t + 1)
    return loss, CpcParams(g_ctx, g_cb, g_heads, g_hb), d_H


def cpc_loss(cpc: CpcParams, latents: np.ndarray, context: int | None = None) -> float:
    return cpc_loss_and_grad(cpc, latents, context)[0]


def cpc_gradient(cpc: CpcParams, latents: np.ndarray, context: int | None = None) -> CpcParams:
    return cpc_loss_and_grad(cpc, latents, context)[1]


def trunk_loss_and_grad(
    guidance: LearnerParams, cpc: CpcParams, sequences: np.ndarray, context: int | None = None
) -> tuple[float, np.ndarray, np.ndarray, CpcParams]:
    """CPC loss on trunk-encoded raw features and gradients for trunk and CPC."""
    learner = learner_for(guidance)
    X = np.asarray(sequences, dtype=float)
    B, L, d_in = X.shape
    H = learner.encode(guidance, X.reshape(B * L, d_in)).reshape(B, L, -1)
    loss, g_cpc, d_H = cpc_loss_and_grad(cpc, H, context)
    flat_dH = d_H.reshape(B * L, -1)
    flat_X = X.reshape(B * L, d_in)
    return loss, flat_dH.T @ flat_X, flat_dH.sum(axis=0), g_cpc


def make_sequences(samples: np.ndarray, seq_len: int) -> np.ndarray:
    """Cut consecutive epochs into non-overlapping windows ``[n, seq_len, d]``."""
    samples = np.asarray(samples, dtype=float)
    n = len(samples) // seq_len
    return samples[: n * seq_len].reshape(n, seq_len, samples.shape[1])


def ssl_adapt(
    guidance: LearnerParams,
    cpc: CpcParams,
    sequences: np.ndarray,
    epochs: int,
    lr: float,
    context: int | None = None,
) -> tuple[LearnerParams, CpcParams, list[float]]:
    """Full-batch descent on the CPC loss over the guidance trunk and CPC parameters.

    Inputs are left untouched.  Steps that would raise the loss are retried
    at half the rate, so the final loss never exceeds the initial one.
    """
    sequences = np.asarray(sequences, dtype=float)
    if sequences.ndim != 3 or sequences.shape[0] < 2:
        raise ValueError("self-supervised adaptation needs at least 2 sequences")
    learner = learner_for(guidance)
    proj, pb = learner.trunk(guidance)
    cur_g, cur_c = guidance, cpc
    loss, g_proj, g_pb, g_cpc = trunk_loss_and_grad(cur_g, cur_c, sequences, context)
    history = [loss]
    step = lr
    for _ in range(epochs):
        if step == 0:
            history.append(history[-1])
            continue
        for _ in range(30):
            cand_g = learner.with_trunk(cur_g, proj - step * g_proj, pb - step * g_pb)
            cand_c = CpcParams.from_flat(cur_c.flat() - step * g_cpc.flat(), cur_c.dim)
            cand = trunk_loss_and_grad(cand_g, cand_c, sequences, context)
            if cand[0] <= history[-1]:
                break
            step *= 0.5
        else:
            history.append(history[-1])
            continue
        cur_g, cur_c = cand_g, cand_c
        loss, g_proj, g_pb, g_cpc = cand
        proj, pb = learner.trunk(cur_g)
        history.append(loss)
    return cur_g, cur_c, history
