"""Learners, model fusion, pseudo-labelling and joint replay training.

The reference learner is a two-stage affine model over epoch features::

    h = P x + p            # trunk (shared with the contrastive objective)
    logits = W h + b       # classifier head
    probs = softmax(logits)

Parameters travel as :class:`LearnerParams`, a flat float vector plus a
shape tag naming the architecture.  Anything that can predict probabilities,
return a cross-entropy gradient and expose its trunk can be registered as a
learner and used by the continual-learning loop.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np

PARAMS_MAGIC = b"LPRM"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class LearnerParams:
    values: np.ndarray
    shape_tag: str

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        v.setflags(write=False)
        if v.ndim != 1:
            raise ValueError("learner parameters must be a flat vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("learner parameters contain non-finite values")
        object.__setattr__(self, "values", v)

    def replace(self, values: np.ndarray) -> "LearnerParams":
        return LearnerParams(values, self.shape_tag)

    def to_bytes(self) -> bytes:
        tag = self.shape_tag.encode("utf-8")
        head = PARAMS_MAGIC + struct.pack("<HI", PARAMS_VERSION, len(tag)) + tag
        return head + struct.pack("<Q", self.values.size) + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "LearnerParams":
        if blob[:4] != PARAMS_MAGIC:
            raise ValueError("not a learner parameter blob")
        version, tag_len = struct.unpack_from("<HI", blob, 4)
        if version != PARAMS_VERSION:
            raise ValueError(f"unsupported parameter blob version {version}")
        off = 10
        tag = blob[off : off + tag_len].decode("utf-8")
        off += tag_len
        (n,) = struct.unpack_from("<Q", blob, off)
        off += 8
        if len(blob) != off + 8 * n:
            raise ValueError("truncated parameter blob")
        values = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(np.float64)
        return cls(values, tag)


class Learner(Protocol):
    shape_tag: str

    def init_params(self, seed: int | None = None) -> LearnerParams: ...
    def predict_proba(self, params: LearnerParams, x: np.ndarray) -> np.ndarray: ...
    def ce_loss(self, params: LearnerParams, x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float: ...
    def ce_gradient(self, params: LearnerParams, x: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray: ...
    def encode(self, params: LearnerParams, x: np.ndarray) -> np.ndarray: ...
    def trunk(self, params: LearnerParams) -> tuple[np.ndarray, np.ndarray]: ...
    def with_trunk(self, params: LearnerParams, proj: np.ndarray, bias: np.ndarray) -> LearnerParams: ...


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class AffineSoftmax:
    """Reference learner: affine trunk followed by an affine softmax head."""

    kind = "affine-softmax"

    def __init__(self, d_in: int, n_classes: int, d_hidden: int | None = None):
        if n_classes < 2:
            raise ValueError("need at least 2 classes")
        self.d_in = int(d_in)
        self.d_hidden = int(d_hidden if d_hidden is not None else d_in)
        self.n_classes = int(n_classes)
        self.shape_tag = f"{self.kind}/d_in={self.d_in}/d_hidden={self.d_hidden}/n_classes={self.n_classes}"
        h, d, c = self.d_hidden, self.d_in, self.n_classes
        self._sizes = (h * d, h, c * h, c)
        self.n_params = sum(self._sizes)

    @classmethod
    def from_tag(cls, tag: str) -> "AffineSoftmax":
        kind, *fields = tag.split("/")
        if kind != cls.kind:
            raise ValueError(f"shape tag {tag!r} is not an {cls.kind} learner")
        kv = dict(f.split("=") for f in fields)
        return cls(int(kv["d_in"]), int(kv["n_classes"]), int(kv["d_hidden"]))

    def init_params(self, seed: int | None = None) -> LearnerParams:
        """Identity trunk (when square) and a zero head; ``seed`` adds tiny jitter to the head."""
        proj = np.eye(self.d_hidden, self.d_in)
        head = np.zeros((self.n_classes, self.d_hidden))
        if seed is not None:
            head = 1e-3 * np.random.default_rng(seed).standard_normal(head.shape)
        return self.pack(proj, np.zeros(self.d_hidden), head, np.zeros(self.n_classes))

    def pack(self, proj, proj_bias, head, head_bias) -> LearnerParams:
        values = np.concatenate([np.ravel(proj), np.ravel(proj_bias), np.ravel(head), np.ravel(head_bias)])
        return LearnerParams(values, self.shape_tag)

    def unpack(self, params: LearnerParams) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        if params.shape_tag != self.shape_tag:
            raise ValueError(f"shape mismatch: params {params.shape_tag!r}, learner {self.shape_tag!r}")
        v = params.values
        a, b, c, _ = np.cumsum(self._sizes)
        return (
            v[:a].reshape(self.d_hidden, self.d_in),
            v[a:b],
            v[b:c].reshape(self.n_classes, self.d_hidden),
            v[c:],
        )

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.d_in:
            raise ValueError(f"input has {x.shape[-1]} features, learner expects {self.d_in}")
        return x

    def encode(self, params: LearnerParams, x: np.ndarray) -> np.ndarray:
        proj, pb, _, _ = self.unpack(params)
        return self._check_x(x) @ proj.T + pb

    def logits(self, params: LearnerParams, x: np.ndarray) -> np.ndarray:
        _, _, head, hb = self.unpack(params)
        return self.encode(params, x) @ head.T + hb

    def predict_proba(self, params: LearnerParams, x: np.ndarray) -> np.ndarray:
        single = np.asarray(x).ndim == 1
        p = softmax(self.logits(params, x))
        return p[0] if single else p

    def ce_loss(self, params, x, y, w) -> float:
        """Weighted cross-entropy ``sum_n w_n * -log p_n[y_n]``."""
        x = self._check_x(x)
        y = np.asarray(y, dtype=int)
        w = np.asarray(w, dtype=float)
        lp = log_softmax(self.logits(params, x))
        return float(-np.sum(w * lp[np.arange(len(y)), y]))

    def ce_gradient(self, params, x, y, w) -> np.ndarray:
        x = self._check_x(x)
        y = np.asarray(y, dtype=int)
        w = np.asarray(w, dtype=float)
        if len(y) == 0:
            raise ValueError("empty batch")
        if len(y) != len(x) or len(w) != len(x):
            raise ValueError("batch, labels and weights must have equal length")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError("label out of range")
        proj, pb, head, hb = self.unpack(params)
        h = x @ proj.T + pb
        probs = softmax(h @ head.T + hb)
        d_logits = probs
        d_logits[np.arange(len(y)), y] -= 1.0
        d_logits *= w[:, None]
        g_head = d_logits.T @ h
        g_hb = d_logits.sum(axis=0)
        d_h = d_logits @ head
        g_proj = d_h.T @ x
        g_pb = d_h.sum(axis=0)
        return np.concatenate([g_proj.ravel(), g_pb, g_head.ravel(), g_hb])

    def trunk(self, params: LearnerParams) -> tuple[np.ndarray, np.ndarray]:
        proj, pb, _, _ = self.unpack(params)
        return proj.copy(), pb.copy()

    def with_trunk(self, params: LearnerParams, proj: np.ndarray, bias: np.ndarray) -> LearnerParams:
        _, _, head, hb = self.unpack(params)
        return self.pack(proj, bias, head, hb)


_REGISTRY: dict[str, Callable[[str], Learner]] = {AffineSoftmax.kind: AffineSoftmax.from_tag}


def register_learner(kind: str, factory: Callable[[str], Learner]) -> None:
    """Make a learner family resolvable from its shape tags."""
    _REGISTRY[kind] = factory


def learner_for(params: LearnerParams) -> Learner:
    kind = params.shape_tag.split("/", 1)[0]
    try:
        return _REGISTRY[kind](params.shape_tag)
    except KeyError:
        raise ValueError(f"no learner registered for shape tag {params.shape_tag!r}") from None


def predict_proba(params: LearnerParams, x: np.ndarray) -> np.ndarray:
    return learner_for(params).predict_proba(params, x)


def ce_gradient(params: LearnerParams, batch: np.ndarray, labels, weights) -> np.ndarray:
    return learner_for(params).ce_gradient(params, batch, labels, weights)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def fusion_weights(importances: Sequence[float]) -> np.ndarray:
    imp = np.asarray(importances, dtype=float)
    total = math.fsum(imp)
    if total <= 0:
        raise ValueError("non-positive importance mass")
    return imp / total


def fuse_models(models: Sequence[tuple[LearnerParams, float]]) -> LearnerParams:
    """Importance-weighted average of parameter vectors.

    Weights are ``I_j / sum_k I_k``.  The sum is exactly rounded per
    coordinate, so the output does not depend on the order of ``models``.
    """
    if not models:
        raise ValueError("need at least one model to fuse")
    tags = {p.shape_tag for p, _ in models}
    if len(tags) != 1:
        raise ValueError(f"cannot fuse different architectures: {sorted(tags)}")
    w = fusion_weights([imp for _, imp in models])
    terms = np.stack([wj * p.values for (p, _), wj in zip(models, w)])
    fused = np.array([math.fsum(col) for col in terms.T])
    return LearnerParams(fused, models[0][0].shape_tag)


# ---------------------------------------------------------------------------
# Pseudo labels and joint training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PseudoLabelSet:
    indices: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def pseudo_label(params: LearnerParams, samples: np.ndarray, eta: float) -> PseudoLabelSet:
    """Keep samples whose top class probability is at least ``eta``."""
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    samples = np.asarray(samples, dtype=float)
    if len(samples) == 0:
        return PseudoLabelSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    probs = np.atleast_2d(predict_proba(params, samples))
    labels = np.argmax(probs, axis=1)
    conf = probs[np.arange(len(probs)), labels]
    keep = np.flatnonzero(conf >= eta)
    return PseudoLabelSet(keep, labels[keep], conf[keep])


def joint_objective(
    pseudo_x, pseudo_y, replay_x, replay_y, beta: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack both sets with per-sample weights ``beta/N_p`` and ``(1-beta)/N_r``.

    Terms with zero weight or no samples are dropped entirely.
    """
    xs, ys, ws = [], [], []
    for x, y, coef in ((pseudo_x, pseudo_y, beta), (replay_x, replay_y, 1.0 - beta)):
        if x is None or len(y) == 0 or coef == 0:
            continue
        n = len(y)
        xs.append(np.asarray(x, dtype=float))
        ys.append(np.asarray(y, dtype=int))
        ws.append(np.full(n, coef / n))
    if not xs:
        raise ValueError("joint training needs a non-empty pseudo or replay set")
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ws)


def gradient_descent(
    learner: Learner,
    params: LearnerParams,
    x: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    epochs: int,
    lr: float,
) -> tuple[LearnerParams, list[float]]:
    """Full-batch descent.  A step that would raise the loss is retried at half the rate."""
    history = [learner.ce_loss(params, x, y, w)]
    step = lr
    for _ in range(epochs):
        if step == 0:
            history.append(history[-1])
            continue
        g = learner.ce_gradient(params, x, y, w)
        for _ in range(30):
            cand = params.replace(params.values - step * g)
            loss = learner.ce_loss(cand, x, y, w)
            if loss <= history[-1]:
                break
            step *= 0.5
        else:
            cand, loss = params, history[-1]
        params = cand
        history.append(loss)
    return params, history


def train(
    params: LearnerParams, x: np.ndarray, y: np.ndarray, epochs: int, lr: float
) -> tuple[LearnerParams, list[float]]:
    """Plain supervised training with mean cross-entropy."""
    y = np.asarray(y, dtype=int)
    w = np.full(len(y), 1.0 / len(y))
    return gradient_descent(learner_for(params), params, x, y, w, epochs, lr)


def joint_train(
    params: LearnerParams,
    pseudo_x: np.ndarray | None,
    pseudo_y: np.ndarray | None,
    replay_x: np.ndarray | None,
    replay_y: np.ndarray | None,
    beta: float,
    epochs: int,
    lr: float,
) -> tuple[LearnerParams, list[float]]:
    """Minimise ``beta * CE(pseudo) + (1 - beta) * CE(replay)``, each term a batch mean."""
    if not 0 <= beta <= 1:
        raise ValueError("beta must lie in [0, 1]")
    pseudo_y = np.zeros(0, int) if pseudo_y is None else pseudo_y
    replay_y = np.zeros(0, int) if replay_y is None else replay_y
    x, y, w = joint_objective(pseudo_x, pseudo_y, replay_x, replay_y, beta)
    return gradient_descent(learner_for(params), params, x, y, w, epochs, lr)
