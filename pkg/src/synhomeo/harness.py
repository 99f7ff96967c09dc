"""End-to-end continual adaptation over a stream of unlabeled subjects.

One run: pretrain a source model on labelled subjects, build the synaptic
network from their features, then for every incoming subject
incorporate -> rank -> replay + fuse -> self-supervised guidance ->
pseudo-label -> joint training -> store -> consolidate -> renormalise.

Incoming subjects' ground truth lives in :class:`HeldOutLabels` and is only
read by :func:`evaluate`.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import featkit
from .dataio import Dataset, RunConfig
from .featkit import CohortStats, FeatureVector
from .learner import (
    AffineSoftmax,
    LearnerParams,
    fuse_models,
    joint_train,
    learner_for,
    predict_proba,
    pseudo_label,
    train,
)
from .ssl import init_cpc, make_sequences, ssl_adapt
from .synnet import (
    NetworkSnapshot,
    ReplayBuffer,
    ReplaySet,
    SubjectNode,
    SynapticNetwork,
    sample_replay,
    shift_positive,
)

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_SC", "no_SR")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def metrics(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> tuple[float, float]:
    """Accuracy and macro-F1.  Every class counts in the macro mean, even if absent."""
    yt = np.asarray(y_true, dtype=int)
    yp = np.asarray(y_pred, dtype=int)
    if len(yt) != len(yp) or len(yt) < 1:
        raise ValueError("y_true and y_pred must be non-empty and of equal length")
    for arr in (yt, yp):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise ValueError("label out of range")
    acc = float(np.mean(yt == yp))
    f1 = []
    for c in range(n_classes):
        tp = int(np.sum((yt == c) & (yp == c)))
        fp = int(np.sum((yt != c) & (yp == c)))
        fn = int(np.sum((yt == c) & (yp != c)))
        denom = 2 * tp + fp + fn
        f1.append(2 * tp / denom if denom else 0.0)
    return acc, math.fsum(f1) / n_classes


# ---------------------------------------------------------------------------
# Subjects
# ---------------------------------------------------------------------------

class HeldOutLabels:
    """Evaluation ground truth, deliberately opaque to the adaptation path."""

    __slots__ = ("_values",)

    def __init__(self, values: np.ndarray):
        self._values = np.asarray(values, dtype=int)

    def __len__(self) -> int:
        return len(self._values)


@dataclass
class SourceSubject:
    id: str
    x: np.ndarray
    y: np.ndarray
    feature: FeatureVector


@dataclass
class StreamSubject:
    id: str
    feature: FeatureVector
    x_adapt: np.ndarray
    x_eval: np.ndarray
    y_eval: HeldOutLabels


def evaluate(params: LearnerParams, subject: StreamSubject, n_classes: int) -> tuple[float, float]:
    pred = np.argmax(np.atleast_2d(predict_proba(params, subject.x_eval)), axis=1)
    return metrics(subject.y_eval._values, pred, n_classes)


@dataclass
class InputScaler:
    """Frozen z-scoring of classifier inputs (log band powers)."""

    mean: np.ndarray
    std: np.ndarray
    n_channels: int

    @staticmethod
    def transform_raw(rows: np.ndarray, n_channels: int) -> np.ndarray:
        rows = np.array(rows, dtype=float)
        a = featkit.N_TIME * n_channels
        b = a + featkit.N_FREQ * n_channels
        rows[:, a:b] = np.log(rows[:, a:b] + 1e-12)
        return rows

    @classmethod
    def fit(cls, rows: np.ndarray, n_channels: int) -> "InputScaler":
        z = cls.transform_raw(rows, n_channels)
        std = z.std(axis=0)
        std[std <= 1e-12] = 1.0
        return cls(z.mean(axis=0), std, n_channels)

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        return (self.transform_raw(rows, self.n_channels) - self.mean) / self.std


@dataclass
class Prepared:
    """Features and splits computed once per dataset and configuration."""

    n_classes: int
    n_channels: int
    sources: list[SourceSubject]
    stream: list[StreamSubject]
    scaler: InputScaler


def split_subjects(ids: Sequence[str], source_frac: float, seed: int) -> tuple[list[str], list[str]]:
    """Seeded, fixed source/incremental partition."""
    ids = sorted(ids)
    n_src = int(round(source_frac * len(ids)))
    if n_src < 2:
        raise ValueError(f"source fraction {source_frac} yields {n_src} source subjects; need >= 2")
    if n_src >= len(ids):
        raise ValueError("source fraction leaves no incremental subjects")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED])).permutation(len(ids))
    src = sorted(ids[i] for i in perm[:n_src])
    inc = sorted(ids[i] for i in perm[n_src:])
    return src, inc


def prepare(dataset: Dataset, config: RunConfig) -> Prepared:
    src_ids, inc_ids = split_subjects([s.id for s in dataset.subjects], config.source_frac, config.seed)
    nc = dataset.n_channels
    rows = {
        s.id: featkit.epoch_feature_matrix(s.samples, dataset.sample_rate) for s in dataset.subjects
    }
    for sid in src_ids:
        if not dataset.subject(sid).labeled:
            raise ValueError(f"source subject {sid} has no labels")
    scaler = InputScaler.fit(np.concatenate([rows[s] for s in src_ids]), nc)

    def subject_feature(sid: str) -> FeatureVector:
        return featkit.aggregate_epoch_features(rows[sid], nc, config.epoch_aggregate)

    sources = [
        SourceSubject(sid, scaler(rows[sid]), dataset.subject(sid).labels, subject_feature(sid))
        for sid in src_ids
    ]
    stream = []
    stride = int(round(1 / config.eval_split)) if config.eval_split else 2
    for sid in inc_ids:
        rec = dataset.subject(sid)
        if rec.labels is None:
            raise ValueError(f"incremental subject {sid} has no evaluation labels")
        x = scaler(rows[sid])
        idx = np.arange(len(x))
        eval_mask = idx % stride == stride - 1
        stream.append(
            StreamSubject(sid, subject_feature(sid), x[~eval_mask], x[eval_mask], HeldOutLabels(rec.labels[eval_mask]))
        )
    return Prepared(dataset.n_classes, nc, sources, stream, scaler)


# ---------------------------------------------------------------------------
# Algorithm
# ---------------------------------------------------------------------------

@dataclass
class Context:
    """Per-run state shared by every adaptation step."""

    config: RunConfig
    m0: LearnerParams
    feature_norm: Callable[[FeatureVector], FeatureVector]
    n_classes: int


def _feature_normalizer(config: RunConfig, stats: CohortStats) -> Callable[[FeatureVector], FeatureVector]:
    if config.feature_norm == "channel":
        return featkit.normalize_channels
    return stats.apply


def pretrain_source(
    sources: Sequence[SourceSubject],
    config: RunConfig,
    n_classes: int,
    learner_factory: Callable[[int, int], AffineSoftmax] = AffineSoftmax,
) -> tuple[LearnerParams, SynapticNetwork, CohortStats]:
    """Train the source model on pooled labels and build the initial network."""
    if len(sources) < 2:
        raise ValueError("need at least 2 source subjects")
    for s in sources:
        if s.y is None:
            raise ValueError(f"source subject {s.id} is missing labels")
    x = np.concatenate([s.x for s in sources])
    y = np.concatenate([s.y for s in sources])
    learner = learner_factory(x.shape[1], n_classes)
    m0, _ = train(learner.init_params(), x, y, config.pretrain_epochs, config.pretrain_lr)

    normed, stats = featkit.normalize_cohort([s.feature for s in sources])
    if config.feature_norm == "channel":
        normed = [featkit.normalize_channels(s.feature) for s in sources]
    net = SynapticNetwork(
        weights=config.weights,
        cap=config.strength_cap,
        renorm_mode=config.renorm_mode,
        prune_threshold=config.prune_threshold,
    )
    for s, f in zip(sources, normed):
        node = SubjectNode(s.id, f, m0, ReplayBuffer.ground_truth(s.x, s.y), is_source=True)
        net.incorporate_node(node, config.xi)
    return m0, net, stats


@dataclass
class SubjectReport:
    repeat: int
    step: int
    subject: str
    acc_m0: float
    acc_mi: float
    mf1_m0: float
    mf1_mi: float
    n_activated: int
    n_replay: int
    n_pseudo: int
    n_stored: int
    fallback: bool
    degenerate: bool
    failed: bool


def _fuse_ranked(network: SynapticNetwork, ranked: Sequence[tuple[str, float]], eps: float) -> LearnerParams:
    weights = shift_positive([imp for _, imp in ranked], eps)
    return fuse_models([(network.nodes[j].params, float(w)) for (j, _), w in zip(ranked, weights)])


def adapt_one(
    network: SynapticNetwork,
    subject: StreamSubject,
    ctx: Context,
    rng: np.random.Generator,
    step: int = 1,
    repeat: int = 0,
) -> SubjectReport:
    """Adapt to one unlabeled subject and update the network in place."""
    cfg = ctx.config
    node = SubjectNode(subject.id, ctx.feature_norm(subject.feature))
    network.incorporate_node(node, cfg.xi)

    ranked: list[tuple[str, float]] = []
    n_replay = n_pseudo = 0
    fallback = degenerate = failed = False
    try:
        ranked = network.top_k(subject.id, cfg.top_k, cfg.alpha)
        if ranked:
            budget = len(subject.x_adapt) if cfg.replay_budget < 0 else cfg.replay_budget
            replay = sample_replay(network, ranked, budget, rng, cfg.importance_eps)
            fused = _fuse_ranked(network, ranked, cfg.importance_eps)
        else:
            fallback = True
            replay = ReplaySet(np.zeros((0, 0)), np.zeros(0, dtype=int), [])
            nearest = network.most_similar(subject.id, cfg.fallback_nodes)
            fused = _fuse_ranked(network, nearest, cfg.importance_eps) if nearest else ctx.m0
            log.info("subject %s: no synapses, fallback fusion of %s without replay",
                     subject.id, [j for j, _ in nearest])
        n_replay = len(replay)

        guidance = fused
        seqs = make_sequences(subject.x_adapt, cfg.ssl_seq_len)
        if cfg.ssl_epochs > 0 and len(seqs) >= 2:
            d_latent = learner_for(fused).trunk(fused)[1].shape[0]
            cpc = init_cpc(d_latent, seed=int(rng.integers(2**31)))
            context = None if cfg.ssl_context < 0 else cfg.ssl_context
            guidance, _, _ = ssl_adapt(fused, cpc, seqs, cfg.ssl_epochs, cfg.ssl_lr, context)

        pseudo = pseudo_label(guidance, subject.x_adapt, cfg.eta)
        n_pseudo = len(pseudo)
        if n_pseudo or n_replay:
            m_i, _ = joint_train(
                fused,
                subject.x_adapt[pseudo.indices], pseudo.labels,
                replay.samples if n_replay else None, replay.labels,
                cfg.beta, cfg.cl_epochs, cfg.cl_lr,
            )
        else:
            degenerate = True
            m_i = guidance
            log.info("subject %s: no pseudo-labels and no replay, keeping guidance model", subject.id)

        stored = pseudo_label(m_i, subject.x_adapt, cfg.eta)
        node.params = m_i
        node.buffer = ReplayBuffer.pseudo(subject.x_adapt[stored.indices], stored.labels, stored.confidences, cfg.eta)
    except Exception:
        log.exception("subject %s: adaptation failed, storing source model", subject.id)
        failed = True
        ranked = []
        node.params = ctx.m0
        node.buffer = ReplayBuffer()

    activated = [j for j, _ in ranked]
    if cfg.ablation == "no_SC":
        network.reset_clocks(activated)
    else:
        network.consolidate(activated, cfg.gamma)
    if step % cfg.renorm_period == 0:
        if cfg.ablation == "no_SR":
            network.tick()
        else:
            network.renormalize(cfg.lam)

    acc0, f10 = evaluate(ctx.m0, subject, ctx.n_classes)
    acci, f1i = evaluate(node.params, subject, ctx.n_classes)
    return SubjectReport(
        repeat, step, subject.id, acc0, acci, f10, f1i,
        len(activated), n_replay, n_pseudo, len(node.buffer), fallback, degenerate, failed,
    )


# ---------------------------------------------------------------------------
# Streams and repeats
# ---------------------------------------------------------------------------

@dataclass
class StreamResult:
    repeat: int
    order: list[str]
    rows: list[SubjectReport]
    snapshots: list[NetworkSnapshot]
    trajectories: list[dict[str, float]]


def run_stream(
    network: SynapticNetwork,
    subjects: Sequence[StreamSubject],
    ctx: Context,
    seed: int,
    repeat: int = 0,
) -> StreamResult:
    if len(subjects) < 1:
        raise ValueError("need at least one incremental subject")
    rng = np.random.default_rng(np.random.SeedSequence([ctx.config.seed, seed, repeat]))
    snaps = [network.export_snapshot(0)]
    traj = [{nid: network.mean_strength(nid) for nid in sorted(network.nodes)}]
    rows = []
    for step, subject in enumerate(subjects, 1):
        rows.append(adapt_one(network, subject, ctx, rng, step, repeat))
        snaps.append(network.export_snapshot(step))
        traj.append({nid: network.mean_strength(nid) for nid in sorted(network.nodes)})
    return StreamResult(repeat, [s.id for s in subjects], rows, snaps, traj)


@dataclass
class EvalReport:
    config: RunConfig
    source_ids: list[str]
    m0: LearnerParams
    streams: list[StreamResult] = field(default_factory=list)
    final_params: list[dict[str, LearnerParams]] = field(default_factory=list)

    @property
    def rows(self) -> list[SubjectReport]:
        return [r for s in self.streams for r in s.rows]

    def repeat_means(self) -> list[dict[str, float]]:
        out = []
        for s in self.streams:
            out.append({
                k: math.fsum(getattr(r, k) for r in s.rows) / len(s.rows)
                for k in ("acc_m0", "acc_mi", "mf1_m0", "mf1_mi")
            })
        return out

    def aggregate(self) -> dict[str, tuple[float, float]]:
        means = self.repeat_means()
        agg = {}
        for k in ("acc_m0", "acc_mi", "mf1_m0", "mf1_mi"):
            vals = [m[k] for m in means]
            sd = statistics.pstdev(vals) if len(vals) > 1 else 0.0
            agg[k] = (math.fsum(vals) / len(vals), sd)
        return agg

    def report_csv(self) -> str:
        buf = io.StringIO()
        names = list(SubjectReport.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.rows:
            w.writerow([_fmt(v) for v in asdict(r).values()])
        return buf.getvalue()

    def trajectories_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["repeat", "step", "node", "is_source", "mean_strength"])
        src = set(self.source_ids)
        for s in self.streams:
            for step, traj in enumerate(s.trajectories):
                for nid, v in traj.items():
                    w.writerow([s.repeat, step, nid, int(nid in src), repr(v)])
        return buf.getvalue()

    def summary(self) -> str:
        agg = self.aggregate()
        n = len(self.streams)
        lines = [f"repeats: {n}  incremental subjects: {len(self.streams[0].rows) if n else 0}"]
        for k, label in (("acc", "ACC"), ("mf1", "MF1")):
            m0, s0 = agg[f"{k}_m0"]
            mi, si = agg[f"{k}_mi"]
            lines.append(f"{label}  M0 {100*m0:.1f}±{100*s0:.2f}  ->  Mi {100*mi:.1f}±{100*si:.2f}")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _run_repeat(args) -> tuple[StreamResult, dict[str, LearnerParams]]:
    base_net, prepared, ctx, repeat = args
    net = copy.deepcopy(base_net)
    order_rng = np.random.default_rng(np.random.SeedSequence([ctx.config.seed, 0x0D0E, repeat]))
    stream = [prepared.stream[i] for i in order_rng.permutation(len(prepared.stream))]
    result = run_stream(net, stream, ctx, seed=repeat, repeat=repeat)
    params = {nid: net.nodes[nid].params for nid in sorted(net.nodes) if not net.nodes[nid].is_source}
    return result, params


def run_experiment(
    dataset: Dataset,
    config: RunConfig,
    workers: int = 1,
    prepared: Prepared | None = None,
) -> EvalReport:
    """Pretrain once, then run ``config.repeats`` shuffled streams."""
    prepared = prepared or prepare(dataset, config)
    m0, base_net, stats = pretrain_source(prepared.sources, config, prepared.n_classes)
    ctx = Context(config, m0, _feature_normalizer(config, stats), prepared.n_classes)
    jobs = [(base_net, prepared, ctx, r) for r in range(config.repeats)]
    if workers > 1 and config.repeats > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_repeat, jobs))
    else:
        results = [_run_repeat(j) for j in jobs]
    report = EvalReport(config, [s.id for s in prepared.sources], m0)
    for res, params in results:
        report.streams.append(res)
        report.final_params.append(params)
    return report


def run_ablation(
    dataset: Dataset,
    config: RunConfig,
    variants: Sequence[str] = ABLATIONS,
    workers: int = 1,
) -> dict[str, EvalReport]:
    """Same data, split and seeds for every variant; only the homeostasis switches differ."""
    prepared = prepare(dataset, config)
    out = {}
    for v in variants:
        if v not in ABLATIONS:
            raise ValueError(f"unknown ablation variant {v!r}")
        out[v] = run_experiment(dataset, config.with_overrides({"ablation": v}), workers, prepared)
    return out
