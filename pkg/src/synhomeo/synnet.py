"""Synaptic network of subject nodes.

Nodes hold a subject's normalised feature, a learner snapshot and a replay
buffer.  Undirected synapses carry a fixed similarity and a mutable strength
in ``[0, cap]``.  Strength dynamics:

* consolidation multiplies every synapse touching an activated node by
  ``gamma`` (once per edge) and resets the activated nodes' clocks to 1;
* renormalisation multiplies every synapse by ``exp(-t / lam)`` and then
  advances every clock by one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .featkit import FeatureVector

STRENGTH_CAP = 3.0
SNAPSHOT_FORMAT = "synnet-snapshot"
SNAPSHOT_VERSION = 1


# ---------------------------------------------------------------------------
# Similarity
# ---------------------------------------------------------------------------

def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    c = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(-1.0, c))


def weighted_similarity(
    a: FeatureVector, b: FeatureVector, weights: Sequence[float] = (0.9, 1.5, 1.2)
) -> float:
    """Block-weighted cosine similarity between two feature vectors.

    ``weights`` are ``(w_time, w_freq, w_tf)``; the result is the weighted
    mean of the three per-block cosines.
    """
    if a.shape != b.shape:
        raise ValueError(f"feature shape mismatch: {a.shape} vs {b.shape}")
    w_t, w_f, w_tf = (float(w) for w in weights)
    if min(w_t, w_f, w_tf) <= 0:
        raise ValueError("similarity weights must be positive")
    num = (
        w_t * cosine(a.time_block, b.time_block)
        + w_f * cosine(a.freq_block, b.freq_block)
        + w_tf * cosine(a.tf_block, b.tf_block)
    )
    return num / (w_t + w_f + w_tf)


# ---------------------------------------------------------------------------
# Node storage
# ---------------------------------------------------------------------------

@dataclass
class ReplayBuffer:
    """Labelled samples kept by a node for later replay."""

    samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    provenance: list[str] = field(default_factory=list)
    confidences: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        self.confidences = np.asarray(self.confidences, dtype=float)
        n = len(self.labels)
        if len(self.samples) != n or len(self.provenance) != n or len(self.confidences) != n:
            raise ValueError("replay buffer fields must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def ground_truth(cls, samples: np.ndarray, labels: np.ndarray) -> "ReplayBuffer":
        n = len(labels)
        return cls(samples, labels, ["ground_truth"] * n, np.ones(n))

    @classmethod
    def pseudo(cls, samples: np.ndarray, labels: np.ndarray, confidences: np.ndarray, eta: float) -> "ReplayBuffer":
        confidences = np.asarray(confidences, dtype=float)
        if np.any(confidences < eta):
            raise ValueError(f"pseudo-labelled entries must have confidence >= {eta}")
        return cls(samples, labels, ["pseudo"] * len(labels), confidences)


@dataclass
class SubjectNode:
    id: str
    feature: FeatureVector
    params: object = None
    buffer: ReplayBuffer = field(default_factory=ReplayBuffer)
    t: int = 1
    is_source: bool = False


@dataclass
class Synapse:
    """Undirected edge.  One object is shared by both endpoints."""

    similarity: float
    strength: float = 1.0


def _key(i: str, j: str) -> tuple[str, str]:
    return (i, j) if i < j else (j, i)


class SynapticNetwork:
    """Single-writer graph of subject nodes and their synapses."""

    def __init__(
        self,
        weights: Sequence[float] = (0.9, 1.5, 1.2),
        cap: float = STRENGTH_CAP,
        renorm_mode: str = "max_t",
        prune_threshold: float = 0.0,
    ):
        if renorm_mode not in ("max_t", "per_endpoint"):
            raise ValueError(f"unknown renorm_mode {renorm_mode!r}")
        self.weights = tuple(float(w) for w in weights)
        self.cap = float(cap)
        self.renorm_mode = renorm_mode
        self.prune_threshold = float(prune_threshold)
        self.nodes: dict[str, SubjectNode] = {}
        self.edges: dict[tuple[str, str], Synapse] = {}
        self._adj: dict[str, set[str]] = {}

    # -- structure ---------------------------------------------------------

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def _require(self, node_id: str) -> SubjectNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise KeyError(f"unknown node id {node_id!r}") from None

    def similarity(self, i: str, j: str) -> float:
        return weighted_similarity(self._require(i).feature, self._require(j).feature, self.weights)

    def synapse(self, i: str, j: str) -> Synapse:
        try:
            return self.edges[_key(i, j)]
        except KeyError:
            raise KeyError(f"no synapse between {i!r} and {j!r}") from None

    def neighbors(self, node_id: str) -> list[str]:
        self._require(node_id)
        return sorted(self._adj[node_id])

    def degree(self, node_id: str) -> int:
        self._require(node_id)
        return len(self._adj[node_id])

    def incorporate_node(self, node: SubjectNode, xi: float) -> str:
        """Add ``node`` with a fresh clock and connect it to every node above ``xi``."""
        if node.id in self.nodes:
            raise ValueError(f"duplicate node id {node.id!r}")
        existing = sorted(self.nodes)
        node.t = 1
        self.nodes[node.id] = node
        self._adj[node.id] = set()
        for other in existing:
            s = weighted_similarity(node.feature, self.nodes[other].feature, self.weights)
            if s > xi:
                self.edges[_key(node.id, other)] = Synapse(similarity=s, strength=1.0)
                self._adj[node.id].add(other)
                self._adj[other].add(node.id)
        return node.id

    # -- importance --------------------------------------------------------

    def mean_strength(self, node_id: str) -> float:
        self._require(node_id)
        peers = self._adj[node_id]
        if not peers:
            return 0.0
        return math.fsum(self.edges[_key(node_id, p)].strength for p in peers) / len(peers)

    def importance(self, i: str, j: str, alpha: float) -> float:
        """``alpha * similarity(i, j) + (1 - alpha) * mean_strength(j)``."""
        if i == j:
            raise ValueError("importance needs two distinct nodes")
        self._require(i)
        self._require(j)
        syn = self.synapse(i, j)
        return alpha * syn.similarity + (1.0 - alpha) * self.mean_strength(j)

    def top_k(self, i: str, k: int, alpha: float) -> list[tuple[str, float]]:
        """Connected peers of ``i`` ranked by importance, descending, ties by id."""
        if k < 1:
            raise ValueError("K must be >= 1")
        ranked = [(j, self.importance(i, j, alpha)) for j in self.neighbors(i)]
        ranked.sort(key=lambda item: (-item[1], item[0]))
        return ranked[:k]

    def most_similar(self, i: str, n: int) -> list[tuple[str, float]]:
        """The ``n`` other nodes with highest raw similarity to ``i`` (no edge needed)."""
        self._require(i)
        scored = [(j, self.similarity(i, j)) for j in sorted(self.nodes) if j != i]
        scored.sort(key=lambda item: (-item[1], item[0]))
        return scored[:n]

    # -- homeostasis -------------------------------------------------------

    def strengthen(self, activated: Iterable[str], gamma: float) -> None:
        """Multiply each synapse touching an activated node by ``gamma`` once, capped."""
        if gamma < 1:
            raise ValueError("consolidation coefficient must be >= 1")
        touched: set[tuple[str, str]] = set()
        for i in activated:
            self._require(i)
            touched.update(_key(i, j) for j in self._adj[i])
        for key in touched:
            syn = self.edges[key]
            syn.strength = min(gamma * syn.strength, self.cap)

    def reset_clocks(self, activated: Iterable[str]) -> None:
        for i in activated:
            self._require(i).t = 1

    def consolidate(self, activated: Iterable[str], gamma: float) -> None:
        activated = list(activated)
        self.strengthen(activated, gamma)
        self.reset_clocks(activated)

    def decay(self, lam: float) -> None:
        """Apply the time-dependent decay to every synapse (clocks untouched)."""
        if lam <= 0:
            raise ValueError("decay factor must be positive")
        for (i, j), syn in self.edges.items():
            ti, tj = self.nodes[i].t, self.nodes[j].t
            if self.renorm_mode == "max_t":
                factor = math.exp(-max(ti, tj) / lam)
            else:
                factor = math.exp(-ti / lam) * math.exp(-tj / lam)
            syn.strength = min(max(factor * syn.strength, 0.0), self.cap)
        if self.prune_threshold > 0:
            self._prune()

    def tick(self) -> None:
        for node in self.nodes.values():
            node.t += 1

    def renormalize(self, lam: float) -> None:
        self.decay(lam)
        self.tick()

    def _prune(self) -> None:
        dead = [k for k, s in self.edges.items() if s.strength < self.prune_threshold]
        for i, j in dead:
            del self.edges[(i, j)]
            self._adj[i].discard(j)
            self._adj[j].discard(i)

    # -- export ------------------------------------------------------------

    def export_snapshot(self, step: int) -> "NetworkSnapshot":
        nodes = [
            {
                "id": nid,
                "t": self.nodes[nid].t,
                "mean_strength": self.mean_strength(nid),
                "degree": len(self._adj[nid]),
                "is_source": self.nodes[nid].is_source,
            }
            for nid in sorted(self.nodes)
        ]
        edges = [
            {"i": i, "j": j, "similarity": s.similarity, "strength": s.strength}
            for (i, j), s in sorted(self.edges.items())
        ]
        return NetworkSnapshot(step=step, nodes=nodes, edges=edges)


def init_network(
    nodes: Sequence[SubjectNode],
    xi: float,
    weights: Sequence[float] = (0.9, 1.5, 1.2),
    **kwargs,
) -> SynapticNetwork:
    """Build a network connecting every pair of ``nodes`` whose similarity exceeds ``xi``."""
    if len(nodes) < 1:
        raise ValueError("need at least one node")
    if not -1.0 < xi < 1.0:
        raise ValueError("connection threshold must lie in (-1, 1)")
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate node ids")
    net = SynapticNetwork(weights=weights, **kwargs)
    for node in nodes:
        net.incorporate_node(node, xi)
    return net


def shift_positive(values: Sequence[float], eps: float = 1e-6) -> np.ndarray:
    """Make weights strictly positive; shifts by ``-min + eps`` only if any value is <= 0."""
    v = np.asarray(values, dtype=float)
    if v.size and v.min() <= 0:
        v = v - v.min() + eps
    return v


@dataclass
class ReplaySet:
    samples: np.ndarray
    labels: np.ndarray
    origin: list[str]

    def __len__(self) -> int:
        return len(self.labels)


def sample_replay(
    network: SynapticNetwork,
    ranked: Sequence[tuple[str, float]],
    budget: int,
    seed: int | np.random.Generator,
    eps: float = 1e-6,
) -> ReplaySet:
    """Importance-weighted replay draw from the ranked nodes' buffers.

    Each draw picks a node with probability proportional to its (positively
    shifted) importance, then a uniformly random entry of its buffer.  Draws
    are with replacement.  Nodes with empty buffers get zero weight.
    """
    if budget < 0:
        raise ValueError("replay budget must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = [nid for nid, _ in ranked]
    weights = shift_positive([imp for _, imp in ranked], eps)
    sizes = np.array([len(network.nodes[nid].buffer) for nid in ids], dtype=int)
    weights = np.where(sizes > 0, weights, 0.0)
    if budget == 0 or weights.sum() <= 0:
        return ReplaySet(np.zeros((0, 0)), np.zeros(0, dtype=int), [])
    p = weights / weights.sum()
    picks = rng.choice(len(ids), size=budget, p=p)
    rows, labels, origin = [], [], []
    for idx in picks:
        buf = network.nodes[ids[idx]].buffer
        e = int(rng.integers(len(buf)))
        rows.append(buf.samples[e])
        labels.append(int(buf.labels[e]))
        origin.append(ids[idx])
    return ReplaySet(np.stack(rows), np.asarray(labels, dtype=int), origin)


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

@dataclass
class NetworkSnapshot:
    step: int
    nodes: list[dict]
    edges: list[dict]

    def to_dict(self) -> dict:
        return {
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "step": self.step,
            "nodes": self.nodes,
            "edges": self.edges,
        }

    def to_json(self) -> str:
        # repr-based float formatting in json round-trips doubles exactly
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkSnapshot":
        if d.get("format") != SNAPSHOT_FORMAT:
            raise ValueError("not a network snapshot")
        if d.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {d.get('version')!r}")
        return cls(step=int(d["step"]), nodes=list(d["nodes"]), edges=list(d["edges"]))

    @classmethod
    def from_json(cls, text: str) -> "NetworkSnapshot":
        return cls.from_dict(json.loads(text))

    def to_dot(self) -> str:
        """Graphviz rendering: pen width tracks strength, node size tracks degree."""
        lines = ["graph synnet {", "  node [shape=circle];"]
        for n in self.nodes:
            size = 0.3 + 0.1 * n["degree"]
            style = "filled" if n["is_source"] else "solid"
            lines.append(
                f'  "{n["id"]}" [width={size:.3f}, height={size:.3f}, style={style}, '
                f'label="{n["id"]}"];'
            )
        for e in self.edges:
            pen = max(0.1, 1.5 * e["strength"])
            lines.append(
                f'  "{e["i"]}" -- "{e["j"]}" [style=dashed, penwidth={pen:.4f}, '
                f'label="{e["strength"]:.3f}"];'
            )
        lines.append("}")
        return "\n".join(lines) + "\n"
