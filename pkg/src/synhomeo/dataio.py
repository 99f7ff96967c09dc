"""Dataset formats, run configuration and the synthetic EEG cohort generator.

Binary formats (all little-endian):

``EEGB`` epoch file
    magic ``b"EEGB"``, u16 version, u32 n_epochs, u32 n_channels,
    u32 n_samples, float32 samples (epoch-major, then channel-major),
    u64 checksum (blake2b-64 of every preceding byte).

``EEGL`` label file
    magic ``b"EEGL"``, u32 count, int32 class indices.

The manifest is a JSON document listing subjects and their files; paths
are relative to the manifest's directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

EEGB_MAGIC = b"EEGB"
EEGB_VERSION = 1
EEGL_MAGIC = b"EEGL"
MANIFEST_FORMAT = "eeg-manifest"
MANIFEST_VERSION = 1


class DataError(ValueError):
    """Raised for malformed or inconsistent data files."""


class ConfigError(ValueError):
    """Raised for unknown keys or out-of-range configuration values."""


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------

def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# EEGB / EEGL
# ---------------------------------------------------------------------------

def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode_epochs(samples: np.ndarray) -> bytes:
    arr = np.asarray(samples)
    if arr.ndim != 3:
        raise DataError("epoch array must be [n_epochs, n_channels, n_samples]")
    n_e, n_c, n_s = arr.shape
    payload = EEGB_MAGIC + struct.pack("<HIII", EEGB_VERSION, n_e, n_c, n_s)
    payload += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return payload + struct.pack("<Q", _checksum(payload))


def decode_epochs(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(blob) < 18 or blob[:4] != EEGB_MAGIC:
        raise DataError(f"{name}: not an EEGB epoch file")
    version, n_e, n_c, n_s = struct.unpack_from("<HIII", blob, 4)
    if version != EEGB_VERSION:
        raise DataError(f"{name}: unsupported EEGB version {version}")
    body = 18 + 4 * n_e * n_c * n_s
    if len(blob) != body + 8:
        raise DataError(f"{name}: size does not match header ({n_e}x{n_c}x{n_s})")
    (stored,) = struct.unpack_from("<Q", blob, body)
    if stored != _checksum(blob[:body]):
        raise DataError(f"{name}: checksum failure")
    return np.frombuffer(blob, dtype="<f4", count=n_e * n_c * n_s, offset=18).reshape(n_e, n_c, n_s).copy()


def encode_labels(labels: Sequence[int]) -> bytes:
    arr = np.asarray(labels, dtype="<i4")
    return EEGL_MAGIC + struct.pack("<I", arr.size) + arr.tobytes()


def decode_labels(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(blob) < 8 or blob[:4] != EEGL_MAGIC:
        raise DataError(f"{name}: not an EEGL label file")
    (n,) = struct.unpack_from("<I", blob, 4)
    if len(blob) != 8 + 4 * n:
        raise DataError(f"{name}: label count {n} does not match file size")
    return np.frombuffer(blob, dtype="<i4", count=n, offset=8).astype(int)


# ---------------------------------------------------------------------------
# Manifest and datasets
# ---------------------------------------------------------------------------

@dataclass
class SubjectRecord:
    id: str
    samples: np.ndarray
    labels: np.ndarray | None = None

    @property
    def labeled(self) -> bool:
        return self.labels is not None


@dataclass
class Dataset:
    name: str
    sample_rate: float
    n_channels: int
    n_classes: int
    subjects: list[SubjectRecord] = field(default_factory=list)

    def subject(self, sid: str) -> SubjectRecord:
        for s in self.subjects:
            if s.id == sid:
                return s
        raise KeyError(sid)


def save_dataset(dataset: Dataset, out_dir: str | os.PathLike) -> Path:
    """Write epoch/label files and a manifest; returns the manifest path."""
    out = Path(out_dir)
    entries = []
    for s in dataset.subjects:
        epoch_file = f"{s.id}.eegb"
        atomic_write(out / epoch_file, encode_epochs(s.samples))
        label_file = None
        if s.labels is not None:
            label_file = f"{s.id}.eegl"
            atomic_write(out / label_file, encode_labels(s.labels))
        entries.append({"id": s.id, "epochs": epoch_file, "labels": label_file, "n_epochs": int(len(s.samples))})
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "dataset": dataset.name,
        "sample_rate": dataset.sample_rate,
        "n_channels": dataset.n_channels,
        "n_classes": dataset.n_classes,
        "subjects": entries,
    }
    path = out / "manifest.json"
    atomic_write(path, json.dumps(manifest, indent=1) + "\n")
    return path


def load_dataset(manifest_path: str | os.PathLike) -> Dataset:
    """Load every subject listed in a manifest, validating shapes and counts."""
    manifest_path = Path(manifest_path)
    try:
        m = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if m.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{manifest_path}: not a dataset manifest")
    if m.get("version") != MANIFEST_VERSION:
        raise DataError(f"{manifest_path}: unsupported manifest version {m.get('version')!r}")
    base = manifest_path.parent
    n_channels = int(m["n_channels"])
    n_classes = int(m["n_classes"])
    seen: set[str] = set()
    subjects = []
    for entry in m["subjects"]:
        sid = str(entry["id"])
        if sid in seen:
            raise DataError(f"duplicate subject id {sid!r}")
        seen.add(sid)
        try:
            blob = (base / entry["epochs"]).read_bytes()
        except OSError as exc:
            raise DataError(f"subject {sid}: unreadable epoch file: {exc}") from exc
        try:
            samples = decode_epochs(blob, entry["epochs"])
        except DataError as exc:
            raise DataError(f"subject {sid}: {exc}") from exc
        if len(samples) != int(entry["n_epochs"]):
            raise DataError(
                f"subject {sid}: manifest says {entry['n_epochs']} epochs, file has {len(samples)}"
            )
        if samples.shape[1] != n_channels:
            raise DataError(f"subject {sid}: {samples.shape[1]} channels, manifest says {n_channels}")
        labels = None
        if entry.get("labels"):
            label_path = base / entry["labels"]
            if label_path.exists():
                try:
                    labels = decode_labels(label_path.read_bytes(), entry["labels"])
                except DataError as exc:
                    raise DataError(f"subject {sid}: {exc}") from exc
                if len(labels) != len(samples):
                    raise DataError(f"subject {sid}: {len(labels)} labels for {len(samples)} epochs")
                if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
                    raise DataError(f"subject {sid}: label out of range")
        subjects.append(SubjectRecord(sid, samples, labels))
    return Dataset(str(m.get("dataset", "")), float(m["sample_rate"]), n_channels, n_classes, subjects)


# ---------------------------------------------------------------------------
# Synthetic cohort
# ---------------------------------------------------------------------------

DEFAULT_CLASS_FREQS = (6.0, 11.0, 22.0, 36.0, 2.5, 16.0)


@dataclass
class SynthSpec:
    n_subjects: int = 12
    n_classes: int = 3
    n_channels: int = 2
    epochs_per_subject: int = 60
    sample_rate: float = 100.0
    epoch_seconds: float = 2.0
    class_freqs: tuple[float, ...] | None = None
    class_amps: tuple[float, ...] | None = None
    shift: float = 1.0
    noise: float = 0.5
    n_groups: int = 3
    individual: float = 0.3
    block: int = 4
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        for f in ("n_subjects", "n_channels", "epochs_per_subject", "sample_rate", "epoch_seconds", "block", "n_groups"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        if self.shift < 0 or self.noise < 0 or self.individual < 0:
            raise ValueError("shift, individual and noise must be non-negative")
        if self.class_freqs is None:
            if self.n_classes > len(DEFAULT_CLASS_FREQS):
                raise ValueError("give class_freqs explicitly for more than 6 classes")
            self.class_freqs = DEFAULT_CLASS_FREQS[: self.n_classes]
        if self.class_amps is None:
            self.class_amps = (1.0,) * self.n_classes
        if len(self.class_freqs) != self.n_classes or len(self.class_amps) != self.n_classes:
            raise ValueError("one template frequency and amplitude per class")

    @property
    def n_samples(self) -> int:
        return int(round(self.sample_rate * self.epoch_seconds))


def balanced_labels(n: int, n_classes: int, block: int, rng: np.random.Generator) -> np.ndarray:
    """Balanced labels arranged in shuffled runs of ``block`` epochs."""
    base = np.sort(np.arange(n) % n_classes)
    chunks = [base[i : i + block] for i in range(0, n, block)]
    order = rng.permutation(len(chunks))
    return np.concatenate([chunks[i] for i in order])


# per-unit-shift spreads of the template perturbations
SHIFT_FREQ_OFFSET = 1.0      # Hz, common to all classes
SHIFT_FREQ_JITTER = 0.5      # Hz, per class
SHIFT_CLASS_GAIN = 0.2       # log-amplitude, per class
SHIFT_CHANNEL_GAIN = 0.1     # log-amplitude, per channel
SHIFT_BACKGROUND = 0.2       # log-amplitude of the shared 10 Hz rhythm


@dataclass
class _Perturbation:
    freq: np.ndarray
    amp: np.ndarray
    ch_gain: np.ndarray
    background: float

    @classmethod
    def draw(cls, rng: np.random.Generator, scale: float, n_classes: int, n_channels: int) -> "_Perturbation":
        return cls(
            freq=scale * (SHIFT_FREQ_OFFSET * rng.standard_normal() + SHIFT_FREQ_JITTER * rng.standard_normal(n_classes)),
            amp=scale * SHIFT_CLASS_GAIN * rng.standard_normal(n_classes),
            ch_gain=scale * SHIFT_CHANNEL_GAIN * rng.standard_normal(n_channels),
            background=scale * SHIFT_BACKGROUND * rng.standard_normal(),
        )


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Class-conditional sinusoid mixtures with a per-subject template shift.

    Subjects belong to ``spec.n_groups`` latent groups (assigned round-robin).
    A subject's template perturbation is its group's perturbation plus an
    individual one ``spec.individual`` times as large; both scale with
    ``spec.shift`` and move the class frequencies, class amplitudes, channel
    gains and the strength of a shared 10 Hz background rhythm.  With
    ``shift == 0`` and ``noise == 0`` every subject's class-``c`` epochs are
    the same set of signals: the ``n``-th class-``c`` epoch of every subject
    draws its phases from one dataset-wide table.
    """
    root = np.random.SeedSequence(spec.seed)
    group_seq, phase_seq, subject_seq = root.spawn(3)
    C, ch, n_e = spec.n_classes, spec.n_channels, spec.epochs_per_subject
    group_rng = np.random.default_rng(group_seq)
    groups = [_Perturbation.draw(group_rng, spec.shift, C, ch) for _ in range(spec.n_groups)]
    phases = np.random.default_rng(phase_seq).uniform(0, 2 * np.pi, size=(C, n_e, ch, 2))

    n_s = spec.n_samples
    time = np.arange(n_s) / spec.sample_rate
    nyq = spec.sample_rate / 2
    freqs = np.asarray(spec.class_freqs, dtype=float)
    amps = np.asarray(spec.class_amps, dtype=float)
    width = len(str(spec.n_subjects - 1))
    subjects = []
    for s, seq in enumerate(subject_seq.spawn(spec.n_subjects)):
        rng = np.random.default_rng(seq)
        g = groups[s % spec.n_groups]
        own = _Perturbation.draw(rng, spec.shift * spec.individual, C, ch)
        subj_freqs = np.clip(freqs + g.freq + own.freq, 0.5, nyq - 1.0)
        subj_amps = amps * np.exp(g.amp + own.amp)
        ch_gain = np.exp(g.ch_gain + own.ch_gain)
        background = 0.3 * np.exp(g.background + own.background)
        labels = balanced_labels(n_e, C, spec.block, rng)
        seen = np.zeros(C, dtype=int)
        epochs = np.empty((n_e, ch, n_s))
        for e, c in enumerate(labels):
            ph = phases[c, seen[c]]
            seen[c] += 1
            sig = subj_amps[c] * np.sin(2 * np.pi * subj_freqs[c] * time + ph[:, :1])
            sig = sig + background * np.sin(2 * np.pi * 10.0 * time + ph[:, 1:])
            if spec.noise > 0:
                sig = sig + spec.noise * rng.standard_normal((ch, n_s))
            epochs[e] = ch_gain[:, None] * sig
        subjects.append(SubjectRecord(f"s{s:0{width}d}", epochs.astype(np.float32), labels.astype(int)))
    return Dataset(spec.name, float(spec.sample_rate), spec.n_channels, spec.n_classes, subjects)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

XI_PRESETS = {"isruc": 0.1, "faced": 0.4, "physionet-mi": 0.5}


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a continual-learning run.

    Synaptic defaults follow the published settings; optimiser settings are
    sized for the reference learner's plain full-batch descent.
    """

    xi: float = 0.1
    omega_t: float = 0.9
    omega_f: float = 1.5
    omega_tf: float = 1.2
    alpha: float = 0.2
    top_k: int = 15
    eta: float = 0.9
    beta: float = 0.7
    lam: float = 30.0
    gamma: float = 1.3
    strength_cap: float = 3.0
    importance_eps: float = 1e-6
    renorm_mode: str = "max_t"
    renorm_period: int = 1
    prune_threshold: float = 0.0
    fallback_nodes: int = 3
    replay_budget: int = -1
    pretrain_epochs: int = 300
    pretrain_lr: float = 0.5
    cl_epochs: int = 10
    cl_lr: float = 0.5
    ssl_epochs: int = 10
    ssl_lr: float = 1e-3
    ssl_seq_len: int = 8
    ssl_context: int = -1
    eval_split: float = 0.5
    epoch_aggregate: str = "mean"
    feature_norm: str = "cohort"
    ablation: str = "full"
    source_frac: float = 0.3
    repeats: int = 1
    seed: int = 0

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.omega_t, self.omega_f, self.omega_tf)

    def validate(self) -> "RunConfig":
        for name, (lo, hi, lo_open, hi_open) in _RANGES.items():
            v = getattr(self, name)
            bad = (v < lo or (lo_open and v == lo)) if lo is not None else False
            bad |= (v > hi or (hi_open and v == hi)) if hi is not None else False
            if bad:
                raise ConfigError(f"{_key_for(name)}: value {v!r} out of range")
        for name, choices in _CHOICES.items():
            if getattr(self, name) not in choices:
                raise ConfigError(f"{_key_for(name)}: must be one of {sorted(choices)}")
        return self

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        return dataclasses.replace(self, **overrides).validate()

    def to_text(self) -> str:
        lines = ["# resolved run configuration"]
        for f in dataclasses.fields(self):
            lines.append(f"{_key_for(f.name)} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


# (low, high, low_exclusive, high_exclusive)
_RANGES = {
    "xi": (-1.0, 1.0, True, True),
    "omega_t": (0.0, None, True, False),
    "omega_f": (0.0, None, True, False),
    "omega_tf": (0.0, None, True, False),
    "alpha": (0.0, 1.0, False, False),
    "top_k": (1, None, False, False),
    "eta": (0.0, 1.0, True, True),
    "beta": (0.0, 1.0, False, False),
    "lam": (0.0, None, True, False),
    "gamma": (1.0, None, False, False),
    "strength_cap": (0.0, None, True, False),
    "importance_eps": (0.0, None, True, False),
    "renorm_period": (1, None, False, False),
    "prune_threshold": (0.0, None, False, False),
    "fallback_nodes": (1, None, False, False),
    "replay_budget": (-1, None, False, False),
    "pretrain_epochs": (0, None, False, False),
    "pretrain_lr": (0.0, None, False, False),
    "cl_epochs": (0, None, False, False),
    "cl_lr": (0.0, None, False, False),
    "ssl_epochs": (0, None, False, False),
    "ssl_lr": (0.0, None, False, False),
    "ssl_seq_len": (5, None, False, False),
    "ssl_context": (-1, None, False, False),
    "eval_split": (0.0, 1.0, True, True),
    "source_frac": (0.0, 1.0, True, True),
    "repeats": (1, None, False, False),
}
_CHOICES = {
    "renorm_mode": {"max_t", "per_endpoint"},
    "epoch_aggregate": {"mean", "median"},
    "feature_norm": {"cohort", "channel"},
    "ablation": {"full", "no_SC", "no_SR"},
}
_KEY_ALIASES = {"lambda": "lam"}


def _key_for(field_name: str) -> str:
    return "lambda" if field_name == "lam" else field_name


def _field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in dataclasses.fields(RunConfig)}


def parse_value(key: str, raw: str) -> tuple[str, Any]:
    """Resolve ``key`` to a config field and convert ``raw`` to its type."""
    name = _KEY_ALIASES.get(key, key)
    types = _field_types()
    if name not in types:
        raise ConfigError(f"unknown config key {key!r}")
    if name == "xi" and raw.strip().lower() in XI_PRESETS:
        return name, XI_PRESETS[raw.strip().lower()]
    typ = types[name]
    raw = raw.strip()
    try:
        if typ is int:
            return name, int(raw)
        if typ is float:
            return name, float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None
    return name, raw.strip("\"'")


def parse_config_text(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        name, value = parse_value(key.strip(), raw)
        values[name] = value
    return values


def load_config(path: str | os.PathLike | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read a ``key = value`` config file and layer ``key=value`` overrides on top."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        name, value = parse_value(key.strip(), raw)
        values[name] = value
    return RunConfig(**values).validate()
