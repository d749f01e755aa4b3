"""Audio ingestion: WAV decode, resampling, chunking, manifests, and splits.

Everything downstream assumes mono float32 at 16 kHz; this module is the
only place that touches files or sample rates.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TARGET_RATE = 16000


class DecodeError(Exception):
    """Malformed or truncated audio container."""


class UnsupportedFormatError(Exception):
    """Recognized container, unsupported codec."""


class EmptyCorpusError(ValueError):
    """Operation requires at least one manifest entry."""


@dataclass
class RawWaveform:
    samples: np.ndarray  # mono float32 in [-1, 1]
    sample_rate_hz: int
    source_path: str = ""
    padded: bool = False

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class ManifestEntry:
    path: str
    dataset_name: str
    label: str | None
    duration_s: float
    num_samples: int

    def __post_init__(self):
        if self.duration_s < 0 or self.num_samples < 0:
            raise ValueError("negative duration or sample count")
        if abs(self.duration_s - self.num_samples / TARGET_RATE) > 1e-3:
            raise ValueError(
                f"{self.path}: duration {self.duration_s} disagrees with "
                f"{self.num_samples} samples at {TARGET_RATE} Hz")


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("duplicate paths in manifest")

    def __len__(self):
        return len(self.entries)

    def labels(self) -> list[str | None]:
        return [e.label for e in self.entries]

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps({
                    "path": e.path,
                    "dataset": e.dataset_name,
                    "label": e.label,
                    "duration_s": e.duration_s,
                    "num_samples": e.num_samples,
                }) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "Manifest":
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                entries.append(ManifestEntry(
                    path=rec["path"],
                    dataset_name=rec["dataset"],
                    label=rec.get("label"),
                    duration_s=float(rec["duration_s"]),
                    num_samples=int(rec["num_samples"]),
                ))
        return cls(entries)


@dataclass
class FoldSplit:
    num_folds: int
    assignments: list[int]
    seed: int
    stratified: bool

    def fold_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignments) if f == fold]

    def to_json(self) -> str:
        return json.dumps({
            "num_folds": self.num_folds,
            "seed": self.seed,
            "stratified": self.stratified,
            "assignments": list(self.assignments),
        })

    @classmethod
    def from_json(cls, text: str) -> "FoldSplit":
        rec = json.loads(text)
        return cls(num_folds=rec["num_folds"], assignments=list(rec["assignments"]),
                   seed=rec["seed"], stratified=rec["stratified"])


# ---------------------------------------------------------------------------
# WAV container
# ---------------------------------------------------------------------------

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


def decode_wav(data: bytes) -> RawWaveform:
    """Decode a RIFF/WAVE byte string (PCM16 or float32) to mono float.

    Multi-channel audio is averaged to mono; 16-bit samples are scaled by
    1/32768. The original sample rate is preserved for `resample`.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError("not a RIFF/WAVE stream")
    pos = 12
    fmt = None
    raw = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise DecodeError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _FMT_EXTENSIBLE:
                if len(body) < 26:
                    raise DecodeError("extensible fmt chunk too short")
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise DecodeError("truncated data chunk")
            raw = body
        pos += 8 + size + (size & 1)
    if fmt is None or raw is None:
        raise DecodeError("missing fmt or data chunk")

    audio_format, channels, rate, _, _, bits = fmt
    if channels < 1 or rate < 1:
        raise DecodeError("invalid channel count or sample rate")
    if audio_format == _FMT_PCM and bits == 16:
        x = np.frombuffer(raw[:len(raw) - len(raw) % (2 * channels)], dtype="<i2")
        x = x.astype(np.float32) / 32768.0
    elif audio_format == _FMT_FLOAT and bits == 32:
        x = np.frombuffer(raw[:len(raw) - len(raw) % (4 * channels)], dtype="<f4")
        x = x.astype(np.float32)
    else:
        raise UnsupportedFormatError(
            f"unsupported WAV codec: format {audio_format}, {bits}-bit")
    if channels > 1:
        x = x[:len(x) - len(x) % channels].reshape(-1, channels).mean(axis=1)
    return RawWaveform(np.clip(x, -1.0, 1.0).astype(np.float32), int(rate))


def encode_wav(samples: np.ndarray, sample_rate_hz: int, float32: bool = False) -> bytes:
    """Build a mono RIFF/WAVE byte string (PCM16 by default)."""
    samples = np.asarray(samples, dtype=np.float32)
    if float32:
        fmt, bits, payload = _FMT_FLOAT, 32, samples.astype("<f4").tobytes()
    else:
        q = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
        fmt, bits, payload = _FMT_PCM, 16, q.tobytes()
    block = bits // 8
    header = struct.pack("<4sI4s4sIHHIIHH4sI",
                         b"RIFF", 36 + len(payload), b"WAVE",
                         b"fmt ", 16, fmt, 1, sample_rate_hz,
                         sample_rate_hz * block, block, bits,
                         b"data", len(payload))
    return header + payload


def write_wav(path, samples, sample_rate_hz, float32=False):
    Path(path).write_bytes(encode_wav(samples, sample_rate_hz, float32))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

_KAISER_BETA = 8.6
_HALF_TAPS = 16  # 32-tap prototype kernel


def resample(w: RawWaveform, target_hz: int = TARGET_RATE) -> RawWaveform:
    """Band-limited windowed-sinc rate conversion.

    The kernel is a 32-tap sinc under a Kaiser window (beta 8.6), cut off
    at the lower of the two Nyquist frequencies and stretched accordingly
    when downsampling. Matching rates pass through bit-exact.
    """
    if w.sample_rate_hz < 8000:
        raise ValueError(f"sample rate {w.sample_rate_hz} below supported floor 8000")
    if target_hz < 1:
        raise ValueError("target rate must be positive")
    if w.sample_rate_hz == target_hz:
        return RawWaveform(w.samples, target_hz, w.source_path, w.padded)

    ratio = target_hz / w.sample_rate_hz
    cutoff = min(1.0, ratio)
    half = _HALF_TAPS / cutoff
    n_in = len(w.samples)
    n_out = int(round(n_in * ratio))
    n_taps = 2 * int(np.ceil(half)) + 1

    t = np.arange(n_out, dtype=np.float64) / ratio
    start = np.ceil(t - half).astype(np.int64)
    offsets = np.arange(n_taps, dtype=np.int64)
    idx = start[:, None] + offsets[None, :]
    u = t[:, None] - idx  # tap distance in input-sample units
    win_arg = u / half
    window = np.where(np.abs(win_arg) <= 1.0,
                      np.i0(_KAISER_BETA * np.sqrt(np.maximum(0.0, 1.0 - win_arg ** 2)))
                      / np.i0(_KAISER_BETA),
                      0.0)
    kernel = cutoff * np.sinc(cutoff * u) * window

    padded = np.zeros(n_in + 2 * n_taps, dtype=np.float64)
    padded[n_taps:n_taps + n_in] = w.samples
    gathered = padded[idx + n_taps]
    out = np.einsum("ij,ij->i", gathered, kernel)
    out = np.clip(out, -1.0, 1.0).astype(np.float32)
    return RawWaveform(out, target_hz, w.source_path, w.padded)


# ---------------------------------------------------------------------------
# chunking and statistics
# ---------------------------------------------------------------------------

def chunk_for_pretraining(w: RawWaveform, chunk_s: float = 10.0,
                          min_tail_s: float = 2.0) -> list[RawWaveform]:
    """Cut a clip into consecutive fixed-length windows.

    A trailing remainder shorter than `min_tail_s` is dropped; anything
    longer is zero-padded to the full window and flagged `padded`.
    """
    n_chunk = int(round(chunk_s * w.sample_rate_hz))
    n_min = int(round(min_tail_s * w.sample_rate_hz))
    chunks = []
    full = len(w.samples) // n_chunk
    for i in range(full):
        chunks.append(RawWaveform(w.samples[i * n_chunk:(i + 1) * n_chunk],
                                  w.sample_rate_hz, w.source_path))
    tail = w.samples[full * n_chunk:]
    if len(tail) >= n_min:
        padded = np.zeros(n_chunk, dtype=np.float32)
        padded[:len(tail)] = tail
        chunks.append(RawWaveform(padded, w.sample_rate_hz, w.source_path, padded=True))
    return chunks


def chunk_count(num_samples: int, chunk_s: float = 10.0, min_tail_s: float = 2.0,
                rate: int = TARGET_RATE) -> int:
    """Number of chunks `chunk_for_pretraining` will produce, from metadata alone."""
    n_chunk = int(round(chunk_s * rate))
    n_min = int(round(min_tail_s * rate))
    full = num_samples // n_chunk
    return full + (1 if num_samples - full * n_chunk >= n_min else 0)


def corpus_stats(m: Manifest) -> tuple[float, int, float]:
    """(total hours, number of clips, average clip duration in seconds)."""
    if not m.entries:
        raise EmptyCorpusError("manifest is empty")
    total_s = sum(e.duration_s for e in m.entries)
    return total_s / 3600.0, len(m.entries), total_s / len(m.entries)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def split_folds(m: Manifest, k: int, seed: int, stratified: bool) -> FoldSplit:
    """Assign every entry to one of k folds, deterministically for a seed.

    Stratified mode shuffles within each label group and deals round-robin,
    carrying the fold offset across groups so overall sizes stay balanced.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    n = len(m.entries)
    rng = np.random.default_rng(seed)
    assignments = [0] * n
    if not stratified:
        for j, i in enumerate(rng.permutation(n)):
            assignments[i] = j % k
    else:
        if any(e.label is None for e in m.entries):
            raise ValueError("stratified split requires every entry to be labeled")
        by_label: dict[str, list[int]] = {}
        for i, e in enumerate(m.entries):
            by_label.setdefault(e.label, []).append(i)
        offset = 0
        for label in sorted(by_label):
            idxs = np.array(by_label[label])
            if len(idxs) < k:
                warnings.warn(f"class {label!r} has {len(idxs)} entries for {k} folds")
            rng.shuffle(idxs)
            for j, i in enumerate(idxs):
                assignments[int(i)] = (offset + j) % k
            offset = (offset + len(idxs)) % k
    return FoldSplit(num_folds=k, assignments=assignments, seed=seed, stratified=stratified)


def holdout_validation(m: Manifest, fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Split off a validation subset; disjoint, order-stable, seed-deterministic."""
    if not 0.0 < fraction < 0.5:
        raise ValueError("holdout fraction must be in (0, 0.5)")
    n = len(m.entries)
    n_valid = max(1, int(round(n * fraction)))
    picked = set(np.random.default_rng(seed).permutation(n)[:n_valid].tolist())
    train = [e for i, e in enumerate(m.entries) if i not in picked]
    valid = [e for i, e in enumerate(m.entries) if i in picked]
    return Manifest(train), Manifest(valid)


def stratified_holdout(entries: list[ManifestEntry], fraction: float,
                       seed: int) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Per-class holdout (at least one entry per class when possible)."""
    if not 0.0 < fraction < 0.5:
        raise ValueError("holdout fraction must be in (0, 0.5)")
    rng = np.random.default_rng(seed)
    by_label: dict[str, list[int]] = {}
    for i, e in enumerate(entries):
        by_label.setdefault(e.label or "", []).append(i)
    picked: set[int] = set()
    for label in sorted(by_label):
        idxs = np.array(by_label[label])
        rng.shuffle(idxs)
        take = max(1, int(round(len(idxs) * fraction))) if len(idxs) > 1 else 0
        picked.update(int(i) for i in idxs[:take])
    train = [e for i, e in enumerate(entries) if i not in picked]
    valid = [e for i, e in enumerate(entries) if i in picked]
    return train, valid


# ---------------------------------------------------------------------------
# loading with optional cache
# ---------------------------------------------------------------------------

class ClipCache:
    """Small in-process LRU of decoded waveforms keyed by path."""

    def __init__(self, capacity: int = 256, cache_dir=None):
        self.capacity = capacity
        self.cache_dir = cache_dir
        self._store: "dict[str, np.ndarray]" = {}
        self._order: list[str] = []

    def samples(self, path) -> np.ndarray:
        path = str(path)
        if path in self._store:
            self._order.remove(path)
            self._order.append(path)
            return self._store[path]
        samples = load_clip(path, self.cache_dir).samples
        self._store[path] = samples
        self._order.append(path)
        if len(self._order) > self.capacity:
            del self._store[self._order.pop(0)]
        return samples


def load_clip(path, cache_dir=None) -> RawWaveform:
    """Decode and resample one file to 16 kHz, with an optional .npy cache."""
    path = Path(path)
    cache_file = None
    if cache_dir:
        stat = path.stat()
        key = hashlib.sha1(
            f"{path.resolve()}|{stat.st_size}|{stat.st_mtime_ns}|{TARGET_RATE}".encode()
        ).hexdigest()
        cache_file = Path(cache_dir) / f"{key}.npy"
        if cache_file.exists():
            return RawWaveform(np.load(cache_file), TARGET_RATE, str(path))
    w = resample(decode_wav(path.read_bytes()), TARGET_RATE)
    w.source_path = str(path)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        np.save(cache_file, w.samples)
    return w


def scan_audio_dir(root) -> list[Path]:
    """All .wav files under `root`, sorted for reproducible manifests."""
    return sorted(p for p in Path(root).rglob("*.wav") if p.is_file())
