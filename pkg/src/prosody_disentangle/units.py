"""Discrete content units: frame features, k-means codebooks, quantisation, deduplication."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy.fft import dct

from .dsp import DEFAULT_DSP, DSPConfig, Waveform, compute_mel

FEATURE_MAGIC = b"PFEA"
CODEBOOK_MAGIC = b"PKMC"


class FeatureFileError(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class FrameFeatures:
    matrix: np.ndarray  # [L, D]
    source_tag: str = "external_ssl"  # or "mfcc_fallback"
    utt_id: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise FeatureFileError(f"{self.utt_id}: features must be a non-empty [L, D] matrix")
        if not np.all(np.isfinite(self.matrix)):
            raise FeatureFileError(f"{self.utt_id}: non-finite feature values")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class Codebook:
    centroids: np.ndarray  # [N, D]
    train_seed: int = 0
    inertia: float = float("nan")
    inertia_history: List[float] = field(default_factory=list)

    @property
    def vocab_size(self) -> int:
        return self.centroids.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class UnitSequence:
    ids: np.ndarray
    vocab_size: int
    utt_id: str = ""


@dataclass
class RefinedUnits:
    ids: np.ndarray
    vocab_size: int
    utt_id: str = ""

    def __len__(self):
        return len(self.ids)


# ---------------------------------------------------------------------------
# feature sources


def save_external_features(path, f: FrameFeatures) -> None:
    mat = np.ascontiguousarray(f.matrix, dtype="<f4")
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<II", *mat.shape) + mat.tobytes())


def load_external_features(path, utt_id: Optional[str] = None, expected_dim: Optional[int] = None) -> FrameFeatures:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FeatureFileError(f"{path}: {exc}") from exc
    if len(data) < 12 or data[:4] != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: missing PFEA header")
    n, d = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != n * d * 4:
        raise FeatureFileError(f"{path}: truncated, header declares {n}x{d} but body has {len(body)} bytes")
    if expected_dim is not None and d != expected_dim:
        raise DimensionMismatch(f"{path}: feature dim {d} != corpus dim {expected_dim}")
    mat = np.frombuffer(body, dtype="<f4").reshape(n, d)
    return FrameFeatures(mat, "external_ssl", utt_id if utt_id is not None else path.stem)


def delta(x: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over time with edge replication."""
    padded = np.pad(x, ((width, width), (0, 0)), mode="edge")
    n = x.shape[0]
    num = sum(k * (padded[width + k : width + k + n] - padded[width - k : width - k + n]) for k in range(1, width + 1))
    return num / (2 * sum(k * k for k in range(1, width + 1)))


def mfcc_fallback(w: Waveform, n_mfcc: int = 13, cfg: DSPConfig = DEFAULT_DSP) -> FrameFeatures:
    """13 MFCCs (orthonormal DCT of log-mel, c0 kept) plus deltas and delta-deltas."""
    logmel = compute_mel(w, cfg).frames
    static = dct(logmel, type=2, norm="ortho", axis=1)[:, :n_mfcc]
    d1 = delta(static)
    d2 = delta(d1)
    return FrameFeatures(np.concatenate([static, d1, d2], axis=1), "mfcc_fallback", w.utt_id)


# ---------------------------------------------------------------------------
# k-means


def _sq_dists_exact(x: np.ndarray, c: np.ndarray, budget: int = 1 << 22) -> np.ndarray:
    out = np.empty((x.shape[0], c.shape[0]))
    step = max(1, budget // max(1, c.shape[0] * x.shape[1]))
    for s in range(0, x.shape[0], step):
        diff = x[s : s + step, None, :] - c[None, :, :]
        out[s : s + step] = np.einsum("ncd,ncd->nc", diff, diff)
    return out


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def assign(x: np.ndarray, c: np.ndarray):
    """Nearest centroid per row (ties -> lowest index) and squared distances.

    Distances come from the expanded form; rows whose two best candidates are
    within rounding of each other are recomputed from explicit differences so
    exact ties resolve to the lowest index.
    """
    d = _sq_dists(x, c)
    if c.shape[0] > 1:
        part = np.partition(d, 1, axis=1)[:, :2]
        scale = (x * x).sum(1) + np.max((c * c).sum(1))
        close = (part[:, 1] - part[:, 0]) <= 1e-9 * np.maximum(scale, 1e-300)
        if close.any():
            d[close] = _sq_dists_exact(x[close], c)
    ids = np.argmin(d, axis=1)
    diff = x - c[ids]
    return ids, np.einsum("nd,nd->n", diff, diff)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(x.shape[0])]
    closest = _sq_dists_exact(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise ValueError(f"only {i} distinct frames available for {k} clusters")
        idx = int(rng.choice(x.shape[0], p=closest / total))
        centers[i] = x[idx]
        closest = np.minimum(closest, _sq_dists_exact(x, centers[i : i + 1])[:, 0])
    return centers


def _stack(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return np.asarray(features, dtype=np.float64)
    mats = [f.matrix if isinstance(f, FrameFeatures) else np.asarray(f, dtype=np.float64) for f in features]
    if not mats:
        raise ValueError("no features to cluster")
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise DimensionMismatch(f"inconsistent feature dims {sorted(dims)}")
    return np.concatenate(mats, axis=0)


def train_codebook(
    features,
    n_clusters: int,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    subsample: Optional[int] = None,
    subsample_seed: int = 0,
) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the relative inertia improvement falls below ``tol`` or after
    ``max_iters`` assignment steps. ``inertia_history`` holds the inertia after
    every assignment step and is non-increasing.
    """
    x = _stack(features)
    if x.shape[0] == 0:
        raise ValueError("no features to cluster")
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if subsample is not None and subsample < x.shape[0]:
        pick = np.sort(np.random.default_rng(subsample_seed).choice(x.shape[0], subsample, replace=False))
        x = x[pick]
    if x.shape[0] < n_clusters:
        raise ValueError(f"{x.shape[0]} frames is fewer than {n_clusters} clusters")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, n_clusters, rng)
    ids, dist = assign(x, centers)
    history = [float(dist.sum())]
    for _ in range(max_iters - 1):
        counts = np.bincount(ids, minlength=n_clusters)
        sums = np.stack([np.bincount(ids, weights=x[:, j], minlength=n_clusters) for j in range(x.shape[1])], axis=1)
        live = counts > 0
        centers[live] = sums[live] / counts[live, None]
        for j in np.flatnonzero(~live):
            # re-seed a dead centroid at the frame farthest from its own centroid
            far = int(np.argmax(dist))
            centers[j] = x[far]
            dist[far] = 0.0
        ids, dist = assign(x, centers)
        history.append(float(dist.sum()))
        prev, cur = history[-2], history[-1]
        if prev - cur <= tol * max(prev, 1e-300):
            break
    return Codebook(centers, seed, history[-1], history)


def quantize(f: FrameFeatures, c: Codebook) -> UnitSequence:
    if f.dim != c.feature_dim:
        raise DimensionMismatch(f"{f.utt_id}: feature dim {f.dim} != codebook dim {c.feature_dim}")
    ids, _ = assign(f.matrix, c.centroids)
    return UnitSequence(ids.astype(np.int64), c.vocab_size, f.utt_id)


def refine(u) -> RefinedUnits:
    """Collapse runs of identical adjacent units to a single occurrence."""
    ids = np.asarray(u.ids, dtype=np.int64)
    if ids.size == 0:
        return RefinedUnits(ids, u.vocab_size, u.utt_id)
    keep = np.ones(ids.size, dtype=bool)
    keep[1:] = ids[1:] != ids[:-1]
    return RefinedUnits(ids[keep], u.vocab_size, u.utt_id)


# ---------------------------------------------------------------------------
# codebook and unit files


def save_codebook(path, c: Codebook) -> None:
    cent = np.ascontiguousarray(c.centroids, dtype="<f4")
    header = CODEBOOK_MAGIC + struct.pack("<IIQ", cent.shape[0], cent.shape[1], c.train_seed)
    Path(path).write_bytes(header + cent.tobytes())


def load_codebook(path) -> Codebook:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 20 or data[:4] != CODEBOOK_MAGIC:
        raise FeatureFileError(f"{path}: missing PKMC header")
    n, d, seed = struct.unpack("<IIQ", data[4:20])
    body = data[20:]
    if len(body) != n * d * 4:
        raise FeatureFileError(f"{path}: truncated codebook")
    cent = np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64)
    return Codebook(cent, seed)


def write_unit_file(path, sequences: Iterable) -> None:
    lines = [f"{s.utt_id}|{' '.join(str(int(i)) for i in s.ids)}\n" for s in sequences]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_unit_file(path, vocab_size: int, refined: bool = True) -> Dict[str, RefinedUnits]:
    out = {}
    cls = RefinedUnits if refined else UnitSequence
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            utt, body = line.split("|", 1)
            ids = np.array([int(t) for t in body.split()], dtype=np.int64)
        except ValueError as exc:
            raise FeatureFileError(f"{path}:{lineno}: malformed unit line") from exc
        if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
            raise FeatureFileError(f"{path}:{lineno}: unit id outside [0, {vocab_size})")
        out[utt] = cls(ids, vocab_size, utt)
    return out
