"""Emotional voice conversion: prosody-reference swap, MCD / F0-RMSE scoring, embedding export."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import ModelCheckpoint
from .data import CorpusCache
from .dsp import (
    DEFAULT_DSP,
    DSPConfig,
    MelCepstra,
    MelSpectrogram,
    PitchTrack,
    Waveform,
    extract_f0,
    invert_mel,
    load_mel,
    mel_cepstra,
    mel_cepstra_from_logmel,
    read_wav,
)
from .manifest import Manifest
from .model import PROSODY, SPEAKER, ReconstructionModel
from .train import TrainConfig, TrainResult, pretrain

log = logging.getLogger(__name__)

MCD_CONST = 10.0 / math.log(10.0)

# source emotion -> target emotion
EVC_PRESETS: Tuple[Tuple[str, str], ...] = (("neutral", "angry"), ("neutral", "happy"), ("neutral", "sad"))


def _as_coeffs(c) -> np.ndarray:
    return np.asarray(c.coeffs if isinstance(c, MelCepstra) else c, dtype=np.float64)


def _as_f0(p) -> np.ndarray:
    return np.asarray(p.f0 if isinstance(p, PitchTrack) else p, dtype=np.float64)


def mcd(target, converted) -> float:
    """Mean per-frame mel-cepstral distortion in dB over the first min(len) frames, no time warping."""
    t, c = _as_coeffs(target), _as_coeffs(converted)
    if t.shape[0] == 0 or c.shape[0] == 0:
        raise ValueError("mcd needs non-empty inputs")
    if t.shape[1] != c.shape[1]:
        raise ValueError(f"coefficient count mismatch {t.shape[1]} vs {c.shape[1]}")
    n = min(t.shape[0], c.shape[0])
    diff = t[:n] - c[:n]
    return float(np.mean(MCD_CONST * np.sqrt(2.0 * np.sum(diff * diff, axis=1))))


def f0_rmse(target, converted) -> float:
    """RMSE in Hz over the first min(len) frames; unvoiced frames count as 0 Hz."""
    t, c = _as_f0(target), _as_f0(converted)
    if t.size == 0 or c.size == 0:
        raise ValueError("f0_rmse needs non-empty inputs")
    n = min(t.size, c.size)
    return float(np.sqrt(np.mean((t[:n] - c[:n]) ** 2)))


# ---------------------------------------------------------------------------
# conversion


@dataclass
class ConversionRequest:
    source_utt: str
    prosody_ref_utt: str
    speaker_ref_utt: Optional[str] = None


@dataclass
class ConversionResult:
    converted_mel: MelSpectrogram
    alignments: np.ndarray
    truncated: bool
    waveform: Optional[Waveform] = None
    request: Optional[ConversionRequest] = None


def default_speaker_ref(manifest: Manifest, source_utt: str) -> str:
    """First other utterance of the source speaker (the source itself if it is the only one)."""
    spk = manifest[source_utt].speaker_id
    others = [u for u in manifest.by_speaker()[spk] if u != source_utt]
    return others[0] if others else source_utt


def convert(
    req: ConversionRequest,
    model: ReconstructionModel,
    cache: CorpusCache,
    seed: int = 0,
    vocode: bool = False,
    max_frames: Optional[int] = None,
) -> ConversionResult:
    """Units from the source, speaker from the speaker reference, prosody from the prosody reference.

    Free-running decode; the output length is set by the stop gate (capped at
    ``max_decoder_ratio`` times the prosody reference length).
    """
    for utt in (req.source_utt, req.prosody_ref_utt, req.speaker_ref_utt):
        if utt is not None and utt not in cache.manifest:
            raise KeyError(f"unknown utterance {utt!r}")
    spk_utt = req.speaker_ref_utt or default_speaker_ref(cache.manifest, req.source_utt)
    units = cache.refined(req.source_utt)
    pro_mel = cache.mel(req.prosody_ref_utt)
    spk_mel = cache.mel(spk_utt)
    model.eval()
    if max_frames is None:
        max_frames = int(math.ceil(model.cfg.max_decoder_ratio * pro_mel.n_frames))
    out = model.decode(
        model.encode_units(units),
        model.encode_style(spk_mel, SPEAKER),
        model.encode_style(pro_mel, PROSODY),
        teacher=None,
        max_frames=max_frames,
        seed=seed,
    )
    n = int(out.lengths[0])
    mel = MelSpectrogram(out.mel[0, :n].double().numpy(), cache.dsp.sample_rate, cache.dsp.hop_length, req.source_utt)
    result = ConversionResult(mel, out.alignments[0, :n].double().numpy(), out.truncated, None, req)
    if out.truncated:
        log.warning("conversion of %s hit the %d-frame cap", req.source_utt, max_frames)
    if vocode:
        result.waveform = invert_mel(mel, cfg=cache.dsp)
    return result


def finetune_evc(
    checkpoint: ModelCheckpoint,
    manifest: Manifest,
    cache: CorpusCache,
    train_cfg: Optional[TrainConfig] = None,
    out_dir=None,
    lr: float = 1e-5,
    callback=None,
) -> TrainResult:
    """Continue reconstruction training on an emotional corpus at a fixed learning rate."""
    base = train_cfg or TrainConfig()
    cfg = TrainConfig(**{**base.__dict__, "lr_schedule": "constant", "initial_lr": lr, "warmup_steps": 0})
    return pretrain(manifest, cache, checkpoint.model_config, cfg, out_dir, init=checkpoint, resume=False, callback=callback)


# ---------------------------------------------------------------------------
# scoring directories


def _load_for_scoring(path: Path, dsp: DSPConfig) -> Tuple[np.ndarray, np.ndarray]:
    if path.suffix == ".wav":
        w = read_wav(path, cfg=dsp)
        return mel_cepstra(w, dsp).coeffs, extract_f0(w, dsp).f0
    m = load_mel(path)
    return mel_cepstra_from_logmel(m.frames, dsp.n_cepstra), extract_f0(invert_mel(m, cfg=dsp), dsp).f0


def evc_score(target_dir, converted_dir, out_csv=None, dsp: DSPConfig = DEFAULT_DSP) -> List[dict]:
    """Score every converted file that has a same-stem target. Rows: utt_id, mcd_db, f0_rmse_hz."""
    target_dir, converted_dir = Path(target_dir), Path(converted_dir)
    targets = {p.stem: p for p in sorted(target_dir.iterdir()) if p.suffix in (".wav", ".mel")}
    rows = []
    for conv in sorted(converted_dir.iterdir()):
        if conv.suffix not in (".wav", ".mel") or conv.stem not in targets:
            continue
        tc, tf = _load_for_scoring(targets[conv.stem], dsp)
        cc, cf = _load_for_scoring(conv, dsp)
        rows.append({"utt_id": conv.stem, "mcd_db": mcd(tc, cc), "f0_rmse_hz": f0_rmse(tf, cf)})
    if out_csv is not None:
        write_score_csv(out_csv, rows)
    return rows


def write_score_csv(path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "mcd_db", "f0_rmse_hz"])
        for r in rows:
            w.writerow([r["utt_id"], f"{r['mcd_db']:.6f}", f"{r['f0_rmse_hz']:.6f}"])
        if rows:
            w.writerow(
                [
                    "__mean__",
                    f"{np.mean([r['mcd_db'] for r in rows]):.6f}",
                    f"{np.mean([r['f0_rmse_hz'] for r in rows]):.6f}",
                ]
            )


# ---------------------------------------------------------------------------
# embeddings


def pca_1d(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project rows onto the first principal axis.

    Returns (projection [n], unit direction [d], mean [d]). The sign is fixed so
    the largest-magnitude component of the direction is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    if direction[np.argmax(np.abs(direction))] < 0:
        direction = -direction
    return centered @ direction, direction, mean


def write_vectors(path, vectors: Dict[str, np.ndarray]) -> None:
    """``utt_id|v1 v2 ...`` with round-trip float formatting."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt, v in vectors.items():
            fh.write(f"{utt}|{' '.join(repr(float(x)) for x in np.ravel(v))}\n")


def read_vectors(path) -> Dict[str, np.ndarray]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            utt, body = line.split("|", 1)
            out[utt] = np.array([float(t) for t in body.split()])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: malformed vector line") from exc
    return out


@torch.no_grad()
def export_embeddings(model: ReconstructionModel, manifest: Manifest, cache: CorpusCache, out_dir) -> dict:
    """Dump prosody/speaker/unit-mean embeddings and per-utterance PCA traces of pre-pooling activations."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    prosody, speaker, unit_means, traces = {}, {}, {}, {}
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(exist_ok=True)
    for utt in manifest.utt_ids:
        mel = cache.mel(utt)
        prosody[utt] = model.encode_style(mel, PROSODY)
        speaker[utt] = model.encode_style(mel, SPEAKER)
        if utt in cache.units:
            unit_means[utt] = model.encode_units(cache.units[utt]).mean(axis=0)
        x, n = model._mel_tensor(mel)
        acts, _ = model.prosody_encoder.frame_activations(x, n)
        acts = acts[0].T.double().numpy()  # [T, C]
        np.save(frames_dir / f"{utt}.npy", acts)
        traces[utt] = pca_1d(acts)[0] if acts.shape[0] > 1 else np.zeros(acts.shape[0])
    write_vectors(out_dir / "prosody.emb", prosody)
    write_vectors(out_dir / "speaker.emb", speaker)
    if unit_means:
        write_vectors(out_dir / "unit_mean.emb", unit_means)
    with open(out_dir / "pca_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_id", "frame", "pc1"])
        for utt, tr in traces.items():
            for i, v in enumerate(tr):
                w.writerow([utt, i, f"{v:.8g}"])
    return {"prosody": prosody, "speaker": speaker, "unit_mean": unit_means, "pca": traces}
