"""Seeded synthetic corpus: vowel-like harmonic "phones" with speaker and emotion control.

Content is the phone sequence (formant pattern), speaker identity scales the
formants and base pitch, and the pseudo-emotion sets pitch level/slope,
speaking rate and loudness. This is enough structure for every pipeline stage
to run without licensed recordings.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dsp import Waveform, write_wav
from .manifest import Manifest, ManifestRow, write_manifest

SAMPLE_RATE = 16000

# (F1, F2, F3) in Hz
PHONES: Tuple[Tuple[float, float, float], ...] = (
    (730, 1090, 2440),
    (270, 2290, 3010),
    (530, 1840, 2480),
    (300, 870, 2240),
    (640, 1190, 2390),
    (440, 1020, 2240),
    (660, 1720, 2410),
    (490, 1350, 1690),
)


@dataclass(frozen=True)
class EmotionStyle:
    pitch_scale: float
    pitch_slope: float  # relative change start -> end of utterance
    phone_dur: float  # seconds
    energy: float


EMOTIONS: Dict[str, EmotionStyle] = {
    "neu": EmotionStyle(1.0, 0.0, 0.10, 0.45),
    "ang": EmotionStyle(1.35, -0.25, 0.065, 0.85),
    "hap": EmotionStyle(1.5, 0.3, 0.08, 0.7),
    "exc": EmotionStyle(1.5, 0.3, 0.08, 0.7),
    "sad": EmotionStyle(0.8, -0.1, 0.16, 0.3),
}


@dataclass(frozen=True)
class SpeakerStyle:
    base_f0: float
    formant_scale: float
    tilt: float  # spectral tilt exponent on harmonic amplitude


def speaker_styles(n: int, seed: int = 0) -> List[SpeakerStyle]:
    rng = np.random.default_rng(seed + 7919)
    out = []
    for i in range(n):
        female = i % 2 == 1
        out.append(
            SpeakerStyle(
                base_f0=float(rng.uniform(190, 230) if female else rng.uniform(100, 130)),
                formant_scale=float(rng.uniform(1.08, 1.2) if female else rng.uniform(0.85, 0.97)),
                tilt=float(rng.uniform(0.6, 1.2)),
            )
        )
    return out


def synthesize(
    phones: Sequence[int], speaker: SpeakerStyle, emotion: EmotionStyle, rng: np.random.Generator, sr: int = SAMPLE_RATE
) -> np.ndarray:
    seg_len = [max(1, int(round(emotion.phone_dur * rng.uniform(0.9, 1.1) * sr))) for _ in phones]
    total = sum(seg_len)
    t = np.arange(total) / sr
    frac = t / max(t[-1], 1e-9)
    f0 = speaker.base_f0 * emotion.pitch_scale * (1.0 + emotion.pitch_slope * (frac - 0.5))
    f0 *= 1.0 + 0.02 * np.sin(2 * np.pi * 5.0 * t)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    out = np.zeros(total)
    start = 0
    ramp = int(0.01 * sr)
    for ph, n in zip(phones, seg_len):
        sl = slice(start, start + n)
        formants = np.asarray(PHONES[ph]) * speaker.formant_scale
        mean_f0 = float(f0[sl].mean())
        k = np.arange(1, int(7000 // mean_f0) + 1)
        hk = k * mean_f0
        env = sum(np.exp(-0.5 * ((hk - f) / (0.08 * f + 60)) ** 2) for f in formants) + 0.02
        amp = env / k**speaker.tilt
        seg = (amp[:, None] * np.sin(k[:, None] * phase[None, sl])).sum(0)
        win = np.ones(n)
        r = min(ramp, n // 2)
        if r > 0:
            win[:r] = np.linspace(0, 1, r)
            win[-r:] = np.linspace(1, 0, r)
        out[sl] += seg * win
        start += n
    out /= max(np.max(np.abs(out)), 1e-9)
    out *= emotion.energy
    out += rng.normal(0, 0.003, out.size)
    pad = np.zeros(int(0.04 * sr))
    return np.clip(np.concatenate([pad, out, pad]), -1, 1)


def make_toy_corpus(
    out_dir,
    n_speakers: int = 2,
    utts_per_speaker: int = 4,
    n_sessions: Optional[int] = None,
    emotions: Sequence[str] = ("neu", "ang", "hap", "sad"),
    phones_per_utt: Tuple[int, int] = (3, 5),
    seed: int = 0,
    corpus_name: str = "toy",
) -> Manifest:
    """Write WAVs plus ``manifest.txt`` into ``out_dir``.

    Speakers are paired into sessions (two per session, IEMOCAP-style) unless
    ``n_sessions`` is given; emotions cycle deterministically over each
    speaker's utterances so every speaker covers every class.
    """
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    styles = speaker_styles(n_speakers, seed)
    rows = []
    for s in range(n_speakers):
        spk = f"spk{s:02d}"
        session = f"ses{(s // 2 if n_sessions is None else s % n_sessions) + 1:02d}"
        for u in range(utts_per_speaker):
            label = emotions[(u + s) % len(emotions)]
            n_ph = int(rng.integers(phones_per_utt[0], phones_per_utt[1] + 1))
            seq = [int(rng.integers(len(PHONES)))]
            while len(seq) < n_ph:
                nxt = int(rng.integers(len(PHONES)))
                if nxt != seq[-1]:
                    seq.append(nxt)
            samples = synthesize(seq, styles[s], EMOTIONS[label], rng)
            utt = f"{spk}_{u:03d}"
            wav_path = out_dir / "wav" / f"{utt}.wav"
            write_wav(wav_path, Waveform(samples, SAMPLE_RATE, utt))
            rows.append(ManifestRow(utt, wav_path, spk, session, label))
    manifest = Manifest(rows, corpus_name)
    write_manifest(out_dir / "manifest.txt", manifest)
    return manifest


REPETITION_CLASSES: Dict[str, int] = {"angry": 1, "happy": 2, "neutral": 3, "sad": 4}


def repetition_corpus(
    vocab_size: int = 8,
    n_speakers: int = 10,
    utts_per_speaker: int = 24,
    length: Tuple[int, int] = (8, 15),
    repeats: Optional[Dict[str, int]] = None,
    seed: int = 0,
) -> Tuple[Manifest, Dict[str, np.ndarray], Dict[str, str]]:
    """Unit sequences whose only class cue is how many times each unit is repeated.

    Each utterance draws ``length`` units with no two adjacent units equal and
    repeats every unit ``repeats[label]`` times, so deduplication maps all
    classes onto the same distribution. Two speakers share a session.
    """
    repeats = dict(repeats or REPETITION_CLASSES)
    classes = sorted(repeats)
    rng = np.random.default_rng(seed)
    rows, seqs, labels = [], {}, {}
    for s in range(n_speakers):
        for i in range(utts_per_speaker):
            label = classes[i % len(classes)]
            utt = f"spk{s:02d}_{i:03d}"
            tokens = [int(rng.integers(vocab_size))]
            target = int(rng.integers(length[0], length[1] + 1))
            while len(tokens) < target:
                t = int(rng.integers(vocab_size))
                if t != tokens[-1] or vocab_size == 1:
                    tokens.append(t)
            seqs[utt] = np.repeat(np.asarray(tokens, dtype=np.int64), repeats[label])
            labels[utt] = label
            rows.append(ManifestRow(utt, f"/synthetic/{utt}.wav", f"spk{s:02d}", f"ses{s // 2:02d}", label))
    return Manifest(rows, "repetition"), seqs, labels
