"""Signal-processing front-end: log-mel spectrograms, pitch, mel-cepstra, augmentation.

All framing uses the same grid: a Hann window of ``win_length`` samples moved by
``hop_length`` samples with no centre padding, so

    n_frames = 1 + (n_samples - win_length) // hop_length

and every representation computed from one waveform shares the frame count.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sp_signal


class AudioError(ValueError):
    """Raised for invalid waveforms or audio files."""


@dataclass(frozen=True)
class DSPConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    win_length: int = 1024  # 64 ms
    hop_length: int = 256  # 16 ms
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    n_cepstra: int = 24
    f0_min: float = 60.0
    f0_max: float = 400.0
    voicing_threshold: float = 0.3


DEFAULT_DSP = DSPConfig()


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int
    utt_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise AudioError(f"{self.utt_id}: expected mono samples, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise AudioError(f"{self.utt_id}: sample_rate must be positive")
        if self.samples.size == 0:
            raise AudioError(f"{self.utt_id}: empty waveform")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError(f"{self.utt_id}: non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # [n_frames, n_mels] natural-log mel magnitudes
    sample_rate: int = DEFAULT_DSP.sample_rate
    hop_length: int = DEFAULT_DSP.hop_length
    utt_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class PitchTrack:
    f0: np.ndarray  # Hz per frame, 0.0 where unvoiced
    utt_id: str = ""


@dataclass
class MelCepstra:
    coeffs: np.ndarray  # [n_frames, 24], coefficients 1..24
    utt_id: str = ""


@dataclass
class AugmentSpec:
    speed_factors: Sequence[float] = (0.9, 1.0, 1.1)
    n_freq_masks: int = 2
    max_mask_width: int = 50
    rng_seed: int = 0

    def __post_init__(self):
        if any(f <= 0 for f in self.speed_factors):
            raise ValueError("speed factors must be positive")
        if self.n_freq_masks < 0 or self.max_mask_width < 0:
            raise ValueError("mask counts and widths must be non-negative")


# ---------------------------------------------------------------------------
# mel scale (Slaney: linear below 1 kHz, logarithmic above)

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(freq):
    freq = np.asarray(freq, dtype=np.float64)
    mel = freq / _F_SP
    log_region = freq >= _MIN_LOG_HZ
    return np.where(log_region, _MIN_LOG_MEL + np.log(np.maximum(freq, 1e-10) / _MIN_LOG_HZ) / _LOGSTEP, mel)


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    freq = mel * _F_SP
    log_region = mel >= _MIN_LOG_MEL
    return np.where(log_region, _MIN_LOG_HZ * np.exp(_LOGSTEP * (mel - _MIN_LOG_MEL)), freq)


def mel_band_edges(cfg: DSPConfig = DEFAULT_DSP) -> np.ndarray:
    """The n_mels + 2 band edge frequencies in Hz; entries 1..n_mels are the centres."""
    mels = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


_FB_CACHE: dict = {}


def mel_filterbank(cfg: DSPConfig = DEFAULT_DSP) -> np.ndarray:
    """Triangular, area-normalised filterbank of shape [n_mels, n_fft // 2 + 1]."""
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    if key in _FB_CACHE:
        return _FB_CACHE[key]
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = mel_band_edges(cfg)
    fdiff = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    weights.setflags(write=False)
    _FB_CACHE[key] = weights
    return weights


# ---------------------------------------------------------------------------
# framing and STFT


def n_frames_for(n_samples: int, cfg: DSPConfig = DEFAULT_DSP) -> int:
    if n_samples < cfg.win_length:
        return 0
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def frame_signal(x: np.ndarray, cfg: DSPConfig = DEFAULT_DSP) -> np.ndarray:
    n = n_frames_for(x.size, cfg)
    if n == 0:
        raise AudioError(f"signal of {x.size} samples is shorter than one window ({cfg.win_length})")
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[:: cfg.hop_length]
    return view[:n]


def _window(cfg: DSPConfig) -> np.ndarray:
    return sp_signal.get_window("hann", cfg.win_length, fftbins=True)


def stft(x: np.ndarray, cfg: DSPConfig = DEFAULT_DSP) -> np.ndarray:
    frames = frame_signal(x, cfg) * _window(cfg)
    return np.fft.rfft(frames, n=cfg.n_fft, axis=1)


def istft(spec: np.ndarray, cfg: DSPConfig = DEFAULT_DSP) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    win = _window(cfg)
    n_frames = spec.shape[0]
    length = (n_frames - 1) * cfg.hop_length + cfg.win_length
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1)[:, : cfg.win_length] * win
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n_frames):
        start = i * cfg.hop_length
        out[start : start + cfg.win_length] += frames[i]
        norm[start : start + cfg.win_length] += win**2
    nz = norm > 1e-8
    out[nz] /= norm[nz]
    return out


def _check_wave(w: Waveform, cfg: DSPConfig) -> np.ndarray:
    if w.sample_rate != cfg.sample_rate:
        raise AudioError(f"{w.utt_id}: sample rate {w.sample_rate} != configured {cfg.sample_rate}")
    if w.samples.size < cfg.win_length:
        raise AudioError(f"{w.utt_id}: {w.samples.size} samples is shorter than one window")
    return w.samples


# ---------------------------------------------------------------------------
# features


def compute_mel(w: Waveform, cfg: DSPConfig = DEFAULT_DSP) -> MelSpectrogram:
    x = _check_wave(w, cfg)
    mag = np.abs(stft(x, cfg))
    mel = mag @ mel_filterbank(cfg).T
    frames = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(frames, cfg.sample_rate, cfg.hop_length, w.utt_id)


def mel_cepstra_from_logmel(logmel: np.ndarray, n_cepstra: int = 24) -> np.ndarray:
    """Orthonormal DCT-II of each log-mel row, keeping coefficients 1..n_cepstra."""
    c = sp_fft.dct(np.asarray(logmel, dtype=np.float64), type=2, norm="ortho", axis=-1)
    return c[..., 1 : n_cepstra + 1]


def mel_cepstra(w: Waveform, cfg: DSPConfig = DEFAULT_DSP) -> MelCepstra:
    mel = compute_mel(w, cfg)
    return MelCepstra(mel_cepstra_from_logmel(mel.frames, cfg.n_cepstra), w.utt_id)


def _f0_frames(frames: np.ndarray, cfg: DSPConfig) -> np.ndarray:
    n = frames.shape[1]
    min_lag = int(np.floor(cfg.sample_rate / cfg.f0_max))
    max_lag = min(int(np.ceil(cfg.sample_rate / cfg.f0_min)), n - 2)
    frames = frames - frames.mean(axis=1, keepdims=True)
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, n=nfft, axis=1)[:, : max_lag + 2]
    # normalised cross-correlation between x[0:n-lag] and x[lag:n]
    sq = frames**2
    head = np.cumsum(sq, axis=1)  # head[:, k] = sum x[0..k]^2
    total = head[:, -1:]
    lags = np.arange(max_lag + 2)
    e_head = np.concatenate([total, head[:, n - 1 - lags[1:]]], axis=1)
    e_tail = total - np.concatenate([np.zeros((frames.shape[0], 1)), head[:, lags[1:] - 1]], axis=1)
    denom = np.sqrt(np.maximum(e_head * e_tail, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        nccf = np.where(denom > 1e-10, acf / denom, 0.0)

    f0 = np.zeros(frames.shape[0])
    for i in range(frames.shape[0]):
        if total[i, 0] < 1e-8:
            continue
        seg = nccf[i, min_lag : max_lag + 1]
        best = seg.max()
        if best < cfg.voicing_threshold:
            continue
        # first local peak close to the global maximum avoids octave-down errors
        lag = None
        for k in range(1, seg.size - 1):
            if seg[k] >= 0.9 * best and seg[k] >= seg[k - 1] and seg[k] >= seg[k + 1]:
                lag = k + min_lag
                break
        if lag is None:
            lag = int(np.argmax(seg)) + min_lag
        a, b, c = nccf[i, lag - 1], nccf[i, lag], nccf[i, lag + 1]
        denom_p = a - 2 * b + c
        shift = 0.5 * (a - c) / denom_p if abs(denom_p) > 1e-12 else 0.0
        f0[i] = cfg.sample_rate / (lag + float(np.clip(shift, -0.5, 0.5)))
    return f0


def extract_f0(w: Waveform, cfg: DSPConfig = DEFAULT_DSP) -> PitchTrack:
    """Autocorrelation pitch tracker on the mel frame grid; unvoiced frames are 0.0."""
    x = _check_wave(w, cfg)
    return PitchTrack(_f0_frames(frame_signal(x, cfg), cfg), w.utt_id)


# ---------------------------------------------------------------------------
# augmentation


def speed_perturb(w: Waveform, factor: float) -> Waveform:
    """Resample so the clip plays ``factor`` times faster (tempo and pitch both shift)."""
    if factor <= 0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    if factor == 1.0:
        return Waveform(w.samples.copy(), w.sample_rate, w.utt_id)
    ratio = Fraction(1.0 / factor).limit_denominator(1000)
    y = sp_signal.resample_poly(w.samples, ratio.numerator, ratio.denominator)
    target = int(round(w.samples.size / factor))
    if y.size >= target:
        y = y[:target]
    else:
        y = np.pad(y, (0, target - y.size))
    return Waveform(np.clip(y, -1.0, 1.0), w.sample_rate, w.utt_id)


def spec_augment(
    m: MelSpectrogram, spec: AugmentSpec, cfg: DSPConfig = DEFAULT_DSP, rng: Optional[np.random.Generator] = None
) -> MelSpectrogram:
    """Frequency masking; masked cells take the log floor value."""
    out = m.frames.copy()
    if spec.n_freq_masks == 0:
        return MelSpectrogram(out, m.sample_rate, m.hop_length, m.utt_id)
    rng = rng if rng is not None else np.random.default_rng(spec.rng_seed)
    n_ch = out.shape[1]
    fill = np.log(cfg.log_floor)
    for _ in range(spec.n_freq_masks):
        width = int(rng.integers(0, min(spec.max_mask_width, n_ch) + 1))
        start = int(rng.integers(0, n_ch - width + 1))
        out[:, start : start + width] = fill
    return MelSpectrogram(out, m.sample_rate, m.hop_length, m.utt_id)


# ---------------------------------------------------------------------------
# inversion


def invert_mel(m: MelSpectrogram, n_iters: int = 60, cfg: DSPConfig = DEFAULT_DSP, seed: int = 0) -> Waveform:
    """Griffin-Lim phase reconstruction from a log-mel spectrogram."""
    mel_mag = np.exp(np.asarray(m.frames, dtype=np.float64))
    mel_mag[m.frames <= np.log(cfg.log_floor) + 1e-9] = 0.0
    lin = np.maximum(mel_mag @ np.linalg.pinv(mel_filterbank(cfg)).T, 0.0)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(lin.shape))
    x = istft(lin * phase, cfg)
    for _ in range(n_iters):
        s = stft(x, cfg)
        phase = s / np.maximum(np.abs(s), 1e-12)
        x = istft(lin * phase, cfg)
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    return Waveform(x, cfg.sample_rate, m.utt_id)


# ---------------------------------------------------------------------------
# file formats

MEL_MAGIC = b"PMEL"


def read_wav(path, utt_id: Optional[str] = None, cfg: DSPConfig = DEFAULT_DSP) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise AudioError(f"{path}: expected mono audio")
            if fh.getsampwidth() != 2:
                raise AudioError(f"{path}: expected 16-bit PCM")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise AudioError(f"{path}: {exc}") from exc
    if rate != cfg.sample_rate:
        raise AudioError(f"{path}: sample rate {rate} Hz, expected {cfg.sample_rate}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate, utt_id if utt_id is not None else path.stem)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def save_mel(path, m: MelSpectrogram) -> None:
    frames = np.ascontiguousarray(m.frames, dtype="<f4")
    header = MEL_MAGIC + struct.pack("<IIII", frames.shape[0], frames.shape[1], m.sample_rate, m.hop_length)
    Path(path).write_bytes(header + frames.tobytes())


def load_mel(path, utt_id: Optional[str] = None) -> MelSpectrogram:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 20 or data[:4] != MEL_MAGIC:
        raise AudioError(f"{path}: not a PMEL file")
    n_frames, n_ch, rate, hop = struct.unpack("<IIII", data[4:20])
    body = data[20:]
    if len(body) != n_frames * n_ch * 4:
        raise AudioError(f"{path}: truncated mel file ({len(body)} bytes for {n_frames}x{n_ch})")
    frames = np.frombuffer(body, dtype="<f4").reshape(n_frames, n_ch).astype(np.float64)
    return MelSpectrogram(frames, rate, hop, utt_id if utt_id is not None else path.stem)


def save_pitch(path, p: PitchTrack) -> None:
    Path(path).write_text("".join(f"{v!r}\n" for v in map(float, p.f0)))


def load_pitch(path, utt_id: Optional[str] = None) -> PitchTrack:
    path = Path(path)
    values = [float(line) for line in path.read_text().split()]
    return PitchTrack(np.asarray(values), utt_id if utt_id is not None else path.stem)
