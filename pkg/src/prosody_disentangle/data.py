"""Training samples and batches: same-speaker reference sampling, speed perturbation, SpecAugment."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .dsp import (
    DEFAULT_DSP,
    AugmentSpec,
    DSPConfig,
    MelSpectrogram,
    compute_mel,
    read_wav,
    spec_augment,
    speed_perturb,
)
from .manifest import Manifest
from .units import RefinedUnits

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    pass


class CorpusCache:
    """Lazily computed, memoised waveforms and mels keyed by (utt_id, speed factor)."""

    def __init__(self, manifest: Manifest, units: Optional[Dict[str, RefinedUnits]] = None, dsp: DSPConfig = DEFAULT_DSP):
        self.manifest = manifest
        self.units = units or {}
        self.dsp = dsp
        self._mels: Dict[tuple, MelSpectrogram] = {}
        self._waves: Dict[str, object] = {}

    def waveform(self, utt_id: str):
        if utt_id not in self._waves:
            try:
                self._waves[utt_id] = read_wav(self.manifest[utt_id].wav_path, utt_id, self.dsp)
            except Exception as exc:
                raise DataError(f"{utt_id}: {exc}") from exc
        return self._waves[utt_id]

    def mel(self, utt_id: str, factor: float = 1.0) -> MelSpectrogram:
        key = (utt_id, float(factor))
        if key not in self._mels:
            w = self.waveform(utt_id)
            if factor != 1.0:
                w = speed_perturb(w, factor)
            try:
                self._mels[key] = compute_mel(w, self.dsp)
            except Exception as exc:
                raise DataError(f"{utt_id}: {exc}") from exc
        return self._mels[key]

    def refined(self, utt_id: str) -> RefinedUnits:
        if utt_id not in self.units:
            raise DataError(f"{utt_id}: no unit sequence (run quantize first)")
        return self.units[utt_id]


@dataclass
class SamplePlan:
    utt_id: str
    speaker_ref_id: str
    speed_factor: float
    ref_fallback: bool
    mask_seed: int


@dataclass
class TrainSample:
    utt_id: str
    content_mel: MelSpectrogram
    units: RefinedUnits
    speaker_ref_mel: MelSpectrogram
    prosody_mel: MelSpectrogram
    speaker_ref_id: str
    speed_factor: float = 1.0
    ref_fallback: bool = False


@dataclass
class Batch:
    samples: List[TrainSample]
    units: torch.Tensor
    unit_lengths: torch.Tensor
    target: torch.Tensor
    target_lengths: torch.Tensor
    prosody: torch.Tensor
    prosody_lengths: torch.Tensor
    speaker: torch.Tensor
    speaker_lengths: torch.Tensor

    @property
    def utt_ids(self) -> List[str]:
        return [s.utt_id for s in self.samples]

    def __len__(self):
        return len(self.samples)

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(
            self.samples,
            self.units,
            self.unit_lengths,
            self.target.to(dtype),
            self.target_lengths,
            self.prosody.to(dtype),
            self.prosody_lengths,
            self.speaker.to(dtype),
            self.speaker_lengths,
        )


def _pad(mats: Sequence[np.ndarray], value: float) -> torch.Tensor:
    n = max(m.shape[0] for m in mats)
    out = np.full((len(mats), n, mats[0].shape[1]), value, dtype=np.float32)
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = m
    return torch.from_numpy(out)


def collate(samples: List[TrainSample], pad_value: float) -> Batch:
    ids = [np.asarray(s.units.ids, dtype=np.int64) for s in samples]
    units = torch.zeros(len(samples), max(len(i) for i in ids), dtype=torch.long)
    for i, seq in enumerate(ids):
        units[i, : len(seq)] = torch.from_numpy(seq)
    lens = lambda ms: torch.tensor([m.n_frames for m in ms])  # noqa: E731
    targets = [s.content_mel for s in samples]
    prosody = [s.prosody_mel for s in samples]
    speaker = [s.speaker_ref_mel for s in samples]
    return Batch(
        samples,
        units,
        torch.tensor([len(i) for i in ids]),
        _pad([m.frames for m in targets], pad_value),
        lens(targets),
        _pad([m.frames for m in prosody], pad_value),
        lens(prosody),
        _pad([m.frames for m in speaker], pad_value),
        lens(speaker),
    )


def plan_epoch(
    manifest: Manifest,
    utt_ids: Sequence[str],
    seed: int,
    epoch: int,
    batch_size: int,
    speed_factors: Sequence[float] = (1.0,),
    lengths: Optional[Dict[str, int]] = None,
    bucket_factor: int = 4,
) -> List[List[SamplePlan]]:
    """Decide order, speaker references and augmentation draws for one epoch.

    Pure function of its arguments. Utterances are shuffled, sorted by length
    inside windows of ``bucket_factor * batch_size``, cut into batches (the
    last may be short), and the batch order is shuffled again.
    """
    rng = np.random.default_rng([seed, epoch])
    by_spk = manifest.by_speaker()
    ids = [utt_ids[i] for i in rng.permutation(len(utt_ids))]
    if lengths:
        window = max(1, bucket_factor * batch_size)
        ids = [u for s in range(0, len(ids), window) for u in sorted(ids[s : s + window], key=lambda u: lengths[u])]
    batches = [ids[s : s + batch_size] for s in range(0, len(ids), batch_size)]
    order = rng.permutation(len(batches))
    plans = []
    for bi in order:
        plan = []
        for utt in batches[bi]:
            spk = manifest[utt].speaker_id
            pool = [u for u in by_spk.get(spk, []) if u != utt]
            if not by_spk.get(spk):
                raise DataError(f"speaker {spk} has no utterances")
            fallback = not pool
            ref = utt if fallback else pool[int(rng.integers(len(pool)))]
            if fallback:
                log.warning("speaker %s has a single utterance; %s is its own speaker reference", spk, utt)
            factor = float(speed_factors[int(rng.integers(len(speed_factors)))])
            plan.append(SamplePlan(utt, ref, factor, fallback, int(rng.integers(2**31))))
        plans.append(plan)
    return plans


def materialize(plan: List[SamplePlan], cache: CorpusCache, augment: Optional[AugmentSpec] = None) -> Batch:
    samples = []
    for p in plan:
        target = cache.mel(p.utt_id, p.speed_factor)
        prosody = target
        if augment is not None and augment.n_freq_masks > 0:
            prosody = spec_augment(target, augment, cache.dsp, np.random.default_rng(p.mask_seed))
        samples.append(
            TrainSample(
                p.utt_id,
                target,
                cache.refined(p.utt_id),
                cache.mel(p.speaker_ref_id),
                prosody,
                p.speaker_ref_id,
                p.speed_factor,
                p.ref_fallback,
            )
        )
    return collate(samples, float(np.log(cache.dsp.log_floor)))


def make_batches(
    manifest: Manifest,
    cache: CorpusCache,
    seed: int,
    batch_size: int,
    epoch: int = 0,
    augment: Optional[AugmentSpec] = None,
    utt_ids: Optional[Sequence[str]] = None,
):
    """Yield the batches of one epoch."""
    utt_ids = list(utt_ids) if utt_ids is not None else manifest.utt_ids
    factors = tuple(augment.speed_factors) if augment is not None else (1.0,)
    lengths = {u: cache.mel(u).n_frames for u in utt_ids}
    for plan in plan_epoch(manifest, utt_ids, seed, epoch, batch_size, factors, lengths):
        yield materialize(plan, cache, augment)
