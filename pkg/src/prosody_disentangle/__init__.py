"""Self-supervised prosody representations learned by reconstructing speech from discrete units."""
from .dsp import DSPConfig, MelSpectrogram, PitchTrack, Waveform, compute_mel, extract_f0, mel_cepstra
from .model import ModelConfig, ReconstructionModel, build_model, preset
from .train import TrainConfig, lr_at, pretrain

__version__ = "0.1.0"

__all__ = [
    "DSPConfig",
    "MelSpectrogram",
    "ModelConfig",
    "PitchTrack",
    "ReconstructionModel",
    "TrainConfig",
    "Waveform",
    "build_model",
    "compute_mel",
    "extract_f0",
    "lr_at",
    "mel_cepstra",
    "preset",
    "pretrain",
]
