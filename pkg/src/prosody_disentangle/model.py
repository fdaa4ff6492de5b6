"""Reconstruction model: unit embedder, ECAPA-style style encoders, attention decoder.

The decoder rebuilds 80-channel log-mel frames from three streams: deduplicated
content units, a speaker embedding taken from a *different* utterance of the
same speaker (frozen encoder), and a prosody embedding taken from the target
utterance itself (trainable encoder).
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .dsp import MelSpectrogram
from .units import RefinedUnits

SPEAKER = "speaker"
PROSODY = "prosody"


class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 100
    n_mels: int = 80
    # unit embedder
    unit_embed_dim: int = 512
    u2v_conv_channels: int = 512
    u2v_conv_layers: int = 3
    u2v_kernel: int = 5
    u2v_lstm_hidden: int = 256
    u2v_dropout: float = 0.1
    unit_repr_dim: int = 256
    # style encoders
    speaker_dim: int = 192
    prosody_dim: int = 192
    ecapa_channels: int = 1024
    ecapa_mfa_channels: int = 1536
    ecapa_tdnn_kernel: int = 5
    ecapa_kernel: int = 3
    ecapa_dilations: Tuple[int, ...] = (2, 3, 4)
    ecapa_res2_scale: int = 8
    se_bottleneck: int = 128
    pool_bottleneck: int = 128
    # conditioning + attention
    style_proj_dim: int = 448
    attention_rnn_dim: int = 1408
    attention_dim: int = 128
    location_filters: int = 32
    location_kernel: int = 31
    # decoder
    prenet_dim: int = 256
    prenet_dropout: float = 0.5
    decoder_rnn_dim: int = 1024
    max_decoder_ratio: float = 3.0
    init_seed: int = 0
    preset: str = "full"

    def __post_init__(self):
        self.ecapa_dilations = tuple(int(d) for d in self.ecapa_dilations)
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and f.name not in ("init_seed",) and v <= 0:
                raise ValueError(f"ModelConfig.{f.name} must be positive, got {v}")
        if self.ecapa_channels % self.ecapa_res2_scale:
            raise ValueError("ecapa_channels must be divisible by ecapa_res2_scale")
        if self.location_kernel % 2 == 0:
            raise ValueError("location_kernel must be odd")

    @property
    def memory_dim(self) -> int:
        return self.unit_repr_dim + 2 * self.style_proj_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ecapa_dilations"] = list(self.ecapa_dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


_WIDTHS = (
    "unit_embed_dim",
    "u2v_conv_channels",
    "u2v_lstm_hidden",
    "ecapa_channels",
    "ecapa_mfa_channels",
    "se_bottleneck",
    "pool_bottleneck",
    "style_proj_dim",
    "attention_rnn_dim",
    "attention_dim",
    "location_filters",
    "prenet_dim",
    "decoder_rnn_dim",
)


def preset(name: str = "full", shrink: int = 1, **overrides) -> ModelConfig:
    """``full`` (full widths), ``desk`` (hidden widths / 4) or ``mini`` (8-16 wide, for fast tests).

    Embedding interface sizes (speaker, prosody, unit representation) are not
    scaled by ``desk``; override them explicitly for dimension sweeps.
    ``shrink`` further divides every width, interface sizes included, so
    ``preset("desk", shrink=4)`` is the desk model at a quarter of its size.
    """
    base = ModelConfig()
    if name == "full":
        values = {}
    elif name == "desk":
        values = {k: getattr(base, k) // 4 for k in _WIDTHS}
    elif name == "mini":
        values = dict(
            unit_embed_dim=16,
            u2v_conv_channels=16,
            u2v_lstm_hidden=8,
            unit_repr_dim=16,
            speaker_dim=16,
            prosody_dim=16,
            ecapa_channels=16,
            ecapa_mfa_channels=16,
            se_bottleneck=8,
            pool_bottleneck=8,
            style_proj_dim=8,
            attention_rnn_dim=16,
            attention_dim=8,
            location_filters=4,
            location_kernel=7,
            prenet_dim=16,
            decoder_rnn_dim=16,
        )
    else:
        raise ValueError(f"unknown preset {name!r}")
    if shrink < 1:
        raise ValueError("shrink must be >= 1")
    if shrink > 1:
        for k in _WIDTHS + ("unit_repr_dim", "speaker_dim", "prosody_dim"):
            values[k] = max(1, values.get(k, getattr(base, k)) // shrink)
    values.update(overrides)
    return ModelConfig(preset=name, **values)


def length_mask(lengths: Tensor, max_len: Optional[int] = None) -> Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


# ---------------------------------------------------------------------------
# unit embedder


class UnitEncoder(nn.Module):
    """Embedding -> 3 x (Conv1d k5 -> BN -> ReLU) -> BiLSTM."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.unit_embed_dim)
        convs = []
        in_ch = cfg.unit_embed_dim
        for _ in range(cfg.u2v_conv_layers):
            convs.append(
                nn.Sequential(
                    nn.Conv1d(in_ch, cfg.u2v_conv_channels, cfg.u2v_kernel, stride=1, padding=cfg.u2v_kernel // 2),
                    nn.BatchNorm1d(cfg.u2v_conv_channels),
                    nn.ReLU(),
                    nn.Dropout(cfg.u2v_dropout),
                )
            )
            in_ch = cfg.u2v_conv_channels
        self.convs = nn.ModuleList(convs)
        self.lstm = nn.LSTM(in_ch, cfg.u2v_lstm_hidden, batch_first=True, bidirectional=True)

    @property
    def out_dim(self) -> int:
        return 2 * self.lstm.hidden_size

    def forward(self, ids: Tensor, lengths: Tensor) -> Tensor:
        x = self.embedding(ids).transpose(1, 2)
        mask = length_mask(lengths, ids.shape[1])[:, None, :].to(x.dtype)
        for conv in self.convs:
            x = conv(x) * mask
        x = x.transpose(1, 2)
        packed = nn.utils.rnn.pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        return out


# ---------------------------------------------------------------------------
# ECAPA-style utterance encoder


def _masked_mean_std(x: Tensor, w: Tensor, eps: float = 1e-6):
    # w: [B, 1 or C, T] non-negative weights summing to 1 over T
    mean = (x * w).sum(-1)
    var = ((x - mean[..., None]) ** 2 * w).sum(-1)
    return mean, torch.sqrt(var.clamp(min=eps))


class TDNNBlock(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, dilation=1):
        super().__init__()
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, dilation=dilation, padding=dilation * (kernel - 1) // 2)
        self.norm = nn.BatchNorm1d(out_ch)

    def forward(self, x):
        return self.norm(F.relu(self.conv(x)))


class Res2Block(nn.Module):
    def __init__(self, channels, kernel, dilation, scale):
        super().__init__()
        self.scale = scale
        width = channels // scale
        self.blocks = nn.ModuleList([TDNNBlock(width, width, kernel, dilation) for _ in range(scale - 1)])

    def forward(self, x):
        chunks = torch.chunk(x, self.scale, dim=1)
        out = [chunks[0]]
        y = None
        for i, block in enumerate(self.blocks, start=1):
            y = block(chunks[i] if y is None else chunks[i] + y)
            out.append(y)
        return torch.cat(out, dim=1)


class SqueezeExcite(nn.Module):
    def __init__(self, channels, bottleneck):
        super().__init__()
        self.down = nn.Conv1d(channels, bottleneck, 1)
        self.up = nn.Conv1d(bottleneck, channels, 1)

    def forward(self, x, w):
        s = (x * w).sum(-1, keepdim=True)
        s = torch.sigmoid(self.up(F.relu(self.down(s))))
        return x * s


class SERes2Block(nn.Module):
    def __init__(self, channels, kernel, dilation, scale, se_bottleneck):
        super().__init__()
        self.pre = TDNNBlock(channels, channels, 1)
        self.res2 = Res2Block(channels, kernel, dilation, scale)
        self.post = TDNNBlock(channels, channels, 1)
        self.se = SqueezeExcite(channels, se_bottleneck)

    def forward(self, x, w):
        return x + self.se(self.post(self.res2(self.pre(x))), w)


class AttentiveStatsPool(nn.Module):
    """Channel-wise attention over time with global context; returns [mean; std]."""

    def __init__(self, channels, bottleneck):
        super().__init__()
        self.tdnn = TDNNBlock(3 * channels, bottleneck, 1)
        self.score = nn.Conv1d(bottleneck, channels, 1)

    def forward(self, x, mask):
        # mask: [B, 1, T] bool
        uniform = mask.to(x.dtype) / mask.sum(-1, keepdim=True).to(x.dtype)
        mean, std = _masked_mean_std(x, uniform)
        t = x.shape[-1]
        ctx = torch.cat([x, mean[..., None].expand(-1, -1, t), std[..., None].expand(-1, -1, t)], dim=1)
        scores = self.score(torch.tanh(self.tdnn(ctx)))
        scores = scores.masked_fill(~mask, float("-inf"))
        alpha = torch.softmax(scores, dim=-1)
        mean, std = _masked_mean_std(x, alpha)
        return torch.cat([mean, std], dim=1)


class StyleEncoder(nn.Module):
    """TDNN -> 3 SE-Res2Blocks -> multi-layer aggregation -> attentive stats pooling -> FC."""

    def __init__(self, cfg: ModelConfig, out_dim: int, in_dim: Optional[int] = None):
        super().__init__()
        c = cfg.ecapa_channels
        self.min_frames = cfg.ecapa_tdnn_kernel
        self.tdnn = TDNNBlock(in_dim or cfg.n_mels, c, cfg.ecapa_tdnn_kernel)
        self.blocks = nn.ModuleList(
            [SERes2Block(c, cfg.ecapa_kernel, d, cfg.ecapa_res2_scale, cfg.se_bottleneck) for d in cfg.ecapa_dilations]
        )
        self.mfa = TDNNBlock(c * len(cfg.ecapa_dilations), cfg.ecapa_mfa_channels, 1)
        self.pool = AttentiveStatsPool(cfg.ecapa_mfa_channels, cfg.pool_bottleneck)
        self.pool_norm = nn.BatchNorm1d(2 * cfg.ecapa_mfa_channels)
        self.fc = nn.Linear(2 * cfg.ecapa_mfa_channels, out_dim)

    def frame_activations(self, x: Tensor, lengths: Tensor) -> Tuple[Tensor, Tensor]:
        """Pre-pooling activations [B, mfa, T] and the boolean time mask [B, 1, T]."""
        if x.shape[1] < self.min_frames or int(lengths.min()) < self.min_frames:
            raise ShapeError(f"style encoder needs at least {self.min_frames} frames")
        mask = length_mask(lengths, x.shape[1])[:, None, :]
        w = mask.to(x.dtype) / mask.sum(-1, keepdim=True).to(x.dtype)
        h = self.tdnn(x.transpose(1, 2))
        outs = []
        for block in self.blocks:
            h = block(h, w)
            outs.append(h)
        return self.mfa(torch.cat(outs, dim=1)), mask

    def forward(self, x: Tensor, lengths: Tensor) -> Tensor:
        """x: [B, T, in_dim] -> [B, out_dim]."""
        h, mask = self.frame_activations(x, lengths)
        return self.fc(self.pool_norm(self.pool(h, mask)))


# ---------------------------------------------------------------------------
# decoder


class _FrameMatmul(torch.autograd.Function):
    """``x @ w.T`` whose weight gradient is deferred to the owning ``_SharedWeight`` node."""

    @staticmethod
    def forward(ctx, x, w, store):
        ctx.save_for_backward(x, w)
        ctx.store = store
        return x.matmul(w.t())

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.saved_tensors
        ctx.store.append((x, g))
        return g.matmul(w), None, None


class _SharedWeight(torch.autograd.Function):
    """Identity on a weight reused at every decoder frame.

    Autograd would otherwise materialise and accumulate one full weight gradient
    per frame; here the per-frame (input, grad) pairs are collected and reduced
    with a single matmul once every frame has been back-propagated.
    """

    @staticmethod
    def forward(ctx, w, store):
        ctx.store = store
        ctx.set_materialize_grads(False)
        return w.view_as(w)

    @staticmethod
    def backward(ctx, _):
        store = ctx.store
        if not store:
            return None, None
        xs, gs = zip(*store)
        store.clear()
        return torch.cat(gs).t().matmul(torch.cat(xs)), None


class _FrameLinear:
    """Per-forward handle for ``x @ W.T + const`` applied once per decoder frame."""

    def __init__(self, weight: Tensor, const: Optional[Tensor] = None):
        self.const = const
        self.track = torch.is_grad_enabled() and weight.requires_grad
        self.store: list = []
        weight = weight.contiguous()
        self.weight = _SharedWeight.apply(weight, self.store) if self.track else weight

    def __call__(self, x: Tensor) -> Tensor:
        y = _FrameMatmul.apply(x, self.weight, self.store) if self.track else x.matmul(self.weight.t())
        return y if self.const is None else y + self.const


def _split_linear(weight: Tensor, bias: Optional[Tensor], n_frame: int, fixed: Tensor) -> _FrameLinear:
    """Linear over ``[per_frame, fixed]`` with the ``fixed`` columns evaluated once."""
    return _FrameLinear(weight[:, :n_frame], F.linear(fixed, weight[:, n_frame:], bias))


class _FrameLSTM:
    """``nn.LSTMCell`` arithmetic (gate order i, f, g, o) with a time-invariant input tail."""

    def __init__(self, cell: nn.LSTMCell, n_frame: int, fixed: Tensor):
        self.ih = _split_linear(cell.weight_ih, cell.bias_ih + cell.bias_hh, n_frame, fixed)
        self.hh = _FrameLinear(cell.weight_hh)

    def __call__(self, x, state):
        h, c = state
        i, f, g, o = (self.ih(x) + self.hh(h)).chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        return torch.sigmoid(o) * torch.tanh(c), c


class Prenet(nn.Module):
    def __init__(self, in_dim, dim, p):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, dim, bias=False)
        self.fc2 = nn.Linear(dim, dim, bias=False)
        self.p = p

    def _drop(self, x, generator):
        if self.p <= 0:
            return x
        keep = torch.bernoulli(torch.full(x.shape, 1 - self.p, dtype=x.dtype), generator=generator)
        return x * keep / (1 - self.p)

    def forward(self, x, generator):
        # dropout stays on at inference; masks come from an explicit generator
        x = self._drop(F.relu(self.fc1(x)), generator)
        return self._drop(F.relu(self.fc2(x)), generator)


class LocationSensitiveAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.query_fc = nn.Linear(cfg.attention_rnn_dim, cfg.attention_dim, bias=False)
        self.memory_fc = nn.Linear(cfg.memory_dim, cfg.attention_dim, bias=False)
        self.location_conv = nn.Conv1d(
            2, cfg.location_filters, cfg.location_kernel, padding=cfg.location_kernel // 2, bias=False
        )
        self.location_fc = nn.Linear(cfg.location_filters, cfg.attention_dim, bias=False)
        self.weight_fc = nn.Linear(cfg.attention_dim, 1, bias=True)

    def forward(self, query, processed_memory, memory, prev_and_cum, mask):
        loc = self.location_fc(self.location_conv(prev_and_cum).transpose(1, 2))
        energies = self.weight_fc(torch.tanh(self.query_fc(query)[:, None, :] + loc + processed_memory)).squeeze(-1)
        energies = energies.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(energies, dim=1)
        context = torch.bmm(weights[:, None, :], memory).squeeze(1)
        return context, weights


@dataclass
class DecoderOutput:
    mel: Tensor  # [B, T, n_mels]
    alignments: Tensor  # [B, T, L]
    stop_logits: Tensor  # [B, T]
    lengths: Tensor  # [B] valid output frames
    teacher_used: Optional[Tensor] = None  # [B, T] bool: input frame t came from ground truth
    truncated: bool = False


class AttentionDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        m = cfg.memory_dim
        self.prenet = Prenet(cfg.n_mels, cfg.prenet_dim, cfg.prenet_dropout)
        self.attention_rnn = nn.LSTMCell(cfg.prenet_dim + m, cfg.attention_rnn_dim)
        self.attention = LocationSensitiveAttention(cfg)
        self.decoder_rnn = nn.LSTMCell(cfg.attention_rnn_dim + m, cfg.decoder_rnn_dim)
        self.projection = nn.Linear(cfg.decoder_rnn_dim + m, cfg.n_mels)
        self.stop_gate = nn.Linear(cfg.decoder_rnn_dim + m, 1)

    def _init_state(self, memory):
        b, l, _ = memory.shape
        z = memory.new_zeros
        return dict(
            att_h=z(b, self.cfg.attention_rnn_dim),
            att_c=z(b, self.cfg.attention_rnn_dim),
            dec_h=z(b, self.cfg.decoder_rnn_dim),
            dec_c=z(b, self.cfg.decoder_rnn_dim),
            weights=z(b, l),
            cum=z(b, l),
            context=z(b, self.cfg.unit_repr_dim),
        )

    def _frame_ops(self, style):
        c = self.cfg
        k = c.unit_repr_dim
        return (
            _FrameLSTM(self.attention_rnn, c.prenet_dim + k, style),
            _FrameLSTM(self.decoder_rnn, c.attention_rnn_dim + k, style),
            _split_linear(self.projection.weight, self.projection.bias, c.decoder_rnn_dim + k, style),
            _split_linear(self.stop_gate.weight, self.stop_gate.bias, c.decoder_rnn_dim + k, style),
        )

    def _step(self, prenet_in, s, processed, memory, mask, ops):
        # ``context`` holds only the unit columns of the attended memory: the style
        # columns are identical in every row, so their context is the style vector
        # itself and enters through the precomputed constants in ``ops``.
        att_rnn, dec_rnn, projection, stop_gate = ops
        s["att_h"], s["att_c"] = att_rnn(torch.cat([prenet_in, s["context"]], -1), (s["att_h"], s["att_c"]))
        loc_in = torch.stack([s["weights"], s["cum"]], dim=1)
        s["context"], s["weights"] = self.attention(s["att_h"], processed, memory, loc_in, mask)
        s["cum"] = s["cum"] + s["weights"]
        s["dec_h"], s["dec_c"] = dec_rnn(torch.cat([s["att_h"], s["context"]], -1), (s["dec_h"], s["dec_c"]))
        out = torch.cat([s["dec_h"], s["context"]], -1)
        return projection(out), stop_gate(out).squeeze(-1), s["weights"]

    def forward(
        self,
        memory: Tensor,
        memory_lengths: Tensor,
        teacher: Optional[Tensor] = None,
        sampling_prob: float = 1.0,
        max_frames: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
    ) -> DecoderOutput:
        """Decode from ``memory`` [B, L, memory_dim] laid out as ``ReconstructionModel.build_memory`` does.

        Columns past ``unit_repr_dim`` must be constant along L (broadcast style
        embeddings); the decoder relies on that to evaluate them once.
        """
        if generator is None:
            generator = torch.Generator().manual_seed(0)
        b = memory.shape[0]
        mask = length_mask(memory_lengths, memory.shape[1])
        processed = self.attention.memory_fc(memory)
        ops = self._frame_ops(memory[:, 0, self.cfg.unit_repr_dim :])
        memory = memory[:, :, : self.cfg.unit_repr_dim]
        s = self._init_state(memory)
        go = memory.new_zeros(b, self.cfg.n_mels)
        mels, gates, aligns, used = [], [], [], []

        if teacher is not None:
            if teacher.shape[-1] != self.cfg.n_mels:
                raise ShapeError(f"teacher has {teacher.shape[-1]} channels, expected {self.cfg.n_mels}")
            n_steps = teacher.shape[1]
            prev_gt = torch.cat([go[:, None, :], teacher[:, :-1]], dim=1)
            if sampling_prob >= 1.0:
                pre_gt = self.prenet(prev_gt, generator)
            for t in range(n_steps):
                if sampling_prob >= 1.0:
                    use_gt = torch.ones(b, dtype=torch.bool)
                    pin = pre_gt[:, t]
                else:
                    if t == 0:
                        use_gt = torch.ones(b, dtype=torch.bool)
                    else:
                        use_gt = torch.rand(b, generator=generator) < sampling_prob
                    frame = prev_gt[:, t] if t == 0 else torch.where(use_gt[:, None], prev_gt[:, t], mels[-1].detach())
                    pin = self.prenet(frame, generator)
                mel, gate, w = self._step(pin, s, processed, memory, mask, ops)
                mels.append(mel)
                gates.append(gate)
                aligns.append(w)
                used.append(use_gt)
            lengths = torch.full((b,), n_steps, dtype=torch.long)
            return DecoderOutput(
                torch.stack(mels, 1), torch.stack(aligns, 1), torch.stack(gates, 1), lengths, torch.stack(used, 1)
            )

        if max_frames is None:
            raise ValueError("free-running decode needs max_frames")
        frame = go
        done = torch.zeros(b, dtype=torch.bool)
        lengths = torch.full((b,), max_frames, dtype=torch.long)
        for t in range(max_frames):
            mel, gate, w = self._step(self.prenet(frame, generator), s, processed, memory, mask, ops)
            mels.append(mel)
            gates.append(gate)
            aligns.append(w)
            frame = mel
            stop = (torch.sigmoid(gate) > 0.5) & ~done
            lengths[stop] = t + 1
            done |= stop
            if bool(done.all()):
                break
        truncated = not bool(done.all())
        return DecoderOutput(
            torch.stack(mels, 1), torch.stack(aligns, 1), torch.stack(gates, 1), lengths, None, truncated
        )


# ---------------------------------------------------------------------------
# full model


class ReconstructionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(cfg.init_seed)
        self.unit_encoder = UnitEncoder(cfg)
        self.unit_proj = nn.Linear(self.unit_encoder.out_dim, cfg.unit_repr_dim)
        self.speaker_encoder = StyleEncoder(cfg, cfg.speaker_dim)
        self.prosody_encoder = StyleEncoder(cfg, cfg.prosody_dim)
        self.speaker_proj = nn.Linear(cfg.speaker_dim, cfg.style_proj_dim)
        self.prosody_proj = nn.Linear(cfg.prosody_dim, cfg.style_proj_dim)
        self.decoder = AttentionDecoder(cfg)
        self.freeze_speaker_encoder()

    def freeze_speaker_encoder(self):
        self.speaker_encoder.requires_grad_(False)
        self.speaker_encoder.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen encoder never updates its batch-norm statistics either
        self.speaker_encoder.eval()
        return self

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("speaker_encoder.")]

    def encode_units_tensor(self, ids: Tensor, lengths: Tensor) -> Tensor:
        if int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0:
            raise ShapeError(f"unit id outside vocabulary of {self.cfg.vocab_size}")
        return self.unit_encoder(ids, lengths)

    def encode_style_tensor(self, mel: Tensor, lengths: Tensor, role: str) -> Tensor:
        if mel.shape[-1] != self.cfg.n_mels:
            raise ShapeError(f"mel has {mel.shape[-1]} channels, expected {self.cfg.n_mels}")
        if role == SPEAKER:
            with torch.no_grad():
                return self.speaker_encoder(mel, lengths)
        if role == PROSODY:
            return self.prosody_encoder(mel, lengths)
        raise ValueError(f"unknown role {role!r}")

    def build_memory(self, unit_enc: Tensor, spk: Tensor, pro: Tensor) -> Tensor:
        if spk.shape[-1] != self.cfg.speaker_dim or pro.shape[-1] != self.cfg.prosody_dim:
            raise ShapeError(
                f"embedding dims ({spk.shape[-1]}, {pro.shape[-1]}) != "
                f"configured ({self.cfg.speaker_dim}, {self.cfg.prosody_dim})"
            )
        l = unit_enc.shape[1]
        u = self.unit_proj(unit_enc)
        s = self.speaker_proj(spk)[:, None, :].expand(-1, l, -1)
        p = self.prosody_proj(pro)[:, None, :].expand(-1, l, -1)
        return torch.cat([u, s, p], dim=-1)

    def forward(
        self,
        units: Tensor,
        unit_lengths: Tensor,
        speaker_mel: Tensor,
        speaker_lengths: Tensor,
        prosody_mel: Tensor,
        prosody_lengths: Tensor,
        teacher: Optional[Tensor] = None,
        sampling_prob: float = 1.0,
        max_frames: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
    ) -> DecoderOutput:
        unit_enc = self.encode_units_tensor(units, unit_lengths)
        spk = self.encode_style_tensor(speaker_mel, speaker_lengths, SPEAKER)
        pro = self.encode_style_tensor(prosody_mel, prosody_lengths, PROSODY)
        memory = self.build_memory(unit_enc, spk, pro)
        if teacher is None and max_frames is None:
            max_frames = int(math.ceil(self.cfg.max_decoder_ratio * int(prosody_lengths.max())))
        return self.decoder(memory, unit_lengths, teacher, sampling_prob, max_frames, generator)

    # -- single-utterance helpers on numpy/dataclass inputs ---------------------

    def _dtype(self):
        return next(self.parameters()).dtype

    def _mel_tensor(self, m: MelSpectrogram) -> Tuple[Tensor, Tensor]:
        frames = np.asarray(m.frames)
        return torch.as_tensor(frames, dtype=self._dtype())[None], torch.tensor([frames.shape[0]])

    def encode_units(self, r: RefinedUnits) -> np.ndarray:
        ids = np.asarray(r.ids, dtype=np.int64)
        if ids.size == 0:
            raise ShapeError("empty unit sequence")
        with torch.no_grad():
            out = self.encode_units_tensor(torch.as_tensor(ids)[None], torch.tensor([ids.size]))
        return out[0].numpy()

    def encode_style(self, m: MelSpectrogram, role: str) -> np.ndarray:
        x, n = self._mel_tensor(m)
        with torch.no_grad():
            return self.encode_style_tensor(x, n, role)[0].numpy()

    def decode(
        self,
        unit_encoding: np.ndarray,
        speaker_emb: np.ndarray,
        prosody_emb: np.ndarray,
        teacher: Optional[MelSpectrogram] = None,
        sampling_prob: float = 1.0,
        max_frames: Optional[int] = None,
        seed: int = 0,
    ) -> DecoderOutput:
        dt = self._dtype()
        u = torch.as_tensor(np.asarray(unit_encoding), dtype=dt)[None]
        spk = torch.as_tensor(np.asarray(speaker_emb), dtype=dt)[None]
        pro = torch.as_tensor(np.asarray(prosody_emb), dtype=dt)[None]
        t = None if teacher is None else self._mel_tensor(teacher)[0]
        with torch.no_grad():
            memory = self.build_memory(u, spk, pro)
            return self.decoder(
                memory, torch.tensor([u.shape[1]]), t, sampling_prob, max_frames, torch.Generator().manual_seed(seed)
            )

    def reconstruct(
        self,
        content_mel: MelSpectrogram,
        speaker_ref_mel: MelSpectrogram,
        prosody_mel: MelSpectrogram,
        units: RefinedUnits,
        teacher_forced: bool = True,
        seed: int = 0,
    ) -> DecoderOutput:
        ids = torch.as_tensor(np.asarray(units.ids, dtype=np.int64))[None]
        s, sl = self._mel_tensor(speaker_ref_mel)
        p, pl = self._mel_tensor(prosody_mel)
        teacher = self._mel_tensor(content_mel)[0] if teacher_forced else None
        with torch.no_grad():
            return self.forward(
                ids, torch.tensor([ids.shape[1]]), s, sl, p, pl, teacher, 1.0, None, torch.Generator().manual_seed(seed)
            )


def build_model(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> ReconstructionModel:
    return ReconstructionModel(cfg).to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(list(module.state_dict().items())):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
