"""Unsupervised reconstruction training: warmup + cosine LR, clipping, scheduled sampling, early stopping."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.nn import functional as F

from .checkpoint import ModelCheckpoint, save_checkpoint
from .data import Batch, CorpusCache, materialize, plan_epoch
from .dsp import AugmentSpec
from .manifest import Manifest
from .model import ModelConfig, ReconstructionModel, build_model, length_mask

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "train_mse", "val_mse", "lr", "grad_norm")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    warmup_steps: int = 50
    initial_lr: float = 1e-3
    lr_schedule: str = "cosine"  # "cosine" or "constant"
    grad_clip: float = 1.0
    ss_start_prob: float = 1.0
    ss_end_prob: float = 0.7
    ss_decay_steps: int = 0  # 0 -> max_steps // 2
    patience: int = 10
    min_delta: float = 1e-4
    seed: int = 0
    max_steps: int = 2000
    eval_every: int = 50
    val_size: int = 500
    overfit: bool = False  # validate on the training utterances themselves
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gate_weight: float = 1.0
    speed_factors: Tuple[float, ...] = (0.9, 1.0, 1.1)
    n_freq_masks: int = 2
    max_mask_width: int = 50
    checkpoint_every: int = 0  # also write last.ckpt every N steps (0: only at the end)

    def __post_init__(self):
        self.speed_factors = tuple(float(f) for f in self.speed_factors)
        for name in ("batch_size", "max_steps", "eval_every", "patience", "val_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.warmup_steps < 0 or self.initial_lr < 0 or self.grad_clip <= 0:
            raise ValueError("warmup_steps, initial_lr must be >= 0 and grad_clip > 0")
        if not (0.0 <= self.ss_end_prob <= self.ss_start_prob <= 1.0):
            raise ValueError("scheduled sampling needs 0 <= end_prob <= start_prob <= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    @property
    def augment(self) -> AugmentSpec:
        return AugmentSpec(self.speed_factors, self.n_freq_masks, self.max_mask_width, self.seed)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``initial_lr`` then cosine decay to zero at ``max_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.lr_schedule == "constant":
        return cfg.initial_lr
    if step < cfg.warmup_steps:
        return cfg.initial_lr * step / cfg.warmup_steps
    if step >= cfg.max_steps:
        return 0.0
    span = cfg.max_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span
    return cfg.initial_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sampling_prob_at(step: int, cfg: TrainConfig) -> float:
    """Probability of feeding the ground-truth previous frame; linear decay, then flat."""
    decay = cfg.ss_decay_steps or max(1, cfg.max_steps // 2)
    frac = min(max(step, 0) / decay, 1.0)
    return cfg.ss_start_prob + (cfg.ss_end_prob - cfg.ss_start_prob) * frac


def masked_mse(pred: torch.Tensor, target: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Mean squared error over valid (unpadded) frames and all channels."""
    mask = length_mask(lengths, target.shape[1]).to(pred.dtype)[..., None]
    return (((pred - target) ** 2) * mask).sum() / (mask.sum() * target.shape[-1])


def gate_targets(lengths: torch.Tensor, n: int, dtype) -> torch.Tensor:
    return (torch.arange(n)[None, :] >= (lengths[:, None] - 1)).to(dtype)


def make_optimizer(model: ReconstructionModel, cfg: TrainConfig, lr: Optional[float] = None):
    return torch.optim.Adam(
        model.trainable_parameters(),
        lr=cfg.initial_lr if lr is None else lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
    )


def grad_norm(params) -> float:
    """Global L2 norm of the gradients, accumulated in float64."""
    return math.sqrt(sum(float((q.grad.detach().double() ** 2).sum()) for q in params))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their global norm is at most ``max_norm``; returns the norm before clipping.

    The float32 reduction inside torch's clipper can be off by ~1e-5 relative
    on millions of entries, which lets the clipped norm exceed the threshold.
    """
    total = grad_norm(params)
    if total > max_norm:
        scale = max_norm / total
        for q in params:
            q.grad.detach().mul_(scale)
    return total


def _step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step * 7919 + 17) % (2**63)


def forward_batch(model: ReconstructionModel, batch: Batch, sampling_prob: float, seed: int):
    gen = torch.Generator().manual_seed(seed)
    out = model(
        batch.units,
        batch.unit_lengths,
        batch.speaker,
        batch.speaker_lengths,
        batch.prosody,
        batch.prosody_lengths,
        teacher=batch.target,
        sampling_prob=sampling_prob,
        generator=gen,
    )
    return out


def train_step(model, optimizer, batch: Batch, cfg: TrainConfig, step: int, dump_dir: Optional[Path] = None) -> dict:
    """One clipped Adam update at ``lr_at(step)``; reports the mel MSE and post-clip gradient norm."""
    model.train()
    lr = lr_at(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    p = sampling_prob_at(step, cfg)
    seed = _step_seed(cfg.seed, step)
    torch.manual_seed(seed)
    dtype = next(model.parameters()).dtype
    batch = batch.to(dtype)
    out = forward_batch(model, batch, p, seed)
    mse = masked_mse(out.mel, batch.target, batch.target_lengths)
    gate = F.binary_cross_entropy_with_logits(out.stop_logits, gate_targets(batch.target_lengths, out.mel.shape[1], dtype))
    loss = mse + cfg.gate_weight * gate
    if not torch.isfinite(loss):
        msg = f"non-finite loss at step {step} on {batch.utt_ids}"
        if dump_dir is not None:
            dump = Path(dump_dir) / f"diverged_step{step}.pt"
            torch.save({"batch_utts": batch.utt_ids, "mel": out.mel.detach(), "target": batch.target}, dump)
            msg += f" (tensors dumped to {dump})"
        raise TrainingDiverged(msg)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [q for q in model.trainable_parameters() if q.grad is not None]
    raw = clip_grad_norm(params, cfg.grad_clip)
    clipped = grad_norm(params)
    optimizer.step()
    return {
        "loss": float(mse.detach()),
        "gate_loss": float(gate.detach()),
        "grad_norm": float(clipped),
        "grad_norm_raw": float(raw),
        "lr": lr,
        "sampling_prob": p,
    }


@torch.no_grad()
def evaluate(model: ReconstructionModel, batches: Sequence[Batch], seed: int = 0) -> dict:
    """Teacher-forced validation MSE (frame-weighted) and mean alignment row entropy."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    total, frames, ent_sum, ent_rows = 0.0, 0, 0.0, 0
    for b in batches:
        b = b.to(dtype)
        out = forward_batch(model, b, 1.0, seed)
        n = int(b.target_lengths.sum())
        total += float(masked_mse(out.mel, b.target, b.target_lengths)) * n
        frames += n
        for i in range(len(b)):
            a = out.alignments[i, : int(b.target_lengths[i]), : int(b.unit_lengths[i])]
            ent_sum += float(-(a * torch.log(a.clamp_min(1e-12))).sum())
            ent_rows += a.shape[0]
    model.train(was_training)
    return {"val_mse": total / max(frames, 1), "align_entropy": ent_sum / max(ent_rows, 1)}


class EarlyStopping:
    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_evals = 0

    def update(self, value: float) -> bool:
        """Record a validation value; True when training should stop."""
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_evals = 0
        else:
            self.bad_evals += 1
        return self.bad_evals >= self.patience


def split_validation(manifest: Manifest, cfg: TrainConfig) -> Tuple[List[str], List[str]]:
    ids = manifest.utt_ids
    if cfg.overfit or len(ids) < 2:
        return ids, ids
    n_val = min(cfg.val_size, max(1, len(ids) // 10))
    rng = np.random.default_rng([cfg.seed, 500])
    val = set(rng.choice(len(ids), n_val, replace=False).tolist())
    return [u for i, u in enumerate(ids) if i not in val], [u for i, u in enumerate(ids) if i in val]


@dataclass
class TrainResult:
    best: ModelCheckpoint
    last: ModelCheckpoint
    curve: List[dict]
    stopped_early: bool
    model: ReconstructionModel


def _val_batches(manifest, cache, val_ids, batch_size):
    plans = plan_epoch(manifest, val_ids, seed=0, epoch=0, batch_size=batch_size)
    return [materialize(p, cache, None) for p in plans]


def write_curve(path, curve: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in curve:
            w.writerow([r["step"]] + [("" if r.get(c) is None else repr(float(r[c]))) for c in CURVE_COLUMNS[1:]])


def read_curve(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "step" else (float(v) if v != "" else None)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def pretrain(
    manifest: Manifest,
    cache: CorpusCache,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir=None,
    init: Optional[ModelCheckpoint] = None,
    callback: Optional[Callable[[int, ReconstructionModel, dict], None]] = None,
    dtype: torch.dtype = torch.float32,
    resume: bool = True,
) -> TrainResult:
    """Train until ``max_steps`` or early stopping; keeps the best-validation weights.

    ``init`` starts from a checkpoint. With ``resume`` the optimizer moments
    and global step are restored too; without it (fine-tuning) only weights are.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if init is not None:
        model = init.build(dtype)
        model_cfg = init.model_config
    else:
        model = build_model(model_cfg, dtype)
    optimizer = make_optimizer(model, train_cfg)
    start = 0
    if resume and init is not None and init.optimizer_state is not None:
        try:
            optimizer.load_state_dict(init.optimizer_state)
            start = init.step
        except (ValueError, KeyError):
            log.warning("optimizer state incompatible with this run; starting fresh moments")

    train_ids, val_ids = split_validation(manifest, train_cfg)
    lengths = {u: cache.mel(u).n_frames for u in train_ids}
    val_batches = _val_batches(manifest, cache, val_ids, train_cfg.batch_size)
    n_batches = math.ceil(len(train_ids) / train_cfg.batch_size)
    augment = train_cfg.augment

    def batch_for(step: int) -> Batch:
        epoch, idx = divmod(step - 1, n_batches)
        plans = plan_epoch(manifest, train_ids, train_cfg.seed, epoch, train_cfg.batch_size, augment.speed_factors, lengths)
        return materialize(plans[idx], cache, augment)

    stopper = EarlyStopping(train_cfg.patience, train_cfg.min_delta)
    ev = evaluate(model, val_batches)
    curve = [{"step": start, "train_mse": None, "val_mse": ev["val_mse"], "lr": lr_at(start, train_cfg), "grad_norm": None}]
    if callback:
        callback(start, model, dict(curve[0], **ev))
    best_val = ev["val_mse"]
    stopper.update(best_val)
    best = ModelCheckpoint.from_model(model, optimizer, global_step=start, val_mse=best_val, seed=train_cfg.seed)
    stopped = False
    window: List[dict] = []
    step = start
    for step in range(start + 1, train_cfg.max_steps + 1):
        stats = train_step(model, optimizer, batch_for(step), train_cfg, step, out_dir)
        window.append(stats)
        if callback:
            callback(step, model, dict(stats, step=step))
        if step % train_cfg.eval_every == 0 or step == train_cfg.max_steps:
            ev = evaluate(model, val_batches)
            row = {
                "step": step,
                "train_mse": float(np.mean([s["loss"] for s in window])),
                "val_mse": ev["val_mse"],
                "lr": stats["lr"],
                "grad_norm": stats["grad_norm"],
            }
            window = []
            curve.append(row)
            log.info("step %d train %.4f val %.4f lr %.2e", step, row["train_mse"], row["val_mse"], row["lr"])
            if callback:
                callback(step, model, dict(row, **ev))
            if ev["val_mse"] < best_val:
                best_val = ev["val_mse"]
                best = ModelCheckpoint.from_model(model, optimizer, global_step=step, val_mse=best_val, seed=train_cfg.seed)
            if stopper.update(ev["val_mse"]):
                stopped = True
                break
        if out_dir is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            resume_point = ModelCheckpoint.from_model(model, optimizer, global_step=step, seed=train_cfg.seed)
            resume_point.state["train_config"] = dataclasses.asdict(train_cfg)
            save_checkpoint(out_dir / "last.ckpt", resume_point)
    last = ModelCheckpoint.from_model(model, optimizer, global_step=step, val_mse=curve[-1]["val_mse"], seed=train_cfg.seed)
    for ck in (best, last):
        ck.state["train_config"] = dataclasses.asdict(train_cfg)
    if out_dir is not None:
        save_checkpoint(out_dir / "best.ckpt", best)
        save_checkpoint(out_dir / "last.ckpt", last)
        write_curve(out_dir / "curve.csv", curve)
    return TrainResult(best, last, curve, stopped, model)
