"""Speech emotion recognition harness: label merging, CV plans, WA/UA, fine-tuning and probes."""
from __future__ import annotations

import copy
import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import ModelCheckpoint
from .data import CorpusCache, _pad
from .manifest import Manifest
from .model import PROSODY, ModelConfig, StyleEncoder, length_mask
from .units import UnitSequence, refine

log = logging.getLogger(__name__)

EMOTIONS = ("angry", "sad", "happy", "neutral")
SESSION_MODE = "leave_one_session_out"
SPEAKER_MODE = "leave_one_speaker_out"

_RAW_TO_CLASS = {
    "ang": "angry",
    "angry": "angry",
    "sad": "sad",
    "hap": "happy",
    "happy": "happy",
    "exc": "happy",
    "excited": "happy",
    "neu": "neutral",
    "neutral": "neutral",
}


class PlanError(ValueError):
    pass


def map_label(raw: Optional[str]) -> Optional[str]:
    """Four-class mapping with excited merged into happy; anything else -> None (excluded)."""
    if raw is None:
        return None
    return _RAW_TO_CLASS.get(raw.strip().lower())


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, y in zip(preds, labels):
        cm[int(y), int(p)] += 1
    return cm


def _check(preds, labels):
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("empty prediction set")


def compute_wa(preds, labels) -> float:
    """Fraction of all utterances classified correctly."""
    _check(preds, labels)
    return float(Fraction(int(np.sum(np.asarray(preds) == np.asarray(labels))), len(labels)))


def compute_ua(preds, labels, classes: Optional[Sequence] = None) -> float:
    """Mean of per-class recalls; every class in ``classes`` must occur in ``labels``."""
    _check(preds, labels)
    preds, labels = np.asarray(preds), np.asarray(labels)
    classes = sorted(set(labels.tolist())) if classes is None else list(classes)
    recalls = []
    for c in classes:
        sel = labels == c
        if not sel.any():
            raise ValueError(f"class {c!r} has no utterances; unweighted accuracy is undefined")
        recalls.append(Fraction(int(np.sum(preds[sel] == c)), int(sel.sum())))
    # exact rational mean, rounded once
    return float(sum(recalls, Fraction(0)) / len(recalls))


# ---------------------------------------------------------------------------
# cross-validation plans


@dataclass
class Fold:
    name: str
    train_ids: List[str]
    val_ids: List[str]
    test_ids: List[str]


@dataclass
class CVPlan:
    mode: str
    folds: List[Fold]
    seed: int = 0

    def check(self, all_ids: Sequence[str]) -> None:
        """Assert test sets partition ``all_ids`` and every fold's splits are disjoint."""
        seen = Counter(u for f in self.folds for u in f.test_ids)
        dup = [u for u, n in seen.items() if n > 1]
        if dup:
            raise PlanError(f"utterances in several test folds: {dup[:5]}")
        if set(seen) != set(all_ids):
            raise PlanError("test folds do not cover the corpus")
        for f in self.folds:
            tr, va, te = set(f.train_ids), set(f.val_ids), set(f.test_ids)
            if tr & va or tr & te or va & te:
                raise PlanError(f"fold {f.name}: train/val/test overlap")


def build_cv_plan(manifest: Manifest, mode: str = SESSION_MODE, seed: int = 0) -> CVPlan:
    missing = [r.utt_id for r in manifest if not r.session_id or not r.speaker_id]
    if missing:
        raise PlanError(f"missing session/speaker metadata for {len(missing)} utterances, e.g. {missing[:3]}")
    sessions: Dict[str, List] = {}
    for r in manifest:
        sessions.setdefault(r.session_id, []).append(r)
    names = sorted(sessions)
    rng = np.random.default_rng(seed)
    folds = []
    if mode == SESSION_MODE:
        if len(names) < 3:
            raise PlanError("leave-one-session-out needs at least 3 sessions")
        for s in names:
            others = [o for o in names if o != s]
            val = others[int(rng.integers(len(others)))]
            folds.append(
                Fold(
                    f"test={s},val={val}",
                    [r.utt_id for o in others if o != val for r in sessions[o]],
                    [r.utt_id for r in sessions[val]],
                    [r.utt_id for r in sessions[s]],
                )
            )
    elif mode == SPEAKER_MODE:
        for s in names:
            spks = sorted({r.speaker_id for r in sessions[s]})
            if len(spks) < 2:
                raise PlanError(f"session {s} has {len(spks)} speaker(s); leave-one-speaker-out needs 2")
            for spk in spks:
                folds.append(
                    Fold(
                        f"test={spk},session={s}",
                        [r.utt_id for o in names if o != s for r in sessions[o]],
                        [r.utt_id for r in sessions[s] if r.speaker_id != spk],
                        [r.utt_id for r in sessions[s] if r.speaker_id == spk],
                    )
                )
    else:
        raise PlanError(f"unknown CV mode {mode!r}")
    plan = CVPlan(mode, folds, seed)
    plan.check(manifest.utt_ids)
    return plan


# ---------------------------------------------------------------------------
# reports


@dataclass
class FoldResult:
    name: str
    wa: float
    ua: float
    confusion: np.ndarray
    n_utterances: int


@dataclass
class EvalReport:
    classes: List[str]
    folds: List[FoldResult]
    seed: int = 0
    mode: str = ""

    @property
    def confusion(self) -> np.ndarray:
        return sum((f.confusion for f in self.folds), np.zeros((len(self.classes),) * 2, dtype=np.int64))

    @property
    def n_utterances(self) -> int:
        return int(self.confusion.sum())

    @property
    def wa(self) -> float:
        """Utterance-weighted over folds (pooled confusion matrix)."""
        cm = self.confusion
        return float(np.trace(cm) / cm.sum())

    @property
    def ua(self) -> float:
        cm = self.confusion
        present = cm.sum(1) > 0
        return float(np.mean(np.diag(cm)[present] / cm.sum(1)[present]))

    @property
    def fold_mean_wa(self) -> float:
        return float(np.mean([f.wa for f in self.folds]))

    @property
    def fold_mean_ua(self) -> float:
        return float(np.mean([f.ua for f in self.folds]))

    def to_text(self) -> str:
        """Key order: mode, seed, classes, n_utterances, wa, ua, fold_mean_wa, fold_mean_ua, then one line per fold."""
        lines = [
            f"mode: {self.mode}",
            f"seed: {self.seed}",
            f"classes: {' '.join(self.classes)}",
            f"n_utterances: {self.n_utterances}",
            f"wa: {self.wa:.6f}",
            f"ua: {self.ua:.6f}",
            f"fold_mean_wa: {self.fold_mean_wa:.6f}",
            f"fold_mean_ua: {self.fold_mean_ua:.6f}",
        ]
        for f in self.folds:
            lines.append(f"fold {f.name}: n={f.n_utterances} wa={f.wa:.6f} ua={f.ua:.6f}")
        return "\n".join(lines) + "\n"

    def write(self, stem) -> None:
        stem = Path(stem)
        stem.with_suffix(".txt").write_text(self.to_text())
        write_confusion_csv(stem.with_name(stem.name + "_confusion.csv"), self.confusion, self.classes)


def write_confusion_csv(path, cm: np.ndarray, classes: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(classes))
        for c, row in zip(classes, cm):
            w.writerow([c] + [int(v) for v in row])


def _fold_result(name, preds, labels, classes) -> FoldResult:
    cm = confusion_matrix(preds, labels, len(classes))
    present = [i for i in range(len(classes)) if cm[i].sum() > 0]
    return FoldResult(name, compute_wa(preds, labels), compute_ua(preds, labels, present), cm, len(labels))


# ---------------------------------------------------------------------------
# classifiers


@dataclass
class HeadConfig:
    epochs: int = 30
    encoder_lr: float = 1e-4
    head_lr: float = 5e-4
    batch_size: int = 16
    seed: int = 0


def fit_linear_head(
    x_train, y_train, x_val, y_val, n_classes: int, cfg: HeadConfig, steps_per_epoch: int = 20, lr: Optional[float] = None
):
    """Train one fully connected layer with cross-entropy; returns the best-validation-accuracy head."""
    torch.manual_seed(cfg.seed)
    xt = torch.as_tensor(np.asarray(x_train), dtype=torch.float32)
    yt = torch.as_tensor(np.asarray(y_train), dtype=torch.long)
    xv = torch.as_tensor(np.asarray(x_val), dtype=torch.float32)
    yv = np.asarray(y_val)
    mu, sd = xt.mean(0), xt.std(0).clamp_min(1e-6)
    head = nn.Linear(xt.shape[1], n_classes)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.head_lr if lr is None else lr)
    best, best_state = -1.0, None
    for _ in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            loss = F.cross_entropy(head((xt - mu) / sd), yt)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            acc = float(np.mean(head((xv - mu) / sd).argmax(1).numpy() == yv)) if len(yv) else 0.0
        if acc > best:
            best, best_state = acc, copy.deepcopy(head.state_dict())
    head.load_state_dict(best_state)

    def predict(x):
        with torch.no_grad():
            return head((torch.as_tensor(np.asarray(x), dtype=torch.float32) - mu) / sd).argmax(1).numpy()

    return predict


class EmotionClassifier(nn.Module):
    def __init__(self, encoder: StyleEncoder, emb_dim: int, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(emb_dim, n_classes)

    def forward(self, mel, lengths):
        return self.head(self.encoder(mel, lengths))


def _labelled(manifest: Manifest) -> Dict[str, int]:
    out = {}
    for r in manifest:
        c = map_label(r.raw_label)
        if c is not None:
            out[r.utt_id] = EMOTIONS.index(c)
    return out


def _restrict(plan: CVPlan, keep) -> CVPlan:
    keep = set(keep)
    return CVPlan(
        plan.mode,
        [
            Fold(
                f.name,
                [u for u in f.train_ids if u in keep],
                [u for u in f.val_ids if u in keep],
                [u for u in f.test_ids if u in keep],
            )
            for f in plan.folds
        ],
        plan.seed,
    )


def _mel_batches(cache: CorpusCache, ids: Sequence[str], batch_size: int, rng=None):
    ids = list(ids)
    if rng is not None:
        ids = [ids[i] for i in rng.permutation(len(ids))]
    pad = float(np.log(cache.dsp.log_floor))
    for s in range(0, len(ids), batch_size):
        chunk = ids[s : s + batch_size]
        mels = [cache.mel(u).frames for u in chunk]
        yield chunk, _pad(mels, pad), torch.tensor([m.shape[0] for m in mels])


def _predict(model, cache, ids, batch_size):
    model.eval()
    out = []
    with torch.no_grad():
        for _, x, n in _mel_batches(cache, ids, batch_size):
            out.append(model(x, n).argmax(1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def finetune_ser(
    checkpoint: ModelCheckpoint,
    manifest: Manifest,
    cache: CorpusCache,
    plan: CVPlan,
    head_cfg: Optional[HeadConfig] = None,
) -> EvalReport:
    """Per fold: prosody encoder + one FC layer, cross-entropy, best-validation-WA selection.

    ``head_cfg.encoder_lr == 0`` freezes the encoder and trains only the FC layer.
    """
    cfg = head_cfg or HeadConfig()
    labels = _labelled(manifest)
    unknown = [u for f in plan.folds for u in f.test_ids if u not in manifest]
    if unknown:
        raise PlanError(f"plan references utterances missing from the manifest: {unknown[:5]}")
    plan = _restrict(plan, labels)
    base = checkpoint.build()
    results = []
    for k, fold in enumerate(plan.folds):
        if not fold.test_ids:
            continue
        torch.manual_seed(cfg.seed + k)
        model = EmotionClassifier(copy.deepcopy(base.prosody_encoder), base.cfg.prosody_dim, len(EMOTIONS))
        if cfg.encoder_lr == 0:
            model.encoder.requires_grad_(False)
            emb = lambda ids: _embed(model.encoder, cache, ids, cfg.batch_size)  # noqa: E731
            predict = fit_linear_head(
                emb(fold.train_ids),
                [labels[u] for u in fold.train_ids],
                emb(fold.val_ids),
                [labels[u] for u in fold.val_ids],
                len(EMOTIONS),
                cfg,
            )
            preds = predict(emb(fold.test_ids))
        else:
            preds = _train_classifier(model, cache, fold, labels, cfg, k)
        results.append(_fold_result(fold.name, preds, [labels[u] for u in fold.test_ids], EMOTIONS))
    return EvalReport(list(EMOTIONS), results, cfg.seed, plan.mode)


def _embed(encoder, cache, ids, batch_size) -> np.ndarray:
    encoder.eval()
    with torch.no_grad():
        return np.concatenate([encoder(x, n).numpy() for _, x, n in _mel_batches(cache, ids, batch_size)])


def _train_classifier(model, cache, fold: Fold, labels, cfg: HeadConfig, k: int) -> np.ndarray:
    opt = torch.optim.Adam(
        [
            {"params": model.encoder.parameters(), "lr": cfg.encoder_lr},
            {"params": model.head.parameters(), "lr": cfg.head_lr},
        ]
    )
    rng = np.random.default_rng([cfg.seed, k])
    val_ids = fold.val_ids or fold.train_ids
    yv = np.array([labels[u] for u in val_ids])
    best, best_state = -1.0, None
    for _ in range(cfg.epochs):
        model.train()
        for chunk, x, n in _mel_batches(cache, fold.train_ids, cfg.batch_size, rng):
            if len(chunk) < 2:
                continue  # batch norm needs more than one sample
            loss = F.cross_entropy(model(x, n), torch.tensor([labels[u] for u in chunk]))
            opt.zero_grad()
            loss.backward()
            opt.step()
        acc = float(np.mean(_predict(model, cache, val_ids, cfg.batch_size) == yv))
        if acc > best:
            best, best_state = acc, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    return _predict(model, cache, fold.test_ids, cfg.batch_size)


# ---------------------------------------------------------------------------
# fusion and probes


def pool_time_mean(frames: np.ndarray) -> np.ndarray:
    return np.asarray(frames, dtype=np.float64).mean(axis=0)


def fuse_and_classify(
    prosody_emb: Mapping[str, np.ndarray],
    external: Mapping[str, np.ndarray],
    labels: Mapping[str, str],
    plan: CVPlan,
    head_cfg: Optional[HeadConfig] = None,
) -> EvalReport:
    """Concatenate prosody and external utterance vectors and classify with one FC layer per fold."""
    cfg = head_cfg or HeadConfig()
    ids = [u for f in plan.folds for u in f.test_ids if map_label(labels.get(u)) is not None]
    for u in ids:
        if u not in external:
            raise KeyError(f"utterance {u!r} missing from external representation file")
        if u not in prosody_emb:
            raise KeyError(f"utterance {u!r} has no prosody embedding")
    dims = {np.asarray(external[u]).shape for u in ids}
    if len(dims) != 1:
        raise ValueError(f"external representations have inconsistent shapes {sorted(dims)}")
    y = {u: EMOTIONS.index(map_label(labels[u])) for u in ids}
    plan = _restrict(plan, y)
    fused = lambda us: np.stack([np.concatenate([prosody_emb[u], external[u]]) for u in us])  # noqa: E731
    results = []
    for fold in plan.folds:
        if not fold.test_ids:
            continue
        val = fold.val_ids or fold.train_ids
        predict = fit_linear_head(
            fused(fold.train_ids), [y[u] for u in fold.train_ids], fused(val), [y[u] for u in val], len(EMOTIONS), cfg
        )
        results.append(_fold_result(fold.name, predict(fused(fold.test_ids)), [y[u] for u in fold.test_ids], EMOTIONS))
    return EvalReport(list(EMOTIONS), results, cfg.seed, plan.mode)


def speaker_split(utt_ids: Sequence[str], seed: int = 0, ratio: float = 0.9):
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(utt_ids))
    cut = int(round(ratio * len(utt_ids)))
    return [utt_ids[i] for i in sorted(order[:cut])], [utt_ids[i] for i in sorted(order[cut:])]


def probe_embeddings(embeddings: Mapping[str, np.ndarray], speakers: Mapping[str, str], seed: int = 0, epochs: int = 30) -> float:
    """Speaker-classification accuracy of a linear layer on fixed embeddings (9:1 split)."""
    spk_names = sorted(set(speakers.values()))
    if len(spk_names) < 2:
        raise ValueError("speaker probing needs at least two speakers")
    ids = sorted(embeddings)
    train, test = speaker_split(ids, seed)
    y = {u: spk_names.index(speakers[u]) for u in ids}
    x = lambda us: np.stack([embeddings[u] for u in us])  # noqa: E731
    cfg = HeadConfig(epochs=epochs, seed=seed)
    predict = fit_linear_head(x(train), [y[u] for u in train], x(train), [y[u] for u in train], len(spk_names), cfg)
    return float(np.mean(predict(x(test)) == np.array([y[u] for u in test])))


def probe_speaker(checkpoint: ModelCheckpoint, manifest: Manifest, cache: CorpusCache, seed: int = 0) -> float:
    """Speaker information left in the frozen prosody encoder, as linear-probe accuracy."""
    if len(manifest.by_speaker()) < 2:
        raise ValueError("speaker probing needs at least two speakers")
    model = checkpoint.build()
    model.eval()
    emb = {u: model.encode_style(cache.mel(u), PROSODY) for u in manifest.utt_ids}
    return probe_embeddings(emb, {r.utt_id: r.speaker_id for r in manifest}, seed)


# ---------------------------------------------------------------------------
# unit-sequence classification (duplicated vs deduplicated ablation)


class UnitClassifier(nn.Module):
    """Token embedding followed by the ECAPA-style encoder topology and a linear head."""

    def __init__(self, vocab_size: int, n_classes: int, cfg: ModelConfig, embed_dim: int = 32, emb_out: int = 32):
        super().__init__()
        self.vocab_size = vocab_size
        # index ``vocab_size`` pads; its zero embedding cannot be mistaken for a repeated unit
        self.embedding = nn.Embedding(vocab_size + 1, embed_dim, padding_idx=vocab_size)
        self.encoder = StyleEncoder(cfg, emb_out, in_dim=embed_dim)
        self.head = nn.Linear(emb_out, n_classes)

    def forward(self, ids, lengths):
        return self.head(self.encoder(self.embedding(ids), lengths))


def _token_batches(seqs: Sequence[np.ndarray], min_len: int, pad: int):
    n = max(max(len(s) for s in seqs), min_len)
    ids = torch.full((len(seqs), n), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(s)
    return ids, torch.tensor([max(len(s), min_len) for s in seqs])


def classify_units(
    sequences: Mapping[str, Sequence[int]],
    labels: Mapping[str, str],
    plan: CVPlan,
    vocab_size: int,
    deduplicate: bool,
    classes: Optional[Sequence[str]] = None,
    encoder_cfg: Optional[ModelConfig] = None,
    head_cfg: Optional[HeadConfig] = None,
    lr: float = 1e-3,
) -> EvalReport:
    """Classify utterances from unit sequences alone, with or without run-length deduplication."""
    cfg = head_cfg or HeadConfig(epochs=20, batch_size=16)
    enc_cfg = encoder_cfg or ModelConfig(
        ecapa_channels=32, ecapa_mfa_channels=48, se_bottleneck=8, pool_bottleneck=16, preset="unit-classifier"
    )
    classes = list(classes) if classes is not None else sorted(set(labels.values()))
    seqs = {}
    for u, s in sequences.items():
        ids = np.asarray(s, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
            raise ValueError(f"{u}: unit id outside vocabulary of {vocab_size}")
        if deduplicate:
            ids = refine(UnitSequence(ids, vocab_size, u)).ids
            assert not np.any(ids[1:] == ids[:-1])
        seqs[u] = ids
    y = {u: classes.index(labels[u]) for u in seqs}
    min_len = enc_cfg.ecapa_tdnn_kernel
    results = []
    for k, fold in enumerate(plan.folds):
        if not fold.test_ids:
            continue
        torch.manual_seed(cfg.seed + k)
        model = UnitClassifier(vocab_size, len(classes), enc_cfg)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        rng = np.random.default_rng([cfg.seed, k])
        val_ids = fold.val_ids or fold.train_ids
        best, best_state = -1.0, None
        for _ in range(cfg.epochs):
            model.train()
            order = [fold.train_ids[i] for i in rng.permutation(len(fold.train_ids))]
            for s in range(0, len(order), cfg.batch_size):
                chunk = order[s : s + cfg.batch_size]
                if len(chunk) < 2:
                    continue
                ids, n = _token_batches([seqs[u] for u in chunk], min_len, vocab_size)
                loss = F.cross_entropy(model(ids, n), torch.tensor([y[u] for u in chunk]))
                opt.zero_grad()
                loss.backward()
                opt.step()
            acc = float(np.mean(_predict_tokens(model, seqs, val_ids, min_len) == np.array([y[u] for u in val_ids])))
            if acc > best:
                best, best_state = acc, copy.deepcopy(model.state_dict())
        model.load_state_dict(best_state)
        preds = _predict_tokens(model, seqs, fold.test_ids, min_len)
        results.append(_fold_result(fold.name, preds, [y[u] for u in fold.test_ids], classes))
    return EvalReport(classes, results, cfg.seed, plan.mode)


def _predict_tokens(model, seqs, ids, min_len, batch_size: int = 64):
    model.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(ids), batch_size):
            t, n = _token_batches([seqs[u] for u in ids[s : s + batch_size]], min_len, model.vocab_size)
            out.append(model(t, n).argmax(1).numpy())
    return np.concatenate(out)
