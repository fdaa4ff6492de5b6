"""Stage runner: dependency checks, content-hash idempotence and provenance records.

Every stage reads the outputs of its upstream stages plus the manifests, and
writes into the run directory. A stage is skipped ("up-to-date") when its
provenance record shows the same config hash and input hashes and its outputs
are still intact; nothing is written in that case.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import load_checkpoint
from .config import ENV_CACHE_DIR, PipelineConfig, dump_config
from .data import CorpusCache
from .dsp import invert_mel, read_wav, save_mel, write_wav
from .evc import (
    ConversionRequest,
    convert,
    evc_score,
    export_embeddings,
    finetune_evc,
    read_vectors,
)
from .manifest import Manifest, ManifestRow, parse_manifest
from .model import PROSODY
from .ser import HeadConfig, build_cv_plan, finetune_ser, fuse_and_classify, map_label, probe_speaker
from .train import pretrain
from .units import (
    load_codebook,
    load_external_features,
    mfcc_fallback,
    quantize,
    read_unit_file,
    refine,
    save_codebook,
    save_external_features,
    train_codebook,
    write_unit_file,
)

log = logging.getLogger(__name__)


class MissingDependency(RuntimeError):
    """An upstream artifact is absent; the message names the stage that produces it."""


@dataclass(frozen=True)
class Stage:
    name: str
    deps: Tuple[str, ...]
    sections: Tuple[str, ...]  # config sections that affect the stage's outputs
    run: Callable[["Context"], None]


@dataclass
class StageResult:
    stage: str
    status: str  # "ran" or "up-to-date"
    outputs: List[Path] = field(default_factory=list)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Context:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.run_dir = cfg.run_dir()
        cache = os.environ.get(ENV_CACHE_DIR)
        self.cache_dir = Path(cache) if cache else self.run_dir / "cache"
        self._manifests: Dict[str, Manifest] = {}
        self._cache: Optional[CorpusCache] = None

    # paths -----------------------------------------------------------------
    @property
    def features_dir(self) -> Path:
        return self.cache_dir / "features"

    def p(self, *parts) -> Path:
        return self.run_dir.joinpath(*parts)

    def manifest(self, kind: str = "") -> Manifest:
        if kind not in self._manifests:
            self._manifests[kind] = parse_manifest(self.cfg.manifest_path(kind))
        return self._manifests[kind]

    def manifest_files(self) -> List[Path]:
        return sorted({self.cfg.manifest_path(k) for k in ("", "ser", "evc", "probe")})

    def all_rows(self) -> Manifest:
        rows: Dict[str, ManifestRow] = {}
        for kind in ("", "ser", "evc", "probe"):
            for r in self.manifest(kind):
                rows.setdefault(r.utt_id, r)
        return Manifest(list(rows.values()), "all")

    def corpus(self) -> CorpusCache:
        if self._cache is None:
            units_file = self.p("units", "units.txt")
            units = read_unit_file(units_file, self.cfg.units.vocab_size) if units_file.exists() else {}
            self._cache = CorpusCache(self.all_rows(), units, self.cfg.dsp)
        return self._cache


# ---------------------------------------------------------------------------
# stage bodies


def _extract_features(ctx: Context) -> None:
    ucfg = ctx.cfg.units
    out = ctx.features_dir
    out.mkdir(parents=True, exist_ok=True)
    dim = ucfg.feature_dim or None
    index = []
    for row in ctx.all_rows():
        if ucfg.feature_source == "mfcc_fallback":
            feats = mfcc_fallback(read_wav(row.wav_path, row.utt_id, ctx.cfg.dsp), cfg=ctx.cfg.dsp)
        elif ucfg.feature_source == "external_ssl":
            if not ucfg.features_dir:
                raise ValueError("units.features_dir must be set for external_ssl features")
            feats = load_external_features(Path(ucfg.features_dir) / f"{row.utt_id}.pfea", row.utt_id, dim)
            dim = feats.dim
        else:
            raise ValueError(f"unknown units.feature_source {ucfg.feature_source!r}")
        save_external_features(out / f"{row.utt_id}.pfea", feats)
        index.append(f"{row.utt_id}|{feats.matrix.shape[0]}|{feats.dim}\n")
    (out / "index.txt").write_text("".join(index))


def _feature_paths(ctx: Context) -> List[Tuple[str, Path]]:
    lines = (ctx.features_dir / "index.txt").read_text().splitlines()
    return [(line.split("|")[0], ctx.features_dir / f"{line.split('|')[0]}.pfea") for line in lines if line]


def _train_kmeans(ctx: Context) -> None:
    ucfg = ctx.cfg.units
    train_ids = set(ctx.manifest().utt_ids)
    feats = [load_external_features(p, u) for u, p in _feature_paths(ctx) if u in train_ids]
    book = train_codebook(
        feats,
        ucfg.vocab_size,
        seed=ucfg.seed,
        max_iters=ucfg.max_iters,
        subsample=ucfg.subsample or None,
        subsample_seed=ucfg.subsample_seed,
    )
    ctx.p("units").mkdir(parents=True, exist_ok=True)
    save_codebook(ctx.p("units", "codebook.pkmc"), book)


def _quantize(ctx: Context) -> None:
    book = load_codebook(ctx.p("units", "codebook.pkmc"))
    raw = [quantize(load_external_features(p, u, book.feature_dim), book) for u, p in _feature_paths(ctx)]
    write_unit_file(ctx.p("units", "units_raw.txt"), raw)
    write_unit_file(ctx.p("units", "units.txt"), [refine(u) for u in raw])
    ctx._cache = None  # reload units on next use


def _pretrain(ctx: Context) -> None:
    pretrain(
        ctx.manifest(),
        ctx.corpus(),
        ctx.cfg.model_config(),
        ctx.cfg.train,
        ctx.p("pretrain"),
    )


def _head_cfg(ctx: Context) -> HeadConfig:
    s = ctx.cfg.ser
    return HeadConfig(s.epochs, s.encoder_lr, s.head_lr, s.batch_size, s.seed)


def _finetune_ser(ctx: Context) -> None:
    ckpt = load_checkpoint(ctx.p("pretrain", "best.ckpt"))
    manifest = ctx.manifest("ser")
    plan = build_cv_plan(manifest, ctx.cfg.ser.mode, ctx.cfg.ser.seed)
    out = ctx.p("ser")
    out.mkdir(parents=True, exist_ok=True)
    finetune_ser(ckpt, manifest, ctx.corpus(), plan, _head_cfg(ctx)).write(out / "report")
    if ctx.cfg.ser.external_rep:
        model = ckpt.build()
        model.eval()
        emb = {u: model.encode_style(ctx.corpus().mel(u), PROSODY) for u in manifest.utt_ids}
        labels = {r.utt_id: r.raw_label for r in manifest}
        external = read_vectors(ctx.cfg.ser.external_rep)
        fuse_and_classify(emb, external, labels, plan, _head_cfg(ctx)).write(out / "fused")


def _finetune_evc(ctx: Context) -> None:
    ckpt = load_checkpoint(ctx.p("pretrain", "best.ckpt"))
    e = ctx.cfg.evc
    tcfg = dataclasses.replace(ctx.cfg.train, max_steps=e.max_steps, eval_every=e.eval_every)
    finetune_evc(ckpt, ctx.manifest("evc"), ctx.corpus(), tcfg, ctx.p("evc"), lr=e.lr)


def conversion_pairs(manifest: Manifest, pairs: Sequence[str]) -> List[Tuple[str, ConversionRequest]]:
    """Per speaker: every source-emotion utterance converted with the first target-emotion utterance as prosody reference."""
    jobs = []
    by_spk = manifest.by_speaker()
    for pair in pairs:
        src_emo, tgt_emo = (s.strip() for s in pair.split(":"))
        for spk, utts in by_spk.items():
            refs = [u for u in utts if map_label(manifest[u].raw_label) == tgt_emo]
            if not refs:
                continue
            for u in utts:
                if map_label(manifest[u].raw_label) == src_emo:
                    jobs.append((f"{u}__{tgt_emo}", ConversionRequest(u, refs[0])))
    return jobs


def _write_alignment(path: Path, align: np.ndarray) -> None:
    np.savetxt(path, align, delimiter=",", fmt="%.6g")


def _convert(ctx: Context) -> None:
    ckpt = load_checkpoint(ctx.p("evc", "best.ckpt"))
    model = ckpt.build()
    manifest = ctx.manifest("evc")
    jobs = conversion_pairs(manifest, ctx.cfg.evc.pairs)
    if not jobs:
        raise ValueError("no conversion pairs found: check evc.pairs against the manifest labels")
    root = ctx.p("conversions")
    if root.exists():
        shutil.rmtree(root)
    for sub in ("mel", "wav", "target", "align"):
        (root / sub).mkdir(parents=True)
    index = []
    for name, req in jobs:
        res = convert(req, model, ctx.corpus(), seed=ctx.cfg.seed)
        save_mel(root / "mel" / f"{name}.mel", res.converted_mel)
        wav = invert_mel(res.converted_mel, n_iters=ctx.cfg.evc.vocode_iters, cfg=ctx.cfg.dsp)
        write_wav(root / "wav" / f"{name}.wav", wav)
        shutil.copyfile(manifest[req.prosody_ref_utt].wav_path, root / "target" / f"{name}.wav")
        _write_alignment(root / "align" / f"{name}.csv", res.alignments)
        index.append(f"{name}|{req.source_utt}|{req.prosody_ref_utt}|{int(res.truncated)}\n")
    (root / "index.txt").write_text("".join(index))


def _evaluate(ctx: Context) -> None:
    evc_score(ctx.p("conversions", "target"), ctx.p("conversions", "wav"), ctx.p("evc_scores.csv"), ctx.cfg.dsp)


def _export_embeddings(ctx: Context) -> None:
    model = load_checkpoint(ctx.p("pretrain", "best.ckpt")).build()
    export_embeddings(model, ctx.manifest(), ctx.corpus(), ctx.p("embeddings"))


def _probe(ctx: Context) -> None:
    manifest = ctx.manifest("probe")
    acc = probe_speaker(load_checkpoint(ctx.p("pretrain", "best.ckpt")), manifest, ctx.corpus(), ctx.cfg.ser.seed)
    n_spk = len(manifest.by_speaker())
    ctx.p("probe.txt").write_text(f"accuracy: {acc:.6f}\nchance: {1.0 / n_spk:.6f}\nn_speakers: {n_spk}\n")


STAGES: Dict[str, Stage] = {
    s.name: s
    for s in (
        Stage("extract-features", (), ("dsp", "units"), _extract_features),
        Stage("train-kmeans", ("extract-features",), ("units",), _train_kmeans),
        Stage("quantize", ("train-kmeans",), ("units",), _quantize),
        Stage("pretrain", ("quantize",), ("dsp", "model", "train", "units"), _pretrain),
        Stage("finetune-ser", ("pretrain",), ("dsp", "ser"), _finetune_ser),
        Stage("finetune-evc", ("pretrain",), ("dsp", "train", "evc"), _finetune_evc),
        Stage("convert", ("finetune-evc",), ("dsp", "evc"), _convert),
        Stage("evaluate", ("convert",), ("dsp",), _evaluate),
        Stage("export-embeddings", ("pretrain",), ("dsp",), _export_embeddings),
        Stage("probe", ("pretrain",), ("dsp", "ser"), _probe),
    )
}


def stage_order(stages: Dict[str, Stage] = STAGES) -> List[str]:
    """Topological order; raises ValueError on a cycle or an unknown dependency."""
    for s in stages.values():
        for d in s.deps:
            if d not in stages:
                raise ValueError(f"stage {s.name} depends on unknown stage {d}")
    try:
        return list(TopologicalSorter({n: s.deps for n, s in stages.items()}).static_order())
    except CycleError as exc:
        raise ValueError(f"stage graph has a cycle: {exc.args[1]}") from exc


stage_order()  # the built-in graph must be acyclic


# ---------------------------------------------------------------------------
# provenance


def _provenance_path(ctx: Context, stage: str) -> Path:
    return ctx.p("provenance", f"{stage}.json")


def _read_provenance(ctx: Context, stage: str) -> Optional[dict]:
    path = _provenance_path(ctx, stage)
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError:
        return None


def _outputs_intact(record: dict) -> bool:
    for path, digest in record.get("outputs", {}).items():
        p = Path(path)
        if not p.exists() or sha256_file(p) != digest:
            return False
    return True


def _snapshot(paths: Sequence[Path]) -> Dict[str, str]:
    files = []
    for p in paths:
        if p.is_dir():
            files.extend(q for q in sorted(p.rglob("*")) if q.is_file())
        elif p.exists():
            files.append(p)
    return {str(f): sha256_file(f) for f in files}


def _stage_outputs(ctx: Context, stage: str) -> List[Path]:
    return {
        "extract-features": [ctx.features_dir],
        "train-kmeans": [ctx.p("units", "codebook.pkmc")],
        "quantize": [ctx.p("units", "units.txt"), ctx.p("units", "units_raw.txt")],
        "pretrain": [ctx.p("pretrain", n) for n in ("best.ckpt", "last.ckpt", "curve.csv")],
        "finetune-ser": [ctx.p("ser")],
        "finetune-evc": [ctx.p("evc", n) for n in ("best.ckpt", "last.ckpt", "curve.csv")],
        "convert": [ctx.p("conversions")],
        "evaluate": [ctx.p("evc_scores.csv")],
        "export-embeddings": [ctx.p("embeddings")],
        "probe": [ctx.p("probe.txt")],
    }[stage]


def _input_hashes(ctx: Context, stage: Stage) -> Dict[str, str]:
    inputs: Dict[str, str] = {}
    for m in ctx.manifest_files():
        inputs[str(m)] = sha256_file(m)
    if stage.name == "extract-features":
        for r in ctx.all_rows():
            inputs[str(r.wav_path)] = sha256_file(r.wav_path)
        if ctx.cfg.units.feature_source == "external_ssl" and ctx.cfg.units.features_dir:
            inputs.update(_snapshot([Path(ctx.cfg.units.features_dir)]))
    if stage.name == "finetune-ser" and ctx.cfg.ser.external_rep:
        inputs[ctx.cfg.ser.external_rep] = sha256_file(Path(ctx.cfg.ser.external_rep))
    for dep in stage.deps:
        record = _read_provenance(ctx, dep)
        if record is None or not record.get("outputs") or not _outputs_intact(record):
            raise MissingDependency(f"stage {stage.name} needs the outputs of {dep}: run {dep} first")
        inputs.update(record["outputs"])
    return inputs


def stage_key(ctx: Context, stage: Stage, inputs: Dict[str, str]) -> str:
    payload = {
        "stage": stage.name,
        "config": ctx.cfg.section_hash(*stage.sections),
        "seed": ctx.cfg.seed,
        "inputs": inputs,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def run_stage(stage_name: str, cfg: PipelineConfig, force: bool = False, ctx: Optional[Context] = None) -> StageResult:
    """Run one stage, or report it up-to-date without touching the run directory."""
    if stage_name not in STAGES:
        raise ValueError(f"unknown stage {stage_name!r}; choose from {', '.join(STAGES)}")
    stage = STAGES[stage_name]
    ctx = ctx or Context(cfg)
    inputs = _input_hashes(ctx, stage)
    key = stage_key(ctx, stage, inputs)
    record = _read_provenance(ctx, stage_name)
    if not force and record and record.get("key") == key and _outputs_intact(record):
        log.info("%s: up-to-date", stage_name)
        return StageResult(stage_name, "up-to-date", [Path(p) for p in record["outputs"]])

    log.info("%s: running", stage_name)
    ctx.run_dir.mkdir(parents=True, exist_ok=True)
    stage.run(ctx)
    outputs = _snapshot(_stage_outputs(ctx, stage_name))
    prov = {
        "stage": stage_name,
        "key": key,
        "config_hash": cfg.section_hash(*stage.sections),
        "seed": cfg.seed,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "inputs": inputs,
        "outputs": outputs,
        "config": dump_config(cfg),
    }
    path = _provenance_path(ctx, stage_name)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(prov, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return StageResult(stage_name, "ran", [Path(p) for p in outputs])


def run_all(cfg: PipelineConfig, stages: Optional[Sequence[str]] = None, force: bool = False) -> List[StageResult]:
    ctx = Context(cfg)
    wanted = set(stages) if stages else set(STAGES)
    return [run_stage(s, cfg, force, ctx) for s in stage_order() if s in wanted]
