"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 missing upstream
artifact or dependency, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .checkpoint import load_checkpoint
from .config import ConfigError, PipelineConfig, load_config
from .data import CorpusCache
from .dsp import invert_mel, save_mel, write_wav
from .evc import ConversionRequest, convert, evc_score, write_score_csv
from .manifest import ManifestError, parse_manifest
from .pipeline import STAGES, MissingDependency, run_all, run_stage, stage_order
from .report import MissingArtifacts, emit_report
from .toy import make_toy_corpus
from .train import TrainConfig
from .units import read_unit_file

EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("prosody_disentangle")


def _train_flag(name: str) -> str:
    return "--train-seed" if name == "seed" else "--" + name.replace("_", "-")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat 'section.key = value' config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--run-dir", help="artifact directory (default $PDIS_RUN_DIR or runs/default)")
    p.add_argument("--manifest", help="pretraining manifest (paths.manifest)")
    g = p.add_argument_group("training (train.* keys)")
    for f in dataclasses.fields(TrainConfig):
        g.add_argument(_train_flag(f.name), dest=f"train.{f.name}", metavar=f.name.upper(), default=None)


def _config_from_args(args) -> PipelineConfig:
    overrides: Dict[str, str] = {}
    if args.seed is not None:
        for key in ("seed", "units.seed", "train.seed", "ser.seed"):
            overrides[key] = str(args.seed)
    for key, value in vars(args).items():
        if key.startswith("train.") and value is not None:
            overrides[key] = value
    if args.run_dir:
        overrides["paths.run_dir"] = args.run_dir
    if args.manifest:
        overrides["paths.manifest"] = args.manifest
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pdis", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="global seed (sets every section's seed)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run pipeline stages (dependencies must already exist)")
    p.add_argument("stages", nargs="+", help=f"stage names or 'all': {', '.join(stage_order())}")
    p.add_argument("--force", action="store_true", help="rerun even if up-to-date")
    _add_config_args(p)

    p = sub.add_parser("convert", help="convert one utterance with a prosody reference")
    p.add_argument("--source", required=True)
    p.add_argument("--prosody-ref", required=True)
    p.add_argument("--speaker-ref")
    p.add_argument("--out", required=True, type=Path, help="output .mel or .wav")
    p.add_argument("--checkpoint", type=Path, help="default: <run_dir>/evc/best.ckpt, else pretrain/best.ckpt")
    _add_config_args(p)

    p = sub.add_parser("evc-score", help="MCD and F0-RMSE of converted files against same-named targets")
    p.add_argument("--target-dir", required=True, type=Path)
    p.add_argument("--converted-dir", required=True, type=Path)
    p.add_argument("--out", type=Path, help="CSV path (default: stdout)")

    p = sub.add_parser("validate-manifest", help="check a manifest and list every problem")
    p.add_argument("manifest", type=Path)
    p.add_argument("--no-file-check", action="store_true")

    p = sub.add_parser("make-toy-corpus", help="write a small synthetic emotional corpus")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--speakers", type=int, default=6)
    p.add_argument("--utts-per-speaker", type=int, default=4)

    p = sub.add_parser("report", help="collect run artifacts into CSV files")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--out", type=Path)
    return parser


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    names = list(STAGES) if args.stages == ["all"] else args.stages
    unknown = [s for s in names if s not in STAGES]
    if unknown:
        raise ConfigError(f"unknown stage(s) {unknown}; choose from {', '.join(stage_order())}")
    if args.stages == ["all"]:
        results = run_all(cfg, force=args.force)
    else:
        results = [run_stage(s, cfg, args.force) for s in names]
    for r in results:
        print(f"{r.stage}: {r.status}")
    return EXIT_OK


def _cmd_convert(args) -> int:
    cfg = _config_from_args(args)
    run_dir = cfg.run_dir()
    if args.out.suffix not in (".mel", ".wav"):
        raise ConfigError("--out must end in .mel or .wav")
    ckpt_path = args.checkpoint
    if ckpt_path is None:
        ckpt_path = next((p for p in (run_dir / "evc/best.ckpt", run_dir / "pretrain/best.ckpt") if p.exists()), None)
        if ckpt_path is None:
            raise MissingDependency(f"no checkpoint under {run_dir}: run pretrain or finetune-evc first")
    units_path = run_dir / "units" / "units.txt"
    if not units_path.exists():
        raise MissingDependency(f"{units_path} missing: run quantize first")
    manifest = parse_manifest(cfg.manifest_path("evc"))
    model = load_checkpoint(ckpt_path).build()
    units = read_unit_file(units_path, model.cfg.vocab_size)
    cache = CorpusCache(manifest, units, cfg.dsp)
    res = convert(ConversionRequest(args.source, args.prosody_ref, args.speaker_ref), model, cache, seed=cfg.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    if args.out.suffix == ".mel":
        save_mel(args.out, res.converted_mel)
    else:
        write_wav(args.out, invert_mel(res.converted_mel, n_iters=cfg.evc.vocode_iters, cfg=cfg.dsp))
    print(f"{args.out}: {res.converted_mel.n_frames} frames{' (truncated)' if res.truncated else ''}")
    return EXIT_OK


def _cmd_score(args) -> int:
    for d in (args.target_dir, args.converted_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"{d}: no such directory")
    rows = evc_score(args.target_dir, args.converted_dir)
    if not rows:
        raise ValueError("no converted file has a same-named target")
    write_score_csv(args.out if args.out else "/dev/stdout", rows)
    return EXIT_OK


def _cmd_validate(args) -> int:
    m = parse_manifest(args.manifest, check_files=not args.no_file_check)
    print(f"{args.manifest}: {len(m)} utterances, {len(m.by_speaker())} speakers")
    return EXIT_OK


def _cmd_toy(args) -> int:
    m = make_toy_corpus(args.out_dir, args.speakers, args.utts_per_speaker, seed=args.seed or 0)
    print(f"{args.out_dir / 'manifest.txt'}: {len(m)} utterances")
    return EXIT_OK


def _cmd_report(args) -> int:
    s = emit_report(args.run_dir, args.out)
    print(f"{s.out_dir}: {len(s.written)} files; missing: {', '.join(s.missing) or 'none'}")
    return EXIT_OK


COMMANDS = {
    "run": _cmd_run,
    "convert": _cmd_convert,
    "evc-score": _cmd_score,
    "validate-manifest": _cmd_validate,
    "make-toy-corpus": _cmd_toy,
    "report": _cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ManifestError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (MissingDependency, MissingArtifacts, FileNotFoundError, ImportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
