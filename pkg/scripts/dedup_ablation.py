#!/usr/bin/env python3
"""Emotion classification from unit sequences with and without run-length deduplication.

With ``--config`` the raw (duplicated) units of a finished pipeline run are
used together with the SER manifest labels; otherwise the constructed corpus in
which only repetition length carries the label.
"""
import argparse
import csv
import sys
from pathlib import Path

from prosody_disentangle.config import load_config
from prosody_disentangle.manifest import Manifest, parse_manifest
from prosody_disentangle.ser import HeadConfig, build_cv_plan, classify_units, map_label
from prosody_disentangle.toy import repetition_corpus
from prosody_disentangle.units import read_unit_file


def run_units(config):
    cfg = load_config(config)
    manifest = parse_manifest(cfg.manifest_path("ser"))
    raw = read_unit_file(cfg.run_dir() / "units" / "units_raw.txt", cfg.units.vocab_size, refined=False)
    labels = {r.utt_id: map_label(r.raw_label) for r in manifest if map_label(r.raw_label) and r.utt_id in raw}
    seqs = {u: raw[u].ids for u in labels}
    keep = [r for r in manifest if r.utt_id in labels]
    return Manifest(keep, manifest.corpus_name), seqs, labels, cfg.units.vocab_size


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, help="pipeline config of a finished run (omit for the constructed corpus)")
    ap.add_argument("--vocab", type=int, default=8, help="vocabulary of the constructed corpus")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, help="CSV with one row per setting")
    args = ap.parse_args()

    if args.config:
        manifest, seqs, labels, vocab = run_units(args.config)
    else:
        manifest, seqs, labels = repetition_corpus(vocab_size=args.vocab, seed=args.seed)
        vocab = args.vocab
    plan = build_cv_plan(manifest, seed=args.seed)
    classes = sorted(set(labels.values()))
    head = HeadConfig(epochs=args.epochs, batch_size=16, seed=args.seed)
    rows = []
    for dedup in (False, True):
        rep = classify_units(seqs, labels, plan, vocab, deduplicate=dedup, classes=classes, head_cfg=head)
        rows.append({"units": "deduplicated" if dedup else "duplicated", "wa": rep.wa, "ua": rep.ua, "n": rep.n_utterances})
    w = csv.DictWriter(open(args.out, "w", newline="") if args.out else sys.stdout, fieldnames=list(rows[0]))
    w.writeheader()
    for r in rows:
        w.writerow({k: f"{v:.4f}" if isinstance(v, float) else v for k, v in r.items()})


if __name__ == "__main__":
    main()
