#!/usr/bin/env python3
"""Sweep the prosody and unit embedding sizes: pretrain on the synthetic corpus, then probe speakers.

For each (prosody_dim, unit_repr_dim) pair the script reports the best
validation MSE and how well a linear probe recovers speaker identity from the
prosody embedding (lower means less speaker leakage).
"""
import argparse
import csv
import itertools
import sys
import time
from pathlib import Path

import torch

from prosody_disentangle.data import CorpusCache
from prosody_disentangle.model import preset
from prosody_disentangle.ser import probe_speaker
from prosody_disentangle.toy import make_toy_corpus
from prosody_disentangle.train import TrainConfig, pretrain
from prosody_disentangle.units import mfcc_fallback, quantize, refine, train_codebook


def int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("work", type=Path)
    ap.add_argument("--prosody-dims", type=int_list, default=[64, 128, 192, 256])
    ap.add_argument("--unit-dims", type=int_list, default=[128, 256])
    ap.add_argument("--speakers", type=int, default=6)
    ap.add_argument("--utts-per-speaker", type=int, default=6)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--vocab", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    torch.set_num_threads(args.threads)

    manifest = make_toy_corpus(args.work / "corpus", args.speakers, args.utts_per_speaker, seed=args.seed)
    cache = CorpusCache(manifest)
    feats = [mfcc_fallback(cache.waveform(u)) for u in manifest.utt_ids]
    book = train_codebook(feats, args.vocab, seed=args.seed)
    cache.units = {f.utt_id: refine(quantize(f, book)) for f in feats}
    tcfg = TrainConfig(max_steps=args.steps, eval_every=max(1, args.steps // 10), overfit=True, seed=args.seed, patience=1000)

    out = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(out)
    w.writerow(["prosody_dim", "unit_dim", "best_val_mse", "speaker_probe_acc", "chance", "seconds"])
    for p_dim, u_dim in itertools.product(args.prosody_dims, args.unit_dims):
        t0 = time.perf_counter()
        mcfg = preset("desk", vocab_size=args.vocab, prosody_dim=p_dim, unit_repr_dim=u_dim)
        res = pretrain(manifest, cache, mcfg, tcfg, args.work / f"p{p_dim}_u{u_dim}")
        acc = probe_speaker(res.best, manifest, cache, seed=args.seed)
        w.writerow([p_dim, u_dim, f"{res.best.state['val_mse']:.5f}", f"{acc:.4f}", f"{1 / args.speakers:.4f}", f"{time.perf_counter() - t0:.1f}"])
        out.flush()


if __name__ == "__main__":
    main()
