#!/usr/bin/env python3
"""First principal component of the prosody encoder's frame activations, next to the F0 contour.

Writes one CSV row per frame: utterance, frame index, PC1 value and F0 in Hz.
The PC1 sign is arbitrary; it is flipped to correlate positively with F0.
"""
import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from prosody_disentangle.checkpoint import load_checkpoint
from prosody_disentangle.config import load_config
from prosody_disentangle.dsp import extract_f0
from prosody_disentangle.evc import pca_1d
from prosody_disentangle.pipeline import Context


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, required=True, help="config of a run that has pretrain/best.ckpt")
    ap.add_argument("--checkpoint", type=Path, help="default: <run_dir>/pretrain/best.ckpt")
    ap.add_argument("--utt", action="append", default=[], help="utterance id (repeatable; default: all)")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    ctx = Context(load_config(args.config))
    model = load_checkpoint(args.checkpoint or ctx.p("pretrain", "best.ckpt")).build()
    model.eval()
    cache = ctx.corpus()
    utts = args.utt or ctx.manifest().utt_ids
    w = csv.writer(open(args.out, "w", newline="") if args.out else sys.stdout)
    w.writerow(["utt_id", "frame", "pc1", "f0_hz"])
    for utt in utts:
        x, n = model._mel_tensor(cache.mel(utt))
        acts, _ = model.prosody_encoder.frame_activations(x, n)
        acts = acts[0].T.detach().double().numpy()
        trace = pca_1d(acts)[0] if acts.shape[0] > 1 else np.zeros(acts.shape[0])
        f0 = extract_f0(cache.waveform(utt), ctx.cfg.dsp).f0
        m = min(trace.size, f0.size)
        voiced = f0[:m] > 0
        if voiced.sum() > 2 and np.corrcoef(trace[:m][voiced], f0[:m][voiced])[0, 1] < 0:
            trace = -trace
        for i, v in enumerate(trace):
            w.writerow([utt, i, f"{v:.6g}", f"{f0[i]:.2f}" if i < f0.size else ""])


if __name__ == "__main__":
    main()
