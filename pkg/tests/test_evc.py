import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from prosody_disentangle.checkpoint import ModelCheckpoint
from prosody_disentangle.dsp import MelSpectrogram, save_mel
from prosody_disentangle.evc import (
    ConversionRequest,
    convert,
    default_speaker_ref,
    evc_score,
    export_embeddings,
    f0_rmse,
    finetune_evc,
    mcd,
    pca_1d,
    read_vectors,
    write_vectors,
)
from prosody_disentangle.model import build_model, parameter_checksum, preset
from prosody_disentangle.train import TrainConfig, pretrain


def mcd_oracle(t, c):
    n = min(len(t), len(c))
    total = 0.0
    for i in range(n):
        s = 0.0
        for a, b in zip(t[i], c[i]):
            s += (float(a) - float(b)) ** 2
        total += 10.0 / math.log(10.0) * math.sqrt(2.0 * s)
    return total / n


coeffs = hnp.arrays(np.float64, st.tuples(st.integers(1, 12), st.just(24)), elements=st.floats(-20, 20))


# --- metrics -----------------------------------------------------------------


def test_mcd_examples():
    a = np.random.default_rng(0).normal(size=(7, 24))
    assert mcd(a, a) == 0.0
    b = np.zeros((1, 24))
    c = b.copy()
    c[0, 0] = 1.0
    # closed form (10/ln10)*sqrt(2) = 6.14185..., i.e. 6.142 dB to three decimals
    assert mcd(b, c) == pytest.approx(10 / math.log(10) * math.sqrt(2), abs=1e-12)
    assert round(mcd(b, c), 3) == 6.142


@given(coeffs, coeffs)
def test_mcd_matches_direct_summation(t, c):
    assert abs(mcd(t, c) - mcd_oracle(t, c)) < 1e-9
    assert mcd(t, c) == pytest.approx(mcd(c, t), abs=1e-12)
    assert mcd(t, c) >= 0.0


@given(coeffs, st.integers(1, 5))
def test_mcd_ignores_frames_beyond_shorter_input(t, extra):
    c = t + 0.5
    longer = np.vstack([c, np.full((extra, 24), 99.0)])
    assert mcd(t, longer) == mcd(t, c)


def test_metric_errors():
    with pytest.raises(ValueError):
        mcd(np.zeros((0, 24)), np.zeros((3, 24)))
    with pytest.raises(ValueError):
        mcd(np.zeros((2, 24)), np.zeros((2, 13)))
    with pytest.raises(ValueError):
        f0_rmse([], [100.0])


def test_f0_rmse_examples():
    assert f0_rmse([120.0, 0.0, 130.0], [120.0, 0.0, 130.0]) == 0.0
    track = np.random.default_rng(1).uniform(80, 300, 50)
    assert f0_rmse(track, track + 10.0) == pytest.approx(10.0, abs=1e-12)
    assert f0_rmse([100.0, 200.0], [100.0, 0.0]) == pytest.approx(141.42, abs=5e-3)


@given(
    hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 500).map(lambda v: round(v, 3))),
    hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 500).map(lambda v: round(v, 3))),
)
def test_f0_rmse_properties(t, c):
    n = min(t.size, c.size)
    oracle = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(t[:n], c[:n])) / n)
    assert f0_rmse(t, c) == pytest.approx(oracle, rel=1e-12, abs=1e-9)
    assert f0_rmse(t, c) == pytest.approx(f0_rmse(c, t), abs=1e-12)
    assert (f0_rmse(t, c) == 0.0) == bool(np.array_equal(t[:n], c[:n]))


# --- conversion --------------------------------------------------------------


@pytest.fixture(scope="module")
def mini_model():
    torch.manual_seed(0)
    m = build_model(preset("mini", vocab_size=16))
    m.eval()
    return m


def test_default_speaker_ref(toy8):
    manifest, _ = toy8
    assert default_speaker_ref(manifest, "spk00_000") == "spk00_001"
    assert default_speaker_ref(manifest, "spk01_001") == "spk01_000"


def test_convert_is_deterministic_and_reference_sensitive(toy8, mini_model):
    _, cache = toy8
    req = ConversionRequest("spk00_000", "spk00_001")
    a = convert(req, mini_model, cache, max_frames=30)
    b = convert(req, mini_model, cache, max_frames=30)
    assert np.array_equal(a.converted_mel.frames, b.converted_mel.frames)
    assert a.converted_mel.frames.shape[1] == 80
    assert np.all(np.isfinite(a.converted_mel.frames))
    assert a.alignments.shape == (a.converted_mel.n_frames, cache.refined("spk00_000").ids.size)
    other = convert(ConversionRequest("spk00_000", "spk01_002"), mini_model, cache, max_frames=30)
    n = min(a.converted_mel.n_frames, other.converted_mel.n_frames)
    diff = np.abs(a.converted_mel.frames[:n] - other.converted_mel.frames[:n]).mean()
    # pinned from the first run (about 2e-2); any real dependence on the reference clears it
    assert diff > 1e-3


def test_convert_flags_truncation_and_vocodes(toy8, mini_model):
    _, cache = toy8
    with torch.no_grad():
        saved = mini_model.decoder.stop_gate.bias.clone()
        mini_model.decoder.stop_gate.bias.fill_(-50.0)
    try:
        res = convert(ConversionRequest("spk01_000", "spk00_003"), mini_model, cache, max_frames=8, vocode=True)
    finally:
        with torch.no_grad():
            mini_model.decoder.stop_gate.bias.copy_(saved)
    assert res.truncated and res.converted_mel.n_frames == 8
    assert res.waveform is not None and res.waveform.samples.size > 0


def test_convert_unknown_utterance(toy8, mini_model):
    _, cache = toy8
    with pytest.raises(KeyError, match="nope"):
        convert(ConversionRequest("spk00_000", "nope"), mini_model, cache)


def test_finetune_fixed_lr_and_frozen_speaker(toy8, tmp_path):
    manifest, cache = toy8
    cfg = preset("mini", vocab_size=16)
    pre_cfg = TrainConfig(batch_size=4, max_steps=40, warmup_steps=5, eval_every=20, overfit=True, patience=100)
    pre = pretrain(manifest, cache, cfg, pre_cfg, tmp_path / "pre")
    ckpt = ModelCheckpoint.from_model(pre.model, global_step=40)
    spk_before = parameter_checksum(pre.model.speaker_encoder)
    lrs = []
    ft_cfg = TrainConfig(batch_size=4, max_steps=10, eval_every=5, overfit=True, patience=100)
    res = finetune_evc(ckpt, manifest, cache, ft_cfg, tmp_path / "ft", callback=lambda s, m, r: lrs.append(r.get("lr")))
    assert [lr for lr in lrs if lr is not None] and all(lr == 1e-5 for lr in lrs if lr is not None)
    assert parameter_checksum(res.model.speaker_encoder) == spk_before
    vals = [r["val_mse"] for r in res.curve]
    assert max(vals) <= vals[0] * 1.10


# --- scoring directories -----------------------------------------------------


def test_evc_score_csv(tmp_path):
    rng = np.random.default_rng(2)
    (tmp_path / "t").mkdir()
    (tmp_path / "c").mkdir()
    base = rng.normal(-5, 1, size=(40, 80))
    save_mel(tmp_path / "t" / "a.mel", MelSpectrogram(base))
    save_mel(tmp_path / "c" / "a.mel", MelSpectrogram(base))
    save_mel(tmp_path / "t" / "b.mel", MelSpectrogram(base))
    save_mel(tmp_path / "c" / "b.mel", MelSpectrogram(base + rng.normal(0, 1, base.shape)))
    save_mel(tmp_path / "c" / "orphan.mel", MelSpectrogram(base))
    rows = evc_score(tmp_path / "t", tmp_path / "c", tmp_path / "s.csv")
    assert [r["utt_id"] for r in rows] == ["a", "b"]
    assert rows[0]["mcd_db"] == 0.0 and rows[0]["f0_rmse_hz"] == 0.0
    assert rows[1]["mcd_db"] > 0.0
    with open(tmp_path / "s.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["utt_id", "mcd_db", "f0_rmse_hz"]
    assert table[-1][0] == "__mean__"
    assert float(table[-1][1]) == pytest.approx((rows[0]["mcd_db"] + rows[1]["mcd_db"]) / 2, abs=1e-5)


# --- embeddings --------------------------------------------------------------


def test_pca_recovers_rank_one_direction():
    rng = np.random.default_rng(3)
    d = rng.normal(size=16)
    d /= np.linalg.norm(d)
    x = rng.normal(size=(200, 1)) * 3.0 * d + rng.normal(size=16)
    proj, direction, mean = pca_1d(x)
    assert abs(float(direction @ d)) > 0.999
    assert abs(proj.mean()) < 1e-9
    np.testing.assert_allclose(mean, x.mean(0))


@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 6)), elements=st.floats(-100, 100)))
def test_pca_projection_zero_mean(x):
    proj, direction, _ = pca_1d(x)
    assert abs(proj.mean()) < 1e-9 * max(1.0, np.abs(x).max())
    assert np.linalg.norm(direction) == pytest.approx(1.0)


def test_vector_file_round_trip(tmp_path):
    vecs = {"a": np.random.default_rng(4).normal(size=192), "b": np.array([1 / 3, -0.0, 1e-300])}
    write_vectors(tmp_path / "v.emb", vecs)
    back = read_vectors(tmp_path / "v.emb")
    assert list(back) == ["a", "b"]
    assert all(np.array_equal(back[k], vecs[k]) for k in vecs)
    (tmp_path / "bad.emb").write_text("a|1 2 x\n")
    with pytest.raises(ValueError, match="bad.emb:1"):
        read_vectors(tmp_path / "bad.emb")


def test_export_embeddings(toy8, mini_model, tmp_path):
    manifest, cache = toy8
    out = export_embeddings(mini_model, manifest, cache, tmp_path)
    assert set(out["prosody"]) == set(manifest.utt_ids)
    cfg = mini_model.cfg
    assert all(v.shape == (cfg.prosody_dim,) for v in out["prosody"].values())
    assert all(v.shape == (cfg.speaker_dim,) for v in out["speaker"].values())
    assert all(v.shape == (2 * cfg.u2v_lstm_hidden,) for v in out["unit_mean"].values())
    back = read_vectors(tmp_path / "prosody.emb")
    assert all(np.array_equal(back[u], out["prosody"][u]) for u in back)
    for utt, trace in out["pca"].items():
        assert trace.size == np.load(tmp_path / "frames" / f"{utt}.npy").shape[0]
        assert abs(trace.mean()) < 1e-9
