import numpy as np
import pytest
import torch

from prosody_disentangle.checkpoint import CheckpointError, ModelCheckpoint, load_checkpoint, save_checkpoint
from prosody_disentangle.dsp import MelSpectrogram
from prosody_disentangle.model import (
    PROSODY,
    SPEAKER,
    ModelConfig,
    ShapeError,
    build_model,
    count_parameters,
    parameter_checksum,
    preset,
)
from prosody_disentangle.units import RefinedUnits


def mel(n, seed=0):
    return MelSpectrogram(np.random.default_rng(seed).normal(-4, 2, size=(n, 80)))


def units(ids, vocab=100):
    return RefinedUnits(np.asarray(ids, dtype=np.int64), vocab)


@pytest.fixture(scope="module")
def full():
    m = build_model(preset("full"))
    m.eval()
    return m


@pytest.fixture(scope="module")
def desk():
    m = build_model(preset("desk", vocab_size=20))
    m.eval()
    return m


# --- configuration -----------------------------------------------------------


def test_full_dimensions():
    cfg = preset("full")
    assert (cfg.speaker_dim, cfg.prosody_dim, cfg.unit_repr_dim) == (192, 192, 256)
    assert cfg.memory_dim == 256 + 2 * 448
    # attention LSTM input = prenet output + attention context over the memory
    assert cfg.prenet_dim + cfg.memory_dim == cfg.attention_rnn_dim


def test_desk_keeps_interface_dims():
    d = preset("desk")
    assert (d.speaker_dim, d.prosody_dim, d.unit_repr_dim) == (192, 192, 256)
    assert d.decoder_rnn_dim == 256 and d.ecapa_channels == 256


def test_parameter_counts_pinned():
    # regression pins; a change here means the architecture changed
    assert count_parameters(build_model(preset("desk"))) == 5_136_994
    assert count_parameters(build_model(preset("mini"))) == 45_126


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(ecapa_channels=100, ecapa_res2_scale=8)
    with pytest.raises(ValueError):
        preset("huge")
    cfg = preset("desk", prosody_dim=64)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# --- unit encoder ------------------------------------------------------------


def test_unit_encoding_shape(full):
    enc = full.encode_units(units(np.arange(12)))
    assert enc.shape == (12, 512)


def test_unit_encoding_sensitive_to_ids(desk):
    a = desk.encode_units(units([1, 2, 3, 4, 5], 20))
    b = desk.encode_units(units([1, 2, 9, 4, 5], 20))
    assert np.abs(a - b).max() > 1e-4


def test_unit_encoding_rejects_empty_and_out_of_range(desk):
    with pytest.raises(ShapeError):
        desk.encode_units(units([], 20))
    with pytest.raises(ShapeError):
        desk.encode_units(units([25], 20))


# --- style encoders ----------------------------------------------------------


def test_style_embedding_sizes(full):
    m = mel(50)
    assert full.encode_style(m, SPEAKER).shape == (192,)
    assert full.encode_style(m, PROSODY).shape == (192,)


def test_style_embedding_deterministic_in_eval(desk):
    m = mel(60, 1)
    assert np.array_equal(desk.encode_style(m, PROSODY), desk.encode_style(m, PROSODY))


def test_reversed_mel_changes_prosody_embedding(desk):
    m = mel(60, 2)
    rev = MelSpectrogram(m.frames[::-1].copy())
    diff = np.abs(desk.encode_style(m, PROSODY) - desk.encode_style(rev, PROSODY)).max()
    assert diff > 1e-4


def test_style_encoder_rejects_bad_inputs(desk):
    with pytest.raises(ShapeError):
        desk.encode_style(MelSpectrogram(np.zeros((3, 80))), PROSODY)
    with pytest.raises(ShapeError):
        desk.encode_style(MelSpectrogram(np.zeros((30, 40))), PROSODY)
    with pytest.raises(ValueError):
        desk.encode_style(mel(30), "timbre")


def test_speaker_encoder_frozen():
    m = build_model(preset("mini", vocab_size=10))
    assert all(not p.requires_grad for p in m.speaker_encoder.parameters())
    m.train()
    assert not m.speaker_encoder.training
    assert m.prosody_encoder.training
    names = {id(p) for p in m.trainable_parameters()}
    assert not any(id(p) in names for p in m.speaker_encoder.parameters())


# --- decoder -----------------------------------------------------------------


def _decode_inputs(model, n_units=7, seed=0):
    u = model.encode_units(units(np.arange(n_units) % 20, 20))
    return u, model.encode_style(mel(40, seed), SPEAKER), model.encode_style(mel(40, seed + 1), PROSODY)


def test_teacher_forced_shapes(desk):
    u, s, p = _decode_inputs(desk)
    out = desk.decode(u, s, p, teacher=mel(40, 5))
    assert out.mel.shape == (1, 40, 80)
    assert out.alignments.shape == (1, 40, 7)
    np.testing.assert_allclose(out.alignments.sum(-1).numpy(), 1.0, atol=1e-5)


def test_sampling_endpoints(desk):
    u, s, p = _decode_inputs(desk)
    t = mel(30, 6)
    full = desk.decode(u, s, p, teacher=t, sampling_prob=1.0)
    assert bool(full.teacher_used.all())
    none = desk.decode(u, s, p, teacher=t, sampling_prob=0.0)
    assert not bool(none.teacher_used[:, 1:].any())
    # with no teacher frames consumed, the output cannot depend on the teacher's values
    other = desk.decode(u, s, p, teacher=mel(30, 7), sampling_prob=0.0)
    assert torch.equal(none.mel, other.mel)
    # with every frame teacher-forced it must
    assert not torch.equal(full.mel, desk.decode(u, s, p, teacher=mel(30, 7)).mel)


def test_free_running_gate_and_truncation():
    m = build_model(preset("mini", vocab_size=20))
    m.eval()
    u, s, p = _decode_inputs(m)
    with torch.no_grad():
        m.decoder.stop_gate.bias.fill_(-50.0)
    out = m.decode(u, s, p, max_frames=12)
    assert out.truncated and out.mel.shape[1] == 12 and int(out.lengths[0]) == 12
    with torch.no_grad():
        m.decoder.stop_gate.bias.fill_(50.0)
    out = m.decode(u, s, p, max_frames=12)
    assert not out.truncated and int(out.lengths[0]) == 1
    with pytest.raises(ValueError):
        m.decode(u, s, p)


def test_reconstruct_deterministic_and_prosody_sensitive(desk):
    content, spk, other = mel(35, 10), mel(35, 11), mel(50, 12)
    r = units([3, 4, 5, 6], 20)
    a = desk.reconstruct(content, spk, content, r)
    b = desk.reconstruct(content, spk, content, r)
    assert torch.equal(a.mel, b.mel)
    c = desk.reconstruct(content, spk, other, r)
    assert (a.mel - c.mel).abs().mean() > 1e-5


def test_embedding_dim_mismatch(desk):
    u, s, p = _decode_inputs(desk)
    with pytest.raises(ShapeError):
        desk.decode(u, s[:100], p, teacher=mel(10))


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    m = build_model(preset("mini", vocab_size=10))
    opt = torch.optim.Adam(m.trainable_parameters(), lr=1e-3)
    loss = sum(p.sum() for p in m.trainable_parameters())
    loss.backward()
    opt.step()
    ck = ModelCheckpoint.from_model(m, opt, global_step=7, seed=3)
    save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt", expected_config=m.cfg)
    assert back.step == 7 and back.state["seed"] == 3
    assert parameter_checksum(back.build()) == parameter_checksum(m)
    assert torch.equal(back.rng_state, ck.rng_state)
    opt2 = torch.optim.Adam(back.build().trainable_parameters(), lr=1e-3)
    opt2.load_state_dict(back.optimizer_state)
    k = next(iter(ck.optimizer_state["state"]))
    assert torch.equal(opt2.state_dict()["state"][k]["exp_avg"], ck.optimizer_state["state"][k]["exp_avg"])


def test_checkpoint_errors(tmp_path):
    m = build_model(preset("mini", vocab_size=10))
    save_checkpoint(tmp_path / "a.ckpt", ModelCheckpoint.from_model(m))
    data = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(data[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "v.ckpt").write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    with pytest.raises(CheckpointError, match="mismatch"):
        load_checkpoint(tmp_path / "a.ckpt", expected_config=preset("mini", vocab_size=11))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
