import csv
import hashlib
import json

import numpy as np
import pytest

from prosody_disentangle import cli
from prosody_disentangle.checkpoint import load_checkpoint
from prosody_disentangle.config import load_config
from prosody_disentangle.evc import convert
from prosody_disentangle.pipeline import (
    STAGES,
    Context,
    MissingDependency,
    Stage,
    conversion_pairs,
    run_all,
    run_stage,
    stage_order,
)
from prosody_disentangle.report import MissingArtifacts, emit_report
from prosody_disentangle.ser import EMOTIONS, map_label
from prosody_disentangle.toy import make_toy_corpus

TOY_CFG = """\
paths.manifest = corpus/manifest.txt
paths.run_dir = run
units.vocab_size = 12
model.preset = mini
train.max_steps = 6
train.eval_every = 3
ser.epochs = 1
evc.max_steps = 2
evc.eval_every = 1
evc.vocode_iters = 4
"""


def tree_digest(root, skip=()):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and not any(part in skip for part in p.relative_to(root).parts):
            out[str(p.relative_to(root))] = (hashlib.sha256(p.read_bytes()).hexdigest(), p.stat().st_mtime_ns)
    return out


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    make_toy_corpus(root / "corpus", n_speakers=6, utts_per_speaker=4, seed=0)
    (root / "toy.cfg").write_text(TOY_CFG)
    cfg = load_config(root / "toy.cfg")
    results = run_all(cfg)
    return root, cfg, results


# --- stage graph -------------------------------------------------------------


def test_stage_graph():
    order = stage_order()
    assert set(order) == set(STAGES)
    for name, stage in STAGES.items():
        assert all(order.index(d) < order.index(name) for d in stage.deps)
    noop = lambda ctx: None  # noqa: E731
    cyclic = {"a": Stage("a", ("b",), (), noop), "b": Stage("b", ("a",), (), noop)}
    with pytest.raises(ValueError, match="cycle"):
        stage_order(cyclic)
    with pytest.raises(ValueError, match="unknown"):
        stage_order({"a": Stage("a", ("zzz",), (), noop)})


def test_pretrain_without_units_names_quantize(tmp_path):
    make_toy_corpus(tmp_path / "c", n_speakers=2, utts_per_speaker=2)
    cfg = load_config(None, {"paths.manifest": str(tmp_path / "c" / "manifest.txt"), "paths.run_dir": str(tmp_path / "r")})
    with pytest.raises(MissingDependency, match="run quantize first"):
        run_stage("pretrain", cfg)
    assert not (tmp_path / "r").exists()


def test_conversion_pairs():
    from prosody_disentangle.manifest import Manifest, ManifestRow

    rows = [
        ManifestRow("a1", "x", "a", "s", "neu"),
        ManifestRow("a2", "x", "a", "s", "ang"),
        ManifestRow("a3", "x", "a", "s", "neu"),
        ManifestRow("a4", "x", "a", "s", "ang"),
        ManifestRow("b1", "x", "b", "s", "neu"),
    ]
    jobs = conversion_pairs(Manifest(rows), ["neutral:angry"])
    assert [(n, r.source_utt, r.prosody_ref_utt) for n, r in jobs] == [
        ("a1__angry", "a1", "a2"),
        ("a3__angry", "a3", "a2"),
    ]


# --- end-to-end on the toy corpus -------------------------------------------


def test_all_stages_ran_with_artifacts(toy_run):
    root, cfg, results = toy_run
    assert [r.stage for r in results] == stage_order()
    assert all(r.status == "ran" for r in results)
    run = root / "run"
    for rel in (
        "cache/features/index.txt",
        "units/codebook.pkmc",
        "units/units.txt",
        "units/units_raw.txt",
        "pretrain/best.ckpt",
        "pretrain/last.ckpt",
        "pretrain/curve.csv",
        "ser/report.txt",
        "ser/report_confusion.csv",
        "evc/best.ckpt",
        "conversions/index.txt",
        "evc_scores.csv",
        "embeddings/prosody.emb",
        "embeddings/pca_trace.csv",
        "probe.txt",
    ):
        assert (run / rel).is_file(), rel
    for r in results:
        assert r.outputs, r.stage
    units = (run / "units" / "units.txt").read_text().splitlines()
    for line in units:
        ids = line.split("|")[1].split()
        assert all(a != b for a, b in zip(ids, ids[1:]))


def test_provenance_records(toy_run):
    root, cfg, _ = toy_run
    rec = json.loads((root / "run" / "provenance" / "pretrain.json").read_text())
    assert {"key", "config_hash", "seed", "timestamp", "inputs", "outputs", "config"} <= set(rec)
    assert rec["config_hash"] == cfg.section_hash("dsp", "model", "train", "units")
    assert "train.max_steps = 6" in rec["config"]
    assert any(k.endswith("units.txt") for k in rec["inputs"])


def test_rerun_is_up_to_date_and_writes_nothing(toy_run):
    root, cfg, _ = toy_run
    before = tree_digest(root / "run")
    results = run_all(cfg)
    assert {r.status for r in results} == {"up-to-date"}
    assert tree_digest(root / "run") == before


def test_report(toy_run, tmp_path):
    root, cfg, _ = toy_run
    run = root / "run"
    before = tree_digest(run)
    summary = emit_report(run, tmp_path / "rep")
    assert not summary.missing
    assert tree_digest(run) == before
    # alignment CSVs match a fresh conversion's alignment matrix
    ctx = Context(cfg)
    model = load_checkpoint(run / "evc" / "best.ckpt").build()
    jobs = dict(conversion_pairs(ctx.manifest("evc"), cfg.evc.pairs))
    name = sorted(jobs)[0]
    res = convert(jobs[name], model, ctx.corpus(), seed=cfg.seed)
    align = np.loadtxt(tmp_path / "rep" / "alignments" / f"{name}.csv", delimiter=",", ndmin=2)
    assert align.shape == res.alignments.shape
    # confusion rows sum to the per-class utterance counts
    with open(tmp_path / "rep" / "ser_confusion.csv") as fh:
        rows = list(csv.reader(fh))[1:]
    counts = {c: 0 for c in EMOTIONS}
    for r in ctx.manifest("ser"):
        if map_label(r.raw_label):
            counts[map_label(r.raw_label)] += 1
    assert {r[0]: sum(map(int, r[1:])) for r in rows} == counts
    metrics = dict(csv.reader(open(tmp_path / "rep" / "ser_metrics.csv")))
    assert 0.0 <= float(metrics["wa"]) <= 1.0


def test_report_on_empty_dir(tmp_path):
    with pytest.raises(MissingArtifacts):
        emit_report(tmp_path)


# --- command line ------------------------------------------------------------


def test_cli_exit_codes(tmp_path, capsys, monkeypatch):
    assert cli.main(["make-toy-corpus", str(tmp_path / "c"), "--speakers", "2", "--utts-per-speaker", "2"]) == 0
    manifest = tmp_path / "c" / "manifest.txt"
    assert cli.main(["validate-manifest", str(manifest)]) == 0
    lines = manifest.read_text().splitlines()
    manifest.write_text("\n".join(lines + [lines[0]]) + "\n")
    assert cli.main(["validate-manifest", str(manifest)]) == 1
    assert "lines 1, 5" in capsys.readouterr().err
    manifest.write_text("\n".join(lines) + "\n")

    base = ["--manifest", str(manifest), "--run-dir", str(tmp_path / "r")]
    assert cli.main(["run", "pretrain", *base]) == 2
    assert "run quantize first" in capsys.readouterr().err
    assert cli.main(["run", "bake", *base]) == 1
    assert cli.main(["run", "quantize", *base, "--set", "units.bogus=1"]) == 1
    assert cli.main(["evc-score", "--target-dir", str(tmp_path / "no"), "--converted-dir", str(tmp_path)]) == 2
    assert cli.main(["report", str(tmp_path / "empty")]) == 2

    def boom(args):
        raise RuntimeError("kaput")

    monkeypatch.setitem(cli.COMMANDS, "validate-manifest", boom)
    assert cli.main(["validate-manifest", str(manifest)]) == 3


def test_cli_flags_reach_config():
    args = cli.build_parser().parse_args(["--seed", "9", "run", "pretrain", "--batch-size", "2", "--train-seed", "4"])
    cfg = cli._config_from_args(args)
    assert cfg.train.batch_size == 2
    assert cfg.seed == 9 and cfg.units.seed == 9 and cfg.ser.seed == 9
    assert cfg.train.seed == 4


def test_cli_on_finished_run(toy_run, tmp_path, capsys):
    root, _, _ = toy_run
    cfg_args = ["--config", str(root / "toy.cfg")]
    assert cli.main(["run", "quantize", *cfg_args]) == 0
    assert "quantize: up-to-date" in capsys.readouterr().out
    out = tmp_path / "x.mel"
    assert cli.main(["convert", "--source", "spk00_000", "--prosody-ref", "spk00_001", "--out", str(out), *cfg_args]) == 0
    assert out.is_file()
    assert cli.main(["convert", "--source", "ghost", "--prosody-ref", "spk00_001", "--out", str(out), *cfg_args]) == 1
    scores = tmp_path / "s.csv"
    run = root / "run" / "conversions"
    assert cli.main(["evc-score", "--target-dir", str(run / "target"), "--converted-dir", str(run / "wav"), "--out", str(scores)]) == 0
    assert scores.read_text().startswith("utt_id,mcd_db,f0_rmse_hz")
    assert cli.main(["report", str(root / "run"), "--out", str(tmp_path / "rep")]) == 0


def test_changed_section_reruns_dependents_only(toy_run):
    # runs last: it leaves the shared run directory with a different ser config
    root, _, _ = toy_run
    cfg = load_config(root / "toy.cfg", {"ser.epochs": "2"})
    status = {r.stage: r.status for r in run_all(cfg)}
    assert status["finetune-ser"] == "ran" and status["probe"] == "ran"
    assert status["pretrain"] == "up-to-date" and status["convert"] == "up-to-date"
