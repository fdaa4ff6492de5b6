import pytest

from prosody_disentangle.manifest import Manifest, ManifestError, ManifestRow, parse_manifest, write_manifest


def _write(tmp_path, lines, make_files=True):
    for line in lines:
        cols = line.split("|")
        if make_files and len(cols) > 1 and cols[1]:
            (tmp_path / cols[1]).write_bytes(b"")
    path = tmp_path / "m.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_valid_ten_rows(tmp_path):
    path = _write(tmp_path, [f"u{i}|u{i}.wav|s{i % 3}|ses1|neu" for i in range(10)])
    m = parse_manifest(path)
    assert len(m) == 10
    assert m["u4"].speaker_id == "s1" and m["u4"].wav_path == tmp_path / "u4.wav"
    assert list(m.by_speaker()) == ["s0", "s1", "s2"]


def test_duplicate_cites_both_lines(tmp_path):
    lines = [f"u{i}|u{i}.wav|s" for i in range(10)]
    lines[8] = "u2|other.wav|s"
    with pytest.raises(ManifestError) as err:
        parse_manifest(_write(tmp_path, lines))
    assert any("'u2'" in e and "lines 3, 9" in e for e in err.value.errors)


def test_empty_manifest(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("# header only\n\n")
    with pytest.raises(ManifestError, match="empty manifest"):
        parse_manifest(path)


def test_errors_are_aggregated(tmp_path):
    lines = ["a|a.wav|s", "b|missing.wav|s", "c|c.wav", "a|a.wav|s"]
    path = _write(tmp_path, lines, make_files=False)
    (tmp_path / "a.wav").write_bytes(b"")
    (tmp_path / "c.wav").write_bytes(b"")
    with pytest.raises(ManifestError) as err:
        parse_manifest(path)
    text = " ".join(err.value.errors)
    assert "line 2: missing audio file" in text
    assert "line 3: expected 3-6" in text
    assert "lines 1, 4" in text
    assert len(err.value.errors) == 3
    assert len(parse_manifest(_write(tmp_path, ["x|nofile.wav|s"], make_files=False), check_files=False)) == 1


def test_missing_manifest_file(tmp_path):
    with pytest.raises(ManifestError, match="no such file"):
        parse_manifest(tmp_path / "nope.txt")


def test_write_round_trip(tmp_path):
    rows = [
        ManifestRow("a", tmp_path / "wav" / "a.wav", "s1", "ses1", "ang"),
        ManifestRow("b", tmp_path / "wav" / "b.wav", "s2", None, None, "en"),
    ]
    write_manifest(tmp_path / "m.txt", Manifest(rows))
    assert (tmp_path / "m.txt").read_text().splitlines()[0] == "a|wav/a.wav|s1|ses1|ang"
    back = parse_manifest(tmp_path / "m.txt", check_files=False)
    assert [(r.utt_id, r.wav_path, r.session_id, r.raw_label, r.language) for r in back] == [
        ("a", tmp_path / "wav" / "a.wav", "ses1", "ang", None),
        ("b", tmp_path / "wav" / "b.wav", None, None, "en"),
    ]
