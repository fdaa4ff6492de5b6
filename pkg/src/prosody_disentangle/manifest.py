"""Corpus manifests: ``utt_id|wav_path|speaker_id[|session_id[|raw_label[|language]]]``."""
from __future__ import annotations

from collections import OrderedDict, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional


class ManifestError(ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ManifestRow:
    utt_id: str
    wav_path: Path
    speaker_id: str
    session_id: Optional[str] = None
    raw_label: Optional[str] = None
    language: Optional[str] = None

    def to_line(self) -> str:
        cols = [self.utt_id, str(self.wav_path), self.speaker_id, self.session_id or "", self.raw_label or ""]
        if self.language:
            cols.append(self.language)
        return "|".join(cols)


@dataclass
class Manifest:
    rows: List[ManifestRow]
    corpus_name: str = ""
    _index: Dict[str, ManifestRow] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {r.utt_id: r for r in self.rows}

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __getitem__(self, utt_id: str) -> ManifestRow:
        return self._index[utt_id]

    def __contains__(self, utt_id):
        return utt_id in self._index

    @property
    def utt_ids(self) -> List[str]:
        return [r.utt_id for r in self.rows]

    def by_speaker(self) -> "OrderedDict[str, List[str]]":
        groups: Dict[str, List[str]] = OrderedDict()
        for r in self.rows:
            groups.setdefault(r.speaker_id, []).append(r.utt_id)
        return groups

    def subset(self, utt_ids) -> "Manifest":
        keep = set(utt_ids)
        return Manifest([r for r in self.rows if r.utt_id in keep], self.corpus_name)


def parse_manifest(path, check_files: bool = True) -> Manifest:
    """Parse and validate; raises :class:`ManifestError` listing every bad line."""
    path = Path(path)
    if not path.exists():
        raise ManifestError([f"{path}: no such file"])
    lines = path.read_text(encoding="utf-8").splitlines()
    errors: List[str] = []
    rows: List[ManifestRow] = []
    seen: Dict[str, List[int]] = defaultdict(list)
    for lineno, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("|")
        if len(cols) < 3 or len(cols) > 6:
            errors.append(f"line {lineno}: expected 3-6 '|'-separated fields, got {len(cols)}")
            continue
        cols += [""] * (6 - len(cols))
        utt, wav, spk, sess, label, lang = (c.strip() for c in cols)
        if not utt or not spk or not wav:
            errors.append(f"line {lineno}: utt_id, wav_path and speaker_id are required")
            continue
        wav_path = Path(wav)
        if not wav_path.is_absolute():
            wav_path = path.parent / wav_path
        if check_files and not wav_path.exists():
            errors.append(f"line {lineno}: missing audio file {wav_path}")
        seen[utt].append(lineno)
        rows.append(ManifestRow(utt, wav_path, spk, sess or None, label or None, lang or None))
    for utt, where in seen.items():
        if len(where) > 1:
            errors.append(f"duplicate utt_id {utt!r} on lines {', '.join(map(str, where))}")
    if not rows and not errors:
        errors.append(f"{path}: empty manifest")
    if errors:
        raise ManifestError(errors)
    return Manifest(rows, path.stem)


validate_manifest = parse_manifest


def write_manifest(path, manifest: Manifest, relative_to: Optional[Path] = None) -> None:
    base = Path(relative_to) if relative_to is not None else Path(path).parent
    out = []
    for r in manifest.rows:
        wav = r.wav_path
        try:
            wav = wav.resolve().relative_to(base.resolve())
        except ValueError:
            pass
        out.append(ManifestRow(r.utt_id, wav, r.speaker_id, r.session_id, r.raw_label, r.language).to_line())
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
