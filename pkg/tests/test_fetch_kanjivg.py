import io
import zipfile

import pytest

import fetch_kanjivg
from errors import CorpusError
from glyph_fixtures import glyph_document
from learn_bc import parse_svg_strokes


def _archive(members):
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w") as bundle:
        for name, text in members.items():
            bundle.writestr(name, text)
    return buffer.getvalue()


def test_svg_members_are_flattened(tmp_path):
    archive = _archive({"kanji/0a.svg": glyph_document(0), "kanji/0b.svg": glyph_document(1),
                        "README.md": "kanjivg"})
    assert fetch_kanjivg.extract_glyphs(archive, tmp_path / "out") == 2
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["0a.svg", "0b.svg"]
    assert parse_svg_strokes((tmp_path / "out" / "0a.svg").read_text())


def test_limit_keeps_the_first_glyphs(tmp_path):
    archive = _archive({f"kanji/{i:02d}.svg": glyph_document(i) for i in range(5)})
    assert fetch_kanjivg.extract_glyphs(archive, tmp_path, limit=3) == 3
    assert sorted(p.name for p in tmp_path.iterdir()) == ["00.svg", "01.svg", "02.svg"]


def test_bad_archives(tmp_path):
    with pytest.raises(CorpusError):
        fetch_kanjivg.extract_glyphs(b"not a zip", tmp_path)
    with pytest.raises(CorpusError):
        fetch_kanjivg.extract_glyphs(_archive({"README.md": "empty"}), tmp_path)


def test_cli_reports_corpus_errors(tmp_path, monkeypatch):
    async def fake_download(url, timeout=120.0):
        return b"not a zip"

    monkeypatch.setattr(fetch_kanjivg, "download_archive", fake_download)
    assert fetch_kanjivg.main([str(tmp_path), "--url", "http://localhost/none.zip"]) == 2
