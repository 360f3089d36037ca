# fetch_kanjivg.py
"""
Download the KanjiVG stroke-order archive and unpack its per-glyph SVG files
into a corpus directory usable by `main.py train-bc --corpus`.

The archive URL can be overridden with KANJIVG_URL (or --url).
"""
import argparse
import asyncio
import io
import logging
import os
import sys
import zipfile
from pathlib import Path
from typing import Optional

import httpx
from dotenv import load_dotenv

from errors import BrushGymError, CorpusError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DEFAULT_URL = "https://github.com/KanjiVG/kanjivg/releases/download/r20230110/kanjivg-20230110-main.zip"


async def download_archive(url: str, timeout: float = 120.0) -> bytes:
    async with httpx.AsyncClient(timeout=timeout, follow_redirects=True) as client:
        try:
            response = await client.get(url)
            response.raise_for_status()
        except httpx.HTTPStatusError as e:
            raise CorpusError(f"KanjiVG download failed with HTTP {e.response.status_code}",
                              details={"url": url})
        except httpx.RequestError as e:
            raise CorpusError(f"KanjiVG download failed: {e}", details={"url": url})
    logger.info(f"Downloaded {len(response.content)} bytes from {url}")
    return response.content


def extract_glyphs(archive: bytes, output_dir: Path, limit: Optional[int] = None) -> int:
    """Write every `kanji/*.svg` member flat into output_dir; returns the count."""
    output_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    try:
        with zipfile.ZipFile(io.BytesIO(archive)) as bundle:
            members = sorted(name for name in bundle.namelist() if name.endswith(".svg"))
            for name in members:
                if limit is not None and written >= limit:
                    break
                (output_dir / Path(name).name).write_bytes(bundle.read(name))
                written += 1
    except zipfile.BadZipFile as e:
        raise CorpusError(f"KanjiVG archive is not a zip file: {e}")
    if written == 0:
        raise CorpusError("KanjiVG archive holds no SVG files")
    return written


async def fetch(url: str, output_dir: Path, limit: Optional[int]) -> int:
    archive = await download_archive(url)
    count = extract_glyphs(archive, output_dir, limit)
    logger.info(f"Extracted {count} glyphs into {output_dir}")
    return count


def main(argv=None) -> int:
    load_dotenv()
    parser = argparse.ArgumentParser(description="Fetch the KanjiVG glyph corpus")
    parser.add_argument("output_dir", type=Path)
    parser.add_argument("--url", default=os.getenv("KANJIVG_URL", DEFAULT_URL))
    parser.add_argument("--limit", type=int, default=None, help="Keep only the first N glyphs")
    args = parser.parse_args(argv)
    try:
        asyncio.run(fetch(args.url, args.output_dir, args.limit))
    except BrushGymError as e:
        logger.error(e.message)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
