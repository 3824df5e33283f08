"""Loading of the line-oriented data files shipped under ``organsep/assets``.

Every loader takes an optional ``assets_dir`` so a deployment can swap lexicons,
templates or the organ vocabulary without touching code.
"""

from __future__ import annotations

import json
import re
from functools import lru_cache
from pathlib import Path

DEFAULT_ASSETS_DIR = Path(__file__).parent / "assets"


def _resolve(name: str, assets_dir: str | Path | None) -> Path:
    base = Path(assets_dir) if assets_dir is not None else DEFAULT_ASSETS_DIR
    return base / name


def read_lines(name: str, assets_dir: str | Path | None = None) -> list[str]:
    """Non-empty, non-comment lines of a UTF-8 asset file."""
    text = _resolve(name, assets_dir).read_text(encoding="utf-8")
    return [ln.rstrip("\n") for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]


def read_text(name: str, assets_dir: str | Path | None = None) -> str:
    return _resolve(name, assets_dir).read_text(encoding="utf-8")


def read_tsv(name: str, assets_dir: str | Path | None = None) -> list[tuple[str, ...]]:
    return [tuple(ln.split("\t")) for ln in read_lines(name, assets_dir)]


def read_json(name: str, assets_dir: str | Path | None = None):
    return json.loads(read_text(name, assets_dir))


@lru_cache(maxsize=8)
def _vocabulary(assets_dir: str | None) -> tuple[str, ...]:
    return tuple(read_lines("organ_vocabulary.txt", assets_dir))


def organ_vocabulary(assets_dir: str | Path | None = None) -> tuple[str, ...]:
    """Canonical organ label order. Its length fixes the region feature width."""
    return _vocabulary(None if assets_dir is None else str(assets_dir))


def organ_regions(assets_dir: str | Path | None = None) -> dict[str, str]:
    return {organ: region for organ, region in read_tsv("organ_regions.tsv", assets_dir)}


def display_name(label: str, assets_dir: str | Path | None = None) -> str:
    table = {k: v for k, v in read_tsv("organ_display.tsv", assets_dir)}
    return table.get(label, label.replace("_", " "))


def negative_templates(assets_dir: str | Path | None = None) -> list[str]:
    return read_lines("negative_templates.txt", assets_dir)


def compile_lexicon(name: str, assets_dir: str | Path | None = None) -> list[re.Pattern]:
    return [re.compile(p, re.IGNORECASE) for p in read_lines(name, assets_dir)]


def positive_prompt_template(assets_dir: str | Path | None = None) -> str:
    return read_lines("positive_prompt.txt", assets_dir)[0]
