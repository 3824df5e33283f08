"""Rule-based report splitter: sentences, non-diagnostic filter, sentence-scoped negation."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

from ..assets import compile_lexicon
from .types import NEGATIVE, POSITIVE, Finding

# terminal punctuation (latin and CJK) or a line break ends a sentence
_SENTENCE_END = re.compile(r"(?<=[.!?。！？])\s*|\n+")
# a period between digits is a decimal point, not a boundary
_DECIMAL = re.compile(r"(?<=\d)\.(?=\d)")
_DECIMAL_MARK = "․"


@dataclass
class ReportSplitter:
    negation: list[re.Pattern] = field(default_factory=list)
    nondiagnostic: list[re.Pattern] = field(default_factory=list)

    @classmethod
    def from_assets(cls, assets_dir: str | Path | None = None) -> "ReportSplitter":
        return cls(
            negation=compile_lexicon("negation_lexicon.txt", assets_dir),
            nondiagnostic=compile_lexicon("nondiagnostic_lexicon.txt", assets_dir),
        )

    def sentences(self, text: str) -> list[str]:
        protected = _DECIMAL.sub(_DECIMAL_MARK, text.replace("\r\n", "\n"))
        parts = (p.replace(_DECIMAL_MARK, ".").strip() for p in _SENTENCE_END.split(protected))
        return [p for p in parts if p and re.search(r"\w", p)]

    def is_diagnostic(self, sentence: str) -> bool:
        return not any(p.search(sentence) for p in self.nondiagnostic)

    def polarity(self, sentence: str) -> str:
        return NEGATIVE if any(p.search(sentence) for p in self.negation) else POSITIVE

    def split(self, report_text: str) -> list[Finding]:
        return [Finding(s, self.polarity(s)) for s in self.sentences(report_text) if self.is_diagnostic(s)]


_default: ReportSplitter | None = None


def split_report(report_text: str, splitter: ReportSplitter | None = None) -> list[Finding]:
    """Findings (text and polarity only) of one report, in reading order."""
    global _default
    if splitter is None:
        if _default is None:
            _default = ReportSplitter.from_assets()
        splitter = _default
    return splitter.split(report_text)
