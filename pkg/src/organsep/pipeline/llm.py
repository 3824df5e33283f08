"""LLM clients and the two prompt-driven pipeline steps.

``HttpLlmClient`` speaks the ``POST /api/generate`` protocol; ``MockLlmClient`` is
a pure lexicon lookup used for CI and synthetic corpora.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from pathlib import Path
from typing import Protocol

import httpx

from ..assets import read_json, read_text, read_tsv
from .types import Finding, Phase, Range

log = logging.getLogger(__name__)

MAX_ATTEMPTS = 3


class LlmTransportError(RuntimeError):
    """Network-level failure; callers may retry."""


class LlmClient(Protocol):
    def query(self, system_prompt: str, user_prompt: str) -> str: ...


class HttpLlmClient:
    """Client for an Ollama-style ``/api/generate`` endpoint."""

    def __init__(
        self,
        endpoint: str | None = None,
        model: str | None = None,
        temperature: float = 0.8,
        num_ctx: int = 8192,
        max_in_flight: int = 4,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = (endpoint or os.environ.get("LLM_ENDPOINT", "http://localhost:11434")).rstrip("/")
        self.model = model or os.environ.get("LLM_MODEL", "gpt-oss:20b")
        self.temperature = temperature
        self.num_ctx = num_ctx
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def payload(self, system_prompt: str, user_prompt: str) -> dict:
        return {
            "model": self.model,
            "system": system_prompt,
            "prompt": user_prompt,
            "temperature": self.temperature,
            "num_ctx": self.num_ctx,
            "stream": False,
        }

    def query(self, system_prompt: str, user_prompt: str) -> str:
        with self._slots:
            try:
                resp = self._client.post(f"{self.endpoint}/api/generate", json=self.payload(system_prompt, user_prompt))
                resp.raise_for_status()
                return str(resp.json()["response"])
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                raise LlmTransportError(str(exc)) from exc


class MockLlmClient:
    """Deterministic stand-in: exact-match table first, then keyword lexicons."""

    def __init__(self, assets_dir: str | Path | None = None, extra_table: dict | None = None):
        table = read_json("mock_llm_table.json", assets_dir)
        for key, value in (extra_table or {}).items():
            table.setdefault(key, {}).update(value)
        self.series_table = table.get("optimal_series", {})
        self.organ_table = table.get("organ_extractor", {})
        self.range_kw = read_tsv("range_keywords.tsv", assets_dir)
        self.phase_kw = read_tsv("phase_keywords.tsv", assets_dir)
        organ_kw = read_tsv("organ_keywords.tsv", assets_dir)
        self.organ_kw = sorted(((k, v.split(",")) for k, v in organ_kw), key=lambda kv: -len(kv[0]))

    @staticmethod
    def _has(text: str, phrase: str) -> bool:
        return re.search(r"(?<!\w)" + re.escape(phrase) + r"(?!\w)", text, re.IGNORECASE) is not None

    def _optimal_series(self, finding: str) -> str:
        key = finding.strip().rstrip(".")
        if key in self.series_table:
            return json.dumps(self.series_table[key])
        rng = next((r for kw, r in self.range_kw if self._has(finding, kw)), "Other")
        phase = next((p for kw, p in self.phase_kw if self._has(finding, kw)), "Not specified")
        return json.dumps({"range": rng, "phase": phase})

    def _organs(self, finding: str, available: list[str]) -> str:
        if finding in self.organ_table:
            hits = self.organ_table[finding]
        else:
            hits, rest = [], finding
            for phrase, labels in self.organ_kw:
                pattern = re.compile(r"(?<!\w)" + re.escape(phrase) + r"(?!\w)", re.IGNORECASE)
                if pattern.search(rest):
                    rest = pattern.sub(" ", rest)
                    hits.extend(l for l in labels if l not in hits)
        hits = [h for h in hits if h == "unknown" or h in available]
        return json.dumps(hits or ["unknown"])

    def query(self, system_prompt: str, user_prompt: str) -> str:
        m = re.match(r"Finding sentence:\s*(.*?)\s*\n\s*Available organ labels:\s*(.*)\s*$", user_prompt, re.DOTALL)
        if m:
            try:
                available = json.loads(m.group(2))
            except ValueError:
                available = [s.strip() for s in m.group(2).split(",")]
            return self._organs(m.group(1), available)
        return self._optimal_series(user_prompt)


# ----------------------------------------------------------------- prompts


class Prompts:
    def __init__(self, assets_dir: str | Path | None = None):
        self.series_system = read_text("optimal_series_system.txt", assets_dir).rstrip("\n")
        self.series_user = read_text("optimal_series_user.txt", assets_dir).rstrip("\n")
        self.organ_system = read_text("organ_extractor_system.txt", assets_dir).rstrip("\n")
        self.organ_user = read_text("organ_extractor_user.txt", assets_dir).rstrip("\n")


_JSON_OBJECT = re.compile(r"\{.*\}", re.DOTALL)
_JSON_LIST = re.compile(r"\[.*\]", re.DOTALL)


def _query_with_retry(client: LlmClient, system: str, user: str, parse):
    """Returns ``parse(reply)`` or ``None`` after MAX_ATTEMPTS unparseable replies."""
    last_error = None
    for attempt in range(MAX_ATTEMPTS):
        try:
            reply = client.query(system, user)
        except LlmTransportError as exc:
            if attempt == MAX_ATTEMPTS - 1:
                raise
            time.sleep(0.05 * 2**attempt)
            continue
        try:
            return parse(reply)
        except (ValueError, TypeError, KeyError) as exc:
            last_error = exc
    log.warning("dropping finding %r: unparseable LLM reply (%s)", user[:80], last_error)
    return None


def _parse_series(reply: str) -> tuple[Range, Phase]:
    m = _JSON_OBJECT.search(reply)
    if not m:
        raise ValueError("no JSON object in reply")
    obj = json.loads(m.group(0))
    if not isinstance(obj, dict):
        raise ValueError("reply is not an object")
    rng = Range.parse(obj.get("range", ""))
    if rng is None:
        log.warning("range %r outside the choice set; using Other", obj.get("range"))
        rng = Range.OTHER
    phase = Phase.parse(obj.get("phase", ""))
    if phase is None:
        log.warning("phase %r outside the choice set; using NotSpecified", obj.get("phase"))
        phase = Phase.NOT_SPECIFIED
    return rng, phase


def classify_optimal_series(
    finding: Finding, client: LlmClient, prompts: Prompts | None = None
) -> tuple[Range, Phase] | None:
    """Best imaging range and contrast phase for observing a finding."""
    prompts = prompts or Prompts()
    user = prompts.series_user.format(finding_text=finding.text)
    return _query_with_retry(client, prompts.series_system, user, _parse_series)


def _parse_list(reply: str) -> list[str]:
    m = _JSON_LIST.search(reply)
    if not m:
        raise ValueError("no JSON list in reply")
    items = json.loads(m.group(0))
    if not isinstance(items, list):
        raise ValueError("reply is not a list")
    return [str(x) for x in items]


def extract_organs(
    finding: Finding, available_labels: list[str], client: LlmClient, prompts: Prompts | None = None
) -> list[str]:
    """Organ labels referenced by a finding, restricted to ``available_labels``.

    Returns ``["unknown"]`` when nothing usable was identified.
    """
    prompts = prompts or Prompts()
    user = prompts.organ_user.format(finding_text=finding.text, organs_list=json.dumps(list(available_labels)))
    labels = _query_with_retry(client, prompts.organ_system, user, _parse_list)
    if labels is None:
        return ["unknown"]
    allowed = set(available_labels)
    kept = []
    for label in labels:
        if label in allowed and label not in kept:
            kept.append(label)
    return kept or ["unknown"]
