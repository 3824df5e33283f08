"""End-to-end construction of organ-level volume-text pairs from a corpus directory.

Corpus layout::

    <root>/splits.json                      optional {"train": [patient ids], ...}
    <root>/<case_id>/case.json              {"patient_id": ...}
    <root>/<case_id>/report.txt
    <root>/<case_id>/series/<series_id>/{image.vvol, mask.vvol, meta.json}
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..assets import display_name, negative_templates, organ_vocabulary
from ..volume import SegMask, VolumeFormatError, load_mask, region_features
from .llm import LlmClient, LlmTransportError, MockLlmClient, Prompts, classify_optimal_series, extract_organs
from .matching import match_series
from .region import RegionModel, classify_region, default_region_model
from .reports import ReportSplitter
from .types import NEGATIVE, Phase, Range, SeriesMeta, VolumeTextPair

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
PLACEHOLDER = "{organ_name}"


class SplitError(ValueError):
    """A patient appears in more than one split."""


class CorpusError(OSError):
    pass


@dataclass
class PairConfig:
    seed: int = 0
    augmentation_ratio: float = 0.5
    augment: bool = True
    region_source: str = "classifier"  # or "meta"
    assets_dir: str | None = None
    threads: int = 1


def derive_rng(seed: int, key: str) -> np.random.Generator:
    """Independent stream per (seed, key); stable across processes and thread schedules."""
    digest = hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng([seed, int.from_bytes(digest, "little")])


# ------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentTarget:
    case_id: str
    series_id: str
    organs: tuple[str, ...]  # organs present in the series mask
    split: str = "train"
    patient_id: str = ""


def augment_negatives(
    case: AugmentTarget,
    mentioned_organs: set[str],
    templates: list[str],
    ratio: float,
    rng: np.random.Generator,
    assets_dir: str | None = None,
) -> list[VolumeTextPair]:
    """Normal-organ pairs for present organs the report never mentions."""
    if not templates:
        raise ValueError("at least one negative template is required")
    bad = [t for t in templates if PLACEHOLDER not in t]
    if bad:
        raise ValueError(f"template without {PLACEHOLDER} placeholder: {bad[0]!r}")
    pairs = []
    for organ in sorted(case.organs):
        if organ in mentioned_organs or organ == "unknown":
            continue
        if rng.random() >= ratio:
            continue
        template = templates[int(rng.integers(len(templates)))]
        text = template.replace(PLACEHOLDER, display_name(organ, assets_dir))
        pairs.append(
            VolumeTextPair(
                case_id=case.case_id,
                series_id=case.series_id,
                organ=organ,
                text=text,
                polarity=NEGATIVE,
                source="negative_template",
                split=case.split,
                patient_id=case.patient_id,
            )
        )
    return pairs


# -------------------------------------------------------------- split hygiene


def read_splits(root: Path) -> dict[str, str] | None:
    """patient id -> split, or ``None`` when the corpus has no splits.json."""
    path = root / "splits.json"
    if not path.exists():
        return None
    lists = json.loads(path.read_text(encoding="utf-8"))
    owner: dict[str, str] = {}
    for split, patients in lists.items():
        for pid in patients:
            if pid in owner and owner[pid] != split:
                raise SplitError(f"patient {pid!r} listed in both {owner[pid]!r} and {split!r}")
            owner[pid] = split
    return owner


def hashed_split(patient_id: str) -> str:
    u = int.from_bytes(hashlib.blake2b(patient_id.encode(), digest_size=8).digest(), "little") / 2**64
    return "train" if u < 0.8 else "valid" if u < 0.9 else "test"


def patient_split_violations(records: list[dict]) -> dict[str, list[str]]:
    """Patients whose pairs span more than one split."""
    seen: dict[str, set[str]] = defaultdict(set)
    for r in records:
        seen[r["patient_id"]].add(r["split"])
    return {pid: sorted(s) for pid, s in seen.items() if len(s) > 1}


def validate_patient_disjoint(records: list[dict]) -> None:
    bad = patient_split_violations(records)
    if bad:
        pid, splits = next(iter(sorted(bad.items())))
        raise SplitError(f"patient {pid!r} appears in splits {splits} ({len(bad)} patients affected)")


# ------------------------------------------------------------------ corpus


@dataclass
class SeriesData:
    meta: SeriesMeta
    mask: SegMask
    path: Path


@dataclass
class CaseResult:
    case_id: str
    split: str
    patient_id: str
    pairs: list[VolumeTextPair] = field(default_factory=list)
    n_series: int = 0
    dropped: Counter = field(default_factory=Counter)
    error: str | None = None


class PairBuilder:
    def __init__(self, config: PairConfig, client: LlmClient | None = None, region_model: RegionModel | None = None):
        self.config = config
        self.client = client if client is not None else MockLlmClient(config.assets_dir)
        self.prompts = Prompts(config.assets_dir)
        self.splitter = ReportSplitter.from_assets(config.assets_dir)
        self.templates = negative_templates(config.assets_dir)
        self.vocab = set(organ_vocabulary(config.assets_dir))
        if config.region_source == "classifier":
            self.region_model = region_model or default_region_model(config.seed)
        else:
            self.region_model = None

    def load_series(self, case_dir: Path) -> list[SeriesData]:
        out = []
        for sdir in sorted((case_dir / "series").iterdir()):
            if not sdir.is_dir():
                continue
            meta = json.loads((sdir / "meta.json").read_text(encoding="utf-8"))
            meta.setdefault("series_id", sdir.name)
            mask = load_mask(sdir / "mask.vvol")
            if self.region_model is not None:
                meta["region"] = sorted(classify_region(region_features(mask), self.region_model))
            out.append(SeriesData(SeriesMeta.from_json(meta), mask, sdir))
        numbers = [s.meta.series_number for s in out]
        if len(set(numbers)) != len(numbers):
            raise ValueError(f"duplicate series_number in {case_dir.name}")
        return out

    def organs_of(self, series: SeriesData) -> list[str]:
        return [o for o in series.mask.present_organs() if o in self.vocab]

    def process_case(self, case_dir: Path, split: str, patient_id: str) -> CaseResult:
        res = CaseResult(case_dir.name, split, patient_id)
        try:
            self._process(case_dir, res)
        except (OSError, ValueError, KeyError, VolumeFormatError, LlmTransportError) as exc:
            log.warning("skipping case %s: %s", case_dir.name, exc)
            res.pairs, res.error = [], f"{type(exc).__name__}: {exc}"
        return res

    def _process(self, case_dir: Path, res: CaseResult) -> None:
        series = self.load_series(case_dir)
        res.n_series = len(series)
        by_id = {s.meta.series_id: s for s in series}
        metas = [s.meta for s in series]
        report = (case_dir / "report.txt").read_text(encoding="utf-8")
        findings = self.splitter.split(report)
        rep_id = match_series((Range.OTHER, Phase.NOT_SPECIFIED), metas) if metas else None
        mentioned: set[str] = set()
        for f in findings:
            target = classify_optimal_series(f, self.client, self.prompts)
            if target is None:
                res.dropped["unparseable"] += 1
                continue
            f.target_range, f.target_phase = target
            sid = match_series(target, metas)
            if sid is None:
                res.dropped["no_matching_series"] += 1
                if rep_id is not None:
                    mentioned.update(extract_organs(f, self.organs_of(by_id[rep_id]), self.client, self.prompts))
                continue
            f.organs = extract_organs(f, self.organs_of(by_id[sid]), self.client, self.prompts)
            if f.organs == ["unknown"]:
                res.dropped["no_organ"] += 1
                continue
            mentioned.update(f.organs)
            for organ in f.organs:
                res.pairs.append(
                    VolumeTextPair(
                        case_id=res.case_id,
                        series_id=sid,
                        organ=organ,
                        text=f.text,
                        polarity=f.polarity,
                        source="report",
                        split=res.split,
                        target_range=f.target_range.value,
                        target_phase=f.target_phase.value,
                        patient_id=res.patient_id,
                    )
                )
        if self.config.augment and rep_id is not None and self.config.augmentation_ratio > 0:
            target = AugmentTarget(res.case_id, rep_id, tuple(self.organs_of(by_id[rep_id])), res.split, res.patient_id)
            rng = derive_rng(self.config.seed, f"augment/{res.case_id}")
            res.pairs.extend(
                augment_negatives(target, mentioned, self.templates, self.config.augmentation_ratio, rng, self.config.assets_dir)
            )


def list_cases(root: Path) -> list[tuple[Path, str]]:
    """(case dir, patient id) for every case, sorted by case id."""
    if not root.is_dir():
        raise CorpusError(f"corpus root {root} is not a directory")
    out = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        meta_path = d / "case.json"
        if meta_path.exists():
            pid = str(json.loads(meta_path.read_text(encoding="utf-8")).get("patient_id", d.name))
        else:
            pid = d.name
        out.append((d, pid))
    return out


@dataclass
class BuildResult:
    pairs: list[VolumeTextPair]
    stats: dict

    def records(self) -> list[dict]:
        return [p.to_record() for p in self.pairs]


def build_pairs(corpus_root: str | Path, config: PairConfig | None = None, client: LlmClient | None = None) -> BuildResult:
    config = config or PairConfig()
    root = Path(corpus_root)
    owner = read_splits(root)
    builder = PairBuilder(config, client)
    jobs, unassigned = [], []
    for case_dir, pid in list_cases(root):
        if owner is None:
            split = hashed_split(pid)
        elif pid in owner:
            split = owner[pid]
        else:
            unassigned.append(case_dir.name)
            continue
        jobs.append((case_dir, split, pid))
    if unassigned:
        log.warning("%d cases skipped: patient not listed in splits.json", len(unassigned))

    if config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(lambda j: builder.process_case(*j), jobs))
    else:
        results = [builder.process_case(*j) for j in jobs]

    pairs = [p for r in results for p in r.pairs]
    validate_patient_disjoint([p.to_record() for p in pairs])
    return BuildResult(pairs, _statistics(results, unassigned, config))


def _statistics(results: list[CaseResult], unassigned: list[str], config: PairConfig) -> dict:
    per_split = {}
    for split in SPLITS:
        rs = [r for r in results if r.split == split and r.error is None]
        pairs = [p for r in rs for p in r.pairs]
        per_split[split] = {
            "patients": len({r.patient_id for r in rs}),
            "cases": len(rs),
            "series": sum(r.n_series for r in rs),
            "reports": len(rs),
            "pairs_report": sum(p.source == "report" for p in pairs),
            "pairs_negative_template": sum(p.source == "negative_template" for p in pairs),
            "pairs_report_positive": sum(p.source == "report" and p.polarity != NEGATIVE for p in pairs),
        }
    dropped = Counter()
    for r in results:
        dropped.update(r.dropped)
    return {
        "config": asdict(config),
        "splits": per_split,
        "dropped_findings": dict(sorted(dropped.items())),
        "failed_cases": {r.case_id: r.error for r in results if r.error},
        "unassigned_cases": unassigned,
    }


def write_manifest(path: str | Path, pairs: list[VolumeTextPair] | list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            rec = p.to_record() if isinstance(p, VolumeTextPair) else p
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
