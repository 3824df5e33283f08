from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum


def _norm(s: str) -> str:
    return re.sub(r"[^a-z0-9]", "", s.lower())


class Range(str, Enum):
    HEAD = "Head"
    NECK = "Neck"
    CHEST_LUNG = "Chest(Lung)"
    CHEST_NON_LUNG = "Chest(Non-lung)"
    ABDOMEN = "Abdomen"
    PELVIS = "Pelvis"
    OTHER = "Other"

    @property
    def wire(self) -> str:
        return {"Chest(Lung)": "Chest (Lung)", "Chest(Non-lung)": "Chest (Non-lung)"}.get(self.value, self.value)

    @classmethod
    def parse(cls, text: str) -> "Range | None":
        key = _norm(str(text))
        for r in cls:
            if key in (_norm(r.value), _norm(r.wire)):
                return r
        return None


class Phase(str, Enum):
    NON_CONTRAST = "Non-contrast"
    EARLY_ARTERIAL = "EarlyArterial"
    LATE_ARTERIAL = "LateArterial"
    PORTAL_OR_LATER = "PortalOrLater"
    NOT_SPECIFIED = "NotSpecified"

    @property
    def wire(self) -> str:
        return _PHASE_WIRE[self]

    @classmethod
    def parse(cls, text: str) -> "Phase | None":
        key = _norm(str(text))
        for p in cls:
            if key in (_norm(p.value), _norm(p.wire)):
                return p
        aliases = {"native": cls.NON_CONTRAST, "plain": cls.NON_CONTRAST, "portal": cls.PORTAL_OR_LATER}
        return aliases.get(key)


_PHASE_WIRE = {
    Phase.NON_CONTRAST: "Non-contrast",
    Phase.EARLY_ARTERIAL: "Early arterial phase",
    Phase.LATE_ARTERIAL: "Late arterial phase",
    Phase.PORTAL_OR_LATER: "Portal phase or later",
    Phase.NOT_SPECIFIED: "Not specified",
}

REGIONS = ("head", "neck", "chest", "abdomen", "pelvis")
KERNELS = ("Lung", "SoftTissue", "Other")
POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass
class Finding:
    text: str
    polarity: str
    target_range: Range | None = None
    target_phase: Phase | None = None
    organs: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("finding text must be non-empty")
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"bad polarity {self.polarity!r}")


@dataclass(frozen=True)
class SeriesMeta:
    series_id: str
    series_number: int
    region: frozenset[str]
    phase: Phase
    kernel: str
    window_width: float

    @classmethod
    def from_json(cls, d: dict) -> "SeriesMeta":
        region = d.get("region") or []
        if isinstance(region, str):
            region = [region]
        phase = classify_phase(d)
        return cls(
            series_id=str(d["series_id"]),
            series_number=int(d["series_number"]),
            region=frozenset(r.lower() for r in region),
            phase=phase,
            kernel=str(d.get("kernel", "Other")),
            window_width=float(d.get("window_width", 0.0)),
        )

    def to_json(self) -> dict:
        return {
            "series_id": self.series_id,
            "series_number": self.series_number,
            "region": sorted(self.region),
            "phase": self.phase.value,
            "kernel": self.kernel,
            "window_width": self.window_width,
        }


def classify_phase(meta: dict | SeriesMeta) -> Phase:
    """Contrast phase of a series, read from its metadata (default non-contrast)."""
    if isinstance(meta, SeriesMeta):
        return meta.phase
    raw = meta.get("phase")
    if raw is None or raw == "":
        return Phase.NON_CONTRAST
    parsed = Phase.parse(raw)
    return parsed if parsed is not None else Phase.NON_CONTRAST


@dataclass(frozen=True)
class VolumeTextPair:
    case_id: str
    series_id: str
    organ: str
    text: str
    polarity: str
    source: str
    split: str
    target_range: str = Range.OTHER.value
    target_phase: str = Phase.NOT_SPECIFIED.value
    patient_id: str = ""

    def __post_init__(self):
        if self.organ == "unknown":
            raise ValueError("pairs never carry the 'unknown' organ")
        if self.source not in ("report", "negative_template"):
            raise ValueError(f"bad source {self.source!r}")
        if self.source == "negative_template" and self.polarity != NEGATIVE:
            raise ValueError("negative_template pairs must be negative")

    def to_record(self) -> dict:
        return {
            "case_id": self.case_id,
            "series_id": self.series_id,
            "organ": self.organ,
            "text": self.text,
            "polarity": "pos" if self.polarity == POSITIVE else "neg",
            "source": self.source,
            "split": self.split,
            "target_range": self.target_range,
            "target_phase": self.target_phase,
            "patient_id": self.patient_id,
        }

    @classmethod
    def from_record(cls, r: dict) -> "VolumeTextPair":
        return cls(
            case_id=r["case_id"],
            series_id=r["series_id"],
            organ=r["organ"],
            text=r["text"],
            polarity=POSITIVE if r["polarity"] == "pos" else NEGATIVE,
            source=r["source"],
            split=r["split"],
            target_range=r.get("target_range", Range.OTHER.value),
            target_phase=r.get("target_phase", Phase.NOT_SPECIFIED.value),
            patient_id=r.get("patient_id", ""),
        )
