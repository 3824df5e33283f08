"""Synthetic abdominal CT corpus with known lesions, for end-to-end checks.

Every case holds one patient, one report and one or two series. Organs are
ellipsoids stacked along z, each in its own slab, so an organ crop never sees
another organ's voxels. Lesion types have distinct intensity signatures, and
report sentences name the organ and the lesion of every abnormal organ.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .assets import display_name, organ_vocabulary
from .volume import SegMask, Volume, write_volume

@dataclass(frozen=True)
class LesionSpec:
    """Coarse-textured lesion: a share ``fill`` of texture cells takes ``hu``
    plus a per-cell offset of scale ``sigma``."""

    hu: float
    sigma: float
    fill: float
    phrase: str  # noun phrase with article


LESIONS = {
    "cyst": LesionSpec(0.0, 4.0, 1.0, "a cyst"),
    "calcification": LesionSpec(800.0, 60.0, 0.4, "a calcification"),
    "mass": LesionSpec(120.0, 50.0, 1.0, "a mass"),
    "gas": LesionSpec(-900.0, 30.0, 0.35, "gas"),
}
# texture cell edge in voxels; coarser than any input pooling so the pattern survives it
CELL = (6, 6, 3)


@dataclass(frozen=True)
class OrganSpec:
    hu: float  # portal phase
    hu_plain: float  # non-contrast
    rxy: tuple[int, int]  # in-plane radius range on a 64-voxel plane
    rz: tuple[int, int]  # z half-extent range
    lesions: tuple[str, str]
    aspect: float = 1.0  # y radius relative to x


# top to bottom
ORGANS: dict[str, OrganSpec] = {
    "liver": OrganSpec(65, 55, (18, 22), (14, 20), ("cyst", "mass")),
    "stomach": OrganSpec(35, 30, (14, 18), (10, 13), ("mass", "calcification")),
    "spleen": OrganSpec(50, 45, (11, 14), (9, 12), ("cyst", "calcification")),
    "gallbladder": OrganSpec(15, 15, (8, 10), (8, 11), ("calcification", "gas")),
    "pancreas": OrganSpec(90, 40, (12, 16), (8, 11), ("cyst", "mass"), aspect=0.6),
    "kidney_right": OrganSpec(160, 35, (9, 11), (10, 13), ("cyst", "calcification")),
    "kidney_left": OrganSpec(160, 35, (9, 11), (10, 13), ("cyst", "calcification")),
    "urinary_bladder": OrganSpec(8, 8, (12, 15), (10, 13), ("mass", "gas")),
}
# organs that may be missing from a scan, with probability
ABSENT = {"gallbladder": 0.1, "kidney_left": 0.05}

FAT_HU, AIR_HU = -100.0, -1000.0
MAIN_SERIES, PLAIN_SERIES = "s_portal", "s_plain"

POSITIVE_FORMS = (
    "{Lesion} is present in the {organ}.",
    "There is {phrase} in the {organ}.",
    "The {organ} contains {phrase}.",
    "{Lesion} is present in the {organ} on the portal phase.",
)
NEGATIVE_FORMS = (
    "The {organ} is unremarkable.",
    "No abnormality is seen in the {organ}.",
    "The {organ} appears normal.",
)
DISTRACTORS = (
    "A 4 mm nodule in the right lower lobe.",
    "Degenerative change of the lumbar spine.",
    "Mild atherosclerotic change.",
    "Please correlate clinically.",
)


@dataclass
class SyntheticConfig:
    n_cases: int = 200
    seed: int = 0
    plane: int = 64
    lesion_prob: float = 0.35
    negative_mention_prob: float = 0.5
    distractor_prob: float = 0.5
    plain_series_prob: float = 0.25
    noise_hu: float = 8.0
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    compress: bool = True
    organs: tuple[str, ...] | None = None  # subset of ORGANS; None keeps all


    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError("n_cases must be positive")
        if self.plane < 48:
            raise ValueError("plane must be at least 48 voxels")
        if abs(sum(self.split_fractions) - 1) > 1e-9 or min(self.split_fractions) < 0:
            raise ValueError("split fractions must be non-negative and sum to 1")
        if not 0 <= self.lesion_prob <= 1:
            raise ValueError("lesion_prob must lie in [0, 1]")
        if self.organs is not None:
            self.organs = tuple(self.organs)
            unknown = set(self.organs) - set(ORGANS)
            if unknown or not self.organs:
                raise ValueError(f"organs must be a non-empty subset of {list(ORGANS)}")


@dataclass
class CaseTruth:
    case_id: str
    patient_id: str
    lesions: dict[str, str | None]  # organ -> lesion; absent organs are left out
    series: list[str]
    representative: str
    report: list[str] = field(default_factory=list)


def case_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 104729, index])


def lesion_sentence(lesion: str, organ: str, rng: np.random.Generator) -> str:
    form = POSITIVE_FORMS[int(rng.integers(len(POSITIVE_FORMS)))]
    return form.format(Lesion=lesion.capitalize(), phrase=LESIONS[lesion].phrase, organ=display_name(organ))


def negative_sentence(organ: str, rng: np.random.Generator) -> str:
    # no lesion words: a small text tower would tie "cyst" to normal organs
    form = NEGATIVE_FORMS[int(rng.integers(len(NEGATIVE_FORMS)))]
    return form.format(organ=display_name(organ))


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    d = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return d <= 1.0


def generate_case(index: int, config: SyntheticConfig):
    """(truth, {series_id: (Volume, SegMask, meta)}, report text) for one case."""
    rng = case_rng(config.seed, index)
    case_id = f"case_{index:04d}"
    vocab = organ_vocabulary()
    label_of = {o: vocab.index(o) + 1 for o in ORGANS}

    chosen = [o for o in ORGANS if config.organs is None or o in config.organs]
    present = [o for o in chosen if rng.random() >= ABSENT.get(o, 0.0)]
    geometry, lesions = {}, {}
    grow = config.plane / 64  # radii are tabulated for a 64-voxel plane
    for organ in present:
        spec = ORGANS[organ]
        rx = int(round(rng.integers(spec.rxy[0], spec.rxy[1] + 1) * grow))
        ry = max(4, int(round(rx * spec.aspect)))
        rz = int(rng.integers(spec.rz[0], spec.rz[1] + 1))
        geometry[organ] = (rx, ry, rz)
        lesions[organ] = spec.lesions[int(rng.integers(2))] if rng.random() < config.lesion_prob else None

    gap = 2
    depth = sum(2 * g[2] + 1 + gap for g in geometry.values()) + gap
    shape = (config.plane, config.plane, depth)
    labels = np.zeros(shape, dtype=np.uint16)
    mid = config.plane / 2
    body = _ellipsoid(shape[:2], (mid - 0.5, mid - 0.5), (mid - 2, mid - 4))[..., None]
    noise = rng.normal(0.0, config.noise_hu, size=shape)
    portal = np.where(body, FAT_HU, AIR_HU) + noise
    plain = portal.copy()

    z = gap
    for organ in present:
        spec = ORGANS[organ]
        rx, ry, rz = geometry[organ]
        cx = mid + rng.uniform(-mid + rx + 4, mid - rx - 4) * 0.3
        cy = mid + rng.uniform(-mid + ry + 6, mid - ry - 6) * 0.3
        slab = slice(z, z + 2 * rz + 1)
        local = (*shape[:2], 2 * rz + 1)
        # organs own disjoint slabs, so all painting happens on slab views
        lab, por, pla, nse = (a[:, :, slab] for a in (labels, portal, plain, noise))
        inside = _ellipsoid(local, (cx, cy, rz), (rx, ry, rz + 0.5))
        lab[inside] = label_of[organ]
        por[inside] = spec.hu + nse[inside]
        pla[inside] = spec.hu_plain + nse[inside]
        lesion = lesions[organ]
        if lesion is not None:
            spec_l = LESIONS[lesion]
            # large enough to survive the in-plane pooling of the stem
            f = rng.uniform(0.7, 0.9)
            lr = (max(4, int(round(rx * f))), max(4, int(round(ry * f))), max(2, int(round(rz * rng.uniform(0.7, 0.9)))))
            off = [rng.uniform(-1, 1) * max(0, a - b - 1) for a, b in zip((rx, ry, rz), lr)]
            spot = _ellipsoid(local, (cx + off[0], cy + off[1], rz + off[2]), lr) & inside
            n_cells = [-(-n // c) for n, c in zip(local, CELL)]
            active = rng.random(n_cells) < spec_l.fill
            value = spec_l.hu + rng.normal(0.0, spec_l.sigma, size=n_cells)
            up = lambda a: a.repeat(CELL[0], 0).repeat(CELL[1], 1).repeat(CELL[2], 2)[: local[0], : local[1], : local[2]]
            hit = spot & up(active)
            tex = up(value)[hit] + nse[hit]
            por[hit] = tex
            pla[hit] = tex
        z += 2 * rz + 1 + gap

    sentences = []
    for organ in present:
        if lesions[organ] is not None:
            sentences.append(lesion_sentence(lesions[organ], organ, rng))
        elif rng.random() < config.negative_mention_prob:
            sentences.append(negative_sentence(organ, rng))
    if rng.random() < config.distractor_prob:
        sentences.insert(int(rng.integers(len(sentences) + 1)), DISTRACTORS[int(rng.integers(len(DISTRACTORS)))])

    table = {label_of[o]: o for o in present}
    spacing = (1.0, 1.0, 1.0)
    mask = SegMask(labels, spacing, table)
    series = {
        MAIN_SERIES: (
            Volume(np.clip(np.rint(portal), -1024, 3071).astype(np.int16), spacing),
            mask,
            {"series_number": 3, "phase": "Portal phase or later", "kernel": "SoftTissue", "window_width": 400},
        )
    }
    if rng.random() < config.plain_series_prob:
        kernel, width = (("SoftTissue", 400), ("Lung", 1500))[int(rng.integers(2))]
        series[PLAIN_SERIES] = (
            Volume(np.clip(np.rint(plain), -1024, 3071).astype(np.int16), spacing),
            mask,
            {"series_number": 2, "phase": "Non-contrast", "kernel": kernel, "window_width": width},
        )
    truth = CaseTruth(
        case_id=case_id,
        patient_id=f"patient_{index:04d}",
        lesions=lesions,
        series=sorted(series),
        representative=MAIN_SERIES,
        report=sentences,
    )
    return truth, series, " ".join(sentences) + "\n"


def finding_tasks(organs=None) -> list[dict]:
    """One task per (organ group, lesion); both kidneys form one group."""
    groups: dict[str, list[str]] = {}
    for organ in organs or ORGANS:
        groups.setdefault("kidney" if organ.startswith("kidney_") else organ, []).append(organ)
    tasks = []
    for group, organs in groups.items():
        for lesion in ORGANS[organs[0]].lesions:
            tasks.append({"name": f"{group}_{lesion}", "lesion": lesion, "organs": sorted(organs)})
    return tasks


def finding_labels(truth: CaseTruth, tasks: list[dict]) -> list[dict]:
    rows = []
    for task in tasks:
        organs = [o for o in task["organs"] if o in truth.lesions]
        if not organs:
            continue
        label = int(any(truth.lesions[o] == task["lesion"] for o in organs))
        rows.append({"case_id": truth.case_id, "series_id": truth.representative, "finding": task["name"], "label": label})
    return rows


def assign_splits(patients: list[str], fractions, seed: int) -> dict[str, list[str]]:
    order = list(np.random.default_rng([seed, 15485863]).permutation(len(patients)))
    n_train = int(round(fractions[0] * len(patients)))
    n_valid = int(round(fractions[1] * len(patients)))
    picked = [patients[i] for i in order]
    return {
        "train": sorted(picked[:n_train]),
        "valid": sorted(picked[n_train : n_train + n_valid]),
        "test": sorted(picked[n_train + n_valid :]),
    }


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def generate_corpus(out_dir: str | Path, config: SyntheticConfig | None = None) -> dict:
    """Write the corpus under ``out_dir`` and return a summary."""
    config = config or SyntheticConfig()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    tasks = finding_tasks(config.organs)
    truths, labels = [], []
    for index in range(config.n_cases):
        truth, series, report = generate_case(index, config)
        case_dir = root / truth.case_id
        case_dir.mkdir(exist_ok=True)
        (case_dir / "report.txt").write_text(report, encoding="utf-8")
        _dump(case_dir / "case.json", {"patient_id": truth.patient_id})
        _dump(case_dir / "truth.json", asdict(truth))
        for sid, (volume, mask, meta) in series.items():
            sdir = case_dir / "series" / sid
            sdir.mkdir(parents=True, exist_ok=True)
            write_volume(sdir / "image.vvol", volume, compress=config.compress)
            write_volume(sdir / "mask.vvol", mask, compress=config.compress)
            _dump(sdir / "meta.json", {"series_id": sid, **meta})
        truths.append(truth)
        labels.extend(finding_labels(truth, tasks))
    splits = assign_splits([t.patient_id for t in truths], config.split_fractions, config.seed)
    _dump(root / "splits.json", splits)
    _dump(root / "finding_tasks.json", tasks)
    with open(root / "finding_labels.jsonl", "w", encoding="utf-8") as fh:
        for row in labels:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    n_lesions = sum(v is not None for t in truths for v in t.lesions.values())
    return {
        "cases": len(truths),
        "lesions": n_lesions,
        "splits": {k: len(v) for k, v in splits.items()},
        "finding_tasks": len(tasks),
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()},
    }
