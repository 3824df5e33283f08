"""Finding-to-series matching: region, reconstruction, phase, then series number."""

from __future__ import annotations

from typing import Iterable

from .types import Phase, Range, SeriesMeta

# most preferred first
PHASE_PREFERENCE = (Phase.PORTAL_OR_LATER, Phase.LATE_ARTERIAL, Phase.NON_CONTRAST, Phase.EARLY_ARTERIAL)

_RANGE_REGION = {
    Range.HEAD: "head",
    Range.NECK: "neck",
    Range.CHEST_LUNG: "chest",
    Range.CHEST_NON_LUNG: "chest",
    Range.ABDOMEN: "abdomen",
    Range.PELVIS: "pelvis",
}


def is_match(series_region: Iterable[str], target: Range) -> bool:
    if target is Range.OTHER:
        return True
    return _RANGE_REGION[target] in set(series_region)


def top_ranked_group(candidates: list[SeriesMeta]) -> list[SeriesMeta]:
    for phase in PHASE_PREFERENCE:
        group = [s for s in candidates if s.phase == phase]
        if group:
            return group
    return list(candidates)


def match_series(target: tuple[Range, Phase], candidates: list[SeriesMeta]) -> str | None:
    """Series id best suited to observe a finding, or ``None`` if no region matches."""
    target_range, target_phase = target
    pool = [s for s in candidates if is_match(s.region, target_range)]
    if not pool:
        return None

    if target_range is Range.CHEST_LUNG:
        recon = [s for s in pool if s.kernel == "Lung" or s.window_width >= 1000]
    else:
        recon = [s for s in pool if s.kernel == "SoftTissue"]
    if recon:
        pool = recon

    if target_phase is not Phase.NOT_SPECIFIED:
        exact = [s for s in pool if s.phase == target_phase]
        # an unavailable phase falls back to the default preference
        pool = exact if exact else top_ranked_group(pool)
    else:
        pool = top_ranked_group(pool)

    return min(pool, key=lambda s: s.series_number).series_id
