from .llm import HttpLlmClient, LlmClient, LlmTransportError, MockLlmClient, classify_optimal_series, extract_organs
from .matching import match_series
from .pairs import (
    PairConfig,
    SplitError,
    augment_negatives,
    build_pairs,
    read_manifest,
    validate_patient_disjoint,
    write_manifest,
)
from .region import RegionModel, classify_region, default_region_model
from .reports import ReportSplitter, split_report
from .types import Finding, Phase, Range, SeriesMeta, VolumeTextPair, classify_phase
