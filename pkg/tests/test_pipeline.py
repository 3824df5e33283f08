import itertools
import json
import logging
import re

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casefiles import write_case
from oracles import oracle_match
from organsep.assets import negative_templates, organ_vocabulary
from organsep.pipeline import (
    HttpLlmClient,
    LlmTransportError,
    MockLlmClient,
    PairConfig,
    SplitError,
    augment_negatives,
    build_pairs,
    classify_optimal_series,
    classify_phase,
    classify_region,
    default_region_model,
    extract_organs,
    match_series,
    read_manifest,
    split_report,
    validate_patient_disjoint,
    write_manifest,
)
from organsep.pipeline.llm import MAX_ATTEMPTS
from organsep.pipeline.pairs import AugmentTarget, hashed_split
from organsep.pipeline.region import RegionModel, UntrainedModelError
from organsep.pipeline.types import Finding, Phase, Range, SeriesMeta


def F(text, polarity="positive"):
    return Finding(text, polarity)


# ------------------------------------------------------------ report splitting


def test_split_negative_template_sentence():
    out = split_report("No significant abnormality is observed in the liver.")
    assert [(f.text, f.polarity) for f in out] == [("No significant abnormality is observed in the liver.", "negative")]


def test_split_two_sentences_mixed_polarity():
    out = split_report("A 12 mm nodule in the right upper lobe. No pleural effusion.")
    assert [f.polarity for f in out] == ["positive", "negative"]
    assert out[0].text == "A 12 mm nodule in the right upper lobe."


def test_split_empty_report():
    assert split_report("") == []


def test_split_line_breaks_decimals_and_filters():
    text = "Technique: contrast CT.\nA 3.5 cm cyst in the liver\nKidneys are unremarkable.\nComparison with prior study."
    out = split_report(text)
    assert [(f.text, f.polarity) for f in out] == [
        ("A 3.5 cm cyst in the liver", "positive"),
        ("Kidneys are unremarkable.", "negative"),
    ]


def test_split_negation_is_sentence_scoped():
    out = split_report("No ascites. Liver mass is present.")
    assert [f.polarity for f in out] == ["negative", "positive"]


def test_negation_word_inside_other_word_ignored():
    # "note" and "nodule" contain "no" but are not negations
    assert split_report("Nodule noted in the liver.")[0].polarity == "positive"


# ------------------------------------------------------------------- mock LLM


@pytest.fixture(scope="module")
def mock():
    return MockLlmClient()


def test_series_lung_nodule(mock):
    assert classify_optimal_series(F("Lung nodule"), mock) == (Range.CHEST_LUNG, Phase.NOT_SPECIFIED)


def test_series_cardiomegaly(mock):
    assert classify_optimal_series(F("Cardiomegaly"), mock)[0] is Range.CHEST_NON_LUNG


def test_series_abdominal_aneurysm_and_other(mock):
    assert classify_optimal_series(F("Abdominal aortic aneurysm"), mock)[0] is Range.ABDOMEN
    assert classify_optimal_series(F("No other abnormalities observed"), mock)[0] is Range.OTHER


def test_series_keyword_phase(mock):
    rng, phase = classify_optimal_series(F("Hypervascular mass in the liver."), mock)
    assert (rng, phase) == (Range.ABDOMEN, Phase.LATE_ARTERIAL)


class Scripted:
    def __init__(self, replies):
        self.replies = list(replies)
        self.calls = []

    def query(self, system_prompt, user_prompt):
        self.calls.append((system_prompt, user_prompt))
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return reply


def test_out_of_set_range_coerced_with_warning(caplog):
    client = Scripted(['{"range": "Torso", "phase": "Portal phase or later"}'])
    with caplog.at_level(logging.WARNING):
        out = classify_optimal_series(F("something"), client)
    assert out == (Range.OTHER, Phase.PORTAL_OR_LATER)
    assert "Torso" in caplog.text


def test_out_of_set_phase_coerced():
    client = Scripted(['```json\n{"range": "Abdomen", "phase": "venous-ish"}\n```'])
    assert classify_optimal_series(F("x"), client) == (Range.ABDOMEN, Phase.NOT_SPECIFIED)


def test_unparseable_three_times_drops(caplog):
    client = Scripted(["nope", "still nope", "{broken"])
    with caplog.at_level(logging.WARNING):
        assert classify_optimal_series(F("x"), client) is None
    assert len(client.calls) == MAX_ATTEMPTS
    assert "dropping finding" in caplog.text


def test_unparseable_then_valid():
    client = Scripted(["garbage", '{"range": "Head", "phase": "Non-contrast"}'])
    assert classify_optimal_series(F("x"), client) == (Range.HEAD, Phase.NON_CONTRAST)


def test_transport_error_retried_then_raised():
    client = Scripted([LlmTransportError("down")] * MAX_ATTEMPTS)
    with pytest.raises(LlmTransportError):
        classify_optimal_series(F("x"), client)
    client = Scripted([LlmTransportError("blip"), '{"range": "Neck", "phase": "Not specified"}'])
    assert classify_optimal_series(F("x"), client) == (Range.NECK, Phase.NOT_SPECIFIED)


def test_system_prompt_sent_verbatim():
    from organsep.assets import read_text

    client = Scripted(['{"range": "Other", "phase": "Not specified"}'])
    classify_optimal_series(F("Lung nodule"), client)
    system, user = client.calls[0]
    assert system == read_text("optimal_series_system.txt").rstrip("\n")
    assert user == "Lung nodule"


ALL_LABELS = list(organ_vocabulary())
LOBES = ["lung_upper_lobe_left", "lung_lower_lobe_left", "lung_upper_lobe_right", "lung_middle_lobe_right", "lung_lower_lobe_right"]


def test_organs_cardiac(mock):
    assert extract_organs(F("Cardiac enlargement is observed."), ALL_LABELS, mock) == ["heart"]


def test_organs_both_lungs(mock):
    assert sorted(extract_organs(F("Emphysematous changes in both lungs."), ALL_LABELS, mock)) == sorted(LOBES)


def test_organs_unknown(mock):
    assert extract_organs(F("No particular abnormalities are observed.", "negative"), ALL_LABELS, mock) == ["unknown"]


def test_organs_restricted_to_available(mock):
    assert extract_organs(F("Cysts in both kidneys."), ["kidney_left", "liver"], mock) == ["kidney_left"]
    assert extract_organs(F("Cardiac enlargement is observed."), ["liver"], mock) == ["unknown"]


def test_organs_unavailable_reply_discarded():
    client = Scripted(['["liver", "not_an_organ", "liver"]'])
    assert extract_organs(F("x"), ["liver", "spleen"], client) == ["liver"]


def test_mock_is_pure(mock):
    other = MockLlmClient()
    for text in ["Lung nodule", "Liver cyst in portal phase.", "Renal stone."]:
        assert mock.query("s", text) == mock.query("s", text) == other.query("s", text)


# ---------------------------------------------------------------- HTTP client


def test_http_client_wire_format():
    seen = []

    def handler(request):
        seen.append((request.method, request.url.path, json.loads(request.content)))
        return httpx.Response(200, json={"response": '{"range": "Abdomen", "phase": "Not specified"}'})

    client = HttpLlmClient(endpoint="http://llm.test", model="m1", transport=httpx.MockTransport(handler))
    assert classify_optimal_series(F("Liver cyst."), client) == (Range.ABDOMEN, Phase.NOT_SPECIFIED)
    method, path, body = seen[0]
    assert (method, path) == ("POST", "/api/generate")
    assert body["model"] == "m1" and body["prompt"] == "Liver cyst."
    assert body["temperature"] == 0.8 and body["num_ctx"] == 8192
    assert isinstance(body["system"], str) and body["system"]


def test_http_client_env_defaults(monkeypatch):
    monkeypatch.setenv("LLM_ENDPOINT", "http://env.test:1234/")
    monkeypatch.setenv("LLM_MODEL", "env-model")
    c = HttpLlmClient()
    assert c.endpoint == "http://env.test:1234" and c.model == "env-model"


def test_http_client_server_error_is_transport_error():
    client = HttpLlmClient(endpoint="http://llm.test", transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    with pytest.raises(LlmTransportError):
        client.query("s", "u")


# ------------------------------------------------------------ region / phase


@pytest.fixture(scope="module")
def region_model():
    return default_region_model()


def _features(**fractions):
    vocab = organ_vocabulary()
    x = np.zeros(len(vocab))
    for organ, v in fractions.items():
        x[vocab.index(organ)] = v
    return x / max(x.sum(), 1e-12) if x.any() else x


def test_region_brain_only(region_model):
    assert classify_region(_features(brain=1.0), region_model) == {"head"}


def test_region_upper_abdomen(region_model):
    assert classify_region(_features(liver=0.6, spleen=0.25, pancreas=0.15), region_model) == {"abdomen"}


def test_region_all_zero(region_model):
    assert classify_region(_features(), region_model) == set()


def test_region_generator_holdout_accuracy(region_model):
    # ground truth comes from the generator, on a seed the model never saw
    from organsep.pipeline.region import synthetic_region_dataset

    X, Y = synthetic_region_dataset(300, seed=12345)
    P = region_model.predict_proba(X) > 0.5
    assert (P == Y.astype(bool)).mean() > 0.95


def test_region_untrained_raises():
    with pytest.raises(UntrainedModelError):
        classify_region(_features(brain=1.0), RegionModel())


def test_region_model_json_round_trip(region_model):
    clone = RegionModel.from_json(region_model.to_json())
    x = _features(liver=0.5, urinary_bladder=0.5)
    assert clone.predict_proba(x) == region_model.predict_proba(x)


@pytest.mark.parametrize(
    "meta,expected",
    [
        ({"phase": "PortalOrLater"}, Phase.PORTAL_OR_LATER),
        ({}, Phase.NON_CONTRAST),
        ({"phase": "EarlyArterial"}, Phase.EARLY_ARTERIAL),
        ({"phase": "Late arterial phase"}, Phase.LATE_ARTERIAL),
    ],
)
def test_classify_phase(meta, expected):
    assert classify_phase(meta) is expected


# ------------------------------------------------------------------ matching


def S(sid, number, region=("chest",), phase=Phase.PORTAL_OR_LATER, kernel="SoftTissue", ww=400.0):
    return SeriesMeta(sid, number, frozenset(region), phase, kernel, ww)


def test_match_lung_kernel():
    a = S("A", 2, kernel="Lung", ww=1500)
    b = S("B", 1)
    assert match_series((Range.CHEST_LUNG, Phase.NOT_SPECIFIED), [a, b]) == "A"


def test_match_wide_window_counts_as_lung():
    a = S("A", 2, kernel="Other", ww=1000)
    b = S("B", 1, kernel="Other", ww=999)
    assert match_series((Range.CHEST_LUNG, Phase.NOT_SPECIFIED), [b, a]) == "A"


def test_match_prefers_portal():
    a = S("A", 1, region=("abdomen",), phase=Phase.NON_CONTRAST)
    b = S("B", 2, region=("abdomen",), phase=Phase.PORTAL_OR_LATER)
    assert match_series((Range.ABDOMEN, Phase.NOT_SPECIFIED), [a, b]) == "B"


def test_match_series_number_tiebreak():
    a = S("A", 7, region=("abdomen",))
    b = S("B", 3, region=("abdomen",))
    assert match_series((Range.ABDOMEN, Phase.NOT_SPECIFIED), [a, b]) == "B"


def test_match_no_region_is_absent():
    assert match_series((Range.HEAD, Phase.NOT_SPECIFIED), [S("A", 1)]) is None
    assert match_series((Range.OTHER, Phase.NOT_SPECIFIED), []) is None


def test_match_recon_fallback_and_exact_phase():
    a = S("A", 1, region=("abdomen",), kernel="Lung", phase=Phase.EARLY_ARTERIAL)
    b = S("B", 2, region=("abdomen",), kernel="Lung", phase=Phase.PORTAL_OR_LATER)
    assert match_series((Range.ABDOMEN, Phase.EARLY_ARTERIAL), [a, b]) == "A"
    assert match_series((Range.ABDOMEN, Phase.NOT_SPECIFIED), [a, b]) == "B"


def test_match_multiregion_series_matches_both():
    a = S("A", 1, region=("chest", "abdomen"))
    assert match_series((Range.CHEST_NON_LUNG, Phase.NOT_SPECIFIED), [a]) == "A"
    assert match_series((Range.ABDOMEN, Phase.NOT_SPECIFIED), [a]) == "A"


TARGETS = [(r, p) for r in Range for p in Phase]

series_strategy = st.lists(
    st.tuples(
        st.sets(st.sampled_from(["head", "neck", "chest", "abdomen", "pelvis"]), min_size=1, max_size=3),
        st.sampled_from([p for p in Phase if p is not Phase.NOT_SPECIFIED]),
        st.sampled_from(["Lung", "SoftTissue", "Other"]),
        st.sampled_from([350.0, 400.0, 1000.0, 1500.0]),
    ),
    min_size=0,
    max_size=6,
)


def _build(spec):
    numbers = np.random.default_rng(len(spec)).permutation(20)[: len(spec)]
    return [S(f"s{i}", int(n), tuple(r), p, k, w) for i, ((r, p, k, w), n) in enumerate(zip(spec, numbers))]


@settings(max_examples=60, deadline=None)
@given(series_strategy)
def test_match_against_oracle_all_subsets(spec):
    series = _build(spec)
    for target in TARGETS:
        for k in range(len(series) + 1):
            for subset in itertools.combinations(series, k):
                assert match_series(target, list(subset)) == oracle_match(target, list(subset))


@settings(max_examples=60, deadline=None)
@given(series_strategy, st.randoms(use_true_random=False))
def test_match_membership_and_permutation(spec, rnd):
    series = _build(spec)
    shuffled = series[:]
    rnd.shuffle(shuffled)
    for target in TARGETS:
        out = match_series(target, series)
        assert out is None or out in {s.series_id for s in series}
        assert match_series(target, shuffled) == out


@settings(max_examples=60, deadline=None)
@given(series_strategy)
def test_match_independent_of_irrelevant_alternatives(spec):
    series = _build(spec)
    for target in TARGETS:
        chosen = match_series(target, series)
        if chosen is None:
            continue
        for k in range(len(series)):
            for subset in itertools.combinations([s for s in series if s.series_id != chosen], k):
                keep = [s for s in series if s.series_id == chosen or s in subset]
                assert match_series(target, keep) == chosen


# -------------------------------------------------------------- augmentation


TEMPLATES = negative_templates()


def test_augment_single_organ_template():
    case = AugmentTarget("c1", "s1", ("liver",))
    pairs = augment_negatives(case, set(), ["No significant abnormality is observed in the {organ_name}."], 1.0, np.random.default_rng(0))
    assert [p.text for p in pairs] == ["No significant abnormality is observed in the liver."]
    assert pairs[0].source == "negative_template" and pairs[0].polarity == "negative"


def test_augment_all_mentioned_is_empty():
    case = AugmentTarget("c1", "s1", ("liver", "spleen"))
    assert augment_negatives(case, {"liver", "spleen"}, TEMPLATES, 1.0, np.random.default_rng(0)) == []


def test_augment_deterministic_subset():
    organs = tuple(organ_vocabulary()[:10])
    case = AugmentTarget("c1", "s1", organs)
    runs = [augment_negatives(case, set(), TEMPLATES, 0.5, np.random.default_rng(7)) for _ in range(3)]
    assert runs[0] == runs[1] == runs[2]
    assert 0 < len(runs[0]) < 10


def test_augment_rejects_template_without_placeholder():
    with pytest.raises(ValueError):
        augment_negatives(AugmentTarget("c", "s", ("liver",)), set(), ["Liver is fine."], 1.0, np.random.default_rng(0))


def test_augment_display_names_and_template_match():
    case = AugmentTarget("c", "s", ("kidney_left", "urinary_bladder"))
    pairs = augment_negatives(case, set(), TEMPLATES, 1.0, np.random.default_rng(3))
    patterns = [re.compile(re.escape(t).replace(re.escape("{organ_name}"), "(.+)") + "$") for t in TEMPLATES]
    for p in pairs:
        assert any(pat.match(p.text) for pat in patterns)
    assert "left kidney" in pairs[0].text


# ---------------------------------------------------------------- build_pairs


ABDOMEN_META = {"series_number": 2, "region": ["abdomen"], "phase": "PortalOrLater", "kernel": "SoftTissue", "window_width": 400}


def test_build_single_report_pair(tmp_path):
    write_case(tmp_path, "case001", "Liver cyst is present.", [("s1", ABDOMEN_META, ["liver"])])
    res = build_pairs(tmp_path, PairConfig(augment=False, region_source="meta"))
    recs = res.records()
    assert len(recs) == 1
    r = recs[0]
    assert (r["organ"], r["source"], r["polarity"], r["series_id"]) == ("liver", "report", "pos", "s1")
    assert r["target_range"] == "Abdomen"


def test_build_with_augmentation_adds_spleen(tmp_path):
    write_case(tmp_path, "case001", "Liver cyst is present.", [("s1", ABDOMEN_META, ["liver", "spleen"])])
    res = build_pairs(tmp_path, PairConfig(augmentation_ratio=1.0, region_source="meta"))
    assert [(p.source, p.organ) for p in res.pairs] == [("report", "liver"), ("negative_template", "spleen")]
    s = res.stats["splits"][res.pairs[0].split]
    assert (s["pairs_report"], s["pairs_negative_template"]) == (1, 1)


def test_build_region_from_classifier(tmp_path):
    meta = {k: v for k, v in ABDOMEN_META.items() if k != "region"}
    write_case(tmp_path, "case001", "Liver cyst is present.", [("s1", meta, ["liver", "spleen", "pancreas"])])
    res = build_pairs(tmp_path, PairConfig(augment=False))
    assert [(p.organ, p.series_id) for p in res.pairs] == [("liver", "s1")]


def test_build_split_conflict_names_patient(tmp_path):
    write_case(tmp_path, "case001", "Liver cyst is present.", [("s1", ABDOMEN_META, ["liver"])], patient_id="P7")
    (tmp_path / "splits.json").write_text(json.dumps({"train": ["P7"], "valid": ["P7"]}))
    with pytest.raises(SplitError, match="P7"):
        build_pairs(tmp_path, PairConfig(region_source="meta"))


def test_build_uses_splits_and_skips_bad_case(tmp_path):
    write_case(tmp_path, "a", "Liver cyst is present.", [("s1", ABDOMEN_META, ["liver"])], patient_id="P1")
    write_case(tmp_path, "b", "Spleen mass is present.", [("s1", ABDOMEN_META, ["spleen"])], patient_id="P2")
    bad = write_case(tmp_path, "c", "Liver cyst is present.", [("s1", ABDOMEN_META, ["liver"])], patient_id="P1")
    (bad / "series" / "s1" / "mask.vvol").write_bytes(b"garbage")
    (tmp_path / "splits.json").write_text(json.dumps({"train": ["P1"], "test": ["P2"]}))
    res = build_pairs(tmp_path, PairConfig(augment=False, region_source="meta"))
    assert [(p.case_id, p.split) for p in res.pairs] == [("a", "train"), ("b", "test")]
    assert list(res.stats["failed_cases"]) == ["c"]


def test_build_drops_unknown_and_unmatched(tmp_path):
    report = "No particular abnormalities are observed. Brain hemorrhage is present. Liver cyst is present."
    write_case(tmp_path, "a", report, [("s1", ABDOMEN_META, ["liver"])])
    res = build_pairs(tmp_path, PairConfig(augment=False, region_source="meta"))
    assert [p.organ for p in res.pairs] == ["liver"]
    assert res.stats["dropped_findings"] == {"no_matching_series": 1, "no_organ": 1}


def test_build_reproducible_and_thread_invariant(tmp_path):
    for i in range(5):
        write_case(tmp_path, f"c{i}", "Liver cyst is present. No splenic lesion.", [("s1", ABDOMEN_META, ["liver", "spleen", "pancreas", "stomach"])])
    cfg = dict(augmentation_ratio=0.5, region_source="meta", seed=3)
    a = build_pairs(tmp_path, PairConfig(**cfg))
    b = build_pairs(tmp_path, PairConfig(**cfg, threads=3))
    out_a, out_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_manifest(out_a, a.pairs)
    write_manifest(out_b, b.pairs)
    assert out_a.read_bytes() == out_b.read_bytes()
    assert read_manifest(out_a) == a.records()
    assert all(r["organ"] != "unknown" for r in a.records())


def test_validate_patient_disjoint():
    ok = [{"patient_id": "p1", "split": "train"}, {"patient_id": "p2", "split": "test"}]
    validate_patient_disjoint(ok)
    with pytest.raises(SplitError, match="p1"):
        validate_patient_disjoint(ok + [{"patient_id": "p1", "split": "valid"}])


def test_hashed_split_is_stable():
    assert [hashed_split(f"p{i}") for i in range(20)] == [hashed_split(f"p{i}") for i in range(20)]
    assert set(hashed_split(f"p{i}") for i in range(500)) == {"train", "valid", "test"}
