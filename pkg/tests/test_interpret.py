import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bridgegraph.cluster.profile import ClusterProfile
from bridgegraph.config import LlmConfig
from bridgegraph.interpret import (SECTION_TITLES, SECTIONS, InterpretationReport,
                                   InterpretationRequest, MockChatServer, corpus_responder,
                                   five_section_reply, generate_report, quality_metrics,
                                   render_prompt, request_from_profile, validate_sections,
                                   write_quality_metrics, write_reports)


def req(**kw):
    base = dict(cluster_id=13, bridge_count=42, city_pct=(("morioka", 2.4), ("tama", 97.6)),
                features=(("hospital_access", 3.0512), ("green_space", 3.03), ("lanes", -1.004)))
    base.update(kw)
    return InterpretationRequest(**base)


def fake(lengths, valid=None):
    valid = valid or [True] * len(lengths)
    return [InterpretationReport(i, {"overview": "x" * n} if ok else {}, "m", 0.3, "", 1, ok)
            for i, (n, ok) in enumerate(zip(lengths, valid))]


def test_prompt_formats_z_two_decimals():
    p = render_prompt(req())
    assert "- hospital_access: 3.05\n" in p and "- lanes: -1.00\n" in p
    assert "Cluster ID: 13" in p and "Bridge count: 42" in p and "- tama: 97.6%" in p
    assert render_prompt(req()) == p
    assert "- x: 0.00" in render_prompt(req(features=(("x", -0.001),)))


def test_request_preconditions():
    with pytest.raises(ValueError):
        req(bridge_count=0)
    with pytest.raises(ValueError):
        req(city_pct=(("a", 50.0), ("b", 49.0)))


def test_request_from_profile_top8():
    z = np.array([0.1, -4.0, 2.0, 3.0, -0.5, 0.2, 1.0, -1.5, 0.7, 0.05])
    prof = ClusterProfile(3, 12, {"a": 25.0, "b": 75.0}, z, z, z)
    r = request_from_profile(prof, [f"f{i}" for i in range(10)])
    assert [n for n, _ in r.features] == ["f1", "f3", "f2", "f7", "f6", "f8", "f4", "f5"]


def five(**overrides):
    bodies = {s: f"body of {s}" for s in SECTIONS}
    bodies.update(overrides)
    return "\n".join(f"{i}. {SECTION_TITLES[s]}\n{bodies[s]}\n" for i, s in enumerate(SECTIONS, 1)
                     if bodies[s] is not None)


def test_validate_all_present():
    c = validate_sections(five())
    assert c.ok and c.sections["role"] == "body of role"


def test_validate_missing_weaknesses():
    c = validate_sections(five(weaknesses=None))
    assert not c.ok and c.missing == "weaknesses" and "Weaknesses" in c.reason


def test_validate_empty_body():
    c = validate_sections(five(strengths="   "))
    assert not c.ok and c.missing == "strengths" and c.reason.startswith("empty")


def test_validate_reordered_fails():
    text = ("Strengths\na\nCluster Overview\nb\nWeaknesses\nc\nBridge Role Type\nd\n"
            "City-Specific Context\ne\n")
    c = validate_sections(text)
    assert not c.ok and c.missing == "overview"


@pytest.mark.parametrize("style", [
    "## {i}. {t}", "**{i}) {t}:**", "({i}) {t}", "[{t}]", "【{t}】", "{t}:",
])
def test_validate_header_styles(style):
    text = "\n".join(style.format(i=i, t=SECTION_TITLES[s]) + "\nsome text\n"
                     for i, s in enumerate(SECTIONS, 1))
    assert validate_sections(text).ok


def test_validate_japanese_headers():
    text = "【クラスタ概要】\nあ\n【強み】\nい\n【弱み】\nう\n【橋梁の役割タイプ】\nえ\n【都市別コンテキスト】\nお\n"
    assert validate_sections(text).ok


@given(st.text(max_size=400))
def test_validation_pure(text):
    a, b = validate_sections(text), validate_sections(text)
    assert (a.ok, a.sections, a.missing, a.reason) == (b.ok, b.sections, b.missing, b.reason)


def test_quality_examples():
    assert quality_metrics(fake([101, 672])).length_variance_ratio == pytest.approx(6.653, abs=1e-3)
    assert quality_metrics(fake([100, 400])).length_variance_ratio == 4.0
    assert quality_metrics(fake([250, 250, 250])).length_variance_ratio == 1.0
    q = quality_metrics(fake([100, 300, 5], [True, True, False]))
    assert q.completeness_rate == pytest.approx(2 / 3) and q.mean_length == 200
    with pytest.raises(ValueError):
        quality_metrics(fake([10], [False]))


def test_mock_scheme_five_section():
    r = generate_report(LlmConfig(endpoint="mock://five-section"), render_prompt(req()), 13)
    assert r.valid and r.attempts == 1 and "hospital_access (3.05)" in r.sections["strengths"]
    assert r.char_count == sum(len(r.sections[s]) for s in SECTIONS)


def test_http_mock_valid_and_wire_format():
    with MockChatServer(lambda p: (200, five_section_reply(p["messages"][0]["content"]))) as srv:
        cfg = LlmConfig(endpoint=srv.url, model="m1", temperature=0.5)
        r = generate_report(cfg, render_prompt(req()), 13)
    assert r.valid
    (payload,) = srv.requests
    assert payload["model"] == "m1" and payload["temperature"] == 0.5
    assert payload["messages"] == [{"role": "user", "content": render_prompt(req())}]


def test_four_sections_retry_once_then_invalid():
    reply = five_section_reply(render_prompt(req()), drop="weaknesses")
    with MockChatServer(lambda p: (200, reply)) as srv:
        r = generate_report(LlmConfig(endpoint=srv.url, max_retries=1), render_prompt(req()), 13)
    assert len(srv.requests) == 2 and not r.valid and "Weaknesses" in r.reason


def test_failing_server_no_retries_single_request():
    with MockChatServer(lambda p: (500, "")) as srv:
        r = generate_report(LlmConfig(endpoint=srv.url, max_retries=0), "hello", 1)
    assert len(srv.requests) == 1 and not r.valid and "HTTP 500" in r.reason


def test_retry_recovers_after_transport_failure():
    replies = iter([(503, ""), (200, five())])
    with MockChatServer(lambda p: next(replies)) as srv:
        r = generate_report(LlmConfig(endpoint=srv.url, max_retries=2), "hi", 1)
    assert r.valid and r.attempts == 2


def test_unreachable_endpoint_is_invalid_not_raised():
    r = generate_report(LlmConfig(endpoint="http://127.0.0.1:9/x", max_retries=0, timeout_s=1), "p", 4)
    assert not r.valid and r.reason.startswith("transport")


def test_corpus_completeness():
    corpus = [five(overview="o" * (10 + i)) for i in range(19)]
    with MockChatServer(corpus_responder(corpus)) as srv:
        cfg = LlmConfig(endpoint=srv.url)
        reports = [generate_report(cfg, f"p{i}", i) for i in range(19)]
    assert quality_metrics(reports).completeness_rate == 1.0


def test_write_outputs(tmp_path):
    good = generate_report(LlmConfig(endpoint="mock://five-section"), render_prompt(req()), 13,
                           clock=lambda: "t0")
    bad = generate_report(LlmConfig(endpoint="mock://four-section", max_retries=0),
                          render_prompt(req(cluster_id=2)), 2, clock=lambda: "t0")
    paths = write_reports([good, bad], tmp_path / "reports")
    assert [p.name for p in paths] == ["cluster_13.md", "cluster_2.md"]
    assert validate_sections(paths[0].read_text()).ok
    assert "status: invalid" in paths[1].read_text()
    write_quality_metrics([(0.3, quality_metrics([good, bad]), 2), (0.7, None, 2)], tmp_path / "q.csv")
    rows = list(csv.DictReader(open(tmp_path / "q.csv")))
    assert rows[0]["completeness_rate"] == "0.5000" and rows[1]["n_valid"] == "0"
