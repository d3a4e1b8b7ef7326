"""Cluster interpretation reports from a chat-completions endpoint.

Each cluster profile becomes a fixed-template prompt.  The reply must carry
five headed sections in a fixed order; anything else is retried and finally
marked invalid without stopping the pipeline.

Endpoints starting with ``mock://`` are answered in-process by the
deterministic responders in this module, which is what the bundled fixtures
use.  ``MockChatServer`` serves the same responders over real HTTP.
"""
from __future__ import annotations

import csv
import hashlib
import json
import re
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable

import requests

from .config import LlmConfig

SECTIONS = ("overview", "strengths", "weaknesses", "role", "city_context")
SECTION_TITLES = {
    "overview": "Cluster Overview",
    "strengths": "Strengths",
    "weaknesses": "Weaknesses",
    "role": "Bridge Role Type",
    "city_context": "City-Specific Context",
}
# Accepted header spellings, compared after lower-casing and squashing spaces.
SECTION_ALIASES = {
    "overview": ("cluster overview", "overview", "クラスタ概要", "クラスター概要", "概要"),
    "strengths": ("strengths", "strength", "強み"),
    "weaknesses": ("weaknesses", "weakness", "弱み"),
    "role": ("bridge role type", "role classification", "role type", "role",
             "橋梁の役割タイプ", "役割タイプ", "役割分類", "役割"),
    "city_context": ("city-specific context", "city specific context", "city context",
                     "都市別コンテキスト", "都市固有の文脈", "都市別の文脈", "都市別考察"),
}
_ALIAS = {a: key for key, names in SECTION_ALIASES.items() for a in names}

# "## 2. Strengths", "**2) Strengths:**", "(2) Strengths", "【強み】", "[Strengths]", "２．強み"
_HEADER = re.compile(
    r"^\s*(?:#{1,6}\s*)?(?:\*\*|__)?\s*"
    r"(?:[(（]?[0-9０-９]{1,2}\s*[.)）．、:]?\s*)?"
    r"[\[【「『]?\s*(?P<title>[^\]】」』:：*]+?)\s*[\]】」』]?"
    r"\s*(?:\*\*|__)?\s*[:：]?\s*(?:\*\*|__)?\s*$"
)

TOP_FEATURES = 8


@dataclass(frozen=True)
class InterpretationRequest:
    cluster_id: int
    bridge_count: int
    city_pct: tuple[tuple[str, float], ...]
    features: tuple[tuple[str, float], ...]  # (name, z), strongest first

    def __post_init__(self):
        if self.bridge_count <= 0:
            raise ValueError(f"cluster {self.cluster_id} has no bridges")
        total = sum(p for _, p in self.city_pct)
        if self.city_pct and abs(total - 100.0) > 0.1:
            raise ValueError(f"city percentages sum to {total:.3f}, expected 100")


def request_from_profile(profile, names: list[str], k: int = TOP_FEATURES) -> InterpretationRequest:
    return InterpretationRequest(
        profile.cluster_id, profile.size,
        tuple(sorted(profile.city_pct.items())),
        tuple(profile.top_features(names, k)),
    )


def _fmt2(x: float) -> str:
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def render_prompt(req: InterpretationRequest) -> str:
    lines = [
        "Interpret the bridge cluster summarised below.",
        "Write exactly five headed sections, in the order listed at the end.",
        "",
        f"Cluster ID: {req.cluster_id}",
        f"Bridge count: {req.bridge_count}",
        "City composition:",
    ]
    lines += [f"- {city}: {pct:.1f}%" for city, pct in req.city_pct]
    lines += ["", "Key features (z-scores):"]
    lines += [f"- {name}: {_fmt2(z)}" for name, z in req.features]
    lines += ["", "Sections:"]
    lines += [f"{i}. {SECTION_TITLES[s]}" for i, s in enumerate(SECTIONS, 1)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# validation


@dataclass
class SectionCheck:
    ok: bool
    sections: dict[str, str]
    missing: str | None = None
    reason: str = ""


def header_key(line: str) -> str | None:
    m = _HEADER.match(line)
    if not m:
        return None
    title = re.sub(r"\s+", " ", m.group("title").strip().lower())
    return _ALIAS.get(title)


def validate_sections(text: str) -> SectionCheck:
    """Split ``text`` on recognised headers and check the five appear in order with bodies."""
    found: list[tuple[str, list[str]]] = []
    for line in text.splitlines():
        key = header_key(line)
        if key is not None:
            found.append((key, []))
        elif found:
            found[-1][1].append(line)
    sections: dict[str, str] = {}
    for i, want in enumerate(SECTIONS):
        if i >= len(found):
            return SectionCheck(False, sections, want, f"missing section: {SECTION_TITLES[want]}")
        key, body = found[i]
        if key != want:
            return SectionCheck(False, sections, want,
                                f"missing section: {SECTION_TITLES[want]} (found {SECTION_TITLES[key]})")
        body_text = "\n".join(body).strip()
        if not body_text:
            return SectionCheck(False, sections, want, f"empty section: {SECTION_TITLES[want]}")
        sections[want] = body_text
    if len(found) > len(SECTIONS):
        extra = found[len(SECTIONS)][0]
        return SectionCheck(False, sections, None, f"unexpected extra section: {SECTION_TITLES[extra]}")
    return SectionCheck(True, sections)


# ---------------------------------------------------------------------------
# reports


@dataclass
class InterpretationReport:
    cluster_id: int
    sections: dict[str, str]
    model: str
    temperature: float
    generated_at: str
    attempts: int
    valid: bool
    reason: str = ""
    raw: str = ""

    @property
    def char_count(self) -> int:
        return sum(len(self.sections.get(s, "")) for s in SECTIONS)


@dataclass
class QualityMetrics:
    completeness_rate: float
    length_variance_ratio: float
    mean_length: float
    n_attempted: int
    n_valid: int


def quality_metrics(reports) -> QualityMetrics:
    """Completeness over every attempt; length statistics over the valid ones."""
    reports = list(reports)
    valid = [r.char_count for r in reports if r.valid]
    if not valid:
        raise ValueError("no valid reports")
    if min(valid) <= 0:
        raise ValueError("valid report with zero length")
    return QualityMetrics(len(valid) / len(reports), max(valid) / min(valid),
                          sum(valid) / len(valid), len(reports), len(valid))


class TransportError(Exception):
    pass


def chat_payload(cfg: LlmConfig, prompt: str) -> dict:
    return {"model": cfg.model, "temperature": cfg.temperature,
            "messages": [{"role": "user", "content": prompt}]}


def _post(cfg: LlmConfig, payload: dict, session) -> str:
    if cfg.endpoint.startswith("mock://"):
        return mock_reply(cfg.endpoint[len("mock://"):], payload)
    try:
        resp = session.post(cfg.endpoint, json=payload, timeout=cfg.timeout_s)
    except requests.RequestException as exc:
        raise TransportError(str(exc)) from exc
    if resp.status_code != 200:
        raise TransportError(f"HTTP {resp.status_code}")
    try:
        return resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed response: {exc}") from exc


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def generate_report(cfg: LlmConfig, prompt: str, cluster_id: int, session=None,
                    clock: Callable[[], str] = _now) -> InterpretationReport:
    """Ask once, retry up to ``cfg.max_retries`` times on transport or section failures."""
    session = session or requests.Session()
    payload = chat_payload(cfg, prompt)
    reason, raw = "", ""
    attempts = 0
    for _ in range(cfg.max_retries + 1):
        attempts += 1
        try:
            raw = _post(cfg, payload, session)
        except TransportError as exc:
            reason = f"transport: {exc}"
            continue
        check = validate_sections(raw)
        if check.ok:
            return InterpretationReport(cluster_id, check.sections, cfg.model, cfg.temperature,
                                        clock(), attempts, True, "", raw)
        reason = check.reason
    return InterpretationReport(cluster_id, {}, cfg.model, cfg.temperature, clock(), attempts,
                                False, reason, raw)


def interpret_clusters(cfg: LlmConfig, requests_: list[InterpretationRequest], session=None,
                       clock: Callable[[], str] = _now) -> list[InterpretationReport]:
    session = session or requests.Session()
    return [generate_report(cfg, render_prompt(r), r.cluster_id, session, clock) for r in requests_]


def report_markdown(r: InterpretationReport) -> str:
    head = [f"# Cluster {r.cluster_id}", "",
            f"model: {r.model}  ", f"temperature: {r.temperature}  ",
            f"generated_at: {r.generated_at}  ", f"attempts: {r.attempts}", ""]
    if not r.valid:
        head += [f"status: invalid ({r.reason})", ""]
        if r.raw:
            head += ["```", r.raw.rstrip("\n"), "```", ""]
        return "\n".join(head)
    for i, s in enumerate(SECTIONS, 1):
        head += [f"## {i}. {SECTION_TITLES[s]}", "", r.sections[s], ""]
    return "\n".join(head)


def write_reports(reports, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for r in reports:
        p = out_dir / f"cluster_{r.cluster_id}.md"
        p.write_text(report_markdown(r), encoding="utf-8")
        paths.append(p)
    return paths


def write_quality_metrics(rows: list[tuple[float, QualityMetrics | None, int]], path) -> None:
    """One row per temperature; a temperature with no valid report gets empty length columns."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["temperature", "completeness_rate", "length_variance_ratio", "mean_length",
                    "n_attempted", "n_valid"])
        for t, q, attempted in rows:
            if q is None:
                w.writerow([t, "0.0000", "", "", attempted, 0])
            else:
                w.writerow([t, f"{q.completeness_rate:.4f}", f"{q.length_variance_ratio:.4f}",
                            f"{q.mean_length:.2f}", q.n_attempted, q.n_valid])


# ---------------------------------------------------------------------------
# deterministic mock responders


def _prompt_fields(prompt: str) -> tuple[str, list[tuple[str, str]]]:
    cid = re.search(r"^Cluster ID: (.+)$", prompt, re.M)
    feats = re.findall(r"^- ([A-Za-z0-9_]+): (-?[0-9.]+)$", prompt, re.M)
    return (cid.group(1) if cid else "?"), feats


def five_section_reply(prompt: str, temperature: float = 0.3, drop: str | None = None) -> str:
    """Canned reply built only from the prompt's own fields, so it is a pure function."""
    cid, feats = _prompt_fields(prompt)
    high = [f"{n} ({z})" for n, z in feats if float(z) > 0][:3] or ["none"]
    low = [f"{n} ({z})" for n, z in feats if float(z) < 0][:3] or ["none"]
    digest = hashlib.sha256(f"{prompt}|{temperature}".encode()).hexdigest()[:8]
    bodies = {
        "overview": f"Cluster {cid} groups bridges with a shared profile (ref {digest}).",
        "strengths": "Above average: " + ", ".join(high) + ".",
        "weaknesses": "Below average: " + ", ".join(low) + ".",
        "role": f"{(feats[0][0] if feats else 'mixed').replace('_', ' ').title()} Type",
        "city_context": "Composition follows the city shares listed in the request.",
    }
    parts = []
    for i, s in enumerate(SECTIONS, 1):
        if s == drop:
            continue
        parts.append(f"{i}. {SECTION_TITLES[s]}\n{bodies[s]}\n")
    return "\n".join(parts)


def mock_reply(kind: str, payload: dict) -> str:
    prompt = payload["messages"][-1]["content"]
    t = float(payload.get("temperature", 0.3))
    if kind == "five-section":
        return five_section_reply(prompt, t)
    if kind == "four-section":
        return five_section_reply(prompt, t, drop="weaknesses")
    if kind == "down":
        raise TransportError("mock endpoint down")
    raise TransportError(f"unknown mock endpoint {kind!r}")


class MockChatServer:
    """Threaded localhost server speaking the chat-completions wire format.

    ``responder(payload) -> (status, text)``; every request is recorded in
    ``requests`` in arrival order.
    """

    def __init__(self, responder: Callable[[dict], tuple[int, str]]):
        self.responder = responder
        self.requests: list[dict] = []
        self._lock = threading.Lock()
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(n) or b"{}")
                with outer._lock:
                    outer.requests.append(payload)
                status, text = outer.responder(payload)
                body = json.dumps({"choices": [{"index": 0, "message": {
                    "role": "assistant", "content": text}}]}).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1/chat/completions"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)


def corpus_responder(replies: list[str]) -> Callable[[dict], tuple[int, str]]:
    """Serve ``replies`` in order, cycling."""
    state = {"i": 0}
    lock = threading.Lock()

    def respond(payload):
        with lock:
            text = replies[state["i"] % len(replies)]
            state["i"] += 1
        return 200, text

    return respond

