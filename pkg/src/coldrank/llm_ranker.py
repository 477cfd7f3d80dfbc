"""Prompt construction, response parsing and listwise/pairwise ranking."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
import random
import re
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from string import Template
from typing import Any, TypeVar

from .catalog import Catalog, EvaluationCase, Tier, render_metadata
from .llm_backend import BackendError, ChatBackend
from .metrics import RankedPrediction

logger = logging.getLogger(__name__)

__all__ = [
    "CaseFailure", "Decoding", "FailureCode", "MalformedResponseError", "ParseOutcome",
    "PromptSpec", "RankedPrediction", "RankerConfig", "RankerResponse", "TemplateSet",
    "build_listwise_prompt", "build_pairwise_prompt", "extract_structured", "listwise_rank",
    "load_templates", "pairwise_rank", "parse_response", "rank_cases", "shuffle_candidates",
    "validate",
]

LISTWISE_SCHEMA = (
    '{"ranking": [{"id": "<movie id>", "score": <number 0-100>, '
    '"reason": "<one sentence>", "prior_knowledge": <true|false>}, ...]}'
)
PAIRWISE_SCHEMA = (
    '{"ranking": [{"id": "<movie id>", "score": <number 0-100>, "reason": "<one sentence>", '
    '"prior_knowledge": <true|false>}, {"id": "<movie id>", "score": <number 0-100>, '
    '"reason": "<one sentence>", "prior_knowledge": <true|false>}], "tie": <true|false>}'
)


def count_id(text: str, movie_id: str) -> int:
    return len(re.findall(rf"(?<![\w-]){re.escape(movie_id)}(?![\w-])", text))


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.2
    max_tokens: int = 2048
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class PromptSpec:
    system_text: str
    user_text: str
    expected_ids: tuple[str, ...]
    tier: Tier
    decoding: Decoding = field(default_factory=Decoding)
    template_version: str = "v1"

    def __post_init__(self) -> None:
        if not self.expected_ids:
            raise ValueError("expected_ids must be non-empty")
        if len(set(self.expected_ids)) != len(self.expected_ids):
            raise ValueError("expected_ids must be unique")
        for mid in self.expected_ids:
            n = count_id(self.user_text, mid)
            if n != 1:
                raise ValueError(f"prompt mentions {mid!r} {n} times, expected exactly once")

    def to_dict(self) -> dict[str, Any]:
        return {
            "system_text": self.system_text,
            "user_text": self.user_text,
            "expected_ids": list(self.expected_ids),
            "tier": self.tier.value,
            "decoding": dataclasses.asdict(self.decoding),
            "template_version": self.template_version,
        }


@dataclass(frozen=True)
class TemplateSet:
    version: str
    system: str
    listwise: Template
    pairwise: Template


def load_templates(version: str = "v1") -> TemplateSet:
    root = resources.files("coldrank") / "templates"

    def read(name: str) -> str:
        try:
            return (root / f"{name}_{version}.txt").read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ValueError(f"no {name} template for version {version!r}") from None

    return TemplateSet(
        version=version,
        system=read("system").strip(),
        listwise=Template(read("listwise")),
        pairwise=Template(read("pairwise")),
    )


def _candidate_block(position: int, movies: Catalog, mid: str, tier: Tier) -> str:
    movie = movies[mid]
    lines = [f"[{position}] id: {mid}", f"Title: {movie.title}", render_metadata(movie, tier)]
    return "\n".join(lines)


def build_listwise_prompt(
    case: EvaluationCase,
    movies: Catalog,
    tier: Tier | str,
    templates: TemplateSet | None = None,
    decoding: Decoding | None = None,
) -> PromptSpec:
    tier = Tier(tier)
    templates = templates or load_templates()
    blocks = [_candidate_block(i, movies, mid, tier) for i, mid in enumerate(case.candidates, 1)]
    user = templates.listwise.substitute(
        count=len(case.candidates), candidates="\n\n".join(blocks), schema=LISTWISE_SCHEMA
    ).rstrip() + "\n"
    return PromptSpec(templates.system, user, tuple(case.candidates), tier,
                      decoding or Decoding(), templates.version)


def build_pairwise_prompt(
    first: str,
    second: str,
    movies: Catalog,
    tier: Tier | str,
    templates: TemplateSet | None = None,
    decoding: Decoding | None = None,
) -> PromptSpec:
    tier = Tier(tier)
    templates = templates or load_templates()
    blocks = [_candidate_block(1, movies, first, tier), _candidate_block(2, movies, second, tier)]
    user = templates.pairwise.substitute(
        candidates="\n\n".join(blocks), schema=PAIRWISE_SCHEMA
    ).rstrip() + "\n"
    return PromptSpec(templates.system, user, (first, second), tier,
                      decoding or Decoding(), templates.version)


# --- parsing --------------------------------------------------------------

class FailureCode(str, Enum):
    MALFORMED = "MALFORMED"
    NOT_PERMUTATION = "NOT_PERMUTATION"
    HALLUCINATED_ITEM = "HALLUCINATED_ITEM"
    MISSING_ITEM = "MISSING_ITEM"
    LENGTH_MISMATCH = "LENGTH_MISMATCH"
    SCORE_OUT_OF_RANGE = "SCORE_OUT_OF_RANGE"


class MalformedResponseError(ValueError):
    pass


@dataclass(frozen=True)
class RankerResponse:
    ranking: tuple[str, ...]
    scores: dict[str, float]
    reasoning: dict[str, str]
    prior_knowledge: dict[str, bool]
    tie: bool = False


@dataclass(frozen=True)
class ParseOutcome:
    response: RankerResponse | None = None
    code: FailureCode | None = None
    detail: str = ""

    def __post_init__(self) -> None:
        if (self.response is None) == (self.code is None):
            raise ValueError("ParseOutcome needs exactly one of response or code")

    @property
    def ok(self) -> bool:
        return self.response is not None

    @classmethod
    def failure(cls, code: FailureCode, detail: str) -> ParseOutcome:
        return cls(code=code, detail=detail)


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*[ \t]*\n?(.*?)```", re.DOTALL)


def _first_balanced_object(text: str) -> str:
    start = text.find("{")
    if start < 0:
        raise MalformedResponseError("no JSON object in response")
    depth = 0
    in_string = escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        elif ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start:i + 1]
    raise MalformedResponseError("unbalanced JSON object (response truncated?)")


def extract_structured(raw: str) -> dict[str, Any]:
    """Pull the first balanced JSON object out of a model reply.

    Code fences and prose before or after the object are ignored.
    """
    fenced = [body for body in _FENCE_RE.findall(raw) if "{" in body]
    text = fenced[0] if fenced else raw
    candidate = _first_balanced_object(text)
    try:
        doc = json.loads(candidate)
    except json.JSONDecodeError as exc:
        raise MalformedResponseError(f"invalid JSON: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise MalformedResponseError("top-level value is not an object")
    return doc


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def validate(doc: Mapping[str, Any], expected_ids: Sequence[str]) -> ParseOutcome:
    """Check a parsed reply against the requested ids; never raises.

    Checks run in order: length, unknown ids, omitted ids, duplicates, score
    range. The model's order is kept as returned.
    """
    items = doc.get("ranking") if isinstance(doc, Mapping) else None
    if not isinstance(items, list):
        return ParseOutcome.failure(FailureCode.MALFORMED, "missing 'ranking' array")
    ids: list[str] = []
    scores: list[float] = []
    reasons: dict[str, str] = {}
    prior: dict[str, bool] = {}
    for pos, item in enumerate(items):
        if not isinstance(item, Mapping) or not isinstance(item.get("id"), str):
            return ParseOutcome.failure(FailureCode.MALFORMED, f"entry {pos} has no string id")
        if not _is_number(item.get("score")):
            return ParseOutcome.failure(FailureCode.MALFORMED, f"entry {pos} has no numeric score")
        reason = item.get("reason", "")
        known = item.get("prior_knowledge", False)
        if not isinstance(reason, str) or not isinstance(known, bool):
            return ParseOutcome.failure(FailureCode.MALFORMED, f"entry {pos} has mistyped fields")
        ids.append(item["id"])
        scores.append(float(item["score"]))
        reasons.setdefault(item["id"], reason)
        prior.setdefault(item["id"], known)

    expected = set(expected_ids)
    if len(ids) != len(expected_ids):
        return ParseOutcome.failure(
            FailureCode.LENGTH_MISMATCH, f"got {len(ids)} entries, expected {len(expected_ids)}"
        )
    extra = sorted(set(ids) - expected)
    if extra:
        return ParseOutcome.failure(FailureCode.HALLUCINATED_ITEM, f"unknown ids: {', '.join(extra)}")
    missing = sorted(expected - set(ids))
    if missing:
        dupes = sorted({m for m in ids if ids.count(m) > 1})
        detail = f"missing ids: {', '.join(missing)}"
        if dupes:
            detail += f"; repeated ids: {', '.join(dupes)}"
        return ParseOutcome.failure(FailureCode.MISSING_ITEM, detail)
    if len(set(ids)) != len(ids):
        return ParseOutcome.failure(FailureCode.NOT_PERMUTATION, "ranking repeats ids")
    bad = [f"{m}={s:g}" for m, s in zip(ids, scores) if not (math.isfinite(s) and 0.0 <= s <= 100.0)]
    if bad:
        return ParseOutcome.failure(FailureCode.SCORE_OUT_OF_RANGE, f"scores outside [0, 100]: {', '.join(bad)}")

    detail = ""
    rises = [i + 1 for i in range(len(scores) - 1) if scores[i + 1] > scores[i]]
    if rises:
        detail = f"scores increase at positions {', '.join(map(str, rises))}"
    tie = doc.get("tie", False)
    response = RankerResponse(
        ranking=tuple(ids),
        scores=dict(zip(ids, scores)),
        reasoning=reasons,
        prior_knowledge=prior,
        tie=tie is True,
    )
    return ParseOutcome(response=response, detail=detail)


def parse_response(raw: str, expected_ids: Sequence[str]) -> ParseOutcome:
    try:
        doc = extract_structured(raw)
    except MalformedResponseError as exc:
        return ParseOutcome.failure(FailureCode.MALFORMED, str(exc))
    return validate(doc, expected_ids)


# --- ranking strategies ---------------------------------------------------

_CORRECTIONS = {
    FailureCode.MALFORMED: "Your previous answer was not a valid JSON document in the required format.",
    FailureCode.NOT_PERMUTATION: "Your previous answer repeated some ids.",
    FailureCode.HALLUCINATED_ITEM: "Your previous answer contained ids that are not in the list.",
    FailureCode.MISSING_ITEM: "Your previous answer left out some ids from the list.",
    FailureCode.LENGTH_MISMATCH: "Your previous answer had the wrong number of entries.",
    FailureCode.SCORE_OUT_OF_RANGE: "Your previous answer used scores outside 0 to 100.",
}


def with_correction(spec: PromptSpec, code: FailureCode) -> PromptSpec:
    note = (
        f"\nCORRECTION ({code.value}): {_CORRECTIONS[code]} "
        "Answer again using every listed id exactly once and only the JSON document.\n"
    )
    return dataclasses.replace(spec, user_text=spec.user_text + note)


@dataclass(frozen=True)
class CaseFailure:
    case_id: str
    code: str
    detail: str
    attempts: int
    strategy: str

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RankerConfig:
    tier: Tier = Tier.V4
    retries: int = 3
    trial_seed: int = 0
    template_version: str = "v1"
    temperature: float = 0.2
    max_tokens: int = 2048
    max_concurrency: int = 1

    def decoding(self) -> Decoding:
        return Decoding(self.temperature, self.max_tokens, self.trial_seed)


@dataclass
class _Attempt:
    outcome: ParseOutcome | None
    retries_used: int
    calls: int
    last_code: str = ""
    last_detail: str = ""


def _ask(backend: ChatBackend, spec: PromptSpec, retries: int) -> _Attempt:
    current = spec
    last_code, last_detail = "", ""
    for attempt in range(retries + 1):
        try:
            raw = backend.complete(current).raw_text
        except BackendError as exc:
            last_code, last_detail = "TRANSPORT", str(exc)
            logger.info("attempt %d transport failure: %s", attempt + 1, exc)
            continue
        outcome = parse_response(raw, spec.expected_ids)
        if outcome.ok:
            return _Attempt(outcome, attempt, attempt + 1)
        assert outcome.code is not None
        last_code, last_detail = outcome.code.value, outcome.detail
        current = with_correction(spec, outcome.code)
    return _Attempt(None, retries, retries + 1, last_code, last_detail)


def _provenance(backend: ChatBackend, cfg: RankerConfig, tier: Tier, **extra: Any) -> dict[str, Any]:
    return {
        "backend_id": backend.backend_id,
        "model_id": backend.model_id,
        "trial_seed": cfg.trial_seed,
        "template_version": cfg.template_version,
        "tier": tier.value,
        **extra,
    }


def listwise_rank(
    case: EvaluationCase, movies: Catalog, backend: ChatBackend, cfg: RankerConfig
) -> RankedPrediction | CaseFailure:
    """One prompt holding every candidate; failed replies are retried with a correction note."""
    tier = Tier(cfg.tier)
    spec = build_listwise_prompt(case, movies, tier, load_templates(cfg.template_version), cfg.decoding())
    result = _ask(backend, spec, cfg.retries)
    if result.outcome is None:
        return CaseFailure(case.case_id, result.last_code, result.last_detail, result.calls, "listwise")
    resp = result.outcome.response
    assert resp is not None
    return RankedPrediction(
        case_id=case.case_id,
        ordering=resp.ranking,
        scores=resp.scores,
        strategy="listwise",
        reasoning=resp.reasoning,
        provenance=_provenance(backend, cfg, tier, retries_used=result.retries_used,
                               prior_knowledge=resp.prior_knowledge),
    )


def pairwise_rank(
    case: EvaluationCase, movies: Catalog, backend: ChatBackend, cfg: RankerConfig
) -> RankedPrediction | CaseFailure:
    """Win-count ranking from every ordered pair of candidates.

    Each of the n(n-1) presentations awards the preferred movie one point,
    or half a point each on a declared tie or an unrecoverable reply.
    """
    tier = Tier(cfg.tier)
    if len(case.candidates) < 2:
        raise ValueError("pairwise ranking needs at least 2 candidates")
    templates = load_templates(cfg.template_version)
    decoding = cfg.decoding()
    pairs = list(itertools.permutations(case.candidates, 2))

    def ask(pair: tuple[str, str]) -> _Attempt:
        spec = build_pairwise_prompt(pair[0], pair[1], movies, tier, templates, decoding)
        return _ask(backend, spec, cfg.retries)

    if cfg.max_concurrency > 1:
        with ThreadPoolExecutor(max_workers=cfg.max_concurrency) as pool:
            results = list(pool.map(ask, pairs))
    else:
        results = [ask(p) for p in pairs]

    tally = {mid: 0.0 for mid in case.candidates}
    reported: dict[str, list[float]] = {mid: [] for mid in case.candidates}
    failed = 0
    retries_used = 0
    last_code, last_detail = "", ""
    for pair, res in zip(pairs, results):
        retries_used += res.retries_used
        if res.outcome is None:
            failed += 1
            last_code, last_detail = res.last_code, res.last_detail
            logger.info("%s: pair %s/%s failed (%s), scored as a tie", case.case_id, *pair, res.last_code)
            tally[pair[0]] += 0.5
            tally[pair[1]] += 0.5
            continue
        resp = res.outcome.response
        assert resp is not None
        for mid in pair:
            reported[mid].append(resp.scores[mid])
        if resp.tie:
            tally[pair[0]] += 0.5
            tally[pair[1]] += 0.5
        else:
            tally[resp.ranking[0]] += 1.0

    if failed * 2 > len(pairs):
        return CaseFailure(
            case.case_id, last_code, f"{failed}/{len(pairs)} pairs failed; last: {last_detail}",
            sum(r.calls for r in results), "pairwise",
        )

    mean_score = {m: (math.fsum(v) / len(v) if v else 0.0) for m, v in reported.items()}
    ordering = tuple(sorted(case.candidates, key=lambda m: (-tally[m], -mean_score[m], m)))
    return RankedPrediction(
        case_id=case.case_id,
        ordering=ordering,
        scores=tally,
        strategy="pairwise",
        provenance=_provenance(
            backend, cfg, tier, retries_used=retries_used,
            calls=sum(r.calls for r in results), failed_pairs=failed,
        ),
    )


def shuffle_candidates(case: EvaluationCase, seed: int) -> EvaluationCase:
    order = list(case.candidates)
    random.Random(seed).shuffle(order)
    return dataclasses.replace(case, candidates=tuple(order))


R = TypeVar("R")


def rank_cases(
    cases: Sequence[EvaluationCase],
    rank: Callable[[EvaluationCase], R],
    max_concurrency: int = 1,
) -> list[R]:
    """Apply ``rank`` to every case; results come back sorted by case_id."""
    ordered = sorted(cases, key=lambda c: c.case_id)
    if max_concurrency > 1:
        with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
            return list(pool.map(rank, ordered))
    return [rank(c) for c in ordered]
