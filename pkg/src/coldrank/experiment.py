"""Experiment orchestration: trials over strategy x tier cells, reports and manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import platform
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Any

from . import __version__
from .catalog import (
    CATALOG_FILE,
    OBSERVATIONS_FILE,
    Catalog,
    EvaluationCase,
    ModelProfile,
    PopularityObservation,
    SkipEntry,
    Tier,
    WindowConfig,
    build_cases,
    check_cutoff,
    load_dataset,
    select_history,
)
from .embed_baseline import (
    CachedEmbeddingBackend,
    EmbeddingBackend,
    HashEmbeddingBackend,
    HttpEmbeddingBackend,
    pe_rank,
)
from .llm_backend import (
    CachedBackend,
    ChatBackend,
    EndpointConfig,
    HttpChatBackend,
    NoisyOracleBackend,
    OracleBackend,
    popularity_from_cases,
)
from .llm_ranker import (
    CaseFailure,
    RankerConfig,
    listwise_rank,
    pairwise_rank,
    rank_cases,
    shuffle_candidates,
)
from .metrics import (
    ImprovementReport,
    MetricVector,
    RankedPrediction,
    TableRow,
    TrialSummary,
    aggregate_trials,
    evaluate,
    improvement_pct,
    mean_vector,
    random_rank,
    render_table,
)

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
STRATEGIES = ("listwise", "pairwise", "pe", "random")
BASELINES = ("random", "pe")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def derive_seed(*parts: Any) -> int:
    digest = hashlib.sha256("|".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def _digest_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(hashlib.sha256(chunk).digest())
    return h.hexdigest()


@dataclass(frozen=True)
class ExperimentConfig:
    window: WindowConfig = field(default_factory=WindowConfig)
    tiers: tuple[Tier, ...] = (Tier.V1, Tier.V2, Tier.V3, Tier.V4)
    strategies: tuple[str, ...] = ("listwise",)
    baseline: str = "pe"
    baseline_tier: Tier = Tier.V4
    n_trials: int = 10
    max_concurrency: int = 4
    retries: int = 3
    seed: int = 0
    k: int = 3
    gain: str = "linear"
    temperature: float = 0.2
    max_tokens: int = 2048
    template_version: str = "v1"
    shuffle: bool = True
    failure_threshold: float = 0.5
    knowledge_cutoff: date | None = None
    cutoff_margin_days: int = 180

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "tiers", tuple(Tier(t) for t in self.tiers))
            object.__setattr__(self, "baseline_tier", Tier(self.baseline_tier))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        object.__setattr__(self, "strategies", tuple(self.strategies))
        if self.n_trials < 1:
            raise ConfigError("trial count must be >= 1")
        if not self.tiers:
            raise ConfigError("at least one tier is required")
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown or not self.strategies:
            raise ConfigError(f"unknown strategies {unknown}; choose from {', '.join(STRATEGIES)}")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {', '.join(BASELINES)}")
        if self.max_concurrency < 1 or self.retries < 0 or self.k < 1:
            raise ConfigError("max_concurrency and k must be >= 1, retries >= 0")

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["window"] = dataclasses.asdict(self.window)
        out["tiers"] = [t.value for t in self.tiers]
        out["strategies"] = list(self.strategies)
        out["baseline_tier"] = self.baseline_tier.value
        out["knowledge_cutoff"] = self.knowledge_cutoff.isoformat() if self.knowledge_cutoff else None
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> ExperimentConfig:
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        extra = sorted(set(raw) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(extra)}")
        try:
            if "window" in raw:
                raw["window"] = WindowConfig(**raw["window"])
            if raw.get("knowledge_cutoff"):
                raw["knowledge_cutoff"] = date.fromisoformat(raw["knowledge_cutoff"])
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class BackendSpec:
    """Which chat and embedding backends to build for a run."""

    kind: str = "oracle"  # oracle | noisy-oracle | http
    model: str | None = None
    noise: float = 0.0
    embed: str = "mock"  # mock | http

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass
class Dataset:
    movies: dict[str, Any]
    observations: list[PopularityObservation]
    digest: str
    path: str


def open_dataset(directory: Path | str) -> Dataset:
    directory = Path(directory)
    try:
        movies, observations = load_dataset(directory)
        digest = _digest_bytes(
            (directory / CATALOG_FILE).read_bytes(), (directory / OBSERVATIONS_FILE).read_bytes()
        )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot load dataset from {directory}: {exc}") from exc
    return Dataset(movies, observations, digest, str(directory))


def build_chat_backend(spec: BackendSpec, cases: Sequence[EvaluationCase], cfg: ExperimentConfig,
                       cache_dir: Path | None) -> ChatBackend:
    truth = popularity_from_cases(cases)
    backend: ChatBackend
    if spec.kind == "oracle":
        backend = OracleBackend(truth, model_id=spec.model or "oracle")
    elif spec.kind == "noisy-oracle":
        backend = NoisyOracleBackend(truth, spec.noise, model_id=spec.model)
    elif spec.kind == "http":
        backend = HttpChatBackend(EndpointConfig.from_env(spec.model, max_concurrency=cfg.max_concurrency))
    else:
        raise ConfigError(f"unknown backend {spec.kind!r}")
    if cache_dir is not None:
        backend = CachedBackend(backend, cache_dir)
    return backend


def build_embed_backend(spec: BackendSpec, cache_dir: Path | None) -> EmbeddingBackend:
    if spec.embed == "mock":
        return HashEmbeddingBackend()
    if spec.embed == "http":
        backend: EmbeddingBackend = HttpEmbeddingBackend.from_env()
        if cache_dir is not None:
            backend = CachedEmbeddingBackend(backend, cache_dir / "embeddings")
        return backend
    raise ConfigError(f"unknown embedding backend {spec.embed!r}")


Outcome = RankedPrediction | CaseFailure


@dataclass
class _Context:
    cfg: ExperimentConfig
    cases: list[EvaluationCase]
    movies: Catalog
    chat: ChatBackend | None
    embed: EmbeddingBackend
    histories: dict[str, list]
    _pe_cache: dict[tuple[str, Tier], Outcome] = field(default_factory=dict)

    def pe(self, case: EvaluationCase, tier: Tier) -> Outcome:
        # PE ignores candidate input order, so one ranking per (case, tier) serves every trial.
        key = (case.case_id, tier)
        if key not in self._pe_cache:
            history = self.histories[case.case_id]
            if not history:
                self._pe_cache[key] = CaseFailure(case.case_id, "NO_HISTORY",
                                                  "no popular titles before as_of_date", 0, "pe")
            else:
                self._pe_cache[key] = pe_rank(case, history, self.embed, tier, self.movies)
        return self._pe_cache[key]


def _trial_cases(ctx: _Context, trial: int) -> list[EvaluationCase]:
    if not ctx.cfg.shuffle:
        return ctx.cases
    return [shuffle_candidates(c, derive_seed(ctx.cfg.seed, "shuffle", trial, c.case_id)) for c in ctx.cases]


def _rank_trial(ctx: _Context, strategy: str, tier: Tier, trial: int,
                cases: Sequence[EvaluationCase]) -> dict[str, Outcome]:
    cfg = ctx.cfg
    if strategy == "random":
        return {c.case_id: random_rank(c, derive_seed(cfg.seed, "random", trial, c.case_id)) for c in cases}
    if strategy == "pe":
        return {c.case_id: ctx.pe(c, tier) for c in cases}
    if ctx.chat is None:
        raise ConfigError(f"strategy {strategy} needs a chat backend")
    rcfg = RankerConfig(
        tier=tier, retries=cfg.retries, trial_seed=derive_seed(cfg.seed, "trial", trial),
        template_version=cfg.template_version, temperature=cfg.temperature,
        max_tokens=cfg.max_tokens, max_concurrency=1 if strategy == "listwise" else cfg.max_concurrency,
    )
    fn = listwise_rank if strategy == "listwise" else pairwise_rank
    chat = ctx.chat
    results = rank_cases(cases, lambda c: fn(c, ctx.movies, chat, rcfg), cfg.max_concurrency)
    return {r.case_id: r for r in results}


def _summary_dict(summary: TrialSummary) -> dict[str, Any]:
    return {"mean": summary.mean.to_dict(), "std": summary.std.to_dict(), "n": summary.n}


def _row_label(strategy: str, ctx: _Context) -> str:
    if strategy == "random":
        return "Random"
    if strategy == "pe":
        return f"PE-{ctx.embed.backend_id}"
    assert ctx.chat is not None
    suffix = "" if strategy == "listwise" else " (pairwise)"
    return f"{ctx.chat.model_id}{suffix}"


def _baseline_label(ctx: _Context) -> str:
    if ctx.cfg.baseline == "random":
        return "Random"
    return f"PE-{ctx.embed.backend_id} {ctx.cfg.baseline_tier.value}"


def _run_cell(ctx: _Context, strategy: str, tier: Tier, trial_cases: list[list[EvaluationCase]],
              baselines: list[dict[str, Outcome]], predictions: list[dict[str, Any]]) -> dict[str, Any]:
    cfg = ctx.cfg
    model_trials: list[MetricVector] = []
    base_trials: list[MetricVector] = []
    excluded = total = 0
    survivors_all: set[str] = set()
    by_id = {c.case_id: c for c in ctx.cases}
    for trial, cases in enumerate(trial_cases):
        outcomes = _rank_trial(ctx, strategy, tier, trial, cases)
        model_vecs, base_vecs = [], []
        for case_id in sorted(outcomes):
            out, base = outcomes[case_id], baselines[trial][case_id]
            total += 1
            record = {"trial": trial, "tier": tier.value, **out.to_dict()}
            predictions.append(record)
            if isinstance(out, CaseFailure) or isinstance(base, CaseFailure):
                excluded += 1
                continue
            survivors_all.add(case_id)
            model_vecs.append(evaluate(out.ordering, by_id[case_id], cfg.k, cfg.gain))
            base_vecs.append(evaluate(base.ordering, by_id[case_id], cfg.k, cfg.gain))
        if model_vecs:
            model_trials.append(mean_vector(model_vecs))
            base_trials.append(mean_vector(base_vecs))

    failure_rate = excluded / total if total else 1.0
    cell: dict[str, Any] = {
        "strategy": strategy,
        "model_id": _row_label(strategy, ctx),
        "tier": "-" if strategy == "random" else tier.value,
        "n_trials": cfg.n_trials,
        "n_cases": len(ctx.cases),
        "failure_rate": failure_rate,
    }
    if failure_rate > cfg.failure_threshold or len(model_trials) < cfg.n_trials:
        cell["status"] = "FAILED"
        return cell
    case_ids = tuple(sorted(survivors_all))
    model_summary = aggregate_trials(model_trials, case_ids)
    base_summary = aggregate_trials(base_trials, case_ids)
    report: ImprovementReport = improvement_pct(
        model_summary, base_summary, baseline_id=_baseline_label(ctx), model_id=cell["model_id"],
        tier=cell["tier"], failure_rate=failure_rate,
    )
    cell.update(
        status="ok",
        model=_summary_dict(model_summary),
        baseline=_summary_dict(base_summary),
        improvement_pct=report.improvement,
        absolute=list(report.absolute),
    )
    return cell


@dataclass
class RunResult:
    report: dict[str, Any]
    table: str
    manifest: dict[str, Any]
    skipped: list[SkipEntry]
    predictions: list[dict[str, Any]] = field(default_factory=list)

    @property
    def any_failed(self) -> bool:
        return any(c["status"] == "FAILED" for c in self.report["cells"])


def run_experiment(
    cfg: ExperimentConfig,
    dataset: Dataset,
    backend_spec: BackendSpec,
    cache_dir: Path | str | None = None,
) -> RunResult:
    """Rank every case for each strategy x tier cell over ``cfg.n_trials`` trials.

    Each cell reports trial-averaged metrics for the model and for the baseline
    on the same surviving cases, plus the percent improvement of the former.
    """
    cache = Path(cache_dir) if cache_dir is not None else None
    skipped: list[SkipEntry] = []
    try:
        cases = build_cases(dataset.movies, dataset.observations, cfg.window, skipped)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    if not cases:
        raise DataError("dataset yields no evaluation cases")

    needs_chat = any(s in ("listwise", "pairwise") for s in cfg.strategies)
    ctx = _Context(
        cfg=cfg,
        cases=sorted(cases, key=lambda c: c.case_id),
        movies=dataset.movies,
        chat=build_chat_backend(backend_spec, cases, cfg, cache) if needs_chat else None,
        embed=build_embed_backend(backend_spec, cache),
        histories={
            c.case_id: select_history(c.as_of_date, dataset.movies, dataset.observations, cfg.window)
            for c in cases
        },
    )

    warnings: list[str] = []
    if cfg.knowledge_cutoff is not None:
        profile = ModelProfile(backend_spec.model or backend_spec.kind, cfg.knowledge_cutoff,
                               cfg.cutoff_margin_days)
        for case in ctx.cases:
            warnings.extend(check_cutoff(case, profile, dataset.movies))
        for w in warnings:
            logger.warning(w)

    trial_cases = [_trial_cases(ctx, t) for t in range(cfg.n_trials)]
    baselines = [
        _rank_trial(ctx, cfg.baseline, cfg.baseline_tier, t, trial_cases[t]) for t in range(cfg.n_trials)
    ]
    cells = []
    predictions: list[dict[str, Any]] = []
    for strategy in cfg.strategies:
        tiers = (cfg.tiers[0],) if strategy == "random" else cfg.tiers
        for tier in tiers:
            logger.info("cell %s/%s", strategy, tier.value)
            cells.append(_run_cell(ctx, strategy, tier, trial_cases, baselines, predictions))

    config_digest = cfg.digest()
    backend_ident = {
        **backend_spec.to_dict(),
        "backend_id": ctx.chat.backend_id if ctx.chat else None,
        "model_id": ctx.chat.model_id if ctx.chat else None,
        "embed_backend_id": ctx.embed.backend_id,
    }
    run_id = derive_run_id(config_digest, dataset.digest, backend_ident)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "run_id": run_id,
        "manifest": "manifest.json",
        "baseline": _baseline_label(ctx),
        "k": cfg.k,
        "cells": cells,
        "skipped_cohorts": [s.to_dict() for s in skipped],
        "cutoff_warnings": warnings,
        "predictions": "predictions.jsonl",
    }
    manifest = {
        "run_id": run_id,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config_digest": config_digest,
        "config_file": "config.json",
        "dataset": {"path": dataset.path, "digest": dataset.digest},
        "backend": backend_ident,
        "strategies": list(cfg.strategies),
        "tiers": [t.value for t in cfg.tiers],
        "baseline": cfg.baseline,
        "seeds": {
            "base": cfg.seed,
            "trials": [derive_seed(cfg.seed, "trial", t) for t in range(cfg.n_trials)],
            "shuffle": "derive_seed(seed, 'shuffle', trial, case_id)" if cfg.shuffle else None,
        },
        "n_trials": cfg.n_trials,
        "cache_dir": str(cache) if cache else None,
        "software_version": __version__,
        "python": platform.python_version(),
    }
    return RunResult(report, render_report_table([report]), manifest, skipped, predictions)


def derive_run_id(config_digest: str, dataset_digest: str, backend: Mapping[str, Any]) -> str:
    material = json.dumps([config_digest, dataset_digest, backend], sort_keys=True)
    return hashlib.sha256(material.encode("utf-8")).hexdigest()[:16]


def _dump(obj: Any) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def write_run(result: RunResult, cfg: ExperimentConfig, out_dir: Path | str) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "report.json",
        "table": out / "report.txt",
        "manifest": out / "manifest.json",
        "config": out / "config.json",
        "predictions": out / "predictions.jsonl",
        "skipped": out / "skipped.jsonl",
    }
    paths["report"].write_text(_dump(result.report), encoding="utf-8")
    paths["table"].write_text(result.table, encoding="utf-8")
    paths["manifest"].write_text(_dump(result.manifest), encoding="utf-8")
    paths["config"].write_text(_dump(cfg.to_dict()), encoding="utf-8")
    with open(paths["predictions"], "w", encoding="utf-8") as fh:
        for rec in result.predictions:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    paths["skipped"].write_text(
        "".join(json.dumps(s.to_dict()) + "\n" for s in result.skipped), encoding="utf-8"
    )
    return paths


# --- report merging -------------------------------------------------------

class ReportError(ValueError):
    pass


def load_report(path: Path | str) -> dict[str, Any]:
    try:
        report = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read report {path}: {exc}") from exc
    version = report.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise ReportError(f"{path}: schema_version {version!r}, expected {REPORT_SCHEMA_VERSION}")
    return report


def render_report_table(reports: Sequence[Mapping[str, Any]]) -> str:
    """One table over the cells of all reports, best two per column in bold."""
    if not reports:
        raise ReportError("no reports to render")
    rows = []
    for report in reports:
        for cell in report["cells"]:
            if cell.get("status") == "FAILED":
                rows.append(TableRow(cell["model_id"], cell["tier"], None))
            else:
                imp = cell["improvement_pct"]
                values = (imp["acc_at_1"], imp["rr"], imp["ndcg_at_k"], imp["recall_at_k"])
                rows.append(TableRow(cell["model_id"], cell["tier"], values))
    baselines = list(dict.fromkeys(r["baseline"] for r in reports))
    ks = {r.get("k", 3) for r in reports}
    if len(ks) != 1:
        raise ReportError(f"reports use different k values: {sorted(ks)}")
    title = f"Performance improvement (%) vs {' / '.join(baselines)}"
    return render_table(rows, title=title, k=ks.pop())
