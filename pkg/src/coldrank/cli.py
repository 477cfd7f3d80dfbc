"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 backend exhaustion (some cell or most cases failed).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from . import __version__
from .catalog import (
    CATALOG_FILE,
    OBSERVATIONS_FILE,
    GenConfig,
    SkipEntry,
    build_cases,
    save_dataset,
    select_history,
    synthesize_catalog,
)
from .embed_baseline import EmbeddingError, pe_rank
from .experiment import (
    BackendSpec,
    ConfigError,
    DataError,
    ExperimentConfig,
    ReportError,
    build_chat_backend,
    build_embed_backend,
    derive_seed,
    load_report,
    open_dataset,
    render_report_table,
    run_experiment,
    write_run,
)
from .llm_backend import FatalBackendError, purge_cache
from .llm_ranker import CaseFailure, RankerConfig, listwise_rank, pairwise_rank, rank_cases
from .metrics import random_rank

logger = logging.getLogger("coldrank")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _file_digest(*paths: Path) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def _split_list(values: Sequence[str] | None) -> list[str]:
    out: list[str] = []
    for v in values or ():
        out.extend(x.strip() for x in v.split(",") if x.strip())
    return out


# --- commands -------------------------------------------------------------

def cmd_dataset_synth(args: argparse.Namespace) -> int:
    raw: dict[str, Any] = {}
    if args.config:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if args.n_movies is not None:
        raw["n_movies"] = args.n_movies
    try:
        gen_cfg = GenConfig.from_dict(raw)
        data = synthesize_catalog(gen_cfg, args.seed)
    except (TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        catalog_path, obs_path = save_dataset(args.out, data.movies, data.observations)
    except OSError as exc:
        print(f"error: cannot write dataset to {args.out}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"movies: {len(data.movies)}")
    print(f"observations: {len(data.observations)}")
    print(f"trending genres: {', '.join(data.trending)}")
    print(f"digest: {_file_digest(catalog_path, obs_path)}")
    return EXIT_OK


def _load_experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict[str, Any] = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {
        "tiers": _split_list(getattr(args, "tier", None)) or None,
        "strategies": _split_list(getattr(args, "strategy", None)) or None,
        "baseline": getattr(args, "baseline", None),
        "n_trials": getattr(args, "trials", None),
        "seed": getattr(args, "seed", None),
        "max_concurrency": getattr(args, "max_concurrency", None),
        "retries": getattr(args, "retries", None),
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(raw)


def _backend_spec(args: argparse.Namespace) -> BackendSpec:
    return BackendSpec(kind=args.backend, model=args.model, noise=args.noise, embed=args.embed)


def cmd_dataset_validate(args: argparse.Namespace) -> int:
    cfg = _load_experiment_config(args)
    dataset = open_dataset(args.dataset)
    skipped: list[SkipEntry] = []
    try:
        cases = build_cases(dataset.movies, dataset.observations, cfg.window, skipped)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    print(f"movies: {len(dataset.movies)}")
    print(f"observations: {len(dataset.observations)}")
    print(f"cases: {len(cases)}")
    print(f"skipped cohorts: {len(skipped)}")
    for s in skipped:
        print(f"  {s.cohort_id}: {s.reason}")
    print(f"digest: {dataset.digest}")
    return EXIT_OK


def cmd_rank(args: argparse.Namespace) -> int:
    cfg = _load_experiment_config(args)
    dataset = open_dataset(args.dataset)
    try:
        cases = build_cases(dataset.movies, dataset.observations, cfg.window)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    strategy = cfg.strategies[0]
    tier = cfg.tiers[-1]
    spec = _backend_spec(args)
    cache = Path(args.cache_dir) if args.cache_dir else None
    trial_seed = derive_seed(cfg.seed, "trial", 0)

    if strategy == "random":
        results: list[Any] = [random_rank(c, derive_seed(cfg.seed, "random", 0, c.case_id)) for c in cases]
    elif strategy == "pe":
        embed = build_embed_backend(spec, cache)
        results = []
        for c in cases:
            history = select_history(c.as_of_date, dataset.movies, dataset.observations, cfg.window)
            if not history:
                results.append(CaseFailure(c.case_id, "NO_HISTORY", "no popular titles before as_of_date", 0, "pe"))
                continue
            results.append(pe_rank(c, history, embed, tier, dataset.movies))
    else:
        chat = build_chat_backend(spec, cases, cfg, cache)
        rcfg = RankerConfig(tier=tier, retries=cfg.retries, trial_seed=trial_seed,
                            template_version=cfg.template_version, temperature=cfg.temperature,
                            max_tokens=cfg.max_tokens)
        fn = listwise_rank if strategy == "listwise" else pairwise_rank
        results = rank_cases(cases, lambda c: fn(c, dataset.movies, chat, rcfg), cfg.max_concurrency)

    lines = [json.dumps(r.to_dict(), ensure_ascii=False) for r in sorted(results, key=lambda r: r.case_id)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    failed = sum(isinstance(r, CaseFailure) for r in results)
    print(f"ranked {len(results) - failed}/{len(results)} cases ({strategy}, {tier.value})", file=sys.stderr)
    return EXIT_BACKEND if failed * 2 > len(results) else EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_experiment_config(args)
    dataset = open_dataset(args.dataset)
    result = run_experiment(cfg, dataset, _backend_spec(args), args.cache_dir)
    paths = write_run(result, cfg, args.out)
    sys.stdout.write(result.table)
    print(f"report: {paths['report']}", file=sys.stderr)
    print(f"manifest: {paths['manifest']}", file=sys.stderr)
    return EXIT_BACKEND if result.any_failed else EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    reports = [load_report(p) for p in args.reports]
    table = render_report_table(reports)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_cache_purge(args: argparse.Namespace) -> int:
    removed = purge_cache(args.cache_dir)
    print(f"removed {removed} cache entries from {args.cache_dir}")
    return EXIT_OK


# --- parser ---------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser, multi: bool) -> None:
    p.add_argument("dataset", help=f"directory holding {CATALOG_FILE} and {OBSERVATIONS_FILE}")
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--tier", action="append",
                   help="metadata tier V1-V4" + (" (repeat or comma-separate)" if multi else ""))
    p.add_argument("--strategy", action="append", help="listwise, pairwise, pe or random")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--retries", type=int)
    p.add_argument("--backend", default="oracle", choices=("oracle", "noisy-oracle", "http"))
    p.add_argument("--model", help="model id (http backend; label for mocks)")
    p.add_argument("--noise", type=float, default=0.0, help="noisy-oracle swap rate in [0, 1]")
    p.add_argument("--embed", default="mock", choices=("mock", "http"), help="embedding backend for PE")
    p.add_argument("--max-concurrency", type=int)
    p.add_argument("--cache-dir", help="persist backend responses here")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coldrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"coldrank {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    dataset = sub.add_parser("dataset", help="generate or check datasets")
    dsub = dataset.add_subparsers(dest="dataset_command", required=True, parser_class=_Parser)
    synth = dsub.add_parser("synth", help="write a synthetic catalog")
    synth.add_argument("--seed", type=int, default=7)
    synth.add_argument("--config", help="generator config (JSON)")
    synth.add_argument("--n-movies", type=int)
    synth.add_argument("--out", required=True, help="output directory")
    synth.set_defaults(func=cmd_dataset_synth)
    validate = dsub.add_parser("validate", help="load a dataset and build its cases")
    validate.add_argument("dataset")
    validate.add_argument("--config", help="experiment config (JSON) for window settings")
    validate.set_defaults(func=cmd_dataset_validate)

    rank = sub.add_parser("rank", help="rank every case once and print predictions")
    _add_run_flags(rank, multi=False)
    rank.add_argument("--out", help="predictions file (JSON lines); stdout if omitted")
    rank.set_defaults(func=cmd_rank)

    ev = sub.add_parser("eval", help="run the full trial protocol and write a report")
    _add_run_flags(ev, multi=True)
    ev.add_argument("--baseline", choices=("random", "pe"))
    ev.add_argument("--out", required=True, help="output directory for report and manifest")
    ev.set_defaults(func=cmd_eval)

    report = sub.add_parser("report", help="merge report files into one table")
    report.add_argument("reports", nargs="*")
    report.add_argument("--out", help="also write the table here")
    report.set_defaults(func=cmd_report)

    cache = sub.add_parser("cache", help="manage the response cache")
    csub = cache.add_subparsers(dest="cache_command", required=True, parser_class=_Parser)
    purge = csub.add_parser("purge", help="delete every cached response")
    purge.add_argument("--cache-dir", required=True)
    purge.set_defaults(func=cmd_cache_purge)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FatalBackendError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EmbeddingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
