"""Movies, popularity observations and evaluation cases.

A case is one cohort of releases that share a calendar period. Its ground
truth is the cohort ordered by interactions summed over the observe horizon
that starts at each movie's release.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from datetime import date, timedelta
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

Catalog = Mapping[str, "MovieRecord"]


class Tier(str, Enum):
    V1 = "V1"
    V2 = "V2"
    V3 = "V3"
    V4 = "V4"


class MetadataError(ValueError):
    """A tier needs a field the movie does not carry."""

    def __init__(self, movie_id: str, field_name: str, tier: Tier):
        self.movie_id = movie_id
        self.field_name = field_name
        self.tier = tier
        super().__init__(f"movie {movie_id}: tier {tier.value} requires field {field_name!r}")


class CoverageError(ValueError):
    """Observations do not cover a candidate's observe horizon."""


ROLES = ("cast", "director", "writer", "other")


@dataclass(frozen=True)
class PersonCredit:
    name: str
    role: str = "cast"
    billing_order: int = 0
    award_count: int = 0

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.billing_order < 0 or self.award_count < 0:
            raise ValueError(f"{self.name}: billing_order and award_count must be >= 0")


@dataclass(frozen=True)
class MovieRecord:
    movie_id: str
    title: str
    release_date: date
    genres: tuple[str, ...] = ()
    synopsis: str = ""
    content_rating: str = ""
    era: str = ""
    mood: tuple[str, ...] = ()
    character_types: tuple[str, ...] = ()
    cast: tuple[PersonCredit, ...] = ()
    crew: tuple[PersonCredit, ...] = ()
    awards: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.movie_id:
            raise ValueError("movie_id must be non-empty")
        if not isinstance(self.release_date, date):
            raise ValueError(f"movie {self.movie_id}: release_date must be a date")
        seen: set[tuple[str, int]] = set()
        for credit in self.cast:
            key = (credit.role, credit.billing_order)
            if key in seen:
                raise ValueError(
                    f"movie {self.movie_id}: duplicate billing_order {credit.billing_order} "
                    f"for role {credit.role}"
                )
            seen.add(key)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["release_date"] = self.release_date.isoformat()
        for key in ("genres", "mood", "character_types", "awards"):
            out[key] = list(out[key])
        out["cast"] = [dataclasses.asdict(c) for c in self.cast]
        out["crew"] = [dataclasses.asdict(c) for c in self.crew]
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> MovieRecord:
        try:
            released = date.fromisoformat(raw["release_date"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"movie {raw.get('movie_id')!r}: bad release_date") from exc
        return cls(
            movie_id=raw["movie_id"],
            title=raw.get("title", ""),
            release_date=released,
            genres=tuple(raw.get("genres") or ()),
            synopsis=raw.get("synopsis") or "",
            content_rating=raw.get("content_rating") or "",
            era=raw.get("era") or "",
            mood=tuple(raw.get("mood") or ()),
            character_types=tuple(raw.get("character_types") or ()),
            cast=tuple(PersonCredit(**c) for c in raw.get("cast") or ()),
            crew=tuple(PersonCredit(**c) for c in raw.get("crew") or ()),
            awards=tuple(raw.get("awards") or ()),
        )


@dataclass(frozen=True)
class PopularityObservation:
    movie_id: str
    window_start: date
    window_end: date
    interaction_count: int

    def __post_init__(self) -> None:
        if self.window_start > self.window_end:
            raise ValueError(f"movie {self.movie_id}: window_start after window_end")
        if self.interaction_count < 0:
            raise ValueError(f"movie {self.movie_id}: negative interaction_count")

    def to_dict(self) -> dict[str, Any]:
        return {
            "movie_id": self.movie_id,
            "window_start": self.window_start.isoformat(),
            "window_end": self.window_end.isoformat(),
            "interaction_count": self.interaction_count,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> PopularityObservation:
        return cls(
            movie_id=raw["movie_id"],
            window_start=date.fromisoformat(raw["window_start"]),
            window_end=date.fromisoformat(raw["window_end"]),
            interaction_count=int(raw["interaction_count"]),
        )


@dataclass(frozen=True)
class WindowConfig:
    cohort_period_days: int = 7
    observe_horizon_days: int = 28
    history_weeks: int = 4
    centroid_top_n: int = 100
    label_list_size: int = 3

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"WindowConfig.{f.name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class EvaluationCase:
    case_id: str
    as_of_date: date
    candidates: tuple[str, ...]
    ground_truth: tuple[tuple[str, float], ...]
    window_cfg: WindowConfig = field(default_factory=WindowConfig)

    def __post_init__(self) -> None:
        if len(self.candidates) < 2:
            raise ValueError(f"case {self.case_id}: needs at least 2 candidates")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError(f"case {self.case_id}: duplicate candidates")
        truth_ids = [mid for mid, _ in self.ground_truth]
        if len(set(truth_ids)) != len(truth_ids):
            raise ValueError(f"case {self.case_id}: duplicate ground-truth ids")
        if not set(truth_ids) <= set(self.candidates):
            raise ValueError(f"case {self.case_id}: ground truth not within candidates")
        scores = [s for _, s in self.ground_truth]
        if any(not 0.0 < s <= 1.0 for s in scores):
            raise ValueError(f"case {self.case_id}: popularity scores must lie in (0, 1]")
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"case {self.case_id}: ground truth not sorted descending")
        if scores and scores[0] != 1.0:
            raise ValueError(f"case {self.case_id}: top popularity score must be 1.0")

    @property
    def relevance(self) -> dict[str, float]:
        return dict(self.ground_truth)

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "as_of_date": self.as_of_date.isoformat(),
            "candidates": list(self.candidates),
            "ground_truth": [[mid, score] for mid, score in self.ground_truth],
            "window_cfg": dataclasses.asdict(self.window_cfg),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> EvaluationCase:
        return cls(
            case_id=raw["case_id"],
            as_of_date=date.fromisoformat(raw["as_of_date"]),
            candidates=tuple(raw["candidates"]),
            ground_truth=tuple((mid, float(score)) for mid, score in raw["ground_truth"]),
            window_cfg=WindowConfig(**raw.get("window_cfg", {})),
        )


@dataclass(frozen=True)
class ModelProfile:
    model_id: str
    knowledge_cutoff: date
    cutoff_margin_days: int = 180


@dataclass(frozen=True)
class SkipEntry:
    cohort_id: str
    reason: str

    def to_dict(self) -> dict[str, str]:
        return {"cohort_id": self.cohort_id, "reason": self.reason}


def index_catalog(movies: Iterable[MovieRecord]) -> dict[str, MovieRecord]:
    catalog: dict[str, MovieRecord] = {}
    for movie in movies:
        if movie.movie_id in catalog:
            raise ValueError(f"duplicate movie_id {movie.movie_id!r}")
        catalog[movie.movie_id] = movie
    return catalog


def _horizon_total(
    movie: MovieRecord, observations: Sequence[PopularityObservation], horizon_days: int
) -> int:
    first = movie.release_date
    last = first + timedelta(days=horizon_days - 1)
    covered: set[date] = set()
    total = 0
    for obs in observations:
        if obs.window_start < first or obs.window_end > last:
            continue
        total += obs.interaction_count
        day = obs.window_start
        while day <= obs.window_end:
            covered.add(day)
            day += timedelta(days=1)
    if len(covered) != horizon_days:
        missing = min(
            first + timedelta(days=i) for i in range(horizon_days)
            if first + timedelta(days=i) not in covered
        )
        raise CoverageError(
            f"movie {movie.movie_id}: observations do not cover window "
            f"{first.isoformat()}..{last.isoformat()} (first gap {missing.isoformat()})"
        )
    return total


def _group_observations(
    observations: Iterable[PopularityObservation],
) -> dict[str, list[PopularityObservation]]:
    grouped: dict[str, list[PopularityObservation]] = defaultdict(list)
    seen: set[tuple[str, date, date]] = set()
    for obs in observations:
        key = (obs.movie_id, obs.window_start, obs.window_end)
        if key in seen:
            raise ValueError(
                f"movie {obs.movie_id}: duplicate observation for window "
                f"{obs.window_start.isoformat()}..{obs.window_end.isoformat()}"
            )
        seen.add(key)
        grouped[obs.movie_id].append(obs)
    return grouped


def build_cases(
    movies: Catalog,
    observations: Iterable[PopularityObservation],
    cfg: WindowConfig,
    skip_log: list[SkipEntry] | None = None,
) -> list[EvaluationCase]:
    """Group releases into fixed-width cohorts and label each by horizon popularity.

    Cohorts run in ``cfg.cohort_period_days`` steps from the earliest release.
    Cohorts that cannot form a case are appended to ``skip_log``.
    """
    if not movies:
        raise ValueError("empty catalog")
    by_movie = _group_observations(observations)
    earliest = min(m.release_date for m in movies.values())
    cohorts: dict[int, list[MovieRecord]] = defaultdict(list)
    for movie in movies.values():
        cohorts[(movie.release_date - earliest).days // cfg.cohort_period_days].append(movie)

    cases = []
    for index in sorted(cohorts):
        members = sorted(cohorts[index], key=lambda m: m.movie_id)
        cohort_id = f"cohort-{index:04d}"
        if len(members) < 2:
            if skip_log is not None:
                skip_log.append(SkipEntry(cohort_id, f"only {len(members)} candidate"))
            continue
        totals = {
            m.movie_id: _horizon_total(m, by_movie.get(m.movie_id, []), cfg.observe_horizon_days)
            for m in members
        }
        ranked = sorted((mid for mid, n in totals.items() if n > 0), key=lambda mid: (-totals[mid], mid))
        if not ranked:
            if skip_log is not None:
                skip_log.append(SkipEntry(cohort_id, "no interactions in observe horizon"))
            continue
        top = totals[ranked[0]]
        truth = tuple((mid, totals[mid] / top) for mid in ranked[: cfg.label_list_size])
        cases.append(
            EvaluationCase(
                case_id=cohort_id,
                as_of_date=earliest + timedelta(days=index * cfg.cohort_period_days),
                candidates=tuple(m.movie_id for m in members),
                ground_truth=truth,
                window_cfg=cfg,
            )
        )
    return cases


def select_history(
    as_of: date,
    movies: Catalog,
    observations: Iterable[PopularityObservation],
    cfg: WindowConfig,
) -> list[MovieRecord]:
    """Most-interacted movies over the ``history_weeks`` strictly before ``as_of``."""
    start = as_of - timedelta(weeks=cfg.history_weeks)
    totals: dict[str, int] = defaultdict(int)
    for obs in observations:
        if obs.window_start >= start and obs.window_end < as_of and obs.movie_id in movies:
            totals[obs.movie_id] += obs.interaction_count
    ranked = sorted((mid for mid, n in totals.items() if n > 0), key=lambda mid: (-totals[mid], mid))
    return [movies[mid] for mid in ranked[: cfg.centroid_top_n]]


# Fields in rendering order: (label, attribute, first tier that includes it, required).
_TIER_FIELDS = (
    ("Genre", "genres", 1, True),
    ("Synopsis", "synopsis", 2, True),
    ("Content rating", "content_rating", 3, True),
    ("Character types", "character_types", 3, True),
    ("Mood", "mood", 3, True),
    ("Era", "era", 3, True),
    ("Cast", "cast", 4, True),
    ("Crew", "crew", 4, False),
    ("Awards", "awards", 4, False),
)
TOP_CAST = 5


def _tier_includes(tier: Tier, introduced: int) -> bool:
    level = int(tier.value[1])
    if level == 1:
        return introduced == 1
    if level == 2:
        return introduced == 2
    return introduced <= level


def _format_value(attr: str, value: Any) -> str:
    if attr == "cast":
        billed = sorted(value, key=lambda c: c.billing_order)[:TOP_CAST]
        return ", ".join(f"{c.name} ({c.award_count} awards)" for c in billed)
    if attr == "crew":
        return ", ".join(f"{c.name} ({c.role})" for c in value)
    if isinstance(value, (tuple, list)):
        return ", ".join(value)
    return str(value)


def render_metadata(movie: MovieRecord, tier: Tier | str) -> str:
    """Labeled-line text for ``movie`` at the given metadata tier.

    V1 and V2 are single-field tiers (genre, synopsis); V3 and V4 are cumulative.
    """
    tier = Tier(tier)
    lines = []
    for label, attr, introduced, required in _TIER_FIELDS:
        if not _tier_includes(tier, introduced):
            continue
        value = getattr(movie, attr)
        if not value:
            if required:
                raise MetadataError(movie.movie_id, attr, tier)
            lines.append(f"{label}: none")
            continue
        lines.append(f"{label}: {_format_value(attr, value)}")
    return "\n".join(lines)


def check_cutoff(case: EvaluationCase, profile: ModelProfile, movies: Catalog) -> list[str]:
    """Warn for candidates released too close to the model's knowledge cutoff."""
    threshold = profile.knowledge_cutoff + timedelta(days=profile.cutoff_margin_days)
    warnings = []
    for mid in case.candidates:
        released = movies[mid].release_date
        if released < threshold:
            gap = (released - profile.knowledge_cutoff).days
            warnings.append(
                f"{case.case_id}: {mid} released {released.isoformat()}, {gap} days after "
                f"{profile.model_id} cutoff (margin {profile.cutoff_margin_days})"
            )
    return warnings


# --- synthetic data -------------------------------------------------------

GENRES = (
    "Drama", "Comedy", "Thriller", "Horror", "Romance", "Action",
    "Documentary", "Animation", "Western", "Crime", "Fantasy", "Musical",
)
MOODS = ("tense", "uplifting", "dark", "whimsical", "melancholic", "rousing", "cozy", "eerie")
CHARACTER_TYPES = ("underdog", "antihero", "mentor", "rebel", "detective", "outsider", "family")
RATINGS = ("G", "PG", "PG-13", "R")
_TITLE_WORDS = (
    "Silent", "Crimson", "Last", "Hidden", "Golden", "Broken", "Northern", "Paper",
    "Harbor", "Echo", "Signal", "Orchard", "Lantern", "Frontier", "Mirror", "Tide",
)
_NAMES = (
    "Ada", "Bram", "Cleo", "Dev", "Esme", "Farid", "Greta", "Hugo", "Ines", "Jonas",
    "Kira", "Lev", "Maya", "Nils", "Oona", "Pavel", "Quinn", "Rosa", "Sami", "Tova",
)
_SURNAMES = (
    "Abel", "Brandt", "Castro", "Diallo", "Engel", "Fujita", "Garza", "Holm",
    "Ivers", "Jansen", "Kowal", "Lind", "Moreau", "Novak", "Ortiz", "Petrov",
)


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the synthetic catalog.

    Interaction counts per weekly window are ``round(exp(base + quality_weight*q +
    genre_weight*affinity + noise))`` where ``affinity`` is the share of a movie's
    genres that are trending.
    """

    n_movies: int = 600
    start_date: date = date(2024, 3, 4)
    span_days: int = 210
    observe_weeks: int = 12
    genres: tuple[str, ...] = GENRES
    moods: tuple[str, ...] = MOODS
    n_trending: int = 3
    base: float = 3.0
    quality_weight: float = 0.6
    genre_weight: float = 2.0
    noise_sd: float = 0.35

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["start_date"] = self.start_date.isoformat()
        out["genres"] = list(self.genres)
        out["moods"] = list(self.moods)
        return out

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> GenConfig:
        raw = dict(raw)
        if "start_date" in raw:
            raw["start_date"] = date.fromisoformat(raw["start_date"])
        for key in ("genres", "moods"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


@dataclass
class SyntheticDataset:
    movies: list[MovieRecord]
    observations: list[PopularityObservation]
    quality: dict[str, float]
    trending: tuple[str, ...]

    @property
    def catalog(self) -> dict[str, MovieRecord]:
        return index_catalog(self.movies)


def _person(rng: np.random.Generator, role: str, order: int, quality: float) -> PersonCredit:
    name = f"{_NAMES[rng.integers(len(_NAMES))]} {_SURNAMES[rng.integers(len(_SURNAMES))]}"
    awards = int(rng.poisson(max(0.2, 1.5 + 1.5 * quality) / (1 + order)))
    return PersonCredit(name=name, role=role, billing_order=order, award_count=awards)


def synthesize_catalog(gen_cfg: GenConfig, seed: int) -> SyntheticDataset:
    """Deterministic synthetic catalog with metadata-predictable popularity."""
    if gen_cfg.n_movies < 2:
        raise ValueError("synthetic catalog needs at least 2 movies")
    if gen_cfg.n_trending > len(gen_cfg.genres):
        raise ValueError("n_trending exceeds genre vocabulary")
    rng = np.random.default_rng(seed)
    trending = tuple(sorted(rng.choice(gen_cfg.genres, size=gen_cfg.n_trending, replace=False).tolist()))
    width = max(4, len(str(gen_cfg.n_movies)))

    movies: list[MovieRecord] = []
    observations: list[PopularityObservation] = []
    quality: dict[str, float] = {}
    for i in range(gen_cfg.n_movies):
        mid = f"m{i:0{width}d}"
        q = float(rng.normal())
        released = gen_cfg.start_date + timedelta(days=int(rng.integers(gen_cfg.span_days)))
        n_genres = int(rng.integers(1, 4))
        genres = tuple(rng.choice(gen_cfg.genres, size=n_genres, replace=False).tolist())
        moods = tuple(rng.choice(gen_cfg.moods, size=int(rng.integers(1, 3)), replace=False).tolist())
        chars = tuple(rng.choice(CHARACTER_TYPES, size=int(rng.integers(1, 3)), replace=False).tolist())
        title = " ".join(rng.choice(_TITLE_WORDS, size=2, replace=False).tolist())
        synopsis = (
            f"A {moods[0]} {genres[0].lower()} story following a {chars[0]} "
            f"through {'a triumph' if q > 0 else 'a reckoning'} in {title}."
        )
        cast = tuple(_person(rng, "cast", order, q) for order in range(int(rng.integers(3, 8))))
        crew = (_person(rng, "director", 0, q), _person(rng, "writer", 0, q))
        n_awards = int(rng.poisson(max(0.1, q + 0.5)))
        awards = tuple(f"Festival nomination {k + 1}" for k in range(n_awards))
        decade = released.year - released.year % 10
        movies.append(
            MovieRecord(
                movie_id=mid,
                title=title,
                release_date=released,
                genres=genres,
                synopsis=synopsis,
                content_rating=str(rng.choice(RATINGS)),
                era=f"{decade}s",
                mood=moods,
                character_types=chars,
                cast=cast,
                crew=crew,
                awards=awards,
            )
        )
        quality[mid] = q
        affinity = sum(g in trending for g in genres) / len(genres)
        for week in range(gen_cfg.observe_weeks):
            noise = float(rng.normal(0.0, gen_cfg.noise_sd))
            log_count = gen_cfg.base + gen_cfg.quality_weight * q + gen_cfg.genre_weight * affinity + noise
            start = released + timedelta(weeks=week)
            observations.append(
                PopularityObservation(
                    movie_id=mid,
                    window_start=start,
                    window_end=start + timedelta(days=6),
                    interaction_count=int(round(math.exp(log_count))),
                )
            )
    return SyntheticDataset(movies, observations, quality, trending)


# --- line-delimited JSON --------------------------------------------------

def write_jsonl(path: Path | str, records: Iterable[Any]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            payload = rec.to_dict() if hasattr(rec, "to_dict") else rec
            fh.write(json.dumps(payload, ensure_ascii=False) + "\n")


def read_jsonl(path: Path | str) -> list[dict[str, Any]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return rows


CATALOG_FILE = "catalog.jsonl"
OBSERVATIONS_FILE = "observations.jsonl"


def save_dataset(directory: Path | str, movies: Iterable[MovieRecord],
                 observations: Iterable[PopularityObservation]) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    catalog_path = directory / CATALOG_FILE
    obs_path = directory / OBSERVATIONS_FILE
    write_jsonl(catalog_path, sorted(movies, key=lambda m: m.movie_id))
    write_jsonl(
        obs_path,
        sorted(observations, key=lambda o: (o.movie_id, o.window_start, o.window_end)),
    )
    return catalog_path, obs_path


def load_dataset(directory: Path | str) -> tuple[dict[str, MovieRecord], list[PopularityObservation]]:
    directory = Path(directory)
    movies = index_catalog(MovieRecord.from_dict(r) for r in read_jsonl(directory / CATALOG_FILE))
    observations = [PopularityObservation.from_dict(r) for r in read_jsonl(directory / OBSERVATIONS_FILE)]
    unknown = sorted({o.movie_id for o in observations} - set(movies))
    if unknown:
        raise ValueError(f"observations reference unknown movies: {', '.join(unknown[:5])}")
    return movies, observations
