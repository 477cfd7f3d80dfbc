from __future__ import annotations

from datetime import date, timedelta

import pytest

from coldrank.catalog import (
    EvaluationCase,
    GenConfig,
    MovieRecord,
    PersonCredit,
    PopularityObservation,
    WindowConfig,
    build_cases,
    synthesize_catalog,
)


def make_movie(movie_id: str, released: date = date(2024, 8, 1), **overrides) -> MovieRecord:
    fields = dict(
        movie_id=movie_id,
        title=f"Title {movie_id.upper()}",
        release_date=released,
        genres=("Drama", "Crime"),
        synopsis="A tense drama about a detective.",
        content_rating="R",
        era="2020s",
        mood=("tense",),
        character_types=("detective",),
        cast=tuple(PersonCredit(f"Actor {i}", "cast", i, i % 3) for i in range(7)),
        crew=(PersonCredit("Dana Director", "director", 0, 2),),
        awards=("Best Picture nominee",),
    )
    fields.update(overrides)
    return MovieRecord(**fields)


def weekly_observations(movie_id: str, released: date, counts) -> list[PopularityObservation]:
    return [
        PopularityObservation(movie_id, released + timedelta(weeks=w),
                              released + timedelta(weeks=w, days=6), c)
        for w, c in enumerate(counts)
    ]


def make_case(candidates, truth, case_id="case-0") -> EvaluationCase:
    return EvaluationCase(case_id, date(2024, 8, 1), tuple(candidates), tuple(truth))


@pytest.fixture(scope="session")
def small_synth():
    return synthesize_catalog(GenConfig(n_movies=200, span_days=140), seed=42)


@pytest.fixture(scope="session")
def small_cases(small_synth):
    return build_cases(small_synth.catalog, small_synth.observations, WindowConfig())


# one line per acceptance criterion, echoed after the run
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
