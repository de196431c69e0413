"""Elo tournament scoring over pairwise judgment records.

Pairwise comparisons (model A vs model B on one prompt, judged as a win for
either side or a tie) are replayed as an Elo tournament.  Because Elo is
order-dependent, a single replay would privilege whatever order the records
arrived in, so the tournament is replayed under ``n_permutations`` full
shuffles of the record list (sampling without replacement; a bootstrap
variant with replacement would be a different estimator and is deliberately
not what runs here).  Every model starts at the same initial rating and is
updated with a fixed K factor.  The report aggregates the per-permutation
final ratings into a mean and a central percentile interval.

Determinism: permutation ``p`` draws its shuffle from a generator seeded by
``(seed, p)``, so results are bit-for-bit reproducible for a given seed and
record list, independent of scheduling or batching internals.  Records are
put into a canonical order before shuffling, which makes the table invariant
to the order records arrived in as well.

"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import JudgmentFormatError

__all__ = [
    "OUTCOMES",
    "JudgmentRecord",
    "EloConfig",
    "RatingRow",
    "RatingTable",
    "expected_score",
    "elo_update",
    "run_tournament",
    "load_judgments",
]

OUTCOMES = ("a_wins", "b_wins", "tie")

_SCORE_A = {"a_wins": 1.0, "b_wins": 0.0, "tie": 0.5}


@dataclass(frozen=True)
class JudgmentRecord:
    """One pairwise comparison. ``judge`` is optional metadata."""

    prompt_id: str
    model_a: str
    model_b: str
    outcome: str
    judge: str | None = None

    def validate(self) -> None:
        if self.outcome not in OUTCOMES:
            raise ValueError(
                f"unknown outcome {self.outcome!r}; expected one of {OUTCOMES}"
            )
        if self.model_a == self.model_b:
            raise ValueError(f"record pits model {self.model_a!r} against itself")


@dataclass(frozen=True)
class EloConfig:
    k_factor: float = 32.0
    initial_rating: float = 1000.0
    n_permutations: int = 10_000
    seed: int = 0
    ci_level: float = 0.95

    def validate(self) -> None:
        if self.k_factor <= 0:
            raise ValueError("k_factor must be positive")
        if self.n_permutations < 1:
            raise ValueError("n_permutations must be >= 1")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")


@dataclass(frozen=True)
class RatingRow:
    model: str
    mean_elo: float
    ci_low: float
    ci_high: float
    matches_played: int
    rank: int


@dataclass(frozen=True)
class RatingTable:
    rows: tuple[RatingRow, ...]
    config: EloConfig
    n_records: int

    def rating_of(self, model: str) -> RatingRow:
        for row in self.rows:
            if row.model == model:
                return row
        raise KeyError(model)

    def to_json(self) -> str:
        payload = {
            "config": {
                "k_factor": self.config.k_factor,
                "initial_rating": self.config.initial_rating,
                "n_permutations": self.config.n_permutations,
                "seed": self.config.seed,
                "ci_level": self.config.ci_level,
            },
            "n_records": self.n_records,
            "rows": [
                {
                    "rank": r.rank,
                    "model": r.model,
                    "mean_elo": r.mean_elo,
                    "ci_low": r.ci_low,
                    "ci_high": r.ci_high,
                    "matches_played": r.matches_played,
                }
                for r in self.rows
            ],
        }
        return json.dumps(payload, indent=2)

    def render(self) -> str:
        """Plain-text table, one row per model, best rating first."""
        header = ("rank", "model", "mean_elo", "ci_low", "ci_high", "matches_played")
        body = [
            (
                str(r.rank),
                r.model,
                f"{r.mean_elo:.1f}",
                f"{r.ci_low:.1f}",
                f"{r.ci_high:.1f}",
                str(r.matches_played),
            )
            for r in self.rows
        ]
        widths = [max(len(h), *(len(row[i]) for row in body)) if body else len(h)
                  for i, h in enumerate(header)]
        lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
        for row in body:
            lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# core update rule
# ---------------------------------------------------------------------------


def expected_score(rating_a: float, rating_b: float) -> float:
    """Probability-like expected score of A against B under the Elo model:
    1 / (1 + 10 ** ((rating_b - rating_a) / 400))."""
    return float(
        1.0 / (1.0 + np.float64(10.0) ** ((np.float64(rating_b) - np.float64(rating_a)) / 400.0))
    )


def elo_update(
    rating_a: float, rating_b: float, outcome: str, k_factor: float = 32.0
) -> tuple[float, float]:
    """One match update. A tie scores 0.5 for each side; the rating
    exchange is antisymmetric, so the pair sum is conserved."""
    if outcome not in OUTCOMES:
        raise ValueError(f"unknown outcome {outcome!r}; expected one of {OUTCOMES}")
    score_a = _SCORE_A[outcome]
    expected_a = expected_score(rating_a, rating_b)
    delta = k_factor * (score_a - expected_a)
    return float(rating_a + delta), float(rating_b - delta)


# ---------------------------------------------------------------------------
# tournament
# ---------------------------------------------------------------------------


def run_tournament(
    records: list[JudgmentRecord], config: EloConfig = EloConfig()
) -> RatingTable:
    """Replay the records under shuffled orders and aggregate final ratings.

    The per-permutation replay is vectorized across permutations but is
    arithmetically identical to looping :func:`elo_update` over one shuffled
    record list at a time (the tests hold the two paths to bit equality).
    Models are ranked by mean rating, ties broken by name.
    """
    config.validate()
    if not records:
        raise ValueError("cannot run a tournament over zero records")
    for i, rec in enumerate(records):
        try:
            rec.validate()
        except ValueError as exc:
            raise ValueError(f"record {i}: {exc}") from exc

    # Canonical record order, so the seeded shuffles (and hence the whole
    # table) are invariant to the order records arrived in.
    records = sorted(
        records,
        key=lambda r: (r.prompt_id, r.model_a, r.model_b, r.outcome, r.judge or ""),
    )

    models = sorted({m for r in records for m in (r.model_a, r.model_b)})
    index = {m: i for i, m in enumerate(models)}
    n = len(records)
    a_idx = np.array([index[r.model_a] for r in records])
    b_idx = np.array([index[r.model_b] for r in records])
    score_a = np.array([_SCORE_A[r.outcome] for r in records])

    n_perm = config.n_permutations
    orders = np.empty((n_perm, n), dtype=np.int64)
    for p in range(n_perm):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, p)))
        orders[p] = rng.permutation(n)

    ratings = np.full((n_perm, len(models)), config.initial_rating, dtype=np.float64)
    rows = np.arange(n_perm)
    k = np.float64(config.k_factor)
    for t in range(n):
        rec = orders[:, t]
        ai = a_idx[rec]
        bi = b_idx[rec]
        ra = ratings[rows, ai]
        rb = ratings[rows, bi]
        ea = 1.0 / (1.0 + np.float64(10.0) ** ((rb - ra) / 400.0))
        delta = k * (score_a[rec] - ea)
        ratings[rows, ai] = ra + delta
        ratings[rows, bi] = rb - delta

    lo_pct = 100.0 * (1.0 - config.ci_level) / 2.0
    hi_pct = 100.0 - lo_pct
    matches = np.bincount(
        np.concatenate([a_idx, b_idx]), minlength=len(models)
    )

    stats = []
    for m, name in enumerate(models):
        final = ratings[:, m]
        stats.append(
            (
                name,
                float(final.mean()),
                float(np.percentile(final, lo_pct)),
                float(np.percentile(final, hi_pct)),
                int(matches[m]),
            )
        )
    stats.sort(key=lambda s: (-s[1], s[0]))
    table = tuple(
        RatingRow(
            model=name,
            mean_elo=mean,
            ci_low=lo,
            ci_high=hi,
            matches_played=played,
            rank=rank + 1,
        )
        for rank, (name, mean, lo, hi, played) in enumerate(stats)
    )
    return RatingTable(rows=table, config=config, n_records=n)


# ---------------------------------------------------------------------------
# judgment file parsing
# ---------------------------------------------------------------------------

_CSV_REQUIRED = ("prompt_id", "model_a", "model_b", "outcome")


def load_judgments(
    path: str,
    fmt: str | None = None,
    strict: bool = True,
) -> tuple[list[JudgmentRecord], list[str]]:
    """Parse a CSV (with header) or JSONL judgment file.

    ``fmt`` is ``"csv"`` or ``"jsonl"``; None infers from the extension.
    Strict mode raises :class:`JudgmentFormatError` naming the first bad
    1-based line; lenient mode skips bad lines and returns warnings
    alongside the surviving records.
    """
    if fmt is None:
        ext = os.path.splitext(path)[1].lower()
        if ext == ".csv":
            fmt = "csv"
        elif ext in (".jsonl", ".ndjson", ".json"):
            fmt = "jsonl"
        else:
            raise ValueError(
                f"cannot infer judgment format from {path!r}; pass fmt explicitly"
            )
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"fmt must be 'csv' or 'jsonl', got {fmt!r}")

    with open(path, "r", encoding="utf-8", newline="") as fh:
        text = fh.read()

    records: list[JudgmentRecord] = []
    warnings: list[str] = []

    def fail(line_no: int, why: str) -> None:
        msg = f"{path}:{line_no}: {why}"
        if strict:
            raise JudgmentFormatError(msg)
        warnings.append(msg)

    def add(line_no: int, fields: dict) -> None:
        missing = [c for c in _CSV_REQUIRED if not fields.get(c)]
        if missing:
            fail(line_no, f"missing field(s) {', '.join(missing)}")
            return
        rec = JudgmentRecord(
            prompt_id=str(fields["prompt_id"]),
            model_a=str(fields["model_a"]),
            model_b=str(fields["model_b"]),
            outcome=str(fields["outcome"]),
            judge=str(fields["judge"]) if fields.get("judge") else None,
        )
        try:
            rec.validate()
        except ValueError as exc:
            fail(line_no, str(exc))
            return
        records.append(rec)

    if fmt == "csv":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames is None:
            fail(1, "empty csv file")
            return records, warnings
        unknown = [c for c in _CSV_REQUIRED if c not in reader.fieldnames]
        if unknown:
            fail(1, f"csv header missing column(s) {', '.join(unknown)}")
            return records, warnings
        for line_no, row in enumerate(reader, start=2):
            if None in row.values() or None in row:
                fail(line_no, "wrong number of csv fields")
                continue
            add(line_no, row)
    else:
        for line_no, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                fail(line_no, f"invalid json: {exc.msg}")
                continue
            if not isinstance(obj, dict):
                fail(line_no, "expected a json object per line")
                continue
            add(line_no, obj)
    return records, warnings
