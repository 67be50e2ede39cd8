"""Retrieval metrics: Recall@N, the step-by-domain recall matrix, mR@1 and forgetting."""

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .encoder import forward
from .errors import EmptyDatabase, ProtocolViolation, UndefinedForSingleStep


@dataclass
class RetrievalStats:
    recall: float  # percent of evaluated queries
    evaluated: int
    excluded: int  # queries with no database entry inside the radius


def _sq_dists(a, b):
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)


def retrieval_stats(query_descs, db_descs, query_locs, db_locs, pos_test, n=1):
    q = np.atleast_2d(np.asarray(query_descs, dtype=np.float64))
    db = np.atleast_2d(np.asarray(db_descs, dtype=np.float64))
    if db.shape[0] == 0 or db.size == 0:
        raise EmptyDatabase("database is empty")
    ql = np.asarray(query_locs, dtype=np.float64).reshape(-1, 2)
    dl = np.asarray(db_locs, dtype=np.float64).reshape(-1, 2)
    geo = np.sqrt(_sq_dists(ql, dl)) <= pos_test
    has_match = geo.any(axis=1)
    evaluated = int(has_match.sum())
    if evaluated == 0:
        return RetrievalStats(0.0, 0, len(q))
    order = np.argsort(_sq_dists(q, db), axis=1, kind="stable")[:, :n]
    hits = np.take_along_axis(geo, order, axis=1).any(axis=1) & has_match
    return RetrievalStats(100.0 * hits.sum() / evaluated, evaluated, len(q) - evaluated)


def recall_at_n(query_descs, db_descs, query_locs, db_locs, pos_test, n=1):
    """Percent of queries whose top-``n`` descriptor neighbours include a true place match.

    Ties in descriptor distance go to the lowest database index; queries without
    any database entry inside ``pos_test`` are left out of the denominator.
    """
    return retrieval_stats(query_descs, db_descs, query_locs, db_locs, pos_test, n).recall


class RecallMatrix:
    """Recall@1 per training step (rows) and domain (columns).

    Row ``i`` holds the domains seen up to step ``i``, so rows never shrink. The
    usual lower-triangular T x T matrix is the one-domain-per-step case.
    """

    def __init__(self, rows=()):
        self.rows = []
        for r in rows:
            self.append(r)

    def append(self, row):
        row = [float(x) for x in row]
        if self.rows and len(row) < len(self.rows[-1]):
            raise ValueError("a step cannot evaluate fewer domains than the step before")
        if any(not (0.0 <= x <= 100.0) for x in row):
            raise ValueError(f"recall values must lie in [0, 100]: {row}")
        self.rows.append(row)

    @property
    def steps(self):
        return len(self.rows)

    @property
    def num_domains(self):
        return len(self.rows[-1]) if self.rows else 0

    def first_step(self, domain):
        return next(i for i, r in enumerate(self.rows) if len(r) > domain)

    def cell(self, step, domain):
        row = self.rows[step]
        return row[domain] if domain < len(row) else None

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step"] + [f"domain_{j + 1}" for j in range(self.num_domains)])
        for i, row in enumerate(self.rows):
            cells = [repr(x) for x in row] + [""] * (self.num_domains - len(row))
            writer.writerow([i + 1] + cells)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        reader = csv.reader(io.StringIO(text))
        next(reader)
        return cls([[float(c) for c in row[1:] if c != ""] for row in reader])

    def __eq__(self, other):
        return isinstance(other, RecallMatrix) and self.rows == other.rows


def mean_recall_at_1(matrix):
    final = matrix.rows[-1]
    return float(sum(final) / len(final))


def forgetting(matrix):
    """Mean over domains introduced before the last step of (peak recall - final recall)."""
    if matrix.steps < 2:
        raise UndefinedForSingleStep("forgetting needs at least two training steps")
    last = matrix.steps - 1
    drops = []
    for domain in range(matrix.num_domains):
        start = matrix.first_step(domain)
        if start == last:
            continue
        history = [matrix.rows[step][domain] for step in range(start, last + 1)]
        drops.append(max(history) - history[-1])
    return float(sum(drops) / len(drops))


def describe(params, samples):
    return forward(params, [s.cloud for s in samples])


def evaluate_domain(params, dataset, ns=(1,)):
    """Recall@N (percent) on a dataset's test split, keyed by N."""
    q = describe(params, dataset.test_queries)
    db = describe(params, dataset.test_database)
    ql = [s.location for s in dataset.test_queries]
    dl = [s.location for s in dataset.test_database]
    return {n: recall_at_n(q, db, ql, dl, dataset.thresholds.pos_test, n) for n in ns}


def _same_domain(a, b):
    if a.name == b.name:
        return True
    return len(a.train) == len(b.train) and all(x == y for x, y in zip(a.train, b.train))


def zero_shot(params, holdout, n=1, training_domains=()):
    """Recall@n on a domain never used for training; warns if it was."""
    for ds in training_domains:
        if _same_domain(holdout, ds):
            warnings.warn(f"zero-shot holdout {holdout.name!r} matches a training domain", ProtocolViolation)
    return evaluate_domain(params, holdout, (n,))[n]


@dataclass
class EvalReport:
    mean_recall_at_1: float
    forgetting: object  # float, or None when undefined
    recall_at_n_curve: dict = field(default_factory=dict)
    zero_shot: object = None
    final_recalls: list = field(default_factory=list)

    def to_dict(self):
        return {
            "mR@1": self.mean_recall_at_1,
            "F": self.forgetting,
            "recall_at_n_curve": {str(k): v for k, v in sorted(self.recall_at_n_curve.items())},
            "zero_shot": self.zero_shot,
            "final_recalls": list(self.final_recalls),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["mR@1"],
            d["F"],
            {int(k): v for k, v in d["recall_at_n_curve"].items()},
            d.get("zero_shot"),
            d.get("final_recalls", []),
        )


def build_report(matrix, curve=None, zero_shot_recall=None):
    f = forgetting(matrix) if matrix.steps >= 2 else None
    return EvalReport(mean_recall_at_1(matrix), f, dict(curve or {}), zero_shot_recall, list(matrix.rows[-1]))


def mean_recall_curve(params, datasets, ns):
    """Recall@N averaged over datasets, for each N."""
    per = [evaluate_domain(params, ds, ns) for ds in datasets]
    return {n: float(np.mean([p[n] for p in per])) for n in ns}
