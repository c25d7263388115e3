"""Single-click ranking metrics (AUC, MRR, nDCG@5, nDCG@10) and aggregation."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Sequence

METRIC_NAMES = ("auc", "mrr", "ndcg5", "ndcg10")


class ProtocolError(ValueError):
    """Ranking/labels do not satisfy the single-click protocol."""


class AggregationError(ValueError):
    pass


def rank_of_click(ranking: Sequence[int], labels: Sequence[int]) -> int:
    """1-based position of the clicked candidate in ``ranking``.

    ``ranking`` holds 1-based candidate indices; ``labels[i]`` is the label
    of candidate ``i + 1``.
    """
    positives = [i for i, y in enumerate(labels, 1) if y == 1]
    if len(positives) != 1:
        raise ProtocolError(f"expected exactly one clicked candidate, found {len(positives)}")
    if sorted(ranking) != list(range(1, len(labels) + 1)):
        raise ProtocolError(f"ranking is not a permutation of 1..{len(labels)}")
    return list(ranking).index(positives[0]) + 1


def ndcg_at(rank: int, k: int) -> float:
    # ideal DCG is 1 with a single relevant item
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def user_metrics(rank: int, n_candidates: int) -> tuple[float, float, float, float]:
    """(auc, reciprocal rank, nDCG@5, nDCG@10) for a single click at ``rank``."""
    if n_candidates < 2:
        raise ProtocolError("need at least two candidates")
    if not 1 <= rank <= n_candidates:
        raise ProtocolError(f"rank {rank} outside 1..{n_candidates}")
    auc = (n_candidates - rank) / (n_candidates - 1)
    return auc, 1.0 / rank, ndcg_at(rank, 5), ndcg_at(rank, 10)


@dataclass(frozen=True)
class UserScore:
    user_id: str
    rank: int
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float

    @classmethod
    def from_rank(cls, user_id: str, rank: int, n_candidates: int) -> "UserScore":
        return cls(user_id, rank, *user_metrics(rank, n_candidates))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.auc, self.mrr, self.ndcg5, self.ndcg10


@dataclass
class MetricReport:
    auc: float
    mrr: float
    ndcg5: float
    ndcg10: float
    n_users: int
    per_user: list[UserScore] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def get(self, name: str) -> float:
        if name not in METRIC_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def to_dict(self, include_per_user: bool = False) -> dict:
        out = {name: self.get(name) for name in METRIC_NAMES}
        out["n_users"] = self.n_users
        if self.notes:
            out["notes"] = dict(self.notes)
        if include_per_user:
            out["per_user"] = [vars(u) for u in self.per_user]
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        per_user = [UserScore(**u) for u in data.get("per_user", [])]
        return cls(
            data["auc"], data["mrr"], data["ndcg5"], data["ndcg10"], data["n_users"],
            per_user, dict(data.get("notes", {})),
        )

    def display_row(self) -> list[str]:
        return [f"{100 * self.get(name):.2f}" for name in METRIC_NAMES]


def aggregate(scores: Iterable[UserScore]) -> MetricReport:
    scores = list(scores)
    if not scores:
        raise AggregationError("cannot aggregate an empty user set")
    n = len(scores)
    means = [math.fsum(s.as_tuple()[i] for s in scores) / n for i in range(4)]
    return MetricReport(*means, n_users=n, per_user=scores)


@dataclass
class RepeatedReport:
    """Reports from repeated evaluations with mean and sample standard deviation."""

    runs: list[MetricReport]

    def mean(self, name: str) -> float:
        return statistics.fmean(r.get(name) for r in self.runs)

    def sd(self, name: str) -> float | None:
        if len(self.runs) < 2:
            return None
        return statistics.stdev(r.get(name) for r in self.runs)

    def to_dict(self) -> dict:
        return {
            "runs": [r.to_dict() for r in self.runs],
            "mean": {name: self.mean(name) for name in METRIC_NAMES},
            "sd": {name: self.sd(name) for name in METRIC_NAMES} if len(self.runs) > 1 else None,
            "sd_kind": "sample standard deviation",
        }

    def display_row(self) -> list[str]:
        cells = []
        for name in METRIC_NAMES:
            sd = self.sd(name)
            cell = f"{100 * self.mean(name):.2f}"
            if sd is not None:
                cell += f"±{100 * sd:.2f}"
            cells.append(cell)
        return cells


def format_table(rows: Sequence[tuple[str, Sequence[str]]]) -> str:
    """Plain-text table with the AUC/MRR/nDCG@5/nDCG@10 column layout."""
    header = ("Model", "AUC", "MRR", "nDCG@5", "nDCG@10")
    body = [(name, *cells) for name, cells in rows]
    widths = [max(len(str(r[i])) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines)
