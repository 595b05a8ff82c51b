"""Leave-one-out evaluation with sampled negatives, ranking metrics, paired t-tests."""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .kgstore import InteractionLog
from .recmodels import TrainData

logger = logging.getLogger(__name__)

N_NEGATIVES = 99
METRICS = ("recall@5", "recall@10", "ndcg@10", "mrr@10")


@dataclass
class UserSplit:
    user: int
    train: list[int]
    test: int
    negatives: list[int]


@dataclass
class EvalSplit:
    users: list[UserSplit]
    universe: np.ndarray
    seed: int = 0

    def train_histories(self) -> dict[int, list[int]]:
        return {us.user: list(us.train) for us in self.users}

    def train_data(self, n_users: int | None = None) -> TrainData:
        """Training positives with negatives excluded from train and test items."""
        exclude = {us.user: [us.test] for us in self.users}
        n = n_users if n_users is not None else max((us.user for us in self.users), default=-1) + 1
        return TrainData.from_histories(self.train_histories(), exclude, self.universe, n)

    def item_index(self) -> dict[int, int]:
        return {int(v): k for k, v in enumerate(self.universe)}

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "universe": [int(v) for v in self.universe],
            "users": [
                {"user": us.user, "train": us.train, "test": us.test, "negatives": us.negatives}
                for us in self.users
            ],
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "EvalSplit":
        users = [UserSplit(int(o["user"]), list(o["train"]), int(o["test"]), list(o["negatives"]))
                 for o in obj["users"]]
        return cls(users, np.asarray(obj["universe"], dtype=np.int64), int(obj.get("seed", 0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalSplit":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def leave_one_out_split(
    interactions: InteractionLog,
    seed: int = 0,
    universe: Sequence[int] | None = None,
    n_negatives: int = N_NEGATIVES,
) -> EvalSplit:
    """Hold out each user's latest interaction and draw negatives for ranking.

    Ties on timestamp go to the later line in the file. Users with fewer than
    two interactions are dropped. Negatives are drawn without replacement
    from items the user never interacted with.
    """
    if universe is None:
        universe = sorted({r.item for r in interactions.records})
    universe = np.asarray(universe, dtype=np.int64)
    rng = np.random.default_rng(seed)
    out: list[UserSplit] = []
    dropped = 0
    short = 0
    for user, recs in sorted(interactions.by_user().items()):
        if len(recs) < 2:
            dropped += 1
            continue
        test = recs[-1].item
        seen = {r.item for r in recs}
        train = []
        for r in recs[:-1]:
            if r.item != test and r.item not in train:
                train.append(r.item)
        if not train:
            dropped += 1
            continue
        eligible = np.array([i for i in universe if int(i) not in seen], dtype=np.int64)
        if len(eligible) < n_negatives:
            short += 1
            negs = eligible.copy()
        else:
            negs = rng.choice(eligible, size=n_negatives, replace=False)
        out.append(UserSplit(int(user), [int(i) for i in train], int(test), [int(i) for i in negs]))
    if dropped:
        warnings.warn(f"{dropped} users with fewer than two distinct interactions were dropped",
                      RuntimeWarning, stacklevel=2)
    if short:
        warnings.warn(f"{short} users have fewer than {n_negatives} eligible negatives; using all",
                      RuntimeWarning, stacklevel=2)
    return EvalSplit(out, universe, seed)


def metrics(ranked: Sequence[int], positive: int) -> tuple[float, float, float, float]:
    """(recall@5, recall@10, ndcg@10, mrr@10) for a single held-out positive."""
    ranked = list(ranked)
    if positive not in ranked:
        return 0.0, 0.0, 0.0, 0.0
    rank = ranked.index(positive) + 1
    return metrics_from_rank(rank)


def metrics_from_rank(rank: int) -> tuple[float, float, float, float]:
    r5 = 1.0 if rank <= 5 else 0.0
    r10 = 1.0 if rank <= 10 else 0.0
    ndcg = 1.0 / math.log2(rank + 1) if rank <= 10 else 0.0
    mrr = 1.0 / rank if rank <= 10 else 0.0
    return r5, r10, ndcg, mrr


@dataclass
class MetricReport:
    means: dict[str, float]
    per_user: dict[str, list[float]]
    users: list[int]
    seeds: list[int] = field(default_factory=list)
    seed_means: dict[str, list[float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self, include_per_user: bool = True) -> dict:
        obj = {
            "means": self.means,
            "seeds": self.seeds,
            "seed_means": self.seed_means,
            "users": self.users if include_per_user else [],
            **self.meta,
        }
        if include_per_user:
            obj["per_user"] = self.per_user
        return obj

    @classmethod
    def from_dict(cls, obj: Mapping) -> "MetricReport":
        extra = {k: v for k, v in obj.items() if k not in ("means", "per_user", "users", "seeds", "seed_means")}
        return cls(dict(obj["means"]), dict(obj.get("per_user", {})), list(obj.get("users", [])),
                   list(obj.get("seeds", [])), dict(obj.get("seed_means", {})), extra)


def _rank_user(model, us: UserSplit, index: Mapping[int, int]) -> tuple[float, ...]:
    from .combine import recommend_topk

    cand = np.array([index[us.test]] + [index[i] for i in us.negatives], dtype=np.int64)
    ranked = [i for i, _ in recommend_topk(model, us.user, cand, len(cand))]
    return metrics(ranked, index[us.test])


def evaluate(model, split: EvalSplit, jobs: int = 1) -> MetricReport:
    """Rank the positive among its sampled negatives for every user and average."""
    index = split.item_index()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda us: _rank_user(model, us, index), split.users))
    else:
        rows = [_rank_user(model, us, index) for us in split.users]
    arr = np.array(rows, dtype=np.float64).reshape(-1, 4)
    per_user = {name: arr[:, k].tolist() for k, name in enumerate(METRICS)}
    means = {name: float(arr[:, k].sum() / max(len(arr), 1)) for k, name in enumerate(METRICS)}
    return MetricReport(means, per_user, [us.user for us in split.users], [split.seed])


def combine_seed_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Merge single-seed reports; per-seed means feed :func:`paired_t`."""
    if not reports:
        raise ValueError("no reports to combine")
    seeds = [s for r in reports for s in r.seeds]
    seed_means = {m: [r.means[m] for r in reports] for m in METRICS}
    means = {m: float(np.mean(seed_means[m])) for m in METRICS}
    return MetricReport(means, {}, [], seeds, seed_means)


def paired_t(report_a: MetricReport, report_b: MetricReport, metric: str = "recall@5") -> float:
    """Two-sided paired t-test p-value on per-seed means.

    With zero variance in the differences the statistic is undefined; the
    p-value is then 1.0 for identical results and 0.0 otherwise (flagged by a
    warning).
    """
    a = np.asarray(report_a.seed_means.get(metric, []), dtype=np.float64)
    b = np.asarray(report_b.seed_means.get(metric, []), dtype=np.float64)
    if len(a) != len(b) or len(a) < 2:
        raise ValueError("paired t-test needs equal seed counts of at least 2")
    diff = a - b
    if np.all(diff == diff[0]):
        warnings.warn("zero variance in paired differences", RuntimeWarning, stacklevel=2)
        return 1.0 if diff[0] == 0 else 0.0
    return float(stats.ttest_rel(a, b).pvalue)
