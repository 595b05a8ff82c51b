"""Rule scoring and selection against item-association labels."""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .kgstore import AssociationPair, HeteroGraph
from .rulemine import MinerConfig, Rule, Walker, pair_features, rule_reach_matrices

logger = logging.getLogger(__name__)


class SelectionObjective(str, enum.Enum):
    CHI_SQUARE = "chi2"
    LINEAR_REGRESSION = "linreg"
    SIGMOID = "sigmoid"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RuleWeights:
    w: np.ndarray
    bias: float = 0.0
    history: list[float] = field(default_factory=list)


@dataclass
class LabeledPairSet:
    """Item pairs with binary association labels and (optionally) rule features."""

    pairs: np.ndarray
    labels: np.ndarray
    assoc: str | None = None
    x: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if len(self.pairs) != len(self.labels):
            raise ValueError("pairs and labels differ in length")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be binary")

    def __len__(self) -> int:
        return len(self.labels)

    def with_features(
        self, g: HeteroGraph, rules: Sequence[Rule], cfg: MinerConfig | None = None
    ) -> "LabeledPairSet":
        x = pair_features(g, [tuple(p) for p in self.pairs], rules, cfg, kind="x")
        return LabeledPairSet(self.pairs, self.labels, self.assoc, x)

    def features(self) -> np.ndarray:
        if self.x is None:
            raise ValueError("features have not been computed; call with_features first")
        return self.x


def sample_negative_pairs(
    g: HeteroGraph,
    positives: Sequence[AssociationPair],
    ratio: float = 1.0,
    seed: int = 0,
    exclude: Sequence[AssociationPair] = (),
) -> LabeledPairSet:
    """Positives plus ``ceil(ratio * |positives|)`` uniformly drawn non-positive item pairs.

    A drawn pair is rejected when it, or its reverse, is a positive pair of any
    association (``positives`` plus ``exclude``), or was drawn before.
    """
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    items = g.items
    n_items = len(items)
    forbidden = {(p.a, p.b) for p in list(positives) + list(exclude)}
    forbidden |= {(b, a) for a, b in forbidden}
    need = math.ceil(ratio * len(positives) - 1e-9)
    available = n_items * (n_items - 1) - len(forbidden)
    if need > available:
        raise ValueError(f"cannot draw {need} negatives; only {available} non-positive pairs exist")
    rng = np.random.default_rng(seed)
    drawn: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    while len(drawn) < need:
        a, b = items[rng.integers(n_items, size=2)]
        key = (int(a), int(b))
        if a == b or key in forbidden or key in seen:
            continue
        seen.add(key)
        drawn.append(key)
    pos = [(p.a, p.b) for p in positives]
    assoc = positives[0].assoc if positives else None
    pairs = np.array(pos + drawn, dtype=np.int64).reshape(-1, 2)
    labels = np.r_[np.ones(len(pos)), np.zeros(len(drawn))]
    return LabeledPairSet(pairs, labels, assoc)


# -- chi-square ------------------------------------------------------------


def contingency_tables(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Observed 2x2 counts per feature column, indexed [rule, presence, label]."""
    present = np.asarray(x) > 0
    y = np.asarray(y).astype(bool)
    n11 = (present & y[:, None]).sum(axis=0)
    n10 = (present & ~y[:, None]).sum(axis=0)
    n01 = (~present & y[:, None]).sum(axis=0)
    n00 = (~present & ~y[:, None]).sum(axis=0)
    return np.stack([np.stack([n00, n01], -1), np.stack([n10, n11], -1)], 1).astype(np.float64)


def chi_square_from_tables(tables: np.ndarray) -> np.ndarray:
    tables = np.asarray(tables, dtype=np.float64)
    total = tables.sum(axis=(1, 2), keepdims=True)
    rows = tables.sum(axis=2, keepdims=True)
    cols = tables.sum(axis=1, keepdims=True)
    expected = np.divide(rows * cols, total, out=np.zeros_like(tables), where=total > 0)
    cells = np.divide(
        (tables - expected) ** 2, expected, out=np.zeros_like(tables), where=expected > 0
    )
    return cells.sum(axis=(1, 2))


def chi_square_scores(data: LabeledPairSet | tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Presence-binarised chi-square statistic of every rule column vs the label."""
    if isinstance(data, LabeledPairSet):
        x, y = data.features(), data.labels
    else:
        x, y = data
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("features must be a (pairs x rules) matrix aligned to labels")
    if len(y) == 0 or np.all(y == y[0]):
        warnings.warn("all labels are equal; chi-square scores are zero", RuntimeWarning, stacklevel=2)
        return np.zeros(x.shape[1])
    return chi_square_from_tables(contingency_tables(x, y))


# -- learned objectives ----------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def selection_loss(
    objective: SelectionObjective | str,
    w: np.ndarray,
    bias: float,
    x: np.ndarray,
    y: np.ndarray,
) -> tuple[float, np.ndarray, float]:
    """Objective summed over pairs and rules, with gradients in ``w`` and ``bias``.

    * chi2: ``sum_i w_i (x_i + b - y)^2``
    * linreg: ``sum_i (w_i x_i + b - y)^2``
    * sigmoid: ``sum_i w_i / (1 + exp(-|x_i + b - y|))``
    """
    objective = SelectionObjective(objective)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)[:, None]
    if objective is SelectionObjective.CHI_SQUARE:
        res = x + bias - y
        sq = res**2
        loss = float(sq.sum(axis=0) @ w)
        return loss, sq.sum(axis=0), float((2.0 * res * w).sum())
    if objective is SelectionObjective.LINEAR_REGRESSION:
        res = w * x + bias - y
        return float((res**2).sum()), (2.0 * res * x).sum(axis=0), float(2.0 * res.sum())
    res = x + bias - y
    s = _sigmoid(np.abs(res))
    loss = float(s.sum(axis=0) @ w)
    # d|r|/db = sign(r), with sign(0) = 0
    db = float((w * s * (1.0 - s) * np.sign(res)).sum())
    return loss, s.sum(axis=0), db


def _softmax(theta: np.ndarray) -> np.ndarray:
    z = np.exp(theta - theta.max())
    return z / z.sum()


def train_selection_weights(
    data: LabeledPairSet,
    objective: SelectionObjective | str = SelectionObjective.SIGMOID,
    lr: float = 0.05,
    epochs: int = 200,
    seed: int = 0,
    constrained: bool = True,
    init_w: np.ndarray | None = None,
) -> RuleWeights:
    """Full-batch gradient descent on the mean (over pairs) selection objective.

    With ``constrained`` the weights are a softmax of free logits, so they stay
    positive and sum to one at every step. The logits start at small random
    values drawn from ``seed``; the bias starts at zero.
    """
    x = data.features()
    y = data.labels
    n, k = x.shape
    if n == 0 or k == 0:
        raise ValueError("empty selection problem")
    rng = np.random.default_rng(seed)
    bias = 0.0
    history: list[float] = []
    if constrained:
        theta = rng.uniform(-0.01, 0.01, size=k) if init_w is None else np.log(init_w)
    else:
        w = rng.uniform(-0.01, 0.01, size=k) if init_w is None else np.array(init_w, dtype=float)
    for epoch in range(epochs):
        if constrained:
            w = _softmax(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, gw, gb = selection_loss(objective, w, bias, x, y)
        loss, gw, gb = loss / n, gw / n, gb / n
        if not np.isfinite(loss) or not np.all(np.isfinite(gw)):
            raise TrainingDiverged(f"selection objective diverged at epoch {epoch}")
        history.append(loss)
        if constrained:
            # chain rule through softmax: dL/dtheta = w * (gw - <w, gw>)
            theta = theta - lr * w * (gw - w @ gw)
        else:
            w = w - lr * gw
        bias = bias - lr * gb
    if constrained:
        w = _softmax(theta)
    return RuleWeights(np.asarray(w, dtype=np.float64), float(bias), history)


def select_top_n(values: Sequence[float] | np.ndarray, n: int) -> list[int]:
    """Indices of the ``n`` largest values, ties broken by lower index."""
    if n < 1:
        raise ValueError("n must be at least 1")
    vals = np.asarray(values, dtype=np.float64)
    order = np.lexsort((np.arange(len(vals)), -vals))
    return [int(i) for i in order[:n]]


# -- diagnostics -----------------------------------------------------------


def coverage_recall(
    g: HeteroGraph,
    eval_users: Sequence[tuple[int, Sequence[int]]],
    rules: Sequence[Rule],
    cfg: MinerConfig | None = None,
) -> float:
    """Fraction of users whose last item reaches some history item under some rule."""
    if not eval_users:
        return 0.0
    for _, hist in eval_users:
        if len(hist) == 0:
            raise ValueError("histories must be non-empty")
    if not rules:
        return 0.0
    lasts = np.array([last for last, _ in eval_users], dtype=np.int64)
    sources, row_of = np.unique(lasts, return_inverse=True)
    mats = rule_reach_matrices(g, sources, rules, cfg, kind="x")
    reach = mats[0].copy()
    for m in mats[1:]:
        reach = reach + m
    reach = sp.csr_matrix(reach)
    covered = 0
    for (last, hist), row in zip(eval_users, row_of):
        lo, hi = reach.indptr[row], reach.indptr[row + 1]
        hit = set(reach.indices[lo:hi][reach.data[lo:hi] > 0].tolist())
        if hit.intersection(int(k) for k in hist):
            covered += 1
    return covered / len(eval_users)


def all_rules_upto(g: HeteroGraph, beta: int) -> list[Rule]:
    """Every relation sequence of length 1..beta (the coverage upper bound set)."""
    out: list[Rule] = []
    frontier: list[tuple[int, ...]] = [()]
    for _ in range(beta):
        frontier = [seq + (r,) for seq in frontier for r in range(g.n_relations)]
        out.extend(Rule(seq) for seq in frontier)
    return out


def coverage_upper_bound(
    g: HeteroGraph,
    eval_users: Sequence[tuple[int, Sequence[int]]],
    beta: int,
    cfg: MinerConfig | None = None,
) -> float:
    """Coverage with every rule of length <= beta, without enumerating them.

    A user is covered iff some history item is reachable from the last item by
    a relation walk of 1..beta steps, which is plain typed reachability.
    """
    if not eval_users:
        return 0.0
    walker = Walker(g, cfg)
    union = sum((walker.indicator(r.id) for r in g.relations), sp.csr_matrix((g.n_nodes, g.n_nodes)))
    union = sp.csr_matrix(union)
    union.data[:] = 1.0
    lasts = np.array([last for last, _ in eval_users], dtype=np.int64)
    reach = sp.csr_matrix((np.ones(len(lasts)), (np.arange(len(lasts)), lasts)), shape=(len(lasts), g.n_nodes))
    total = sp.csr_matrix(reach.shape)
    for _ in range(beta):
        reach = sp.csr_matrix(reach @ union)
        reach.data[:] = 1.0
        total = total + reach
    total = sp.csr_matrix(total)
    covered = 0
    for row, (_, hist) in enumerate(eval_users):
        lo, hi = total.indptr[row], total.indptr[row + 1]
        if set(total.indices[lo:hi].tolist()).intersection(int(k) for k in hist):
            covered += 1
    return covered / len(eval_users)
