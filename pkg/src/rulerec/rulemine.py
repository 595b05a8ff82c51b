"""Rule enumeration and rule-constrained random-walk features.

A rule is a sequence of relation ids. Walk probabilities are computed exactly
by forward dynamic programming: the distribution over nodes reached after a
rule prefix is pushed one relation at a time through the row-normalised
adjacency of that relation. Batched variants keep one sparse row per source
node so that every pair sharing a source shares the prefix work.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .kgstore import AssociationPair, HeteroGraph

logger = logging.getLogger(__name__)


class SelfAbsorb(str, enum.Enum):
    """Where the "staying at the target counts as reaching it" case applies."""

    FINAL_ONLY = "final_only"
    ALWAYS = "always"
    OFF = "off"


@dataclass(frozen=True, order=True)
class Rule:
    relations: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.relations) == 0:
            raise ValueError("a rule needs at least one relation")

    def __len__(self) -> int:
        return len(self.relations)

    def names(self, g: HeteroGraph) -> list[str]:
        return [g.relations[r].name for r in self.relations]

    def describe(self, g: HeteroGraph) -> str:
        return " -> ".join(self.names(g))

    @classmethod
    def from_names(cls, g: HeteroGraph, names: Sequence[str]) -> "Rule":
        return cls(tuple(g.relation(n).id for n in names))


@dataclass(frozen=True)
class MinerConfig:
    alpha: float = 0.01
    beta: int = 4
    self_absorb: SelfAbsorb = SelfAbsorb.FINAL_ONLY
    degree_cap: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.beta < 1:
            raise ValueError(f"beta must be a positive integer, got {self.beta}")
        if self.degree_cap is not None and self.degree_cap < 1:
            raise ValueError("degree_cap must be positive when set")
        object.__setattr__(self, "self_absorb", SelfAbsorb(self.self_absorb))


@dataclass
class MinedRule:
    """A rule in the global list together with its provenance."""

    rule: Rule
    support: int
    assocs: tuple[str, ...] = ()
    weight: float | None = None
    chi2: float | None = None
    support_by_assoc: dict[str, int] = field(default_factory=dict)


# -- transition operators --------------------------------------------------


class Walker:
    """Cached per-relation transition matrices for one graph and config.

    ``indicator(r)`` is the 0/1 adjacency, ``transition(r)`` its row-normalised
    version. With ``degree_cap`` set, a node expands only its first
    ``degree_cap`` targets (lowest ids) and normalises over those.
    """

    def __init__(self, g: HeteroGraph, cfg: MinerConfig | None = None) -> None:
        self.g = g
        self.cfg = cfg or MinerConfig()
        self._ind: dict[int, sp.csr_matrix] = {}
        self._trans: dict[int, sp.csr_matrix] = {}

    def indicator(self, rel: int) -> sp.csr_matrix:
        if rel not in self._ind:
            mat = self.g.adjacency(rel)
            cap = self.cfg.degree_cap
            if cap is not None:
                mat = mat.copy()
                for row in range(mat.shape[0]):
                    lo, hi = mat.indptr[row], mat.indptr[row + 1]
                    if hi - lo > cap:
                        mat.data[lo + cap : hi] = 0.0
                mat.eliminate_zeros()
            self._ind[rel] = mat
        return self._ind[rel]

    def out_degree(self, rel: int) -> np.ndarray:
        mat = self.indicator(rel)
        return np.diff(mat.indptr).astype(np.float64)

    def transition(self, rel: int) -> sp.csr_matrix:
        if rel not in self._trans:
            mat = self.indicator(rel)
            deg = self.out_degree(rel)
            inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
            self._trans[rel] = (sp.diags(inv) @ mat).tocsr()
        return self._trans[rel]

    def step(self, dist: sp.csr_matrix, rel: int, absorb: bool, indicator: bool = False) -> sp.csr_matrix:
        """Push row distributions one relation forward.

        With ``absorb`` the factor for staying in place is 1 and replaces any
        self-loop factor.
        """
        mat = self.indicator(rel) if indicator else self.transition(rel)
        out = dist @ mat
        if absorb:
            stay = 1.0 - mat.diagonal()
            out = out + dist @ sp.diags(stay)
        out = sp.csr_matrix(out)
        out.eliminate_zeros()
        return out

    def absorbs(self, position: int, length: int) -> bool:
        mode = self.cfg.self_absorb
        if mode is SelfAbsorb.ALWAYS:
            return True
        if mode is SelfAbsorb.FINAL_ONLY:
            return position == length - 1
        return False


def _one_hot_rows(sources: np.ndarray, n: int) -> sp.csr_matrix:
    k = len(sources)
    return sp.csr_matrix((np.ones(k), (np.arange(k), sources)), shape=(k, n))


# -- single pair operations ----------------------------------------------


def one_step(
    g: HeteroGraph,
    src: int,
    rel: int,
    dst: int,
    mode: SelfAbsorb | str = SelfAbsorb.FINAL_ONLY,
) -> float:
    """Probability of a one-step walk along ``rel`` from ``src`` landing on ``dst``."""
    g.node(src)
    g.node(dst)
    if SelfAbsorb(mode) is not SelfAbsorb.OFF and src == dst:
        return 1.0
    nbrs = g.neighbors(src, rel)
    if len(nbrs) == 0:
        return 0.0
    return (1.0 if dst in set(nbrs.tolist()) else 0.0) / len(nbrs)


def prefix_distribution(
    g: HeteroGraph, a: int, prefix: Sequence[int], cfg: MinerConfig | None = None,
    rule_length: int | None = None,
) -> dict[int, float]:
    """Mass over nodes reached from ``a`` after walking ``prefix``.

    ``rule_length`` is the length of the full rule the prefix belongs to; it
    decides where self-absorption applies (defaults to ``len(prefix) + 1``).
    """
    walker = Walker(g, cfg)
    length = len(prefix) + 1 if rule_length is None else rule_length
    dist = _one_hot_rows(np.array([a]), g.n_nodes)
    for pos, rel in enumerate(prefix):
        dist = walker.step(dist, rel, walker.absorbs(pos, length))
    row = dist.tocoo()
    return {int(c): float(v) for c, v in zip(row.col, row.data)}


def walk_probability(
    g: HeteroGraph, a: int, b: int, rule: Rule | Sequence[int], cfg: MinerConfig | None = None
) -> float:
    """P(b | a, rule) by forward dynamic programming."""
    rels = rule.relations if isinstance(rule, Rule) else tuple(rule)
    if len(rels) == 0:
        raise ValueError("rule length must be at least 1")
    return float(_rule_rows(Walker(g, cfg), np.array([a]), rels, final_indicator=False)[0, b])


def feature_x(
    g: HeteroGraph, a: int, b: int, rules: Sequence[Rule], cfg: MinerConfig | None = None
) -> np.ndarray:
    return pair_features(g, [(a, b)], rules, cfg, kind="x")[0]


def feature_F(
    g: HeteroGraph, a: int, b: int, rules: Sequence[Rule], cfg: MinerConfig | None = None
) -> np.ndarray:
    return pair_features(g, [(a, b)], rules, cfg, kind="F")[0]


def feature_F_user(
    g: HeteroGraph,
    i: int,
    history: Iterable[int],
    rules: Sequence[Rule],
    cfg: MinerConfig | None = None,
) -> np.ndarray:
    """Sum of ``feature_F(i, k)`` over the distinct history items ``k``."""
    hist = sorted(set(int(k) for k in history))
    if not hist:
        raise ValueError("history must be non-empty")
    feats = pair_features(g, [(i, k) for k in hist], rules, cfg, kind="F")
    return feats.sum(axis=0)


# -- batched features ----------------------------------------------------


def _rule_rows(
    walker: Walker, sources: np.ndarray, rels: Sequence[int], final_indicator: bool
) -> sp.csr_matrix:
    dist = _one_hot_rows(sources, walker.g.n_nodes)
    length = len(rels)
    for pos, rel in enumerate(rels):
        last = pos == length - 1
        dist = walker.step(dist, rel, walker.absorbs(pos, length), indicator=last and final_indicator)
    return dist


def rule_reach_matrices(
    g: HeteroGraph,
    sources: Sequence[int],
    rules: Sequence[Rule],
    cfg: MinerConfig | None = None,
    kind: str = "x",
) -> list[sp.csr_matrix]:
    """For each rule, a (len(sources) x n_nodes) sparse matrix of feature values.

    ``kind="x"`` gives walk probabilities, ``kind="F"`` the prefix mass times
    last-step indicator. Prefix distributions shared by several rules are
    computed once.
    """
    if kind not in ("x", "F"):
        raise ValueError(f"kind must be 'x' or 'F', got {kind!r}")
    walker = Walker(g, cfg)
    src = np.asarray(sources, dtype=np.int64)
    base = _one_hot_rows(src, g.n_nodes)
    cache: dict[tuple[tuple[int, ...], int], sp.csr_matrix] = {}

    def prefix(rels: tuple[int, ...], length: int) -> sp.csr_matrix:
        # absorption placement depends on the full rule length
        if not rels:
            return base
        key = (rels, length)
        if key not in cache:
            prev = prefix(rels[:-1], length)
            pos = len(rels) - 1
            cache[key] = walker.step(prev, rels[-1], walker.absorbs(pos, length))
        return cache[key]

    out = []
    for rule in rules:
        rels = rule.relations
        length = len(rels)
        pre = prefix(rels[:-1], length)
        out.append(
            walker.step(pre, rels[-1], walker.absorbs(length - 1, length), indicator=kind == "F")
        )
    return out


def pair_features(
    g: HeteroGraph,
    pairs: Sequence[tuple[int, int]],
    rules: Sequence[Rule],
    cfg: MinerConfig | None = None,
    kind: str = "x",
) -> np.ndarray:
    """Dense (len(pairs) x len(rules)) feature matrix, rows aligned to ``pairs``."""
    out = np.zeros((len(pairs), len(rules)))
    if len(pairs) == 0 or len(rules) == 0:
        return out
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    sources, row_of = np.unique(arr[:, 0], return_inverse=True)
    mats = rule_reach_matrices(g, sources, rules, cfg, kind=kind)
    for j, mat in enumerate(mats):
        out[:, j] = np.asarray(mat[row_of, arr[:, 1]]).ravel()
    return out


def item_feature_matrices(
    g: HeteroGraph, rules: Sequence[Rule], cfg: MinerConfig | None = None, kind: str = "F"
) -> list[sp.csr_matrix]:
    """Per rule, an (n_items x n_items) matrix indexed by item position."""
    mats = rule_reach_matrices(g, g.items, rules, cfg, kind=kind)
    return [m[:, g.items].tocsr() for m in mats]


# -- enumeration ---------------------------------------------------------


def support_threshold(alpha: float, n_pairs: int) -> int:
    return max(1, math.ceil(alpha * n_pairs - 1e-9))


def enumerate_rules(
    g: HeteroGraph, positive_pairs: Sequence[AssociationPair | tuple[int, int]], cfg: MinerConfig | None = None
) -> list[tuple[Rule, int]]:
    """All rules of length <= beta connecting at least ceil(alpha * |pairs|) pairs.

    A pair supports a rule when the rule walk from ``a`` reaches ``b`` with
    positive probability (no self-absorption). The search expands every
    relation sequence from the set of sources simultaneously and prunes only
    sequences that reach nothing.
    """
    cfg = cfg or MinerConfig()
    if not positive_pairs:
        raise ValueError("positive_pairs must be non-empty")
    arr = []
    for p in positive_pairs:
        if isinstance(p, AssociationPair):
            if p.label != 1:
                raise ValueError("enumerate_rules expects positive pairs only")
            arr.append((p.a, p.b))
        else:
            arr.append((int(p[0]), int(p[1])))
    pairs = np.unique(np.asarray(arr, dtype=np.int64), axis=0)
    threshold = support_threshold(cfg.alpha, len(arr))
    sources, row_of = np.unique(pairs[:, 0], return_inverse=True)
    walker = Walker(g, cfg)
    ind = [walker.indicator(r.id) for r in g.relations]
    found: list[tuple[Rule, int]] = []

    def expand(reach: sp.csr_matrix, rels: tuple[int, ...]) -> None:
        for r in range(g.n_relations):
            nxt = reach @ ind[r]
            nxt = sp.csr_matrix(nxt)
            nxt.eliminate_zeros()
            if nxt.nnz == 0:
                continue
            nxt.data[:] = 1.0
            seq = rels + (r,)
            support = int(np.count_nonzero(np.asarray(nxt[row_of, pairs[:, 1]]).ravel()))
            if support >= threshold:
                found.append((Rule(seq), support))
            if len(seq) < cfg.beta:
                expand(nxt, seq)

    expand(_one_hot_rows(sources, g.n_nodes), ())
    found.sort(key=lambda t: (-t[1], len(t[0]), t[0].relations))
    logger.info("enumerated %d rules over %d pairs (threshold %d)", len(found), len(pairs), threshold)
    return found


def combine_rule_sets(per_assoc: Mapping[str, Sequence[tuple[Rule, int]]]) -> list[MinedRule]:
    """Concatenate per-association rule lists into one deduplicated global list.

    Order is by association (in mapping order) then by each list's own order;
    a rule seen again only gains another association tag.
    """
    merged: dict[Rule, MinedRule] = {}
    for assoc, rules in per_assoc.items():
        for rule, support in rules:
            entry = merged.get(rule)
            if entry is None:
                merged[rule] = MinedRule(rule, support, (assoc,), support_by_assoc={assoc: support})
            else:
                entry.assocs = entry.assocs + (assoc,)
                entry.support_by_assoc[assoc] = support
                entry.support = max(entry.support, support)
    return list(merged.values())


# -- rules file ----------------------------------------------------------


def write_rules(rules: Sequence[MinedRule], g: HeteroGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for mr in rules:
            obj = {
                "relations": mr.rule.names(g),
                "support": mr.support,
                "assocs": list(mr.assocs),
                "weight": mr.weight,
            }
            if mr.chi2 is not None:
                obj["chi2"] = mr.chi2
            if mr.support_by_assoc:
                obj["support_by_assoc"] = mr.support_by_assoc
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_rules(path: str | Path, g: HeteroGraph) -> list[MinedRule]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rule = Rule.from_names(g, obj["relations"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: bad rule record ({exc})") from None
            out.append(
                MinedRule(
                    rule,
                    int(obj.get("support", 0)),
                    tuple(obj.get("assocs", ())),
                    obj.get("weight"),
                    obj.get("chi2"),
                    dict(obj.get("support_by_assoc", {})),
                )
            )
    return out
