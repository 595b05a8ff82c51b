"""Rule-augmented recommenders: score combiners, objectives, training and explanations.

The combined score of user ``u`` and candidate ``i`` is the base score plus a
weighted sum of rule features between ``i`` and the user's history. The
feature of rule ``R`` for history item ``k`` is the prefix walk mass times
the last-step indicator (``kind="F"`` in :mod:`rulerec.rulemine`); features
run from the candidate to the history item unless ``flip`` is set.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .kgstore import HeteroGraph
from .recmodels import (
    BPRMF,
    Grad,
    PairwiseModel,
    TrainConfig,
    TrainData,
    bpr_pair_loss,
    iterate_triples,
    load_checkpoint,
    make_model,
    model_from_state,
    save_checkpoint,
)
from .rulemine import MinerConfig, Rule, Walker, item_feature_matrices
from .ruleselect import LabeledPairSet, SelectionObjective, selection_loss

logger = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    HARD = "hard"
    EQUAL = "equal"
    SELECTION = "selection"
    LEARN = "learn"
    MULTI = "multi"

    @classmethod
    def parse(cls, text: "str | Variant") -> "Variant":
        if isinstance(text, Variant):
            return text
        aliases = {
            "hard_filter": "hard",
            "equal_weight": "equal",
            "selection_weight": "selection",
            "learn_together": "learn",
            "multi_task": "multi",
            "multitask": "multi",
        }
        return cls(aliases.get(text, text))

    @property
    def trainable(self) -> bool:
        return self in (Variant.LEARN, Variant.MULTI)


DEFAULT_FIXED_SCALE = 0.2


@dataclass
class Combiner:
    variant: Variant
    w: np.ndarray | None
    scale: float = 1.0
    lam: float = 0.5
    objective: SelectionObjective = SelectionObjective.SIGMOID
    assoc_bias: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.variant = Variant.parse(self.variant)
        self.objective = SelectionObjective(self.objective)
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.variant is not Variant.HARD and self.w is None:
            raise ValueError(f"variant {self.variant.value} needs a weight vector")

    @classmethod
    def create(
        cls,
        variant: Variant | str,
        n_rules: int,
        selection_w: np.ndarray | None = None,
        scale: float | None = None,
        lam: float = 0.5,
        objective: SelectionObjective | str = SelectionObjective.SIGMOID,
    ) -> "Combiner":
        """Default weights per variant (trainable ones start at zero)."""
        variant = Variant.parse(variant)
        if variant is not Variant.HARD and n_rules == 0:
            raise ValueError("rule-using variants need a non-empty rule set")
        if variant is Variant.HARD:
            w = None
        elif variant is Variant.EQUAL:
            w = np.full(n_rules, 1.0 / n_rules)
        elif variant is Variant.SELECTION:
            if selection_w is None or len(selection_w) != n_rules:
                raise ValueError("selection variant needs weights aligned to the rule list")
            w = np.array(selection_w, dtype=np.float64)
        else:
            w = np.zeros(n_rules)
        if scale is None:
            scale = 1.0 if variant.trainable else DEFAULT_FIXED_SCALE
        return cls(variant, w, scale, lam, SelectionObjective(objective))


# -- features -------------------------------------------------------------


class RuleFeatures:
    """Item-to-item rule features over a fixed item universe.

    ``universe`` lists item node ids; the model's item index ``j`` refers to
    ``universe[j]``.
    """

    def __init__(
        self,
        g: HeteroGraph,
        rules: Sequence[Rule],
        cfg: MinerConfig | None = None,
        universe: Sequence[int] | None = None,
        flip: bool = False,
    ) -> None:
        self.g = g
        self.rules = list(rules)
        self.cfg = cfg or MinerConfig()
        self.flip = flip
        self.universe = np.asarray(g.items if universe is None else universe, dtype=np.int64)
        cols = g.item_index(self.universe)
        mats = item_feature_matrices(g, self.rules, self.cfg, kind="F") if self.rules else []
        self.mats: list[sp.csr_matrix] = []
        for m in mats:
            m = m[cols][:, cols].tocsr()
            self.mats.append(m.T.tocsr() if flip else m)
        n = len(self.universe)
        self.self_feature = np.zeros((n, len(self.rules)))
        for r, m in enumerate(self.mats):
            self.self_feature[:, r] = m.diagonal()

    @property
    def n_rules(self) -> int:
        return len(self.rules)

    @property
    def n_items(self) -> int:
        return len(self.universe)

    def pair_matrix(self, i: int, history: Sequence[int]) -> np.ndarray:
        """(len(history) x n_rules) features from candidate ``i`` to each history item."""
        hist = np.asarray(history, dtype=np.int64)
        out = np.zeros((len(hist), self.n_rules))
        for r, m in enumerate(self.mats):
            out[:, r] = m[i].toarray().ravel()[hist]
        return out

    def history_features(self, i: int, history: Iterable[int]) -> np.ndarray:
        """Sum over distinct history items other than ``i`` itself."""
        hist = sorted({int(k) for k in history} - {int(i)})
        if not hist:
            return np.zeros(self.n_rules)
        return self.pair_matrix(i, hist).sum(axis=0)

    def user_tensor(self, histories: Mapping[int, Iterable[int]], n_users: int) -> np.ndarray:
        """Dense (n_users x n_items x n_rules) tensor of history-summed features."""
        n = self.n_items
        rows, cols = [], []
        for u, items in histories.items():
            for k in sorted({int(v) for v in items}):
                rows.append(u)
                cols.append(k)
        H = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_users, n))
        Hd = H.toarray()
        out = np.zeros((n_users, n, self.n_rules))
        for r, m in enumerate(self.mats):
            # sum_k H[u, k] * F[i, k], minus the candidate's own entry
            out[:, :, r] = np.asarray((H @ m.T).todense()) - Hd * self.self_feature[:, r][None, :]
        return out


def histories_from_data(data: TrainData) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for u, i in data.positives:
        out.setdefault(int(u), []).append(int(i))
    return out


# -- model ---------------------------------------------------------------


class RuleRecModel:
    """A base recommender combined with rule features through a :class:`Combiner`."""

    def __init__(
        self,
        base: PairwiseModel,
        rules: Sequence[Rule],
        combiner: Combiner,
        features: RuleFeatures,
        histories: Mapping[int, Iterable[int]],
        rule_names: Sequence[Sequence[str]] | None = None,
    ) -> None:
        if combiner.w is not None and len(combiner.w) != len(rules):
            raise ValueError("rule weight vector must match the rule list")
        self.base = base
        self.rules = list(rules)
        self.combiner = combiner
        self.features = features
        self.histories = {int(u): sorted({int(i) for i in items}) for u, items in histories.items()}
        self.G = features.user_tensor(self.histories, base.n_users)
        self.rule_names = [list(n) for n in rule_names] if rule_names is not None else [
            r.names(features.g) for r in self.rules
        ]
        self.meta: dict = {}

    @property
    def w(self) -> np.ndarray | None:
        return self.combiner.w

    def feature_vector(self, u: int, i: int, history: Iterable[int] | None = None) -> np.ndarray:
        if history is None:
            return self.G[u, i]
        return self.features.history_features(i, history)

    def combined_score(self, u: int, i: int, history: Iterable[int] | None = None) -> float:
        s = self.base.score(u, i)
        f = self.feature_vector(u, i, history)
        c = self.combiner
        if c.variant is Variant.HARD:
            return s * float(f.sum() >= 1.0)
        return s + c.scale * float(c.w @ f)

    def scores(self, u: int, items: np.ndarray, history: Iterable[int] | None = None) -> np.ndarray:
        items = np.asarray(items, dtype=np.int64)
        base = self.base.scores(u, items)
        if history is None:
            f = self.G[u, items]
        else:
            f = np.array([self.features.history_features(i, history) for i in items]).reshape(
                len(items), self.features.n_rules
            )
        c = self.combiner
        if c.variant is Variant.HARD:
            return base * (f.sum(axis=1) >= 1.0)
        return base + c.scale * (f @ c.w)

    def score(self, u: int, i: int) -> float:
        return self.combined_score(u, i)

    # gradients of the combined score
    def score_grad(self, u: int, i: int) -> tuple[float, Grad]:
        s, grads = self.base.score_grad(u, i)
        f = self.G[u, i]
        c = self.combiner
        if c.variant is Variant.HARD:
            gate = float(f.sum() >= 1.0)
            return s * gate, [(k, r, gate * g) for k, r, g in grads]
        total = s + c.scale * float(c.w @ f)
        if c.variant.trainable:
            grads = grads + [("w", None, c.scale * f)]
        return total, grads

    def triple_loss_grad(self, u: int, p: int, n: int, l2: float) -> tuple[float, Grad]:
        sp_, gp = self.score_grad(u, p)
        sn_, gn = self.score_grad(u, n)
        loss, dp, dn = bpr_pair_loss(sp_, sn_)
        grads: Grad = [(k, r, dp * g) for k, r, g in gp] + [(k, r, dn * g) for k, r, g in gn]
        if l2:
            reg, rg = self.base.l2_terms(u, (p, n))
            loss += l2 * reg
            grads += [(k, r, l2 * g) for k, r, g in rg]
        return loss, grads

    def apply(self, grads: Grad, lr: float) -> None:
        base = [t for t in grads if t[0] != "w"]
        self.base.apply(base, lr)
        for name, _, g in grads:
            if name == "w":
                self.combiner.w -= lr * g

    def sgd_step(self, u: int, p: int, n: int, lr: float, l2: float) -> float:
        c = self.combiner
        if isinstance(self.base, BPRMF) and c.variant is not Variant.HARD:
            return self._bprmf_step(u, p, n, lr, l2)
        loss, grads = self.triple_loss_grad(u, p, n, l2)
        self.apply(grads, lr)
        return loss

    def _bprmf_step(self, u: int, p: int, n: int, lr: float, l2: float) -> float:
        # same arithmetic as triple_loss_grad + apply, without the generic bookkeeping
        U, I = self.base.params["U"], self.base.params["I"]
        c = self.combiner
        uu, ip, in_ = U[u].copy(), I[p].copy(), I[n].copy()
        fp, fn = self.G[u, p], self.G[u, n]
        s_p = uu @ ip + c.scale * float(c.w @ fp)
        s_n = uu @ in_ + c.scale * float(c.w @ fn)
        loss, dp, dn = bpr_pair_loss(s_p, s_n)
        if l2:
            loss += l2 * float(uu @ uu + ip @ ip + in_ @ in_)
        U[u] -= lr * (dp * ip + dn * in_ + 2.0 * l2 * uu)
        I[p] -= lr * (dp * uu + 2.0 * l2 * ip)
        I[n] -= lr * (dn * uu + 2.0 * l2 * in_)
        if c.variant.trainable:
            c.w -= lr * (dp * c.scale * fp + dn * c.scale * fn)
        return loss

    def explain(
        self,
        u: int,
        i: int,
        history: Iterable[int] | None = None,
        top_r: int = 5,
        with_path: bool = True,
    ) -> list["Explanation"]:
        """Rules ranked by their contribution to the combined score of ``i``."""
        c = self.combiner
        if c.variant is Variant.HARD or c.w is None:
            raise ValueError("explanations need a weighted rule variant")
        hist = sorted({int(k) for k in (self.histories.get(u, []) if history is None else history)} - {int(i)})
        if not hist:
            return []
        per_pair = self.features.pair_matrix(i, hist)
        totals = per_pair.sum(axis=0)
        contrib = c.scale * c.w * totals
        order = np.lexsort((np.arange(len(contrib)), -contrib))
        out = []
        for r in order:
            if contrib[r] == 0.0:
                continue
            k = int(np.argmax(per_pair[:, r]))
            witness = hist[k]
            path = None
            if with_path:
                path = witness_path(
                    self.features.g,
                    int(self.features.universe[witness if self.features.flip else i]),
                    int(self.features.universe[i if self.features.flip else witness]),
                    self.rules[r],
                    self.features.cfg,
                )
            out.append(
                Explanation(
                    item=int(i),
                    rule=self.rule_names[r],
                    rule_index=int(r),
                    witness_history_item=int(witness),
                    contribution=float(contrib[r]),
                    path=path,
                )
            )
            if len(out) >= top_r:
                break
        return out

    def digest_rules(self) -> str:
        return rules_digest(self.rule_names)


def rules_digest(rule_names: Sequence[Sequence[str]]) -> str:
    blob = json.dumps([list(r) for r in rule_names], ensure_ascii=False)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Explanation:
    item: int
    rule: list[str]
    rule_index: int
    witness_history_item: int
    contribution: float
    path: list[str] | None = None

    def to_dict(self) -> dict:
        return {
            "relations": self.rule,
            "witness": self.witness_history_item,
            "contribution": self.contribution,
            "path": self.path,
        }


def witness_path(
    g: HeteroGraph, src: int, dst: int, rule: Rule, cfg: MinerConfig | None = None
) -> list[str] | None:
    """Labels of one concrete node path from ``src`` to ``dst`` conforming to ``rule``.

    Under self-absorption a walk that is already at ``dst`` may stop early;
    the returned path then has fewer hops than the rule.
    """
    walker = Walker(g, cfg)
    rels = rule.relations
    length = len(rels)

    def search(node: int, pos: int, trail: list[int]) -> list[int] | None:
        if pos == length:
            return trail if node == dst else None
        absorb = walker.absorbs(pos, length)
        if absorb:
            found = search(node, pos + 1, trail)
            if found is not None:
                return found
        mat = walker.indicator(rels[pos])
        for nxt in mat.indices[mat.indptr[node] : mat.indptr[node + 1]]:
            if absorb and nxt == node:
                continue
            found = search(int(nxt), pos + 1, trail + [int(nxt)])
            if found is not None:
                return found
        return None

    nodes = search(src, 0, [src])
    if nodes is None:
        return None
    return [g.nodes[n].label for n in nodes]


# -- objectives ------------------------------------------------------------


def recommendation_objective(
    m: RuleRecModel | PairwiseModel, triples: Sequence[tuple[int, int, int]], l2: float
) -> tuple[float, Grad]:
    """Pairwise loss summed over fixed (user, positive, negative) triples."""
    total = 0.0
    grads: Grad = []
    for u, p, n in triples:
        loss, g = m.triple_loss_grad(u, p, n, l2)
        total += loss
        grads += g
    return total, grads


def selection_term(
    w: np.ndarray,
    objective: SelectionObjective | str,
    labeled: Sequence[LabeledPairSet],
    assoc_bias: Mapping[str, float],
) -> tuple[float, np.ndarray, dict[str, float]]:
    """Rule-learning loss: per association, the selection objective averaged over pairs."""
    total = 0.0
    gw = np.zeros_like(w)
    gb: dict[str, float] = {}
    for data in labeled:
        key = data.assoc or ""
        x = data.features()
        n = len(data)
        loss, dw, db = selection_loss(objective, w, assoc_bias.get(key, 0.0), x, data.labels)
        total += loss / n
        gw += dw / n
        gb[key] = gb.get(key, 0.0) + db / n
    return total, gw, gb


def multitask_objective(
    m: RuleRecModel,
    triples: Sequence[tuple[int, int, int]],
    labeled: Sequence[LabeledPairSet],
    lam: float,
    objective: SelectionObjective | str | None = None,
    l2: float = 0.0,
) -> tuple[float, Grad, dict[str, float]]:
    """``O_r + lam * O_l`` with the rule weights shared between both terms."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    c = m.combiner
    if not c.variant.trainable:
        raise ValueError("multi-task objective needs trainable rule weights")
    objective = c.objective if objective is None else SelectionObjective(objective)
    loss_r, grads = recommendation_objective(m, triples, l2)
    loss_l, gw, gb = selection_term(c.w, objective, labeled, c.assoc_bias)
    grads = grads + [("w", None, lam * gw)]
    return loss_r + lam * loss_l, grads, {k: lam * v for k, v in gb.items()}


# -- training --------------------------------------------------------------


@dataclass
class RuleTrainConfig:
    base: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "multitask"
    lam: float = 0.5
    objective: SelectionObjective = SelectionObjective.SIGMOID

    def __post_init__(self) -> None:
        if self.mode not in ("two_step", "multitask"):
            raise ValueError(f"mode must be two_step or multitask, got {self.mode!r}")
        self.objective = SelectionObjective(self.objective)


def build_model(
    kind: str,
    data: TrainData,
    rules: Sequence[Rule],
    features: RuleFeatures,
    combiner: Combiner,
    cfg: TrainConfig,
    rule_names: Sequence[Sequence[str]] | None = None,
) -> RuleRecModel:
    base = make_model(kind, data.n_users, data.n_items, cfg)
    return RuleRecModel(base, rules, combiner, features, histories_from_data(data), rule_names)


def train(
    m: RuleRecModel,
    data: TrainData,
    cfg: RuleTrainConfig | None = None,
    labeled: Sequence[LabeledPairSet] = (),
    log: list[dict] | None = None,
    on_epoch=None,
) -> RuleRecModel:
    """Train a rule-augmented model in place and return it.

    Each epoch makes one SGD pass over the recommendation triples. In
    ``multitask`` mode (lambda > 0) it then takes one gradient step on
    ``lam * O_l`` for the shared weights and per-association biases.
    ``on_epoch(epoch, model)`` is called after every epoch.
    """
    cfg = cfg or RuleTrainConfig()
    c = m.combiner
    if cfg.mode == "multitask":
        if c.variant is not Variant.MULTI:
            raise ValueError("multitask mode needs the multi variant")
        if cfg.lam and not labeled:
            raise ValueError("multitask mode needs labeled association pairs")
        c.lam = cfg.lam
        c.objective = cfg.objective
    elif c.variant is Variant.MULTI:
        raise ValueError("the multi variant is trained in multitask mode")
    if m.features.n_rules == 0:
        raise ValueError("rule-augmented training needs a non-empty rule set")
    bc = cfg.base
    rng = np.random.default_rng([bc.seed, 1])
    for data_set in labeled:
        c.assoc_bias.setdefault(data_set.assoc or "", 0.0)
    # the filter gate is piecewise constant; the base learns on its own scores
    stepper = m.base if c.variant is Variant.HARD else m
    for epoch in range(bc.epochs):
        total, count = 0.0, 0
        for u, p, n in iterate_triples(data, bc, rng):
            total += stepper.sgd_step(u, p, n, bc.lr, bc.l2_reg)
            count += 1
        entry = {"epoch": epoch, "loss_r": total / max(count, 1)}
        if cfg.mode == "multitask" and cfg.lam:
            loss_l, gw, gb = selection_term(c.w, c.objective, labeled, c.assoc_bias)
            c.w -= bc.lr * cfg.lam * gw
            for k, v in gb.items():
                c.assoc_bias[k] -= bc.lr * cfg.lam * v
            entry["loss_l"] = loss_l
        if not np.isfinite(entry["loss_r"]) or (c.w is not None and not np.all(np.isfinite(c.w))):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
        if log is not None:
            log.append(entry)
        if on_epoch is not None:
            on_epoch(epoch, m)
    m.meta.update({"mode": cfg.mode, "variant": c.variant.value, "lambda": cfg.lam,
                   "objective": c.objective.value})
    return m


def recommend_topk(
    m: RuleRecModel | PairwiseModel,
    u: int,
    candidates: Sequence[int],
    k: int,
    history: Iterable[int] | None = None,
) -> list[tuple[int, float]]:
    """Top ``k`` candidates by score; equal scores go to the lower item index first."""
    cand = np.asarray(candidates, dtype=np.int64)
    if len(cand) == 0:
        raise ValueError("candidates must be non-empty")
    if isinstance(m, RuleRecModel):
        scores = m.scores(u, cand, history)
    else:
        scores = m.scores(u, cand)
    order = np.lexsort((cand, -scores))[:k]
    return [(int(cand[j]), float(scores[j])) for j in order]


def combined_score(m: RuleRecModel, u: int, i: int, history: Iterable[int] | None = None) -> float:
    return m.combined_score(u, i, history)


def explain(m: RuleRecModel, u: int, i: int, history: Iterable[int] | None = None, top_r: int = 5,
            with_path: bool = True) -> list[Explanation]:
    return m.explain(u, i, history, top_r, with_path)


# -- checkpoints -------------------------------------------------------------


def save_rulerec(m: RuleRecModel, path: str | Path, extra: Mapping | None = None) -> None:
    params = dict(m.base.params)
    c = m.combiner
    if c.w is not None:
        params["__w__"] = c.w
    meta = {
        "kind": m.base.kind,
        "model": m.base.config(),
        "combiner": {
            "variant": c.variant.value,
            "scale": c.scale,
            "lambda": c.lam,
            "objective": c.objective.value,
            "assoc_bias": c.assoc_bias,
        },
        "rules": m.rule_names,
        "rules_digest": m.digest_rules(),
        "flip": m.features.flip,
        **m.meta,
        **(extra or {}),
    }
    save_checkpoint(path, params, meta)


def load_rulerec(
    path: str | Path,
    g: HeteroGraph,
    histories: Mapping[int, Iterable[int]],
    cfg: MinerConfig | None = None,
    universe: Sequence[int] | None = None,
) -> RuleRecModel:
    params, meta = load_checkpoint(path)
    w = params.pop("__w__", None)
    base = model_from_state(params, meta)
    rule_names = meta["rules"]
    if rules_digest(rule_names) != meta["rules_digest"]:
        raise ValueError("checkpoint rule list does not match its digest")
    rules = [Rule.from_names(g, names) for names in rule_names]
    cm = meta["combiner"]
    combiner = Combiner(
        Variant(cm["variant"]), None if w is None else np.array(w, dtype=np.float64),
        cm["scale"], cm["lambda"], SelectionObjective(cm["objective"]), dict(cm["assoc_bias"]),
    )
    features = RuleFeatures(g, rules, cfg, universe, flip=bool(meta.get("flip", False)))
    m = RuleRecModel(base, rules, combiner, features, histories, rule_names)
    m.meta = {k: v for k, v in meta.items() if k not in ("model", "combiner", "rules", "version")}
    return m
