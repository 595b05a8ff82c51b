"""In-process orchestration of the mine → select → train → evaluate chain."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .combine import (
    Combiner,
    RuleFeatures,
    RuleRecModel,
    RuleTrainConfig,
    Variant,
    build_model,
    train,
)
from .evaluation import EvalSplit
from .kgstore import AssociationPair, HeteroGraph
from .recmodels import PairwiseModel, TrainConfig, train_base
from .rulemine import MinedRule, MinerConfig, Rule, combine_rule_sets, enumerate_rules
from .ruleselect import (
    LabeledPairSet,
    SelectionObjective,
    chi_square_scores,
    sample_negative_pairs,
    select_top_n,
    train_selection_weights,
)

logger = logging.getLogger(__name__)


def by_assoc(pairs: Sequence[AssociationPair]) -> dict[str, list[AssociationPair]]:
    out: dict[str, list[AssociationPair]] = {}
    for p in pairs:
        out.setdefault(p.assoc, []).append(p)
    return out


def mine_rules(
    g: HeteroGraph, associations: Sequence[AssociationPair], cfg: MinerConfig | None = None
) -> list[MinedRule]:
    """Enumerate rules per association on the positive pairs and merge them."""
    cfg = cfg or MinerConfig()
    per: dict[str, list[tuple[Rule, int]]] = {}
    for assoc, pairs in sorted(by_assoc(associations).items()):
        pos = [p for p in pairs if p.label == 1]
        if pos:
            per[assoc] = enumerate_rules(g, pos, cfg)
    return combine_rule_sets(per)


def labeled_sets(
    g: HeteroGraph,
    associations: Sequence[AssociationPair],
    rules: Sequence[Rule],
    cfg: MinerConfig | None = None,
    ratio: float = 1.0,
    seed: int = 0,
) -> list[LabeledPairSet]:
    """Per association: its positives plus negatives, with x-features for ``rules``.

    Negatives listed in the associations file are used when present;
    otherwise they are sampled.
    """
    all_pos = [p for p in associations if p.label == 1]
    out = []
    for k, (assoc, pairs) in enumerate(sorted(by_assoc(associations).items())):
        pos = [p for p in pairs if p.label == 1]
        neg = [p for p in pairs if p.label == 0]
        if not pos:
            continue
        if neg:
            data = LabeledPairSet(
                [(p.a, p.b) for p in pos + neg], [1] * len(pos) + [0] * len(neg), assoc
            )
        else:
            data = sample_negative_pairs(g, pos, ratio, seed + k, exclude=all_pos)
        out.append(data.with_features(g, rules, cfg))
    return out


@dataclass
class Selection:
    indices: list[int]
    chi2: dict[str, np.ndarray]
    top: dict[str, list[int]]
    weights: np.ndarray | None = None


def select_rules(
    mined: Sequence[MinedRule],
    labeled: Sequence[LabeledPairSet],
    top_n: int = 50,
    objective: SelectionObjective | str | None = SelectionObjective.SIGMOID,
    seed: int = 0,
    epochs: int = 200,
    lr: float = 0.05,
) -> Selection:
    """Chi-square top-n per association (among rules mined for it), merged in global order.

    Also fills ``chi2`` on every mined rule (max over its associations) and,
    when ``objective`` is given, trains constrained weights over the selected
    rules on all associations pooled; those land in ``weight``.
    """
    chi2: dict[str, np.ndarray] = {}
    top: dict[str, list[int]] = {}
    chosen: set[int] = set()
    best = np.zeros(len(mined))
    for data in labeled:
        assoc = data.assoc or ""
        scores = chi_square_scores(data)
        chi2[assoc] = scores
        own = [k for k, mr in enumerate(mined) if assoc in mr.assocs]
        picked = [own[j] for j in select_top_n(scores[own], top_n)] if own else []
        top[assoc] = picked
        chosen.update(picked)
        for k in own:
            best[k] = max(best[k], scores[k])
    for k, mr in enumerate(mined):
        mr.chi2 = float(best[k])
    indices = sorted(chosen)
    sel = Selection(indices, chi2, top)
    if objective is not None and indices:
        pooled = pooled_set(labeled, indices)
        rw = train_selection_weights(pooled, objective, lr=lr, epochs=epochs, seed=seed)
        sel.weights = rw.w
        for j, k in enumerate(indices):
            mined[k].weight = float(rw.w[j])
    return sel


def pooled_set(labeled: Sequence[LabeledPairSet], columns: Sequence[int]) -> LabeledPairSet:
    cols = list(columns)
    return LabeledPairSet(
        np.vstack([d.pairs for d in labeled]),
        np.concatenate([d.labels for d in labeled]),
        None,
        np.vstack([d.features()[:, cols] for d in labeled]),
    )


def restrict(labeled: Sequence[LabeledPairSet], columns: Sequence[int]) -> list[LabeledPairSet]:
    cols = list(columns)
    return [LabeledPairSet(d.pairs, d.labels, d.assoc, d.features()[:, cols]) for d in labeled]


@dataclass
class ExperimentConfig:
    base: str = "bprmf"
    variant: str = "multi"
    lam: float = 0.5
    objective: str = "sigmoid"
    scale: float | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    flip: bool = False


def fit(
    g: HeteroGraph,
    split: EvalSplit,
    rules: Sequence[Rule] | None,
    exp: ExperimentConfig,
    labeled: Sequence[LabeledPairSet] = (),
    selection_w: np.ndarray | None = None,
    miner: MinerConfig | None = None,
    features: RuleFeatures | None = None,
    log: list | None = None,
) -> PairwiseModel | RuleRecModel:
    """Train a plain base model (``variant="none"``) or a rule-augmented one."""
    data = split.train_data()
    if exp.variant == "none":
        return train_base(exp.base, data, exp.train, log)
    variant = Variant.parse(exp.variant)
    rules = list(rules or [])
    if features is None:
        features = RuleFeatures(g, rules, miner, split.universe, flip=exp.flip)
    combiner = Combiner.create(variant, len(rules), selection_w, exp.scale, exp.lam, exp.objective)
    m = build_model(exp.base, data, rules, features, combiner, exp.train)
    mode = "multitask" if variant is Variant.MULTI else "two_step"
    rcfg = RuleTrainConfig(exp.train, mode, exp.lam, SelectionObjective(exp.objective))
    return train(m, data, rcfg, labeled if mode == "multitask" else (), log)


def history_map(split: EvalSplit) -> Mapping[int, list[int]]:
    return split.train_histories()
