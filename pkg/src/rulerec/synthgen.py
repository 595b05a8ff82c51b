"""Synthetic worlds with planted rules, used as ground truth for the pipeline.

A planted rule is a relation template. Palindromic templates (second half is
the inverse of the first, e.g. ``made_by, made_by⁻¹``) are realised by
grouping items around a shared centre entity, so every pair inside a group is
connected by the rule. Other templates are realised by a fresh entity chain
per designated pair.

Two distractor mechanisms make selection non-trivial: hub entities that
touch a large share of items regardless of associations, and a "spurious"
relation that links a fraction of positive pairs and many random pairs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .kgstore import (
    INVERSE_SUFFIX,
    AssociationPair,
    Interaction,
    InteractionLog,
    NodeKind,
    NodeRef,
    build_graph,
    inverse_name,
    write_associations,
    write_graph,
    write_interactions,
)

logger = logging.getLogger(__name__)


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class PlantedRule:
    template: tuple[str, ...]
    assoc: str
    group_size: int = 4
    coverage: float = 0.5
    entity_types: tuple[str, ...] = ()

    @property
    def palindromic(self) -> bool:
        t = self.template
        if len(t) % 2:
            return False
        half = len(t) // 2
        return all(t[len(t) - 1 - j] == inverse_name(t[j]) for j in range(half))


DEFAULT_PLANTED = (
    PlantedRule(("made_by", "made_by" + INVERSE_SUFFIX), "ALB", 4, 0.5, ("brand",)),
    PlantedRule(
        ("linked_to", "runs_os", "runs_os" + INVERSE_SUFFIX, "linked_to" + INVERSE_SUFFIX),
        "BT", 4, 0.5, ("product", "os"),
    ),
    PlantedRule(
        ("linked_to", "part_of", "part_of" + INVERSE_SUFFIX, "linked_to" + INVERSE_SUFFIX),
        "ALV", 4, 0.5, ("product", "series"),
    ),
)


@dataclass
class SynthConfig:
    n_items: int = 300
    n_entities: int = 500
    n_users: int = 200
    n_relations: int = 8
    planted_rules: tuple[PlantedRule, ...] = DEFAULT_PLANTED
    pairs_per_assoc: int = 150
    assoc_noise: float = 0.1
    noise_disconnected: bool = False
    n_distractors: int = 2
    n_hubs: int = 4
    hub_item_prob: float = 0.8
    n_tags: int = 30
    spurious_pair_prob: float = 0.3
    spurious_item_prob: float = 0.2
    history_len: tuple[int, int] = (5, 12)
    p_rule: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("assoc_noise", "hub_item_prob", "spurious_pair_prob", "spurious_item_prob", "p_rule"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("n_items", "n_entities", "n_users", "n_relations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.n_distractors <= 2:
            raise ValueError("n_distractors must be 0, 1 or 2")
        lo, hi = self.history_len
        if lo < 2 or hi < lo:
            raise ValueError("history_len must satisfy 2 <= lo <= hi")
        self.planted_rules = tuple(
            p if isinstance(p, PlantedRule) else PlantedRule(**p) for p in self.planted_rules
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["planted_rules"] = [asdict(p) for p in self.planted_rules]
        return d


@dataclass
class Manifest:
    planted_rules: list[dict]
    pairs: list[dict]
    interactions: list[str | None]
    groups: dict[str, list[list[int]]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SynthWorld:
    nodes: list[NodeRef]
    edges: list[tuple[int, str, int]]
    associations: list[AssociationPair]
    interactions: InteractionLog
    manifest: Manifest

    def graph(self, inverse: bool = True):
        return build_graph(self.nodes, self.edges, inverse=inverse)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "nodes": out / "nodes.tsv",
            "edges": out / "edges.tsv",
            "associations": out / "associations.tsv",
            "interactions": out / "interactions.tsv",
            "manifest": out / "manifest.json",
        }
        write_graph(self.graph(inverse=False), paths["nodes"], paths["edges"])
        write_associations(self.associations, paths["associations"])
        write_interactions(self.interactions, paths["interactions"])
        paths["manifest"].write_text(
            json.dumps(self.manifest.to_dict(), indent=1, sort_keys=True), encoding="utf-8"
        )
        return paths


class _Builder:
    def __init__(self, cfg: SynthConfig) -> None:
        self.cfg = cfg
        self.nodes: list[NodeRef] = [
            NodeRef(i, NodeKind.ITEM, f"item_{i}") for i in range(cfg.n_items)
        ]
        self.edges: list[tuple[int, str, int]] = []
        self.relations: list[str] = []

    def entity(self, etype: str) -> int:
        if len(self.nodes) - self.cfg.n_items >= self.cfg.n_entities:
            raise InfeasibleConfig(
                f"structure needs more than n_entities={self.cfg.n_entities} entities"
            )
        nid = len(self.nodes)
        self.nodes.append(NodeRef(nid, NodeKind.ENTITY, f"{etype}_{nid}", etype))
        return nid

    def link(self, src: int, rel: str, dst: int) -> None:
        """Add an edge for a template step; ``r⁻¹`` steps are stored reversed."""
        base = rel[: -len(INVERSE_SUFFIX)] if rel.endswith(INVERSE_SUFFIX) else rel
        if base not in self.relations:
            self.relations.append(base)
        if rel.endswith(INVERSE_SUFFIX):
            self.edges.append((dst, base, src))
        else:
            self.edges.append((src, base, dst))


def generate(cfg: SynthConfig | None = None) -> SynthWorld:
    """Build a world; identical configs give identical outputs."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    b = _Builder(cfg)
    n = cfg.n_items
    groups_by_rule: dict[str, list[list[int]]] = {}
    partner: dict[int, dict[int, int]] = {}  # item -> {partner item: rule index}
    pair_pool: list[list[tuple[int, int]]] = []
    shared_first: dict[tuple[str, int], int] = {}

    for ridx, pr in enumerate(cfg.planted_rules):
        key = "->".join(pr.template)
        pool: list[tuple[int, int]] = []
        types = list(pr.entity_types) or ["entity"]
        if pr.palindromic:
            half = len(pr.template) // 2
            n_members = int(round(pr.coverage * n))
            n_groups = max(1, n_members // pr.group_size)
            members = rng.permutation(n)[: n_groups * pr.group_size]
            groups = [sorted(int(v) for v in members[g * pr.group_size : (g + 1) * pr.group_size])
                      for g in range(n_groups)]
            if any(len(gr) < 2 for gr in groups):
                raise InfeasibleConfig("planted groups need at least two items")
            for gr in groups:
                centre = b.entity(types[min(half - 1, len(types) - 1)])
                for item in gr:
                    node = item
                    for step in range(half):
                        rel = pr.template[step]
                        if step == half - 1:
                            nxt = centre
                        else:
                            # first-hop entities are shared across rules with the same first relation
                            ck = (rel, item)
                            if ck not in shared_first:
                                shared_first[ck] = b.entity(types[min(step, len(types) - 1)])
                            nxt = shared_first[ck]
                        b.link(node, rel, nxt)
                        node = nxt
                for x in gr:
                    for y in gr:
                        if x != y:
                            pool.append((x, y))
                            partner.setdefault(x, {})[y] = ridx
            groups_by_rule[key] = groups
        else:
            n_pairs = max(1, int(round(pr.coverage * n / 2)))
            if n_pairs > n * (n - 1):
                raise InfeasibleConfig("more planted pairs than item pairs")
            seen = set()
            while len(pool) < n_pairs:
                x, y = (int(v) for v in rng.choice(n, size=2, replace=False))
                if (x, y) in seen:
                    continue
                seen.add((x, y))
                node = x
                for step, rel in enumerate(pr.template):
                    nxt = y if step == len(pr.template) - 1 else b.entity(types[min(step, len(types) - 1)])
                    b.link(node, rel, nxt)
                    node = nxt
                pool.append((x, y))
                partner.setdefault(x, {})[y] = ridx
            groups_by_rule[key] = [[x, y] for x, y in pool]
        pair_pool.append(pool)

    connected = {(x, y): r for x, ps in partner.items() for y, r in ps.items()}

    # associations: planted pairs, some replaced by noise pairs
    associations: list[AssociationPair] = []
    pair_truth: list[dict] = []
    used: set[tuple[int, int]] = set()
    for ridx, pr in enumerate(cfg.planted_rules):
        pool = pair_pool[ridx]
        if not pool:
            continue
        take = min(cfg.pairs_per_assoc, len(pool))
        chosen = rng.choice(len(pool), size=take, replace=False)
        for k in chosen:
            x, y = pool[int(k)]
            if rng.random() < cfg.assoc_noise:
                x, y = _random_pair(rng, n, used, connected if cfg.noise_disconnected else None, ridx)
                rule_idx = None
            else:
                rule_idx = ridx
            if (x, y) in used:
                continue
            used.add((x, y))
            associations.append(AssociationPair(x, y, pr.assoc, 1))
            pair_truth.append({"a": x, "b": y, "assoc": pr.assoc, "label": 1, "rule": rule_idx})
    positives_by_assoc: dict[str, int] = {}
    for p in associations:
        positives_by_assoc[p.assoc] = positives_by_assoc.get(p.assoc, 0) + 1
    for pr_idx, pr in enumerate(cfg.planted_rules):
        need = positives_by_assoc.get(pr.assoc, 0)
        made = 0
        while made < need:
            x, y = _random_pair(rng, n, used, connected, pr_idx)
            used.add((x, y))
            associations.append(AssociationPair(x, y, pr.assoc, 0))
            pair_truth.append({"a": x, "b": y, "assoc": pr.assoc, "label": 0, "rule": None})
            made += 1
        positives_by_assoc[pr.assoc] = 0

    # distractors
    if cfg.n_distractors >= 1 and cfg.n_hubs > 0:
        hubs = [b.entity("category") for _ in range(cfg.n_hubs)]
        for item in range(n):
            if rng.random() < cfg.hub_item_prob:
                b.link(item, "in_category", hubs[int(rng.integers(len(hubs)))])
    if cfg.n_distractors >= 2 and cfg.n_tags > 0:
        tags = [b.entity("tag") for _ in range(cfg.n_tags)]
        tagged: set[tuple[int, int]] = set()
        for p in associations:
            if p.label == 1 and rng.random() < cfg.spurious_pair_prob:
                t = tags[int(rng.integers(len(tags)))]
                for item in (p.a, p.b):
                    if (item, t) not in tagged:
                        tagged.add((item, t))
                        b.link(item, "tagged_with", t)
        for item in range(n):
            if rng.random() < cfg.spurious_item_prob:
                t = tags[int(rng.integers(len(tags)))]
                if (item, t) not in tagged:
                    tagged.add((item, t))
                    b.link(item, "tagged_with", t)

    # filler relations among entities
    n_filler = max(0, cfg.n_relations - len(b.relations))
    filler_names = [f"related_{k}" for k in range(n_filler)]
    spare = cfg.n_entities - (len(b.nodes) - n)
    fillers = [b.entity("misc") for _ in range(spare)]
    entity_ids = list(range(n, len(b.nodes)))
    if filler_names and len(entity_ids) > 1:
        n_edges = 2 * len(entity_ids)
        for _ in range(n_edges):
            x, y = (int(v) for v in rng.choice(entity_ids, size=2, replace=False))
            b.link(x, filler_names[int(rng.integers(len(filler_names)))], y)
    del fillers

    interactions, provenance = _interactions(cfg, rng, partner)
    manifest = Manifest(
        planted_rules=[{"relations": list(p.template), "assoc": p.assoc} for p in cfg.planted_rules],
        pairs=pair_truth,
        interactions=provenance,
        groups=groups_by_rule,
        config=cfg.to_dict(),
    )
    return SynthWorld(b.nodes, b.edges, associations, interactions, manifest)


def _random_pair(rng, n, used, connected, ridx):
    for _ in range(100000):
        x, y = (int(v) for v in rng.choice(n, size=2, replace=False))
        if (x, y) in used:
            continue
        if connected is not None and connected.get((x, y)) == ridx:
            continue
        return x, y
    raise InfeasibleConfig("could not draw a free random item pair")


def _interactions(cfg: SynthConfig, rng, partner) -> tuple[InteractionLog, list[str | None]]:
    records: list[Interaction] = []
    provenance: list[str | None] = []
    lo, hi = cfg.history_len
    names = ["->".join(p.template) for p in cfg.planted_rules]
    for user in range(cfg.n_users):
        length = int(rng.integers(lo, hi + 1))
        bought: list[int] = []
        for t in range(length):
            choice, source = None, None
            if bought and rng.random() < cfg.p_rule:
                prior = bought[int(rng.integers(len(bought)))]
                options = sorted(k for k in partner.get(prior, {}) if k not in bought)
                if options:
                    choice = options[int(rng.integers(len(options)))]
                    source = names[partner[prior][choice]]
            if choice is None:
                while True:
                    choice = int(rng.integers(cfg.n_items))
                    if choice not in bought:
                        break
            bought.append(choice)
            records.append(Interaction(user, choice, t, len(records)))
            provenance.append(source)
    return InteractionLog(records), provenance


def latent_factor_interactions(
    n_users: int = 200,
    n_items: int = 100,
    rank: int = 4,
    history_len: tuple[int, int] = (10, 20),
    temperature: float = 0.5,
    seed: int = 0,
) -> InteractionLog:
    """Histories drawn from a planted low-rank preference model.

    Each user picks items without replacement with probability proportional
    to ``exp(<u, v> / temperature)``; the pick order is the timestamp order.
    """
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(n_users, rank))
    V = rng.normal(size=(n_items, rank))
    records: list[Interaction] = []
    for u in range(n_users):
        logits = V @ U[u] / temperature
        length = int(rng.integers(history_len[0], history_len[1] + 1))
        p = np.exp(logits - logits.max())
        p /= p.sum()
        items = rng.choice(n_items, size=length, replace=False, p=p)
        for t, i in enumerate(items):
            records.append(Interaction(u, int(i), t, len(records)))
    return InteractionLog(records)
