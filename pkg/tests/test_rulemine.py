import math

import numpy as np
import pytest

from oracles import path_sums, random_graph, raw_adjacency
from rulerec.kgstore import AssociationPair, NodeKind, NodeRef, build_graph
from rulerec.rulemine import (
    MinedRule,
    MinerConfig,
    Rule,
    SelfAbsorb,
    combine_rule_sets,
    enumerate_rules,
    feature_F,
    feature_F_user,
    feature_x,
    one_step,
    pair_features,
    prefix_distribution,
    read_rules,
    rule_reach_matrices,
    support_threshold,
    walk_probability,
    write_rules,
)
from rulerec.ruleselect import all_rules_upto

OFF = MinerConfig(self_absorb="off")


def test_config_defaults_and_validation():
    cfg = MinerConfig()
    assert cfg.alpha == 0.01 and cfg.beta == 4
    assert cfg.self_absorb is SelfAbsorb.FINAL_ONLY and cfg.degree_cap is None
    for bad in ({"alpha": 0.0}, {"alpha": 1.5}, {"beta": 0}, {"degree_cap": 0}):
        with pytest.raises(ValueError):
            MinerConfig(**bad)


def test_toy_one_step(toy):
    r1 = toy.relation("r1").id
    assert one_step(toy, 0, r1, 2) == 0.5
    assert one_step(toy, 0, r1, 1) == 0.0
    assert one_step(toy, 4, r1, 0) == 0.0  # no out-edges
    assert one_step(toy, 4, r1, 4, SelfAbsorb.ALWAYS) == 1.0
    assert one_step(toy, 4, r1, 4, SelfAbsorb.OFF) == 0.0


@pytest.mark.parametrize("mode", ["off", "final_only", "always"])
def test_toy_walk_and_frequency(toy, mode):
    cfg = MinerConfig(self_absorb=mode)
    rule = Rule.from_names(toy, ["r1", "r2"])
    # 1/2 via c (single r2 edge) + 1/2 * 1/2 via d
    assert walk_probability(toy, 0, 1, rule, cfg) == pytest.approx(0.75, abs=1e-15)
    assert feature_x(toy, 0, 1, [rule], cfg).tolist() == pytest.approx([0.75])
    # the indicator ignores d's branching
    assert feature_F(toy, 0, 1, [rule], cfg).tolist() == pytest.approx([1.0])


def test_simple_cases(toy):
    r1 = Rule.from_names(toy, ["r1"])
    nodes = [NodeRef(0, NodeKind.ITEM, "a"), NodeRef(1, NodeKind.ITEM, "b")]
    g = build_graph(nodes, [(0, "r1", 1)])
    assert walk_probability(g, 0, 1, Rule.from_names(g, ["r1"])) == 1.0
    assert feature_F(g, 0, 1, [Rule.from_names(g, ["r1"])]).tolist() == [1.0]
    # isolated source gives zero vectors
    assert feature_x(toy, 4, 1, [r1, Rule.from_names(toy, ["r1", "r2"])], OFF).tolist() == [0.0, 0.0]
    assert feature_F(toy, 1, 0, [Rule.from_names(toy, ["r1", "r2"])], OFF).tolist() == [0.0]
    with pytest.raises(ValueError):
        Rule(())


def test_feature_alignment_under_permutation(toy, rng):
    rules = all_rules_upto(toy, 2)
    perm = rng.permutation(len(rules))
    for kind_fn in (feature_x, feature_F):
        v = kind_fn(toy, 0, 1, rules)
        w = kind_fn(toy, 0, 1, [rules[k] for k in perm])
        assert np.array_equal(v[perm], w)


def test_dp_matches_brute_force_on_random_graphs(rng):
    """Exact agreement with naive path enumeration, including inverse relations."""
    for _ in range(25):
        n = int(rng.integers(4, 15))
        nodes, edges, g = random_graph(rng, n, int(rng.integers(1, 3)), int(rng.integers(n, 2 * n)))
        adj = raw_adjacency(edges)
        names = [r.name for r in g.relations]
        rules = all_rules_upto(g, 3)
        idx = {tuple(r.names(g)): j for j, r in enumerate(rules)}
        for mode in ("off", "final_only", "always"):
            cfg = MinerConfig(self_absorb=mode)
            for kind in ("x", "F"):
                mats = rule_reach_matrices(g, np.arange(n), rules, cfg, kind=kind)
                got = np.stack([m.toarray() for m in mats])
                ref = np.zeros_like(got)
                for a in range(n):
                    for (seq, node), w in path_sums(adj, names, a, 3, mode, kind == "F").items():
                        ref[idx[seq], a, node] += w
                np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_single_pair_functions_agree_with_batch(rng):
    nodes, edges, g = random_graph(rng, 12, 2, 24)
    rules = all_rules_upto(g, 2)
    pairs = [(int(a), int(b)) for a, b in rng.integers(12, size=(10, 2))]
    X = pair_features(g, pairs, rules, kind="x")
    for row, (a, b) in enumerate(pairs):
        for j, r in enumerate(rules):
            assert X[row, j] == walk_probability(g, a, b, r)


def test_prefix_mass_conservation(rng):
    for _ in range(30):
        nodes, edges, g = random_graph(rng, 15, 3, 25)
        rels = tuple(int(r) for r in rng.integers(g.n_relations, size=3))
        for a in range(g.n_nodes):
            dist = prefix_distribution(g, a, rels, OFF)
            mass = sum(dist.values())
            assert all(v > 0 for v in dist.values())
            assert mass <= 1.0 + 1e-12
            # equality iff every visited node along the way had an out-edge
            frontier, dead = {a}, False
            for r in rels:
                nxt = set()
                for u in frontier:
                    nb = g.neighbors(u, r).tolist()
                    dead |= not nb
                    nxt.update(nb)
                frontier = nxt
            assert math.isclose(mass, 1.0, abs_tol=1e-12) == (not dead)


def test_always_mode_exceeds_normalisation():
    nodes = [NodeRef(0, NodeKind.ITEM, "a"), NodeRef(1, NodeKind.ENTITY, "e", "t")]
    g = build_graph(nodes, [(0, "r1", 1), (1, "r2", 0)])
    rule = Rule.from_names(g, ["r1", "r2"])
    # stay/move at step 1 then stay/move at step 2: a->a->a (1), a->e->a (1)
    assert walk_probability(g, 0, 0, rule, MinerConfig(self_absorb="always")) == 2.0
    assert walk_probability(g, 0, 0, rule, MinerConfig(self_absorb="final_only")) == 1.0
    assert walk_probability(g, 0, 0, rule, OFF) == 1.0


def test_feature_F_user(toy):
    rule = Rule.from_names(toy, ["r1", "r2"])
    single = feature_F(toy, 0, 1, [rule])
    assert np.array_equal(feature_F_user(toy, 0, [1], [rule]), single)
    assert np.array_equal(feature_F_user(toy, 0, [1, 1, 1], [rule]), single)
    nodes = [NodeRef(i, NodeKind.ITEM, str(i)) for i in range(3)] + [NodeRef(3, NodeKind.ENTITY, "e", "t")]
    g = build_graph(nodes, [(0, "m", 3), (1, "m", 3), (2, "m", 3)])
    r = Rule.from_names(g, ["m", "m⁻¹"])
    per = [feature_F(g, 0, k, [r])[0] for k in (1, 2)]
    assert per == [1.0, 1.0]
    assert feature_F_user(g, 0, [1, 2], [r]).tolist() == [2.0]
    with pytest.raises(ValueError):
        feature_F_user(g, 0, [], [r])


def _star_graph():
    # items 0..5; 0-1 share brand 6, 2-3 share brand 7; 4, 5 linked through os 8
    nodes = [NodeRef(i, NodeKind.ITEM, f"i{i}") for i in range(6)]
    nodes += [NodeRef(6, NodeKind.ENTITY, "b6", "brand"), NodeRef(7, NodeKind.ENTITY, "b7", "brand"),
              NodeRef(8, NodeKind.ENTITY, "os8", "os")]
    edges = [(0, "made_by", 6), (1, "made_by", 6), (2, "made_by", 7), (3, "made_by", 7),
             (4, "runs", 8), (5, "runs", 8)]
    return build_graph(nodes, edges)


def test_enumerate_rules_thresholds_and_order():
    g = _star_graph()
    pairs = [AssociationPair(0, 1, "ALB"), AssociationPair(2, 3, "ALB"), AssociationPair(4, 5, "ALB")]
    found = enumerate_rules(g, pairs, MinerConfig(alpha=0.5, beta=2))
    names = [(r.names(g), s) for r, s in found]
    assert names == [(["made_by", "made_by⁻¹"], 2)]
    found = enumerate_rules(g, pairs, MinerConfig(alpha=0.3, beta=2))
    assert [(r.names(g), s) for r, s in found] == [(["made_by", "made_by⁻¹"], 2), (["runs", "runs⁻¹"], 1)]
    # alpha = 1 with disjoint paths: nothing supports every pair
    assert enumerate_rules(g, pairs, MinerConfig(alpha=1.0, beta=4)) == []
    with pytest.raises(ValueError):
        enumerate_rules(g, [], MinerConfig())
    with pytest.raises(ValueError):
        enumerate_rules(g, [AssociationPair(0, 1, "ALB", 0)], MinerConfig())


def test_enumerate_rules_toy_beta1_is_empty(toy):
    assert enumerate_rules(toy, [(0, 1)], MinerConfig(alpha=1.0, beta=1)) == []
    found = enumerate_rules(toy, [(0, 1)], MinerConfig(alpha=1.0, beta=2))
    assert [r.names(toy) for r, _ in found] == [["r1", "r2"]]


def test_enumeration_agrees_with_exhaustive_support(rng):
    for _ in range(10):
        nodes, edges, g = random_graph(rng, 14, 2, 26, n_items=7)
        pairs = [(int(a), int(b)) for a, b in rng.integers(7, size=(8, 2)) if a != b]
        if not pairs:
            continue
        cfg = MinerConfig(alpha=0.2, beta=3)
        got = {r: s for r, s in enumerate_rules(g, pairs, cfg)}
        thr = support_threshold(0.2, len(pairs))
        uniq = sorted(set(pairs))
        for rule in all_rules_upto(g, 3):
            sup = sum(walk_probability(g, a, b, rule, OFF) > 0 for a, b in uniq)
            if sup >= thr:
                assert got.get(rule) == sup
            else:
                assert rule not in got


def test_support_is_monotone_in_pair_set(rng):
    nodes, edges, g = random_graph(rng, 20, 3, 45, n_items=10)
    pairs = [(int(a), int(b)) for a, b in rng.integers(10, size=(30, 2)) if a != b]
    sub = pairs[: len(pairs) // 2]
    cfg = MinerConfig(alpha=1e-6, beta=3)
    full = dict(enumerate_rules(g, pairs, cfg))
    part = dict(enumerate_rules(g, sub, cfg))
    for rule, s in part.items():
        assert s <= full[rule]


def test_enumeration_is_deterministic(rng):
    nodes, edges, g = random_graph(rng, 20, 3, 45, n_items=10)
    pairs = [(int(a), int(b)) for a, b in rng.integers(10, size=(30, 2)) if a != b]
    a = enumerate_rules(g, pairs, MinerConfig(alpha=0.05))
    b = enumerate_rules(g, pairs, MinerConfig(alpha=0.05))
    assert a == b
    keys = [(-s, len(r), r.relations) for r, s in a]
    assert keys == sorted(keys)


def test_degree_cap_limits_expansion(toy):
    rule = Rule.from_names(toy, ["r1", "r2"])
    capped = MinerConfig(self_absorb="off", degree_cap=1)
    # a keeps only c, c's single r2 edge reaches b
    assert walk_probability(toy, 0, 1, rule, capped) == 1.0


def test_combine_and_rules_file_round_trip(tmp_path):
    g = _star_graph()
    r1 = Rule.from_names(g, ["made_by", "made_by⁻¹"])
    r2 = Rule.from_names(g, ["runs", "runs⁻¹"])
    merged = combine_rule_sets({"ALB": [(r1, 5), (r2, 2)], "BT": [(r1, 3)]})
    assert [m.rule for m in merged] == [r1, r2]
    assert merged[0].assocs == ("ALB", "BT") and merged[0].support == 5
    merged[0].weight, merged[0].chi2 = 0.25, 3.5
    write_rules(merged, g, tmp_path / "rules.jsonl")
    back = read_rules(tmp_path / "rules.jsonl", g)
    assert back == merged
    first = (tmp_path / "rules.jsonl").read_text(encoding="utf-8").splitlines()[0]
    assert '"relations": ["made_by", "made_by⁻¹"]' in first and '"weight": 0.25' in first
    assert isinstance(back[1], MinedRule) and back[1].weight is None
