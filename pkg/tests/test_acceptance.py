"""Acceptance criteria. Each test prints one PASS/FAIL line and asserts it."""

import json
import time
import warnings

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from conftest import ACCEPTANCE_LINES, TOY_EDGES, toy_nodes
from oracles import central_diff, chi2_2x2, path_sums, random_graph, raw_adjacency, rel_err
from rulerec.cli import main as cli_main
from rulerec.combine import (
    Combiner,
    RuleFeatures,
    RuleTrainConfig,
    build_model,
    multitask_objective,
    recommend_topk,
    recommendation_objective,
    train,
)
from rulerec.evaluation import combine_seed_reports, evaluate, leave_one_out_split, metrics, metrics_from_rank, paired_t
from rulerec.kgstore import build_graph
from rulerec.pipeline import ExperimentConfig, fit, labeled_sets, mine_rules, restrict, select_rules
from rulerec.recmodels import TrainConfig, TrainData, bpr_pair_loss, make_model, train_base
from rulerec.rulemine import MinerConfig, Rule, rule_reach_matrices, walk_probability
from rulerec.ruleselect import LabeledPairSet, all_rules_upto, chi_square_scores, select_top_n, selection_loss
from rulerec.synthgen import SynthConfig, generate, latent_factor_interactions


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} | {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _dense(mats):
    return np.stack([m.toarray() for m in mats])


def _oracle_tensor(g, edges, rules, n, mode, final_indicator=False, max_len=4):
    adj = raw_adjacency(edges, inverse=g.n_relations > len({r for _, r, _ in edges}))
    names = [r.name for r in g.relations]
    idx = {tuple(r.names(g)): j for j, r in enumerate(rules)}
    ref = np.zeros((len(rules), n, n))
    for a in range(n):
        for (seq, node), w in path_sums(adj, names, a, max_len, mode, final_indicator).items():
            if seq in idx:
                ref[idx[seq], a, node] += w
    return ref


# -- 1 ---------------------------------------------------------------------


def test_c1_walk_probability_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, count = 0.0, 0
    for _ in range(200):
        n = int(rng.integers(5, 31))
        n_rel = int(rng.integers(1, 6))
        nodes, edges, g = random_graph(rng, n, n_rel, int(rng.integers(n, 2 * n + 1)), inverse=False)
        rules = all_rules_upto(g, 4)
        got = _dense(rule_reach_matrices(g, np.arange(n), rules, MinerConfig(self_absorb="off")))
        ref = _oracle_tensor(g, edges, rules, n, "off")
        worst = max(worst, float(np.abs(got - ref).max()))
        count += 1
    toy = build_graph(toy_nodes(), TOY_EDGES)
    p = walk_probability(toy, 0, 1, Rule.from_names(toy, ["r1", "r2"]), MinerConfig(self_absorb="off"))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and abs(p - 0.75) <= 1e-12 and elapsed < 30
    verdict(1, "walk DP equals brute force", ok,
            f"{count} graphs, max |err|={worst:.2e} (tol 1e-12), fixture P={p:.15f}, {elapsed:.1f}s (< 30s)")


# -- 2 ---------------------------------------------------------------------


def test_c2_self_absorption_modes():
    rng = np.random.default_rng(77)
    worst = {"final_only": 0.0, "always": 0.0}
    for _ in range(40):
        n = int(rng.integers(3, 11))
        nodes, edges, g = random_graph(rng, n, int(rng.integers(1, 3)), int(rng.integers(n, 2 * n + 1)))
        rules = all_rules_upto(g, 3)
        for mode in worst:
            for kind in ("x", "F"):
                got = _dense(rule_reach_matrices(g, np.arange(n), rules, MinerConfig(self_absorb=mode), kind=kind))
                ref = _oracle_tensor(g, edges, rules, n, mode, kind == "F", max_len=3)
                worst[mode] = max(worst[mode], float(np.abs(got - ref).max()))
    ok = all(v <= 1e-12 for v in worst.values())
    verdict(2, "self-absorption modes match generalized-path oracle", ok,
            ", ".join(f"{k} max |err|={v:.2e}" for k, v in worst.items()) + " (tol 1e-12)")


# -- 3 ---------------------------------------------------------------------


def test_c3_chi_square():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        t = rng.integers(0, 30, size=4)
        if (t[0] + t[1]) == 0 or (t[2] + t[3]) == 0 or (t[0] + t[2]) == 0 or (t[1] + t[3]) == 0:
            continue
        x = np.r_[np.ones(t[0] + t[1]), np.zeros(t[2] + t[3])][:, None]
        y = np.r_[np.ones(t[0]), np.zeros(t[1]), np.ones(t[2]), np.zeros(t[3])]
        got = chi_square_scores((x, y))[0]
        worst = max(worst, abs(got - chi2_2x2(*t)),
                    abs(got - chi2_contingency([[t[0], t[1]], [t[2], t[3]]], correction=False)[0]))
    x = np.r_[np.ones(4), np.zeros(6)][:, None]
    y = np.r_[np.ones(4), np.ones(1), np.zeros(5)]
    fixture = chi_square_scores((x, y))[0]
    x_ind = np.r_[np.ones(4), np.zeros(4)][:, None]
    y_ind = np.r_[1, 1, 0, 0, 1, 1, 0, 0]
    indep = chi_square_scores((x_ind, y_ind))[0]
    ok = worst <= 1e-9 and abs(fixture - 20 / 3) <= 1e-9 and indep == 0.0
    verdict(3, "chi-square tables", ok,
            f"200 random tables max |err|={worst:.2e}, 20/3 fixture={fixture:.12f}, independence={indep} (tol 1e-9)")


# -- 4 ---------------------------------------------------------------------


def _planted_scores(seed, noise):
    world = generate(SynthConfig(seed=seed, assoc_noise=noise))
    g = world.graph()
    mined = mine_rules(g, world.associations)
    rules = [m.rule for m in mined]
    planted = {p["assoc"]: Rule.from_names(g, p["relations"]) for p in world.manifest.planted_rules}
    for r in planted.values():
        # under heavy noise the planted rule may fall below support; score it anyway
        if r not in rules:
            rules.append(r)
    out = {}
    for data in labeled_sets(g, world.associations, rules, seed=seed):
        s = chi_square_scores(data)
        k = rules.index(planted[data.assoc])
        others = np.delete(s, k)
        out[data.assoc] = (select_top_n(s, 1) == [k], float(s[k]),
                           float(np.percentile(others, 90)))
    return out


@pytest.mark.slow
def test_c4_planted_rule_recovery():
    clean = [_planted_scores(seed, 0.1) for seed in range(20)]
    noisy = [_planted_scores(seed, 1.0) for seed in range(20)]
    first = sum(all(v[0] for v in res.values()) for res in clean)
    below = sum(all(v[1] < v[2] for v in res.values()) for res in noisy)
    ok = first >= 19 and below >= 15
    verdict(4, "planted-rule recovery", ok,
            f"planted rule ranked first for every association in {first}/20 seeds (need 19); "
            f"under full noise below the distractor 90th percentile in {below}/20 seeds (need 15)")


# -- 5 ---------------------------------------------------------------------


def _randomise(params, rng):
    for v in params.values():
        v[...] = rng.normal(scale=0.5, size=v.shape)


def _rule_world():
    rng = np.random.default_rng(8)
    nodes, edges, g = random_graph(rng, 14, 2, 30, n_items=8)
    rules = all_rules_upto(g, 2)[:6]
    hist = {0: [0, 3], 1: [1, 5, 6], 2: [0, 1, 7], 3: [2, 4]}
    data = TrainData.from_histories(hist, universe=g.items, n_users=4)
    return g, rules, data


def test_c5_gradient_checks():
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    errs: dict[str, float] = {}

    def record(name, a, b):
        errs[name] = max(errs.get(name, 0.0), rel_err(a, b))

    for _ in range(20):
        sp, sn = rng.normal(size=2)
        _, gp, gn = bpr_pair_loss(sp, sn)
        h = 1e-5
        record("bpr", [gp, gn], [(bpr_pair_loss(sp + h, sn)[0] - bpr_pair_loss(sp - h, sn)[0]) / (2 * h),
                                 (bpr_pair_loss(sp, sn + h)[0] - bpr_pair_loss(sp, sn - h)[0]) / (2 * h)])

    for kind in ("bprmf", "ncf", "mlp"):
        for _ in range(20):
            m = make_model(kind, 2, 4, TrainConfig(d=3, layers=(4, 3, 2)))
            _randomise(m.params, rng)
            _, grads = m.triple_loss_grad(0, 1, 2, 0.05)
            full = m.full_gradient(grads)
            names = sorted(m.params)
            num = [central_diff(lambda: m.triple_loss_grad(0, 1, 2, 0.05)[0], m.params[k]) for k in names]
            record(kind, np.concatenate([full[k].ravel() for k in names]),
                   np.concatenate([v.ravel() for v in num]))

    g, rules, data = _rule_world()
    triples = [(0, 0, 1), (1, 1, 0), (2, 0, 1)]
    for base in ("bprmf", "ncf"):
        for _ in range(20):
            feats = RuleFeatures(g, rules, universe=g.items)
            m = build_model(base, data, rules, feats, Combiner.create("multi", len(rules)),
                            TrainConfig(d=3, layers=(4, 2)))
            _randomise(m.base.params, rng)
            m.combiner.w[:] = rng.normal(size=len(rules))
            m.G = m.G + rng.random(m.G.shape)
            names = sorted(m.base.params)

            def flat(grads):
                full = m.base.full_gradient([t for t in grads if t[0] != "w"])
                gw = sum((gg for k, _, gg in grads if k == "w"), np.zeros(len(rules)))
                return np.concatenate([full[k].ravel() for k in names] + [gw])

            _, grads = recommendation_objective(m, triples, 0.02)
            f = lambda: recommendation_objective(m, triples, 0.02)[0]  # noqa: E731
            num = np.concatenate([central_diff(f, m.base.params[k]).ravel() for k in names]
                                 + [central_diff(f, m.combiner.w)])
            record(f"O_r({base})", flat(grads), num)

            pairs = rng.integers(8, size=(10, 2))
            labeled = [LabeledPairSet(pairs, rng.integers(0, 2, size=10), "ALB",
                                      rng.random((10, len(rules))))]
            for obj in ("chi2", "linreg", "sigmoid"):
                bias = np.array([rng.normal() * 0.2])

                def fo():
                    m.combiner.assoc_bias["ALB"] = float(bias[0])
                    return multitask_objective(m, triples, labeled, 0.7, obj, 0.02)[0]

                fo()
                _, grads, bg = multitask_objective(m, triples, labeled, 0.7, obj, 0.02)
                num = np.concatenate([central_diff(fo, m.base.params[k]).ravel() for k in names]
                                     + [central_diff(fo, m.combiner.w), central_diff(fo, bias)])
                record(f"O({obj},{base})", np.r_[flat(grads), bg["ALB"]], num)
                # O_l alone
                x, y = labeled[0].features(), labeled[0].labels
                w = m.combiner.w
                _, gw, gb = selection_loss(obj, w, float(bias[0]), x, y)
                nw = central_diff(lambda: selection_loss(obj, w, float(bias[0]), x, y)[0], w)
                nb = central_diff(lambda: selection_loss(obj, w, float(bias[0]), x, y)[0], bias)
                record(f"O_l({obj})", np.r_[gw, gb], np.r_[nw, nb])
    elapsed = time.perf_counter() - start
    worst = max(errs.values())
    ok = worst < 1e-4 and elapsed < 60
    verdict(5, "analytic gradients vs central differences", ok,
            f"{len(errs)} objectives x 20 points, worst rel err={worst:.2e} "
            f"({max(errs, key=errs.get)}; tol 1e-4), {elapsed:.1f}s (< 60s)")


# -- 6 ---------------------------------------------------------------------


@pytest.mark.slow
def test_c6_base_model_sanity():
    recalls, uniform = [], []
    for seed in range(5):
        log = latent_factor_interactions(n_users=200, n_items=100, rank=4, seed=seed)
        with warnings.catch_warnings():
            # 100 items cannot leave 99 unseen negatives for every user
            warnings.simplefilter("ignore", RuntimeWarning)
            split = leave_one_out_split(log, seed=seed, universe=range(100))
        model = train_base("bprmf", split.train_data(), TrainConfig(seed=seed))
        recalls.append(evaluate(model, split).means["recall@10"])
        uniform.append(np.mean([min(10, 1 + len(us.negatives)) / (1 + len(us.negatives)) for us in split.users]))
    mean, chance = float(np.mean(recalls)), float(np.mean(uniform))
    ok = mean >= 0.3 and mean >= 3 * chance
    verdict(6, "BPRMF on planted latent factors", ok,
            f"mean Recall@10={mean:.3f} over 5 seeds (need >= 0.3 and >= 3x uniform {chance:.3f})")


# -- 7 ---------------------------------------------------------------------


def _lift_run(seed):
    world = generate(SynthConfig(seed=seed, p_rule=0.8))
    g = world.graph()
    split = leave_one_out_split(world.interactions, seed=seed, universe=g.items)
    mined = mine_rules(g, world.associations)
    rules = [m.rule for m in mined]
    labeled = labeled_sets(g, world.associations, rules, seed=seed)
    sel = select_rules(mined, labeled, top_n=50, seed=seed)
    tc = TrainConfig(seed=seed)
    feats_all = RuleFeatures(g, rules, universe=split.universe)
    sel_rules = [rules[k] for k in sel.indices]
    feats_sel = RuleFeatures(g, sel_rules, universe=split.universe)
    out = {"bprmf": evaluate(fit(g, split, None, ExperimentConfig(variant="none", train=tc)), split)}
    for variant in ("hard", "equal", "selection", "learn", "multi"):
        trainable = variant in ("learn", "multi")
        exp = ExperimentConfig(variant=variant, train=tc)
        if trainable:
            m = fit(g, split, rules, exp, labeled, features=feats_all)
        else:
            m = fit(g, split, sel_rules, exp, restrict(labeled, sel.indices), sel.weights, features=feats_sel)
        out[variant] = evaluate(m, split)
    return out


@pytest.mark.slow
def test_c7_rule_lift():
    runs = [_lift_run(seed) for seed in range(5)]
    agg = {k: combine_seed_reports([r[k] for r in runs]) for k in runs[0]}
    base, multi, equal = (agg[k].means["recall@5"] for k in ("bprmf", "multi", "equal"))
    lift = (multi - base) / base
    p = paired_t(agg["multi"], agg["bprmf"], "recall@5")
    order = ", ".join(f"{k}={v.means['recall@5']:.3f}" for k, v in
                      sorted(agg.items(), key=lambda kv: -kv[1].means["recall@5"]))
    ok = lift >= 0.05 and p < 0.05 and multi >= equal
    verdict(7, "rule lift over BPRMF", ok,
            f"Recall@5 multi={multi:.3f} vs BPRMF={base:.3f} lift={lift:+.1%} (need >= +5%), "
            f"paired-t p={p:.2e} (need < 0.05), multi >= equal: {multi >= equal}; ordering: {order}")


# -- 8 ---------------------------------------------------------------------


def test_c8_reductions():
    g, rules, data = _rule_world()
    feats = RuleFeatures(g, rules, universe=g.items)
    tc = TrainConfig(epochs=20, seed=9, d=4)
    base = train_base("bprmf", data, tc)
    zero = build_model("bprmf", data, rules, feats, Combiner.create("selection", len(rules), np.zeros(len(rules))), tc)
    zero.base = base
    cand = np.arange(len(g.items))
    same_rank = all(recommend_topk(zero, u, cand, len(cand)) == recommend_topk(base, u, cand, len(cand))
                    for u in range(data.n_users))

    labeled = [LabeledPairSet([(0, 1), (1, 5), (2, 4), (3, 6)], [1, 1, 0, 0], "ALB").with_features(g, rules)]

    def trajectory(variant, lam):
        m = build_model("bprmf", data, rules, feats, Combiner.create(variant, len(rules)), tc)
        snaps = []
        mode = "multitask" if variant == "multi" else "two_step"
        train(m, data, RuleTrainConfig(tc, mode=mode, lam=lam), labeled if variant == "multi" else (),
              on_epoch=lambda e, mm: snaps.append([v.copy() for v in mm.base.params.values()] + [mm.combiner.w.copy()]))
        return snaps

    a, b = trajectory("multi", 0.0), trajectory("learn", 0.0)
    bitwise = len(a) == len(b) == tc.epochs and all(
        all(np.array_equal(x, y) for x, y in zip(sa, sb)) for sa, sb in zip(a, b))
    ok = same_rank and bitwise
    verdict(8, "reductions", ok,
            f"w=0 rankings identical to base: {same_rank}; lambda=0 multitask trajectory bitwise equal "
            f"to learn-together over {len(a)} epochs: {bitwise}")


# -- 9 ---------------------------------------------------------------------


def test_c9_metric_suite():
    rng = np.random.default_rng(3)
    _, _, ndcg, mrr = metrics([5, 6, 0, 7], 0)
    fixture = abs(ndcg - 0.5) <= 1e-12 and abs(mrr - 1 / 3) <= 1e-12
    trunc = metrics_from_rank(11) == (0.0, 0.0, 0.0, 0.0) and metrics_from_rank(6)[0] == 0.0
    mono = True
    for _ in range(1000):
        perm = list(rng.permutation(100))
        r = perm.index(0) + 1
        cur = metrics(perm, 0)
        mono &= cur == metrics_from_rank(r)
        if r > 1:
            perm[r - 2], perm[r - 1] = perm[r - 1], perm[r - 2]
            mono &= all(x >= y for x, y in zip(metrics(perm, 0), cur))
        if r > 10:
            mono &= cur[1:] == (0.0, 0.0, 0.0)
    ok = fixture and trunc and mono
    verdict(9, "ranking metrics", ok,
            f"rank-3 NDCG@10={ndcg:.12f} MRR@10={mrr:.12f}; truncation {trunc}; 1000 permutations monotone {mono}")


# -- 10 --------------------------------------------------------------------


def _cli_pipeline(work, seed=13):
    steps = [["synth"], ["build-graph"], ["mine-rules"], ["select-rules"], ["train"], ["evaluate"],
             ["explain", "--user", "0"]]
    for step in steps:
        assert cli_main(step[:1] + ["-w", str(work), "--seed", str(seed)] + step[1:]) == 0


@pytest.mark.slow
def test_c10_determinism(tmp_path):
    start = time.perf_counter()
    _cli_pipeline(tmp_path / "a")
    once = time.perf_counter() - start
    _cli_pipeline(tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    differ = []
    for name in files:
        a, b = (tmp_path / d / name for d in ("a", "b"))
        if name.endswith(".json"):
            # stage metadata carries no timestamps; compare as parsed objects
            same = json.loads(a.read_text()) == json.loads(b.read_text())
        else:
            same = a.read_bytes() == b.read_bytes()
        if not same:
            differ.append(name)
    ok = not differ and once < 600
    verdict(10, "determinism and runtime", ok,
            f"{len(files)} outputs compared, differing: {differ or 'none'}; default pipeline {once:.1f}s (< 600s)")
