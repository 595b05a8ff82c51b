"""``rulerec`` command line: file-chained pipeline stages.

Every stage reads and writes inside a working directory (``-w``), so the
default chain is::

    rulerec synth -w run --seed 7
    rulerec mine-rules -w run
    rulerec select-rules -w run
    rulerec train -w run --mode multitask --base bprmf
    rulerec evaluate -w run

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then flags. Each stage writes ``<stage>.json`` with the tool
version, the config and its digest, input file digests and the seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .combine import (
    RuleRecModel,
    Variant,
    load_rulerec,
    recommend_topk,
    save_rulerec,
)
from .evaluation import METRICS, EvalSplit, MetricReport, combine_seed_reports, evaluate, leave_one_out_split, paired_t
from .kgstore import (
    HeteroGraph,
    IngestOptions,
    file_digest,
    load_associations,
    load_graph,
    load_interactions,
    write_graph,
)
from .pipeline import ExperimentConfig, fit, labeled_sets, mine_rules, restrict, select_rules
from .recmodels import TrainConfig, load_model, save_model
from .rulemine import MinedRule, MinerConfig, read_rules, write_rules
from .ruleselect import LabeledPairSet, SelectionObjective
from .synthgen import SynthConfig, generate

logger = logging.getLogger("rulerec")


class StageError(RuntimeError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # graph
    inverse: bool = True
    whitelist: list[str] | None = None
    # mining
    alpha: float = 0.01
    beta: int = 4
    self_absorb: str = "final_only"
    degree_cap: int | None = None
    neg_ratio: float = 1.0
    # selection
    top_n: int = 50
    objective: str = "sigmoid"
    sel_epochs: int = 200
    sel_lr: float = 0.05
    # model
    base: str = "bprmf"
    variant: str = "multi"
    mode: str | None = None
    lam: float = 0.5
    scale: float | None = None
    flip: bool = False
    rule_set: str = "auto"
    lr: float = 0.05
    l2_reg: float = 0.01
    epochs: int = 50
    d: int = 16
    layers: list[int] = field(default_factory=lambda: [32, 16, 8])
    mix_alpha: float = 0.5
    neg_per_pos: int = 1
    # synthetic world overrides (SynthConfig field names)
    synth: dict[str, Any] = field(default_factory=dict)

    SECTIONS = {
        "graph": ("inverse", "whitelist"),
        "mine": ("alpha", "beta", "self_absorb", "degree_cap", "neg_ratio"),
        "select": ("top_n", "objective", "sel_epochs", "sel_lr"),
        "train": ("base", "variant", "mode", "lam", "scale", "flip", "rule_set", "lr", "l2_reg",
                  "epochs", "d", "layers", "mix_alpha", "neg_per_pos"),
    }
    CHAIN = ("graph", "mine", "select", "train")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self, upto: str | None = None) -> str:
        d = self.to_dict()
        if upto is not None:
            keys = [k for s in self.CHAIN[: self.CHAIN.index(upto) + 1] for k in self.SECTIONS[s]]
            d = {k: d[k] for k in keys}
        return _digest_obj(d)

    def miner(self) -> MinerConfig:
        return MinerConfig(self.alpha, self.beta, self.self_absorb, self.degree_cap)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, l2_reg=self.l2_reg, epochs=self.epochs, neg_per_pos=self.neg_per_pos,
            seed=self.seed if seed is None else seed, d=self.d, layers=tuple(self.layers),
            mix_alpha=self.mix_alpha,
        )


def _digest_obj(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, ensure_ascii=False, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# flag name -> RunConfig key
FLAG_KEYS = {
    "seed": "seed", "whitelist": "whitelist", "no_inverse": "inverse",
    "alpha": "alpha", "beta": "beta", "self_absorb": "self_absorb", "degree_cap": "degree_cap",
    "neg_ratio": "neg_ratio", "top_n": "top_n", "objective": "objective",
    "base": "base", "variant": "variant", "mode": "mode", "lam": "lam", "scale": "scale",
    "flip": "flip", "rule_set": "rule_set", "lr": "lr", "l2_reg": "l2_reg", "epochs": "epochs",
    "dim": "d",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    known = {f.name for f in fields(RunConfig)}
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        unknown = set(data) - known
        if unknown:
            raise StageError(f"unknown config keys: {sorted(unknown)}")
        for k, v in data.items():
            setattr(cfg, k, v)
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is None:
            continue
        if flag == "no_inverse":
            if v:
                cfg.inverse = False
            continue
        if flag == "flip" and not v:
            continue
        setattr(cfg, key, v)
    synth = dict(cfg.synth)
    for flag in ("n_items", "n_users", "n_entities", "p_rule", "assoc_noise"):
        v = getattr(args, flag, None)
        if v is not None:
            synth[flag] = v
    cfg.synth = synth
    cfg.variant = "none" if cfg.variant == "none" else Variant.parse(cfg.variant).value
    if cfg.mode is None:
        cfg.mode = "multitask" if cfg.variant == "multi" else "two_step"
    if cfg.mode == "multitask" and cfg.variant != "multi":
        if getattr(args, "variant", None) is None:
            cfg.variant = "multi"
        else:
            raise StageError("--mode multitask requires --variant multi")
    if cfg.mode == "two_step" and cfg.variant == "multi":
        if getattr(args, "variant", None) is None:
            cfg.variant = "selection"
        else:
            raise StageError("the multi variant is trained with --mode multitask")
    SelectionObjective(cfg.objective)
    return cfg


# -- stage bookkeeping ------------------------------------------------------


class Stage:
    def __init__(self, args: argparse.Namespace, name: str) -> None:
        self.args = args
        self.name = name
        self.work = Path(args.workdir)
        self.work.mkdir(parents=True, exist_ok=True)
        self.cfg = resolve_config(args)
        self.inputs: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.work / name

    def need(self, p: str | Path) -> Path:
        p = Path(p)
        if not p.exists():
            raise StageError(f"missing input {p}; run the previous stage first")
        self.inputs[p.name] = file_digest(p)
        return p

    def check_upstream(self, meta_name: str, section: str) -> dict | None:
        p = self.path(meta_name)
        if not p.exists():
            return None
        self.need(p)
        meta = json.loads(p.read_text(encoding="utf-8"))
        theirs = meta.get("section_digests", {}).get(section)
        mine = self.cfg.digest(section)
        if theirs is not None and theirs != mine:
            msg = (f"config digest mismatch with {meta_name} for the {section!r} settings "
                   f"({theirs} vs {mine})")
            if self.args.strict:
                raise StageError(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return meta

    def write_meta(self, payload: dict, out: Path | None = None) -> Path:
        out = out or self.path(f"{self.name}.json")
        meta = {
            "tool": "rulerec",
            "version": __version__,
            "stage": self.name,
            "seed": self.cfg.seed,
            "config": self.cfg.to_dict(),
            "config_digest": self.cfg.digest(),
            "section_digests": {s: self.cfg.digest(s) for s in RunConfig.CHAIN},
            "inputs": dict(sorted(self.inputs.items())),
            **payload,
        }
        out.write_text(json.dumps(meta, indent=1, sort_keys=True, ensure_ascii=False) + "\n",
                       encoding="utf-8")
        return out

    def graph(self) -> HeteroGraph:
        nodes = self.need(self.args.nodes or self.path("nodes.tsv"))
        edges = self.need(self.args.edges or self.path("edges.tsv"))
        wl = frozenset(self.cfg.whitelist) if self.cfg.whitelist else None
        return load_graph(edges, nodes, IngestOptions(self.cfg.inverse, wl))


def _say(*parts: Any) -> None:
    print(*parts, flush=True)


# -- stages ----------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    st = Stage(args, "synth")
    scfg = SynthConfig(seed=st.cfg.seed, **st.cfg.synth)
    world = generate(scfg)
    paths = world.write(st.work)
    outputs = {p.name: file_digest(p) for p in paths.values()}
    st.write_meta({"outputs": outputs, "synth": scfg.to_dict()})
    n_pos = sum(p.label for p in world.associations)
    _say(f"synth: {len(world.nodes)} nodes, {len(world.edges)} edges, {n_pos} positive pairs, "
         f"{len(world.interactions.records)} interactions -> {st.work}")
    return 0


def cmd_build_graph(args: argparse.Namespace) -> int:
    st = Stage(args, "graph")
    g = st.graph()
    if args.nodes or args.edges:
        write_graph(g, st.path("nodes.tsv"), st.path("edges.tsv"))
    by_rel = {r.name: int(g.adjacency(r.id).nnz) for r in g.relations}
    st.write_meta({
        "graph_digest": g.digest(),
        "n_nodes": g.n_nodes,
        "n_items": int(len(g.items)),
        "n_edges": int(sum(by_rel.values())),
        "edges_by_relation": by_rel,
    })
    _say(f"graph: {g.n_nodes} nodes ({len(g.items)} items), {len(g.relations)} relations, "
         f"{sum(by_rel.values())} directed edges")
    return 0


def _save_features(path: Path, labeled: Sequence[LabeledPairSet], rules_dig: str) -> None:
    arrays: dict[str, np.ndarray] = {}
    for data in labeled:
        a = data.assoc or ""
        arrays[f"pairs_{a}"] = data.pairs
        arrays[f"labels_{a}"] = data.labels
        arrays[f"x_{a}"] = data.features()
    meta = json.dumps({"rules_digest": rules_dig, "assocs": [d.assoc for d in labeled]})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **arrays)


def _load_features(path: Path, rules_dig: str) -> list[LabeledPairSet]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta["rules_digest"] != rules_dig:
            raise StageError(f"{path.name} was computed for a different rules file")
        return [LabeledPairSet(z[f"pairs_{a}"], z[f"labels_{a}"], a, z[f"x_{a}"]) for a in meta["assocs"]]


def _rules_digest(mined: Sequence[MinedRule], g: HeteroGraph) -> str:
    return _digest_obj([mr.rule.names(g) for mr in mined])


def cmd_mine(args: argparse.Namespace) -> int:
    st = Stage(args, "mine")
    st.check_upstream("graph.json", "graph")
    g = st.graph()
    assoc = load_associations(st.need(args.associations or st.path("associations.tsv")), g)
    mc = st.cfg.miner()
    mined = mine_rules(g, assoc, mc)
    if not mined:
        warnings.warn("no rule reached the support threshold", RuntimeWarning, stacklevel=1)
    rules_path = st.path("rules.jsonl")
    write_rules(mined, g, rules_path)
    dig = _rules_digest(mined, g)
    labeled = labeled_sets(g, assoc, [m.rule for m in mined], mc, st.cfg.neg_ratio, st.cfg.seed)
    _save_features(st.path("features.npz"), labeled, dig)
    per_assoc = {a: sum(1 for m in mined if a in m.assocs) for a in sorted({x.assoc for x in assoc})}
    st.write_meta({
        "rules_digest": dig,
        "n_rules": len(mined),
        "rules_per_assoc": per_assoc,
        "outputs": {p: file_digest(st.path(p)) for p in ("rules.jsonl", "features.npz")},
    })
    _say(f"mine-rules: {len(mined)} rules (alpha={mc.alpha}, beta={mc.beta}) {per_assoc}")
    for mr in mined[:5]:
        _say(f"  {' -> '.join(mr.rule.names(g))}  support={mr.support} {list(mr.assocs)}")
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    st = Stage(args, "select")
    st.check_upstream("mine.json", "mine")
    g = st.graph()
    mined = read_rules(st.need(st.path("rules.jsonl")), g)
    dig = _rules_digest(mined, g)
    labeled = _load_features(st.need(st.path("features.npz")), dig)
    sel = select_rules(mined, labeled, st.cfg.top_n, st.cfg.objective, st.cfg.seed,
                       st.cfg.sel_epochs, st.cfg.sel_lr)
    write_rules(mined, g, st.path("rules.jsonl"))
    write_rules([mined[k] for k in sel.indices], g, st.path("selected_rules.jsonl"))
    names = [mr.rule.names(g) for mr in mined]
    top = {
        a: [{"relations": names[k], "chi2": float(sel.chi2[a][k]), "index": k} for k in idx]
        for a, idx in sel.top.items()
    }
    st.write_meta({
        "rules_digest": dig,
        "selected": sel.indices,
        "top_n": st.cfg.top_n,
        "objective": st.cfg.objective,
        "top": top,
        "outputs": {p: file_digest(st.path(p)) for p in ("rules.jsonl", "selected_rules.jsonl")},
    })
    _say(f"select-rules: {len(sel.indices)} rules kept (top {st.cfg.top_n} per association)")
    for a, lst in top.items():
        if lst:
            _say(f"  {a}: {' -> '.join(lst[0]['relations'])}  chi2={lst[0]['chi2']:.2f}")
    return 0


def _load_split(st: Stage, g: HeteroGraph, create: bool) -> EvalSplit:
    p = Path(st.args.split) if getattr(st.args, "split", None) else st.path("split.json")
    if p.exists():
        return EvalSplit.load(st.need(p))
    if not create:
        raise StageError(f"missing input {p}; run train first")
    log = load_interactions(st.need(st.args.interactions or st.path("interactions.tsv")))
    items = set(int(i) for i in g.items)
    bad = sorted({r.item for r in log.records} - items)
    if bad:
        raise StageError(f"interactions reference non-item nodes, e.g. {bad[:3]}")
    split = leave_one_out_split(log, st.cfg.seed, universe=g.items)
    split.save(p)
    st.inputs[p.name] = file_digest(p)
    return split


def _rule_inputs(st: Stage, g: HeteroGraph):
    sel_meta = st.check_upstream("select.json", "select")
    mined = read_rules(st.need(st.path("rules.jsonl")), g)
    dig = _rules_digest(mined, g)
    labeled = _load_features(st.need(st.path("features.npz")), dig)
    if sel_meta is None:
        raise StageError("missing select.json; run select-rules first")
    if sel_meta["rules_digest"] != dig:
        raise StageError("rules.jsonl changed since select-rules ran")
    return mined, labeled, list(sel_meta["selected"])


def cmd_train(args: argparse.Namespace) -> int:
    st = Stage(args, "train")
    cfg = st.cfg
    g = st.graph()
    split = _load_split(st, g, create=True)
    exp = ExperimentConfig(cfg.base, cfg.variant, cfg.lam, cfg.objective, cfg.scale,
                           cfg.train_config(), cfg.flip)
    log: list = []
    payload: dict[str, Any] = {"mode": cfg.mode, "variant": cfg.variant, "base": cfg.base}
    out = Path(args.out) if args.out else st.path("model.npz")
    if cfg.variant == "none":
        model = fit(g, split, None, exp, log=log)
        save_model(model, out, {"variant": "none", "seed": cfg.seed})
    else:
        mined, labeled, selected = _rule_inputs(st, g)
        use_all = cfg.rule_set == "all" or (cfg.rule_set == "auto" and Variant(cfg.variant).trainable)
        cols = list(range(len(mined))) if use_all else selected
        if not cols:
            raise StageError("rule-using variants need a non-empty rule set")
        rules = [mined[k].rule for k in cols]
        sel_w = None
        if cfg.variant == "selection":
            sel_w = np.array([mined[k].weight if mined[k].weight is not None else 0.0 for k in cols])
        model = fit(g, split, rules, exp, restrict(labeled, cols), sel_w, cfg.miner(), log=log)
        save_rulerec(model, out, {"seed": cfg.seed, "rule_source": "all" if use_all else "selected"})
        payload.update({"n_rules": len(rules), "rules_digest": model.digest_rules()})
    st.inputs.pop(out.name, None)
    payload["log"] = log
    payload["checkpoint"] = {out.name: file_digest(out)}
    st.write_meta(payload, Path(args.meta) if args.meta else None)
    last = log[-1] if log else None
    _say(f"train: {cfg.base} variant={cfg.variant} mode={cfg.mode} epochs={cfg.epochs} "
         f"seed={cfg.seed} final loss={last if not isinstance(last, dict) else last.get('loss_r')}")
    return 0


def _load_trained(st: Stage, g: HeteroGraph, split: EvalSplit, path: Path) -> tuple[Any, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
    if "combiner" in meta:
        model = load_rulerec(path, g, split.train_histories(), st.cfg.miner(), split.universe)
    else:
        model, meta = load_model(path)
    return model, meta


def cmd_evaluate(args: argparse.Namespace) -> int:
    st = Stage(args, "evaluate")
    # rule features are rebuilt here, so graph and miner settings must match training
    st.check_upstream("train.json", "mine")
    g = st.graph()
    split = _load_split(st, g, create=False)
    path = st.need(Path(args.model) if args.model else st.path("model.npz"))
    model, meta = _load_trained(st, g, split, path)
    rep = evaluate(model, split, jobs=args.jobs)
    out = Path(args.out) if args.out else st.path("report.json")
    st.write_meta({
        "model_seed": meta.get("seed"),
        "variant": meta.get("variant", "none"),
        "means": rep.means,
        "seeds": [meta.get("seed", st.cfg.seed)],
        "seed_means": {m: [rep.means[m]] for m in METRICS},
        "users": rep.users if args.per_user else [],
        **({"per_user": rep.per_user} if args.per_user else {}),
    }, out)
    _say("evaluate: " + "  ".join(f"{k}={v:.4f}" for k, v in rep.means.items()) + f"  ({len(rep.users)} users)")
    return 0


def cmd_explain(args: argparse.Namespace) -> int:
    st = Stage(args, "explain")
    st.check_upstream("train.json", "mine")
    g = st.graph()
    split = _load_split(st, g, create=False)
    path = st.need(Path(args.model) if args.model else st.path("model.npz"))
    model, _ = _load_trained(st, g, split, path)
    if not isinstance(model, RuleRecModel) or model.combiner.w is None:
        raise StageError("explanations need a weighted rule model")
    users = {us.user: us for us in split.users}
    if args.user not in users:
        raise StageError(f"user {args.user} is not in the evaluation split")
    us = users[args.user]
    index = split.item_index()
    cand = np.array([index[us.test]] + [index[i] for i in us.negatives], dtype=np.int64)
    ranked = recommend_topk(model, us.user, cand, args.items)
    out = Path(args.out) if args.out else st.path("explanations.jsonl")
    lines = []
    _say(f"user {us.user}: history {len(us.train)} items")
    for rank, (i, score) in enumerate(ranked, start=1):
        expl = model.explain(us.user, i, top_r=args.top, with_path=not args.no_path)
        item_id = int(split.universe[i])
        rec = {
            "user": us.user,
            "item": item_id,
            "rank": rank,
            "score": score,
            "rules": [{**e.to_dict(), "witness": int(split.universe[e.witness_history_item])} for e in expl],
        }
        lines.append(json.dumps(rec, ensure_ascii=False))
        _say(f"#{rank} {g.nodes[item_id].label} score={score:.4f}")
        for e, r in zip(expl, rec["rules"]):
            witness = g.nodes[r["witness"]].label
            _say(f"    {' -> '.join(e.rule)}  via {witness}  ({e.contribution:+.4f})")
            if e.path:
                _say(f"      path: {' / '.join(e.path)}")
        if not expl:
            _say("    no rule connects this item to the history")
    out.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    st = Stage(args, "report")

    def gather(paths: Sequence[str]) -> MetricReport:
        reps = []
        for p in paths:
            obj = json.loads(st.need(p).read_text(encoding="utf-8"))
            reps.append(MetricReport(obj["means"], {}, [], list(obj.get("seeds", [])), {}))
        return combine_seed_reports(reps)

    base = gather(args.baseline)
    cand = gather(args.candidate)
    metrics = args.metric or list(METRICS)
    rows = {}
    for m in metrics:
        p = paired_t(cand, base, m)
        ma, mb = cand.means[m], base.means[m]
        rel = (ma - mb) / mb if mb else float("inf") if ma > mb else 0.0
        rows[m] = {"baseline": mb, "candidate": ma, "relative_lift": rel, "p_value": p,
                   "baseline_seeds": base.seed_means[m], "candidate_seeds": cand.seed_means[m]}
        _say(f"{m}: baseline={mb:.4f} candidate={ma:.4f} lift={rel:+.1%} p={p:.4g}")
    out = Path(args.out) if args.out else st.path("report_ttest.json")
    st.write_meta({"comparison": rows, "baseline_seeds": base.seeds, "candidate_seeds": cand.seeds}, out)
    tsv = out.with_suffix(".tsv")
    with open(tsv, "w", encoding="utf-8") as fh:
        fh.write("metric\tbaseline\tcandidate\trelative_lift\tp_value\n")
        for m, r in rows.items():
            fh.write(f"{m}\t{r['baseline']:.6f}\t{r['candidate']:.6f}\t{r['relative_lift']:.6f}\t{r['p_value']:.6g}\n")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rulerec", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"rulerec {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-w", "--workdir", default=".", help="stage input/output directory")
    common.add_argument("--config", help="JSON config file; flags override its keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--strict", action="store_true", help="fail on config digest mismatch")
    common.add_argument("-v", "--verbose", action="count", default=0)

    graph = argparse.ArgumentParser(add_help=False)
    graph.add_argument("--nodes", help="nodes TSV (default: <workdir>/nodes.tsv)")
    graph.add_argument("--edges", help="edges TSV (default: <workdir>/edges.tsv)")
    graph.add_argument("--whitelist", nargs="+", metavar="TYPE", help="allowed entity types")
    graph.add_argument("--no-inverse", action="store_true", default=None,
                       help="do not synthesise inverse relations")

    miner = argparse.ArgumentParser(add_help=False)
    miner.add_argument("--alpha", type=float)
    miner.add_argument("--beta", type=int)
    miner.add_argument("--self-absorb", choices=["final_only", "always", "off"])
    miner.add_argument("--degree-cap", type=int)

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--base", choices=["bprmf", "ncf", "gmf", "mlp"])
    model.add_argument("--variant", choices=[
        "none", "hard", "equal", "selection", "learn", "multi",
        "hard_filter", "equal_weight", "selection_weight", "learn_together", "multi_task"])
    model.add_argument("--mode", choices=["two_step", "multitask"])
    model.add_argument("--lambda", dest="lam", type=float)
    model.add_argument("--scale", type=float, help="additive rule-term scale")
    model.add_argument("--flip", action="store_true", default=None,
                       help="features from history item to candidate")
    model.add_argument("--rule-set", choices=["auto", "selected", "all"])
    model.add_argument("--lr", type=float)
    model.add_argument("--l2-reg", type=float)
    model.add_argument("--epochs", type=int)
    model.add_argument("--dim", type=int)
    model.add_argument("--objective", choices=["chi2", "linreg", "sigmoid"])

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic world")
    s.add_argument("--n-items", type=int)
    s.add_argument("--n-users", type=int)
    s.add_argument("--n-entities", type=int)
    s.add_argument("--p-rule", type=float)
    s.add_argument("--assoc-noise", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-graph", parents=[common, graph], help="ingest and validate the graph")
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("mine-rules", parents=[common, graph, miner], help="enumerate candidate rules")
    s.add_argument("--associations", help="associations TSV")
    s.add_argument("--neg-ratio", type=float)
    s.set_defaults(func=cmd_mine)

    s = sub.add_parser("select-rules", parents=[common, graph, miner], help="chi-square and learned selection")
    s.add_argument("--top-n", type=int)
    s.add_argument("--objective", choices=["chi2", "linreg", "sigmoid"])
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("train", parents=[common, graph, miner, model], help="train a recommender")
    s.add_argument("--top-n", type=int)
    s.add_argument("--interactions", help="interactions TSV")
    s.add_argument("--split", help="split JSON (created if absent)")
    s.add_argument("--out", help="checkpoint path (default: <workdir>/model.npz)")
    s.add_argument("--meta", help="stage JSON path (default: <workdir>/train.json)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common, graph, miner], help="leave-one-out ranking metrics")
    s.add_argument("--model")
    s.add_argument("--split")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--per-user", action="store_true")
    s.add_argument("--out", help="report path (default: <workdir>/report.json)")
    s.set_defaults(func=cmd_evaluate, interactions=None)

    s = sub.add_parser("explain", parents=[common, graph, miner], help="rule explanations for a user")
    s.add_argument("--user", type=int, required=True)
    s.add_argument("--top", type=int, default=5, help="rules per item")
    s.add_argument("--items", type=int, default=5, help="recommended items to explain")
    s.add_argument("--model")
    s.add_argument("--split")
    s.add_argument("--no-path", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_explain, interactions=None)

    s = sub.add_parser("report", parents=[common], help="paired t-test between report sets")
    s.add_argument("--baseline", nargs="+", required=True, help="one report JSON per seed")
    s.add_argument("--candidate", nargs="+", required=True)
    s.add_argument("--metric", nargs="+", choices=list(METRICS))
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except (StageError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"rulerec {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
