"""Naive reference implementations used as independent test oracles."""

from __future__ import annotations

import itertools
import math
from collections import defaultdict

import numpy as np

from rulerec.kgstore import NodeKind, NodeRef, build_graph


def raw_adjacency(edges, inverse=True):
    """(node, relation name) -> sorted distinct targets, built from plain triples."""
    adj = defaultdict(set)
    for s, r, d in edges:
        adj[(s, r)].add(d)
        if inverse:
            adj[(d, r + "⁻¹")].add(s)
    return {k: sorted(v) for k, v in adj.items()}


def path_sums(adj, relnames, source, max_len, mode="off", final_indicator=False):
    """Enumerate every conforming walk from ``source``.

    Returns ``{(rel sequence, end node): summed weight}`` for all sequences
    up to ``max_len``. With absorption the walker may also stay in place
    (factor 1), and moving along a self-loop is not a separate option.
    Weights are computed for every sequence length as if that length were
    the full rule, so the last-step factor depends on the sequence length;
    hence this walks each target length separately.
    """
    out = defaultdict(float)
    for length in range(1, max_len + 1):
        for seq in itertools.product(relnames, repeat=length):
            frontier = [(source, 1.0)]
            for pos, rel in enumerate(seq):
                absorb = mode == "always" or (mode == "final_only" and pos == length - 1)
                last = pos == length - 1
                nxt = []
                for node, w in frontier:
                    nbrs = adj.get((node, rel), [])
                    if absorb:
                        nxt.append((node, w))
                    for t in nbrs:
                        if absorb and t == node:
                            continue
                        f = 1.0 if (last and final_indicator) else 1.0 / len(nbrs)
                        nxt.append((t, w * f))
                frontier = nxt
                if not frontier:
                    break
            for node, w in frontier:
                out[(seq, node)] += w
    return out


def random_graph(rng, n_nodes, n_rel, n_edges, n_items=None, inverse=True):
    n_items = n_items if n_items is not None else max(2, n_nodes // 2)
    nodes = [NodeRef(i, NodeKind.ITEM if i < n_items else NodeKind.ENTITY, f"n{i}",
                     None if i < n_items else f"t{i % 3}") for i in range(n_nodes)]
    rels = [f"r{k}" for k in range(n_rel)]
    edges = []
    for _ in range(n_edges):
        s, d = (int(v) for v in rng.integers(n_nodes, size=2))
        edges.append((s, rels[int(rng.integers(n_rel))], d))
    return nodes, edges, build_graph(nodes, edges, inverse=inverse)


def chi2_2x2(n11, n10, n01, n00):
    """Pearson statistic of a 2x2 table by the textbook expected-count formula."""
    table = [[n11, n10], [n01, n00]]
    total = n11 + n10 + n01 + n00
    rows = [n11 + n10, n01 + n00]
    cols = [n11 + n01, n10 + n00]
    stat = 0.0
    for i in range(2):
        for j in range(2):
            e = rows[i] * cols[j] / total if total else 0.0
            if e > 0:
                stat += (table[i][j] - e) ** 2 / e
    return stat


def central_diff(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return float(np.abs(a - b).max(initial=0) / denom)


def ndcg_at(rank, k=10):
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0
