"""Heterogeneous item/entity graph: ingestion, storage and neighbourhood queries.

Nodes carry dense integer ids assigned in file order. Each relation is stored
as a CSR adjacency matrix whose rows are duplicate-free and sorted by target
id, so ``neighbors`` is a slice and the random-walk module can reuse the same
matrices for its transition steps.
"""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

INVERSE_SUFFIX = "⁻¹"
LINK_RELATION = "linked_to"
ASSOC_TYPES = ("ALV", "BAV", "ALB", "BT")


class GraphFormatError(ValueError):
    """Raised when an input file cannot be parsed."""

    def __init__(self, path: str | Path, lineno: int, message: str) -> None:
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class NodeKind(str, enum.Enum):
    ITEM = "item"
    ENTITY = "entity"

    @classmethod
    def parse(cls, text: str) -> "NodeKind":
        return cls(text.strip().lower())


@dataclass(frozen=True)
class NodeRef:
    id: int
    kind: NodeKind
    label: str
    entity_type: str | None = None

    @property
    def is_item(self) -> bool:
        return self.kind is NodeKind.ITEM


@dataclass(frozen=True)
class RelationType:
    id: int
    name: str
    is_inverse: bool = False


def inverse_name(name: str) -> str:
    """Name of the reverse relation (``r`` <-> ``r⁻¹``)."""
    if name.endswith(INVERSE_SUFFIX):
        return name[: -len(INVERSE_SUFFIX)]
    return name + INVERSE_SUFFIX


@dataclass(frozen=True)
class AssociationPair:
    a: int
    b: int
    assoc: str
    label: int = 1

    def __post_init__(self) -> None:
        if self.a == self.b:
            raise ValueError(f"association pair with identical endpoints: {self.a}")
        if self.assoc not in ASSOC_TYPES:
            raise ValueError(f"unknown association type {self.assoc!r}")
        if self.label not in (0, 1):
            raise ValueError(f"association label must be 0 or 1, got {self.label}")


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    timestamp: int
    order: int


@dataclass
class InteractionLog:
    """User-item interaction records in file order."""

    records: list[Interaction] = field(default_factory=list)

    def users(self) -> list[int]:
        return sorted({r.user for r in self.records})

    def by_user(self) -> dict[int, list[Interaction]]:
        """Records per user, sorted by (timestamp, file order)."""
        out: dict[int, list[Interaction]] = {}
        for rec in self.records:
            out.setdefault(rec.user, []).append(rec)
        for recs in out.values():
            recs.sort(key=lambda r: (r.timestamp, r.order))
        return out

    def __len__(self) -> int:
        return len(self.records)


@dataclass(frozen=True)
class IngestOptions:
    inverse: bool = True
    whitelist: frozenset[str] | None = None


class HeteroGraph:
    """Immutable typed multi-relational graph over items and KG entities."""

    def __init__(
        self,
        nodes: Sequence[NodeRef],
        relations: Sequence[RelationType],
        adjacency: Sequence[sp.csr_matrix],
        node_type_whitelist: frozenset[str] | None = None,
    ) -> None:
        if len(relations) != len(adjacency):
            raise ValueError("one adjacency matrix per relation required")
        self.nodes: tuple[NodeRef, ...] = tuple(nodes)
        self.relations: tuple[RelationType, ...] = tuple(relations)
        self.node_type_whitelist = node_type_whitelist
        n = len(self.nodes)
        mats = []
        for mat in adjacency:
            mat = sp.csr_matrix(mat, shape=(n, n), dtype=np.float64)
            mat.sum_duplicates()
            mat.eliminate_zeros()
            mat.sort_indices()
            mat.data[:] = 1.0
            mats.append(mat)
        self._adj: tuple[sp.csr_matrix, ...] = tuple(mats)
        self._rel_by_name = {r.name: r for r in self.relations}
        if len(self._rel_by_name) != len(self.relations):
            raise ValueError("relation names must be unique")
        self.items = np.array([nd.id for nd in self.nodes if nd.is_item], dtype=np.int64)
        self._item_pos = np.full(n, -1, dtype=np.int64)
        self._item_pos[self.items] = np.arange(len(self.items))

    # -- basic accessors -------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    def relation(self, key: int | str) -> RelationType:
        if isinstance(key, str):
            try:
                return self._rel_by_name[key]
            except KeyError:
                raise KeyError(f"unknown relation {key!r}") from None
        if not 0 <= key < len(self.relations):
            raise KeyError(f"unknown relation id {key}")
        return self.relations[key]

    def node(self, node_id: int) -> NodeRef:
        if not 0 <= node_id < len(self.nodes):
            raise KeyError(f"unknown node id {node_id}")
        return self.nodes[node_id]

    def inverse_of(self, rel: int) -> int | None:
        twin = self._rel_by_name.get(inverse_name(self.relations[rel].name))
        return None if twin is None else twin.id

    def item_index(self, node_ids: np.ndarray | Sequence[int]) -> np.ndarray:
        """Position of each item node within ``self.items``."""
        pos = self._item_pos[np.asarray(node_ids, dtype=np.int64)]
        if np.any(pos < 0):
            raise KeyError("non-item node passed where an item was expected")
        return pos

    def adjacency(self, rel: int) -> sp.csr_matrix:
        """0/1 CSR adjacency of one relation (read-only view)."""
        return self._adj[self.relation(rel).id]

    def neighbors(self, src: int | NodeRef, rel: int | RelationType | str) -> np.ndarray:
        src_id = src.id if isinstance(src, NodeRef) else int(src)
        self.node(src_id)
        rel_id = rel.id if isinstance(rel, RelationType) else self.relation(rel).id
        mat = self._adj[rel_id]
        return mat.indices[mat.indptr[src_id] : mat.indptr[src_id + 1]].astype(np.int64)

    def out_degree(self, src: int, rel: int) -> int:
        mat = self._adj[self.relation(rel).id]
        return int(mat.indptr[src + 1] - mat.indptr[src])

    def edges(self, forward_only: bool = False) -> Iterator[tuple[int, int, int]]:
        """Yield (src, rel, dst) in (rel, src, dst) order."""
        for rel in self.relations:
            if forward_only and rel.is_inverse:
                continue
            mat = self._adj[rel.id]
            for src in range(self.n_nodes):
                for dst in mat.indices[mat.indptr[src] : mat.indptr[src + 1]]:
                    yield src, rel.id, int(dst)

    def n_edges(self, forward_only: bool = False) -> int:
        return sum(
            self._adj[r.id].nnz for r in self.relations if not (forward_only and r.is_inverse)
        )

    def digest(self) -> str:
        """Content hash over nodes, relation names and adjacency."""
        h = hashlib.sha256()
        for nd in self.nodes:
            h.update(f"{nd.id}\t{nd.kind.value}\t{nd.label}\t{nd.entity_type or ''}\n".encode())
        for rel, mat in zip(self.relations, self._adj):
            h.update(f"{rel.name}:{int(rel.is_inverse)}\n".encode())
            h.update(mat.indptr.astype(np.int64).tobytes())
            h.update(mat.indices.astype(np.int64).tobytes())
        return h.hexdigest()

    def __repr__(self) -> str:
        return (
            f"HeteroGraph(nodes={self.n_nodes}, items={len(self.items)}, "
            f"relations={self.n_relations}, edges={self.n_edges()})"
        )


# -- construction --------------------------------------------------------


def build_graph(
    nodes: Sequence[NodeRef],
    edges: Iterable[tuple[int, str, int]],
    inverse: bool = True,
) -> HeteroGraph:
    """Build a graph from in-memory nodes and (src, relation name, dst) triples.

    Forward relations get ids in order of first appearance. With ``inverse``
    enabled, the twin of forward relation ``j`` is ``R + j`` where ``R`` is the
    number of forward relations.
    """
    n = len(nodes)
    for pos, nd in enumerate(nodes):
        if nd.id != pos:
            raise ValueError(f"node ids must be dense and ordered; got {nd.id} at {pos}")
    names: dict[str, int] = {}
    per_rel: list[tuple[list[int], list[int]]] = []
    for src, name, dst in edges:
        if not (0 <= src < n and 0 <= dst < n):
            raise KeyError(f"edge ({src}, {name}, {dst}) references an unknown node")
        if name not in names:
            names[name] = len(names)
            per_rel.append(([], []))
        rows, cols = per_rel[names[name]]
        rows.append(src)
        cols.append(dst)
    forward = list(names)
    if inverse:
        clash = [nm for nm in forward if inverse_name(nm) in names]
        if clash:
            raise ValueError(f"duplicate relation name after inverse synthesis: {clash[0]!r}")
    relations = [RelationType(i, nm, False) for i, nm in enumerate(forward)]
    mats = [
        sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n)) for r, c in per_rel
    ]
    if inverse:
        k = len(forward)
        relations += [RelationType(k + i, inverse_name(nm), True) for i, nm in enumerate(forward)]
        mats += [m.T.tocsr() for m in mats]
    return HeteroGraph(nodes, relations, mats)


def apply_type_whitelist(g: HeteroGraph, allowed: Iterable[str]) -> HeteroGraph:
    """Drop every edge touching an entity whose type is not in ``allowed``.

    Node ids are kept stable (removed entities stay in the node table but are
    isolated), so item ids and downstream feature caches stay aligned.
    """
    allowed = frozenset(allowed)
    if not allowed:
        raise ValueError("whitelist must be non-empty")
    keep = np.array(
        [nd.is_item or (nd.entity_type in allowed) for nd in g.nodes], dtype=np.float64
    )
    mask = sp.diags(keep)
    mats = [(mask @ g.adjacency(r.id) @ mask).tocsr() for r in g.relations]
    for m in mats:
        m.eliminate_zeros()
    prior = g.node_type_whitelist
    wl = allowed if prior is None else (allowed & prior)
    return HeteroGraph(g.nodes, g.relations, mats, node_type_whitelist=wl)


# -- file formats --------------------------------------------------------


def _data_lines(path: str | Path) -> Iterator[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line.split("\t")


def read_nodes(path: str | Path) -> list[NodeRef]:
    nodes: list[NodeRef] = []
    for lineno, cols in _data_lines(path):
        if len(cols) not in (3, 4):
            raise GraphFormatError(path, lineno, f"expected 3 or 4 columns, got {len(cols)}")
        try:
            node_id = int(cols[0])
            kind = NodeKind.parse(cols[1])
        except ValueError as exc:
            raise GraphFormatError(path, lineno, str(exc)) from None
        if node_id != len(nodes):
            raise GraphFormatError(
                path, lineno, f"node ids must be dense and in order; expected {len(nodes)}"
            )
        etype = cols[3].strip() if len(cols) == 4 and cols[3].strip() else None
        nodes.append(NodeRef(node_id, kind, cols[2], etype if kind is NodeKind.ENTITY else None))
    return nodes


def read_edges(path: str | Path, n_nodes: int) -> list[tuple[int, str, int]]:
    edges = []
    for lineno, cols in _data_lines(path):
        if len(cols) != 3:
            raise GraphFormatError(path, lineno, f"expected 3 columns, got {len(cols)}")
        try:
            src, dst = int(cols[0]), int(cols[2])
        except ValueError as exc:
            raise GraphFormatError(path, lineno, str(exc)) from None
        name = cols[1].strip()
        if not name:
            raise GraphFormatError(path, lineno, "empty relation name")
        for ref in (src, dst):
            if not 0 <= ref < n_nodes:
                raise GraphFormatError(path, lineno, f"undeclared node id {ref}")
        edges.append((src, name, dst))
    return edges


def load_graph(
    edge_file: str | Path, node_file: str | Path, options: IngestOptions | None = None
) -> HeteroGraph:
    """Read the node and edge TSV files into a :class:`HeteroGraph`."""
    options = options or IngestOptions()
    nodes = read_nodes(node_file)
    edges = read_edges(edge_file, len(nodes))
    g = build_graph(nodes, edges, inverse=options.inverse)
    if options.whitelist is not None:
        g = apply_type_whitelist(g, options.whitelist)
    logger.info("loaded %r", g)
    return g


def write_graph(g: HeteroGraph, node_file: str | Path, edge_file: str | Path) -> None:
    """Write forward edges and the node table; inverses are re-synthesised on load."""
    with open(node_file, "w", encoding="utf-8") as fh:
        fh.write("# node_id\tkind\tlabel\tentity_type\n")
        for nd in g.nodes:
            fh.write(f"{nd.id}\t{nd.kind.value}\t{nd.label}\t{nd.entity_type or ''}\n")
    with open(edge_file, "w", encoding="utf-8") as fh:
        fh.write("# src_id\trelation\tdst_id\n")
        for src, rel, dst in g.edges(forward_only=True):
            fh.write(f"{src}\t{g.relations[rel].name}\t{dst}\n")


def load_associations(path: str | Path, g: HeteroGraph | None = None) -> list[AssociationPair]:
    pairs = []
    for lineno, cols in _data_lines(path):
        if len(cols) != 4:
            raise GraphFormatError(path, lineno, f"expected 4 columns, got {len(cols)}")
        try:
            a, b, label = int(cols[0]), int(cols[1]), int(cols[3])
            pair = AssociationPair(a, b, cols[2].strip(), label)
        except (ValueError, KeyError) as exc:
            raise GraphFormatError(path, lineno, str(exc)) from None
        if g is not None:
            for ref in (a, b):
                if not (0 <= ref < g.n_nodes and g.nodes[ref].is_item):
                    raise GraphFormatError(path, lineno, f"node {ref} is not a declared item")
        pairs.append(pair)
    return pairs


def write_associations(pairs: Iterable[AssociationPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# item_a\titem_b\tassoc_type\tlabel\n")
        for p in pairs:
            fh.write(f"{p.a}\t{p.b}\t{p.assoc}\t{p.label}\n")


def load_interactions(path: str | Path) -> InteractionLog:
    records = []
    for lineno, cols in _data_lines(path):
        if len(cols) not in (2, 3):
            raise GraphFormatError(path, lineno, f"expected 2 or 3 columns, got {len(cols)}")
        try:
            user, item = int(cols[0]), int(cols[1])
            ts = int(cols[2]) if len(cols) == 3 and cols[2].strip() else len(records)
        except ValueError as exc:
            raise GraphFormatError(path, lineno, str(exc)) from None
        records.append(Interaction(user, item, ts, len(records)))
    return InteractionLog(records)


def write_interactions(log: InteractionLog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# user_id\titem_id\ttimestamp\n")
        for r in log.records:
            fh.write(f"{r.user}\t{r.item}\t{r.timestamp}\n")


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
