"""Constraint intersection graphs and tree decompositions.

Vertices are constraint ids. Two constraints are adjacent when some block
touches both; the constraints touching one block therefore form a clique.
The dynamic program needs a rooted decomposition whose leaves are exactly
one designated node per block, with that node's bag equal to the block's
clique, and at most two children per node.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

from .model import Problem


class InvalidDecomposition(ValueError):
    pass


@dataclass(frozen=True)
class IntersectionGraph:
    n_vertices: int
    edges: frozenset[tuple[int, int]]
    cliques: tuple[frozenset[int], ...]
    incidence: tuple[frozenset[int], ...] = ()

    @cached_property
    def adjacency(self) -> tuple[frozenset[int], ...]:
        adj: list[set[int]] = [set() for _ in range(self.n_vertices)]
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return tuple(frozenset(s) for s in adj)

    def has_edge(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges

    def without(self, vertices: Iterable[int]) -> "IntersectionGraph":
        """Same vertex ids, with every edge at ``vertices`` dropped."""
        drop = set(vertices)
        return IntersectionGraph(self.n_vertices,
                                 frozenset(e for e in self.edges if not drop & set(e)),
                                 tuple(frozenset(k - drop) for k in self.cliques),
                                 self.incidence)


def _clique_edges(cliques: Iterable[Iterable[int]]) -> frozenset[tuple[int, int]]:
    edges = set()
    for k in cliques:
        k = sorted(k)
        for a in range(len(k)):
            for b in range(a + 1, len(k)):
                edges.add((k[a], k[b]))
    return frozenset(edges)


def build_intersection_graph(p: Problem) -> IntersectionGraph:
    return IntersectionGraph(p.m, _clique_edges(p.cliques), p.cliques, p.incidence)


def graph_from_cliques(n_vertices: int, cliques: Sequence[Iterable[int]]) -> IntersectionGraph:
    cliques = tuple(frozenset(k) for k in cliques)
    return IntersectionGraph(n_vertices, _clique_edges(cliques), cliques)


# -- unrooted decompositions -------------------------------------------------

@dataclass(frozen=True)
class TreeDecomposition:
    bags: Mapping[int, frozenset[int]]
    edges: tuple[tuple[int, int], ...]

    @property
    def nodes(self) -> list[int]:
        return sorted(self.bags)

    @cached_property
    def neighbors(self) -> dict[int, set[int]]:
        nb = {t: set() for t in self.bags}
        for a, b in self.edges:
            nb[a].add(b)
            nb[b].add(a)
        return nb

    @property
    def width(self) -> int:
        return width(self)

    def to_dict(self) -> dict:
        children = _orient(self.neighbors, min(self.bags)) if self.bags else {}
        return {"nodes": [{"id": t, "bag": sorted(self.bags[t]), "children": children[t]}
                          for t in self.nodes],
                "root": min(self.bags) if self.bags else None}


def width(td) -> int:
    """Largest bag size minus one; -1 when every bag is empty."""
    return max((len(b) for b in td.bags.values()), default=0) - 1


def _orient(neighbors: Mapping[int, set[int]], root: int) -> dict[int, list[int]]:
    children = {t: [] for t in neighbors}
    seen = {root}
    stack = [root]
    while stack:
        t = stack.pop()
        for s in sorted(neighbors[t]):
            if s not in seen:
                seen.add(s)
                children[t].append(s)
                stack.append(s)
    return children


def _is_tree(nodes: Sequence[int], edges: Sequence[tuple[int, int]]) -> bool:
    if not nodes:
        return False
    if len(edges) != len(nodes) - 1:
        return False
    nb = {t: set() for t in nodes}
    for a, b in edges:
        if a not in nb or b not in nb or a == b:
            return False
        nb[a].add(b)
        nb[b].add(a)
    seen = {nodes[0]}
    stack = [nodes[0]]
    while stack:
        t = stack.pop()
        for s in nb[t] - seen:
            seen.add(s)
            stack.append(s)
    return len(seen) == len(nodes)


def decomposition_errors(g: IntersectionGraph, bags: Mapping[int, frozenset[int]],
                         edges: Sequence[tuple[int, int]],
                         required: Iterable[int] | None = None) -> list[str]:
    """Every way in which ``(bags, edges)`` fails to decompose ``g``.
    Only vertices in ``required`` (default: all) must appear in a bag."""
    required = set(range(g.n_vertices) if required is None else required)
    errors = []
    nodes = sorted(bags)
    if not _is_tree(nodes, edges):
        errors.append("decomposition graph is not a tree")
        return errors
    nb = {t: set() for t in nodes}
    for a, b in edges:
        nb[a].add(b)
        nb[b].add(a)
    for t, bag in bags.items():
        extra = [r for r in bag if not 0 <= r < g.n_vertices]
        if extra:
            errors.append(f"node {t}: unknown vertices {extra}")
    for r in range(g.n_vertices):
        holding = {t for t in nodes if r in bags[t]}
        if not holding:
            if r not in required:
                continue
            errors.append(f"vertex {r} appears in no bag")
            continue
        start = next(iter(holding))
        seen = {start}
        stack = [start]
        while stack:
            t = stack.pop()
            for s in nb[t] & holding:
                if s not in seen:
                    seen.add(s)
                    stack.append(s)
        if seen != holding:
            errors.append(f"nodes holding vertex {r} are not connected")
    for a, b in sorted(g.edges):
        if not any(a in bag and b in bag for bag in bags.values()):
            errors.append(f"edge ({a}, {b}) not covered by any bag")
    return errors


def validate_decomposition(g: IntersectionGraph, td: TreeDecomposition) -> TreeDecomposition:
    errors = decomposition_errors(g, td.bags, td.edges)
    if errors:
        raise InvalidDecomposition("; ".join(errors))
    return td


def min_fill(g: IntersectionGraph) -> TreeDecomposition:
    """Greedy min-fill elimination, ties broken by the lowest vertex id.

    Each eliminated vertex gives a bag (itself plus its remaining
    neighbours) attached to the bag of the earliest-eliminated of those
    neighbours. Components end up as separate trees, chained together.
    """
    n = g.n_vertices
    if n == 0:
        return TreeDecomposition({0: frozenset()}, ())
    adj = [set(s) for s in g.adjacency]
    alive = set(range(n))
    order, bag_of = [], {}

    def fill(v):
        nb = sorted(adj[v])
        return sum(1 for a in range(len(nb)) for b in range(a + 1, len(nb)) if nb[b] not in adj[nb[a]])

    while alive:
        v = min(alive, key=lambda u: (fill(u), u))
        nb = adj[v]
        for a in nb:
            adj[a] |= nb - {a}
            adj[a].discard(v)
        bag_of[v] = frozenset(nb | {v})
        order.append(v)
        alive.remove(v)
        adj[v] = set()
    pos = {v: k for k, v in enumerate(order)}
    edges = []
    roots = []
    for v in order:
        later = [u for u in bag_of[v] if u != v]
        if later:
            parent = min(later, key=pos.__getitem__)
            edges.append((min(v, parent), max(v, parent)))
        else:
            roots.append(v)
    for a, b in zip(roots, roots[1:]):
        edges.append((min(a, b), max(a, b)))
    return TreeDecomposition(dict(bag_of), tuple(sorted(edges)))


def tree_decomposition(g: IntersectionGraph, supplied: "TreeDecomposition | None" = None):
    """Validated ``supplied`` decomposition, or a min-fill one.

    A supplied :class:`RootedBinaryDecomposition` is validated as such and
    returned unchanged.
    """
    if supplied is None:
        return min_fill(g)
    if isinstance(supplied, RootedBinaryDecomposition):
        return supplied
    return validate_decomposition(g, supplied)


def add_to_all_bags(td: TreeDecomposition, vertices: Iterable[int]) -> TreeDecomposition:
    """Put ``vertices`` in every bag, e.g. a global cardinality row."""
    extra = frozenset(vertices)
    return TreeDecomposition({t: bag | extra for t, bag in td.bags.items()}, td.edges)


def cover_missing(td: TreeDecomposition, p: Problem) -> TreeDecomposition:
    """Place constraints that appear in no bag, such as rows appended by
    normalization. Each goes into the first bag holding every other
    constraint of each block it touches, or into a new pendant bag."""
    bags = {t: set(b) for t, b in td.bags.items()}
    edges = list(td.edges)
    present = set().union(*bags.values()) if bags else set()
    for r in range(p.m):
        if r in present:
            continue
        need = set().union(*(p.cliques[i] for i in p.incidence[r])) - {r} if p.incidence[r] else set()
        host = next((t for t in sorted(bags) if need <= bags[t]), None)
        if host is not None:
            bags[host].add(r)
        elif not need:
            new = max(bags, default=-1) + 1
            if bags:
                edges.append((min(bags), new))
            bags[new] = {r}
        else:
            raise InvalidDecomposition(f"no bag holds the neighbours of constraint {r}")
        present.add(r)
    return TreeDecomposition({t: frozenset(b) for t, b in bags.items()}, tuple(sorted(edges)))


# -- rooted binary decompositions -------------------------------------------

@dataclass(frozen=True)
class RootedBinaryDecomposition:
    bags: Mapping[int, frozenset[int]]
    children: Mapping[int, tuple[int, ...]]
    root: int
    designated: Mapping[int, int]
    mixed: frozenset[int] = frozenset()
    orphans: frozenset[int] = frozenset()

    @cached_property
    def parent(self) -> dict[int, int | None]:
        par: dict[int, int | None] = {self.root: None}
        for t, ch in self.children.items():
            for s in ch:
                par[s] = t
        return par

    @cached_property
    def postorder(self) -> tuple[int, ...]:
        out, stack = [], [(self.root, False)]
        while stack:
            t, done = stack.pop()
            if done:
                out.append(t)
                continue
            stack.append((t, True))
            for s in reversed(self.children[t]):
                stack.append((s, False))
        return tuple(out)

    @cached_property
    def leaf_block(self) -> dict[int, int]:
        return {t: i for i, t in self.designated.items()}

    @cached_property
    def blocks_below(self) -> dict[int, frozenset[int]]:
        """Blocks whose designated leaf lies below each node."""
        out = {}
        for t in self.postorder:
            acc = set()
            if t in self.leaf_block:
                acc.add(self.leaf_block[t])
            for s in self.children[t]:
                acc |= out[s]
            out[t] = frozenset(acc)
        return out

    @cached_property
    def depth(self) -> dict[int, int]:
        d = {self.root: 0}
        for t in reversed(self.postorder):
            for s in self.children[t]:
                d[s] = d[t] + 1
        return d

    @cached_property
    def finalized(self) -> dict[int, frozenset[int]]:
        """Constraints whose bag-subtree is topped by each node. Constraints
        in no bag (touching no block) are assigned to the root."""
        top: dict[int, int] = {}
        for t in self.postorder:
            for r in self.bags[t]:
                if r not in top or self.depth[t] < self.depth[top[r]]:
                    top[r] = t
        out = {t: set() for t in self.bags}
        for r, t in top.items():
            out[t].add(r)
        out[self.root] |= self.orphans
        return {t: frozenset(s) for t, s in out.items()}

    def bag_mixed(self, t: int) -> tuple[int, ...]:
        return tuple(sorted(r for r in self.bags[t] if r in self.mixed))

    def bag_combinatorial(self, t: int) -> tuple[int, ...]:
        return tuple(sorted(r for r in self.bags[t] if r not in self.mixed))

    @property
    def width(self) -> int:
        return width(self)

    @property
    def n_nodes(self) -> int:
        return len(self.bags)

    def to_dict(self) -> dict:
        return {"nodes": [{"id": t, "bag": sorted(self.bags[t]), "children": list(self.children[t])}
                          for t in sorted(self.bags)],
                "root": self.root,
                "designated": {str(i): t for i, t in sorted(self.designated.items())}}


def _rbd_errors(p: Problem, rbd: RootedBinaryDecomposition) -> list[str]:
    g = build_intersection_graph(p)
    errors = []
    nodes = sorted(rbd.bags)
    edges = [(t, s) for t in nodes for s in rbd.children.get(t, ())]
    if rbd.root not in rbd.bags:
        return [f"root {rbd.root} is not a node"]
    seen_child = set()
    for t in nodes:
        ch = rbd.children.get(t, ())
        if len(ch) > 2:
            errors.append(f"node {t} has {len(ch)} children")
        for s in ch:
            if s in seen_child or s == rbd.root:
                errors.append(f"node {s} has more than one parent")
            seen_child.add(s)
    if errors:
        return errors
    # constraints touching no block need not appear anywhere
    errors += decomposition_errors(g, rbd.bags, edges, required=[r for r in range(p.m) if p.incidence[r]])
    if errors:
        return errors
    leaves = {t for t in nodes if not rbd.children.get(t)}
    if set(rbd.designated) != set(range(p.n_blocks)):
        errors.append("every block needs exactly one designated leaf")
    for i, t in rbd.designated.items():
        if t not in leaves:
            errors.append(f"designated node {t} of block {i} is not a leaf")
        elif rbd.bags[t] != p.cliques[i]:
            errors.append(f"designated leaf {t} of block {i} has bag {sorted(rbd.bags[t])}, "
                          f"expected {sorted(p.cliques[i])}")
    if len(set(rbd.designated.values())) != len(rbd.designated):
        errors.append("two blocks share a designated leaf")
    stray = leaves - set(rbd.designated.values())
    if stray:
        errors.append(f"leaves {sorted(stray)} are not designated")
    if rbd.root in leaves and len(nodes) > 1:
        errors.append("root is a leaf")
    return errors


def validate_rooted(p: Problem, rbd: RootedBinaryDecomposition) -> RootedBinaryDecomposition:
    errors = _rbd_errors(p, rbd)
    if errors:
        raise InvalidDecomposition("; ".join(errors))
    return _with_meta(p, rbd)


def _with_meta(p: Problem, rbd: RootedBinaryDecomposition) -> RootedBinaryDecomposition:
    return RootedBinaryDecomposition(
        {t: frozenset(b) for t, b in rbd.bags.items()},
        {t: tuple(rbd.children.get(t, ())) for t in rbd.bags},
        rbd.root, dict(rbd.designated), frozenset(p.mixed_ids),
        frozenset(r for r in range(p.m) if not any(r in b for b in rbd.bags.values())))


def normalize_decomposition(td, p: Problem) -> RootedBinaryDecomposition:
    """Rooted form with one designated leaf per block and at most two
    children per node.

    Steps: attach a leaf with bag ``K_i`` to the lowest-id node whose bag
    contains ``K_i``; prune non-designated leaves to a fixpoint; root at
    the lowest-id non-leaf; split nodes with more than two children into
    chains of copies; finally drop a constraint from any bag where it sits
    at the end of its subtree without being at a leaf of the whole tree,
    again to a fixpoint.
    """
    if isinstance(td, RootedBinaryDecomposition):
        return validate_rooted(p, td)
    bags = {t: set(b) for t, b in td.bags.items()}
    nb = {t: set(s) for t, s in td.neighbors.items()}
    next_id = max(bags) + 1
    designated = {}
    for i in range(p.n_blocks):
        k = p.cliques[i]
        host = next((t for t in sorted(td.bags) if k <= td.bags[t]), None)
        if host is None:
            raise InvalidDecomposition(f"no bag contains the constraints of block {i}")
        leaf = next_id
        next_id += 1
        bags[leaf] = set(k)
        nb[leaf] = {host}
        nb[host].add(leaf)
        designated[i] = leaf
    keep = set(designated.values())

    # prune non-designated leaves
    queue = sorted(t for t in bags if t not in keep and len(nb[t]) <= 1)
    while queue and len(bags) > 1:
        t = queue.pop(0)
        if t not in bags or t in keep or len(nb[t]) > 1:
            continue
        for s in nb[t]:
            nb[s].discard(t)
            if s not in keep and len(nb[s]) <= 1:
                queue.append(s)
        del bags[t], nb[t]
        queue.sort()
    tree_leaves = {t for t in bags if len(nb[t]) <= 1} if len(bags) > 1 else set(bags)

    # root
    inner = sorted(t for t in bags if t not in tree_leaves)
    if inner:
        root = inner[0]
    else:
        root = next_id
        next_id += 1
        leaves = sorted(bags)
        common = set.intersection(*(bags[t] for t in leaves))
        bags[root] = common
        nb[root] = set(leaves)
        for t in leaves:
            nb[t] = {root}
    children = _orient(nb, root)

    # binarize
    for t in sorted(children):
        ch = children[t]
        cur = t
        while len(ch) > 2:
            copy = next_id
            next_id += 1
            bags[copy] = set(bags[t])
            children[cur] = [ch[0], copy]
            ch = ch[1:]
            children[copy] = ch
            cur = copy
    # drop memberships at non-leaf ends of each constraint's subtree
    nb = {t: set(children[t]) for t in children}
    for t, ch in children.items():
        for c in ch:
            nb[c].add(t)
    changed = True
    while changed:
        changed = False
        for t in sorted(bags):
            if t in tree_leaves:
                continue
            for r in sorted(bags[t]):
                if sum(1 for s in nb[t] if r in bags[s]) <= 1:
                    bags[t].discard(r)
                    changed = True
    rbd = RootedBinaryDecomposition({t: frozenset(b) for t, b in bags.items()},
                                    {t: tuple(c) for t, c in children.items()},
                                    root, designated)
    return _with_meta(p, rbd)


# -- file exchange -----------------------------------------------------------

def decomposition_from_dict(raw: Mapping):
    """:class:`RootedBinaryDecomposition` when ``designated`` is present,
    :class:`TreeDecomposition` otherwise."""
    try:
        nodes = raw["nodes"]
        bags = {int(nd["id"]): frozenset(int(r) for r in nd.get("bag", [])) for nd in nodes}
        children = {int(nd["id"]): tuple(int(s) for s in nd.get("children", [])) for nd in nodes}
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidDecomposition(f"malformed decomposition: {exc}") from exc
    if len(bags) != len(nodes):
        raise InvalidDecomposition("duplicate node ids")
    for t, ch in children.items():
        for s in ch:
            if s not in bags:
                raise InvalidDecomposition(f"node {t} lists unknown child {s}")
    if raw.get("designated") is not None:
        root = raw.get("root")
        if root is None:
            raise InvalidDecomposition("rooted decomposition needs a root")
        designated = {int(i): int(t) for i, t in raw["designated"].items()}
        return RootedBinaryDecomposition(bags, children, int(root), designated)
    edges = tuple(sorted((min(t, s), max(t, s)) for t, ch in children.items() for s in ch))
    return TreeDecomposition(bags, edges)


def load_decomposition(path) -> "TreeDecomposition | RootedBinaryDecomposition":
    with open(path, encoding="utf-8") as fh:
        return decomposition_from_dict(json.load(fh))


def dump_decomposition(td, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(td.to_dict(), fh, indent=1)
        fh.write("\n")


def decompose(p: Problem, supplied=None) -> RootedBinaryDecomposition:
    """Graph, decomposition and normalization in one call."""
    g = build_intersection_graph(p)
    return normalize_decomposition(tree_decomposition(g, supplied), p)
