"""Population initialization and architecture mutation operators.

Every operator is a pure function of an immutable graph plus an explicit
``numpy.random.Generator``; with a fixed generator state the output is fixed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graph import (APPEARANCE_STEM, INTERMEDIATE, MOTION_STEM, TOP_LEVEL, ArchitectureGraph,
                    BlockNode, sigmoid, validate_graph)
from .schedule import DESK_BUDGET

_LEVEL_STRIDES = {1: 1, 2: 2, 3: 2, 4: 2}


class MutationRejected(ValueError):
    """The operator does not apply to the chosen node(s); draw another."""


class InitializationError(RuntimeError):
    pass


@dataclass
class MutationConfig:
    b_mode: str = "uniform"              # "uniform" or "constant"
    b: float = 0.5
    max_ops_per_child: int = 4
    allowed_resolutions: tuple[int, ...] = (1, 2, 4, 8)
    init_edge_prob: float = 0.5
    init_splits: tuple[int, int] = (1, 5)
    stem_counts: tuple[int, ...] = (2, 4)
    stem_channels: dict[int, int] = field(default_factory=lambda: {2: 8, 4: 4})
    level_channel_budget: dict[int, int] = field(default_factory=lambda: dict(DESK_BUDGET))
    inherit_logits: bool = True
    min_channels: int = 1
    max_init_retries: int = 1000
    standard_edge_fraction: float = 1 / 3

    def __post_init__(self):
        if self.b_mode not in ("uniform", "constant"):
            raise ValueError(f"b_mode must be 'uniform' or 'constant', got {self.b_mode!r}")
        if not 0 < self.b < 1:
            raise ValueError("b must lie in (0, 1)")
        if not 0 < self.init_edge_prob <= 1:
            raise ValueError("init_edge_prob must lie in (0, 1]")
        lo, hi = self.init_splits
        if not 0 <= lo <= hi:
            raise ValueError("init_splits must be an increasing (low, high) pair")


# ------------------------------------------------------------ node operators


def split_node(g: ArchitectureGraph, node_id: int, rng: np.random.Generator | None = None,
               min_channels: int = 1) -> ArchitectureGraph:
    """Replace a node by two half-width twins sharing its inputs and outputs."""
    n = g.node(node_id)
    if n.kind != INTERMEDIATE:
        raise MutationRejected(f"node {node_id} is a stem")
    if n.channels % 2 or n.channels // 2 < min_channels:
        raise MutationRejected(f"node {node_id} has C={n.channels}, cannot halve")
    a, b = g.next_id(), g.next_id() + 1
    half = n.channels // 2
    nodes = [m for m in g.nodes if m.id != node_id]
    nodes += [BlockNode(a, n.level, n.kind, half, n.temporal_resolution, n.spatial_stride),
              BlockNode(b, n.level, n.kind, half, n.temporal_resolution, n.spatial_stride)]
    edges = {}
    for (s, d), w in g.edges.items():
        if d == node_id:
            edges[(s, a)] = edges[(s, b)] = w
        elif s == node_id:
            edges[(a, d)] = edges[(b, d)] = w
        else:
            edges[(s, d)] = w
    return g.with_nodes(nodes, edges)


def merge_nodes(g: ArchitectureGraph, id_a: int, id_b: int, rng: np.random.Generator) -> ArchitectureGraph:
    """Fuse two same-level nodes; connections are unioned, keeping the larger
    logit where both nodes shared a neighbour."""
    na, nb = g.node(id_a), g.node(id_b)
    if id_a == id_b:
        raise MutationRejected("cannot merge a node with itself")
    if na.kind != INTERMEDIATE or nb.kind != INTERMEDIATE:
        raise MutationRejected("only intermediate nodes merge")
    if na.level != nb.level:
        raise MutationRejected(f"nodes {id_a} and {id_b} are on different levels")
    new = g.next_id()
    r = int(rng.choice([na.temporal_resolution, nb.temporal_resolution]))
    nodes = [m for m in g.nodes if m.id not in (id_a, id_b)]
    nodes.append(BlockNode(new, na.level, INTERMEDIATE, na.channels + nb.channels, r, na.spatial_stride))
    edges: dict[tuple[int, int], float] = {}
    for (s, d), w in g.edges.items():
        key = (new if s in (id_a, id_b) else s, new if d in (id_a, id_b) else d)
        edges[key] = max(w, edges[key]) if key in edges else w
    return g.with_nodes(nodes, edges)


def change_temporal_resolution(g: ArchitectureGraph, node_id: int, rng: np.random.Generator,
                               allowed: tuple[int, ...] = (1, 2, 4, 8)) -> ArchitectureGraph:
    n = g.node(node_id)
    if n.kind == MOTION_STEM:
        raise MutationRejected("motion stems have no temporal convolution")
    choices = [r for r in allowed if r != n.temporal_resolution]
    if not choices:
        raise MutationRejected("no alternative resolution")
    return g.replace_node(node_id, temporal_resolution=int(rng.choice(choices)))


# ------------------------------------------------------------------- repair


def _chain_complete(g: ArchitectureGraph) -> set[int]:
    """Nodes reached from a stem by a path visiting every level below them."""
    done = {n.id for n in g.stems()}
    for n in g.topological_order():
        if not n.is_stem and any(s in done and g.node(s).level == n.level - 1 for s in g.inputs(n.id)):
            done.add(n.id)
    return done


def repair(g: ArchitectureGraph, rng: np.random.Generator, max_steps: int = 10_000) -> ArchitectureGraph:
    """Add random logit-0 edges until ``g`` validates. Never removes an edge."""
    for _ in range(max_steps):
        report = validate_graph(g)
        if report.ok:
            return g
        codes = report.codes()
        if codes - {"no_input", "no_output", "depth"}:
            raise ValueError(f"graph cannot be repaired by adding edges:\n{report}")
        edges = dict(g.edges)
        v = next((v for v in report.violations if v.code in ("no_input", "no_output")), None)
        if v is not None:
            n = g.node(v.ids[0])
            if v.code == "no_input":
                pool = [m.id for m in g.nodes if m.level < n.level]
                edges[(int(rng.choice(pool)), n.id)] = 0.0
            else:
                pool = [m.id for m in g.nodes if m.level > n.level]
                edges[(n.id, int(rng.choice(pool)))] = 0.0
        else:
            done = _chain_complete(g)
            pool = [(u, w.id) for u in sorted(done) for w in g.nodes
                    if w.level == g.node(u).level + 1 and w.id not in done and (u, w.id) not in g.edges]
            if not pool:
                raise ValueError("depth cannot be repaired: a level has no nodes")
            edges[pool[int(rng.integers(len(pool)))]] = 0.0
        g = g.with_edges(edges)
    raise RuntimeError("repair did not converge")


# ------------------------------------------------------------- edge operators


def guided_edge_sets(parent: ArchitectureGraph, cfg: MutationConfig, rng: np.random.Generator):
    """Kept parent edges and newly drawn edges, before repair.

    A parent edge survives when its gate exceeds the threshold B (constant,
    or a fresh uniform draw per edge). Each absent edge is then added with
    probability |dropped| / |absent|, so on average as many edges are added
    as were dropped.
    """
    kept, dropped = {}, 0
    for e, w in parent.edges.items():
        threshold = cfg.b if cfg.b_mode == "constant" else rng.random()
        if sigmoid(w) > threshold:
            kept[e] = w
        else:
            dropped += 1
    absent = [e for e in parent.possible_edges() if e not in parent.edges]
    added = set()
    if absent:
        prob = dropped / len(absent)
        for e in absent:
            if prob > rng.random():
                added.add(e)
    assert kept.keys() <= parent.edges.keys() and not (added & parent.edges.keys())
    return kept, added


def guided_edge_mutation(parent: ArchitectureGraph, cfg: MutationConfig, rng: np.random.Generator) -> ArchitectureGraph:
    kept, added = guided_edge_sets(parent, cfg, rng)
    edges = {e: (w if cfg.inherit_logits else 0.0) for e, w in kept.items()}
    edges.update({e: 0.0 for e in added})
    child = repair(parent.with_edges(edges), rng)
    assert kept.keys() <= child.edges.keys()
    return child


def random_edge_mutation(g: ArchitectureGraph, fraction: float, rng: np.random.Generator,
                         inherit_logits: bool = True) -> ArchitectureGraph:
    """Toggle round(fraction * |possible edges|) uniformly chosen edge slots."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    slots = g.possible_edges()
    n = int(np.floor(fraction * len(slots) + 0.5))
    edges = {e: (w if inherit_logits else 0.0) for e, w in g.edges.items()}
    for i in sorted(rng.choice(len(slots), size=n, replace=False)) if n else []:
        e = slots[int(i)]
        if e in edges:
            del edges[e]
        else:
            edges[e] = 0.0
    return repair(g.with_edges(edges), rng)


# ----------------------------------------------------------- initialization


def random_architecture(cfg: MutationConfig, rng: np.random.Generator) -> ArchitectureGraph:
    """One randomly connected, overly connected starting architecture."""
    budget = cfg.level_channel_budget
    for _ in range(cfg.max_init_retries):
        n_stems = int(rng.choice(cfg.stem_counts))
        stem_c = cfg.stem_channels[n_stems]
        nodes = []
        for i in range(n_stems):
            kind = APPEARANCE_STEM if i < n_stems // 2 else MOTION_STEM
            nodes.append(BlockNode(i, 0, kind, stem_c, int(rng.choice(cfg.allowed_resolutions)), 4))
        nid = n_stems
        for level in (1, 2, 3, 4):
            parts = [budget[level]] if level == TOP_LEVEL else [budget[level] // 2, budget[level] - budget[level] // 2]
            for c in parts:
                nodes.append(BlockNode(nid, level, INTERMEDIATE, c, 1, _LEVEL_STRIDES[level]))
                nid += 1
        g = ArchitectureGraph(nodes, {}, budget)
        lo, hi = cfg.init_splits
        for _ in range(int(rng.integers(lo, hi + 1))):
            eligible = [n.id for n in g.intermediates()
                        if n.channels % 2 == 0 and n.channels // 2 >= cfg.min_channels]
            if not eligible:
                break
            g = split_node(g, int(rng.choice(eligible)), rng, cfg.min_channels)
        for n in g.intermediates():
            g = g.replace_node(n.id, temporal_resolution=int(rng.choice(cfg.allowed_resolutions)))
        edges = {e: 0.0 for e in g.possible_edges() if rng.random() < cfg.init_edge_prob}
        g = g.with_edges(edges)
        if validate_graph(g).ok:
            return g
    raise InitializationError(f"no valid architecture within {cfg.max_init_retries} draws")


def init_population(size: int, cfg: MutationConfig, rng: np.random.Generator) -> list[ArchitectureGraph]:
    if size < 2:
        raise ValueError("population size must be at least 2")
    return [random_architecture(cfg, rng) for _ in range(size)]


# -------------------------------------------------------------- child maker


def _random_split(g, cfg, rng):
    eligible = [n.id for n in g.intermediates() if n.channels % 2 == 0 and n.channels // 2 >= cfg.min_channels]
    if not eligible:
        raise MutationRejected("no node with an even channel count")
    nid = int(rng.choice(eligible))
    return split_node(g, nid, rng, cfg.min_channels), f"split({nid})"


def _random_merge(g, cfg, rng):
    levels = [lv for lv in (1, 2, 3, 4) if len(g.nodes_at(lv)) >= 2]
    if not levels:
        raise MutationRejected("no level with two nodes")
    level = int(rng.choice(levels))
    ids = [n.id for n in g.nodes_at(level)]
    a, b = (int(i) for i in rng.choice(ids, size=2, replace=False))
    return merge_nodes(g, a, b, rng), f"merge({a},{b})"


def _random_resolution(g, cfg, rng):
    nid = int(rng.choice([n.id for n in g.intermediates()]))
    return change_temporal_resolution(g, nid, rng, cfg.allowed_resolutions), f"resolution({nid})"


NODE_OPERATORS: dict[str, Callable] = {
    "split": _random_split,
    "merge": _random_merge,
    "resolution": _random_resolution,
}

STRATEGIES = ("guided", "standard_random_edges", "pure_random_search")


def make_child(parent: ArchitectureGraph, strategy: str, cfg: MutationConfig,
               rng: np.random.Generator) -> tuple[ArchitectureGraph, list[str]]:
    """Edge step for the strategy, then 0..max_ops random node operators."""
    if strategy == "pure_random_search":
        return random_architecture(cfg, rng), ["random"]
    if strategy == "guided":
        child, log = guided_edge_mutation(parent, cfg, rng), ["guided_edges"]
    elif strategy == "standard_random_edges":
        child = random_edge_mutation(parent, cfg.standard_edge_fraction, rng, cfg.inherit_logits)
        log = ["random_edges"]
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    n_ops = int(rng.integers(0, cfg.max_ops_per_child + 1))
    names = list(NODE_OPERATORS)
    for _ in range(n_ops):
        while True:
            op = names[int(rng.integers(len(names)))]
            try:
                child, desc = NODE_OPERATORS[op](child, cfg, rng)
                break
            except MutationRejected:
                continue
        log.append(desc)
    return child, log
