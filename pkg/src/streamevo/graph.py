"""Level-ordered architecture DAGs, validation, parameter accounting, table I/O."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping

from .schedule import TWO_D, LayerSchedule

APPEARANCE_STEM = "appearance_stem"
MOTION_STEM = "motion_stem"
INTERMEDIATE = "intermediate"
STEM_KINDS = (APPEARANCE_STEM, MOTION_STEM)
KINDS = STEM_KINDS + (INTERMEDIATE,)

RESOLUTIONS = (1, 2, 4, 8)
SPATIAL_STRIDES = (1, 2, 4)
LEVELS = (0, 1, 2, 3, 4)
TOP_LEVEL = 4
MIN_DEPTH = 4

DEFAULT_INPUT_CHANNELS = {APPEARANCE_STEM: 3, MOTION_STEM: 2}


def sigmoid(w: float) -> float:
    if w >= 0:
        return 1.0 / (1.0 + math.exp(-w))
    e = math.exp(w)
    return e / (1.0 + e)


@dataclass(frozen=True)
class BlockNode:
    id: int
    level: int
    kind: str
    channels: int
    temporal_resolution: int = 1
    spatial_stride: int = 1

    @property
    def is_stem(self) -> bool:
        return self.kind in STEM_KINDS


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    logit: float = 0.0

    @property
    def gate(self) -> float:
        return sigmoid(self.logit)

    @property
    def key(self) -> tuple[int, int]:
        return (self.src, self.dst)


class ArchitectureGraph:
    """Immutable DAG of blocks with logit-weighted, level-ordered edges.

    Nodes are kept sorted by (level, id). ``edges`` maps (src, dst) to the
    pre-sigmoid logit of that connection.
    """

    __slots__ = ("_nodes", "_by_id", "_edges", "_budget", "_in", "_out")

    def __init__(self, nodes: Iterable[BlockNode], edges: Iterable[Edge] | Mapping = (),
                 level_channel_budget: Mapping[int, int] | None = None):
        nodes = sorted(nodes, key=lambda n: (n.level, n.id))
        by_id = {}
        for n in nodes:
            if n.id in by_id:
                raise ValueError(f"duplicate node id {n.id}")
            by_id[n.id] = n
        if isinstance(edges, Mapping):
            emap = {(int(s), int(d)): float(w) for (s, d), w in edges.items()}
        else:
            emap = {}
            for e in edges:
                if e.key in emap:
                    raise ValueError(f"duplicate edge {e.src}->{e.dst}")
                emap[e.key] = float(e.logit)
        for s, d in emap:
            if s not in by_id or d not in by_id:
                raise ValueError(f"edge {s}->{d} references an unknown node")
        emap = dict(sorted(emap.items()))
        if level_channel_budget is None:
            level_channel_budget = channel_sums(nodes)
        self._nodes = tuple(nodes)
        self._by_id = MappingProxyType(by_id)
        self._edges = MappingProxyType(emap)
        self._budget = MappingProxyType(dict(sorted(level_channel_budget.items())))
        incoming: dict[int, list[int]] = {n.id: [] for n in nodes}
        outgoing: dict[int, list[int]] = {n.id: [] for n in nodes}
        for s, d in emap:
            outgoing[s].append(d)
            incoming[d].append(s)
        self._in = {k: tuple(v) for k, v in incoming.items()}
        self._out = {k: tuple(v) for k, v in outgoing.items()}

    # -- accessors
    @property
    def nodes(self) -> tuple[BlockNode, ...]:
        return self._nodes

    @property
    def edges(self) -> Mapping[tuple[int, int], float]:
        return self._edges

    @property
    def level_channel_budget(self) -> Mapping[int, int]:
        return self._budget

    def edge_list(self) -> list[Edge]:
        return [Edge(s, d, w) for (s, d), w in self._edges.items()]

    def node(self, node_id: int) -> BlockNode:
        return self._by_id[node_id]

    def __contains__(self, node_id) -> bool:
        return node_id in self._by_id

    def nodes_at(self, level: int) -> list[BlockNode]:
        return [n for n in self._nodes if n.level == level]

    def stems(self) -> list[BlockNode]:
        return [n for n in self._nodes if n.is_stem]

    def intermediates(self) -> list[BlockNode]:
        return [n for n in self._nodes if n.kind == INTERMEDIATE]

    def inputs(self, node_id: int) -> tuple[int, ...]:
        return self._in[node_id]

    def outputs(self, node_id: int) -> tuple[int, ...]:
        return self._out[node_id]

    def topological_order(self) -> list[BlockNode]:
        order, indeg = [], {n.id: len(self._in[n.id]) for n in self._nodes}
        ready = [n.id for n in self._nodes if indeg[n.id] == 0]
        while ready:
            ready.sort(key=lambda i: (self._by_id[i].level, i))
            nid = ready.pop(0)
            order.append(self._by_id[nid])
            for d in self._out[nid]:
                indeg[d] -= 1
                if indeg[d] == 0:
                    ready.append(d)
        if len(order) != len(self._nodes):
            raise ValueError("graph contains a cycle")
        return order

    def possible_edges(self) -> list[tuple[int, int]]:
        """All level-increasing (src, dst) pairs over the current nodes."""
        return [(a.id, b.id) for a in self._nodes for b in self._nodes if a.level < b.level]

    def next_id(self) -> int:
        return max((n.id for n in self._nodes), default=-1) + 1

    # -- functional updates
    def with_edges(self, edges: Mapping[tuple[int, int], float]) -> "ArchitectureGraph":
        return ArchitectureGraph(self._nodes, edges, self._budget)

    def with_nodes(self, nodes: Iterable[BlockNode], edges: Mapping[tuple[int, int], float]) -> "ArchitectureGraph":
        return ArchitectureGraph(nodes, edges, self._budget)

    def with_logits(self, logits: Mapping[tuple[int, int], float]) -> "ArchitectureGraph":
        new = dict(self._edges)
        for k, w in logits.items():
            if k not in new:
                raise KeyError(f"no edge {k[0]}->{k[1]}")
            new[k] = float(w)
        return self.with_edges(new)

    def replace_node(self, node_id: int, **changes) -> "ArchitectureGraph":
        nodes = [replace(n, **changes) if n.id == node_id else n for n in self._nodes]
        return ArchitectureGraph(nodes, self._edges, self._budget)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ArchitectureGraph):
            return NotImplemented
        return (self._nodes == other._nodes and dict(self._edges) == dict(other._edges)
                and dict(self._budget) == dict(other._budget))

    def __hash__(self):
        return hash((self._nodes, tuple(self._edges.items())))

    def __repr__(self) -> str:
        return f"ArchitectureGraph({len(self._nodes)} nodes, {len(self._edges)} edges)"


def channel_sums(nodes: Iterable[BlockNode]) -> dict[int, int]:
    sums: dict[int, int] = {}
    for n in nodes:
        if not n.is_stem:
            sums[n.level] = sums.get(n.level, 0) + n.channels
    return sums


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    ids: tuple = ()


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def codes(self) -> set[str]:
        return {v.code for v in self.violations}

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "ok"
        return "\n".join(f"{v.code}: {v.message}" for v in self.violations)


def validate_graph(g: ArchitectureGraph, check_depth: bool = True) -> ValidationReport:
    """Collect every structural violation; never raises."""
    out: list[Violation] = []
    for n in g.nodes:
        if n.level not in LEVELS:
            out.append(Violation("level", f"node {n.id} has level {n.level}", (n.id,)))
        if n.kind not in KINDS:
            out.append(Violation("kind", f"node {n.id} has unknown kind {n.kind!r}", (n.id,)))
        elif n.is_stem != (n.level == 0):
            out.append(Violation("stem_level", f"node {n.id}: kind {n.kind} at level {n.level}", (n.id,)))
        if n.channels < 1:
            out.append(Violation("channels", f"node {n.id} has non-positive channels {n.channels}", (n.id,)))
        if n.temporal_resolution not in RESOLUTIONS:
            out.append(Violation("resolution", f"node {n.id} has resolution {n.temporal_resolution}", (n.id,)))
        if n.spatial_stride not in SPATIAL_STRIDES:
            out.append(Violation("stride", f"node {n.id} has spatial stride {n.spatial_stride}", (n.id,)))
    for (s, d) in g.edges:
        if g.node(s).level >= g.node(d).level:
            out.append(Violation("level_order", f"edge {s}->{d} reverses level ordering "
                                 f"({g.node(s).level} -> {g.node(d).level})", (s, d)))
    sums = channel_sums(g.nodes)
    for level, budget in g.level_channel_budget.items():
        if sums.get(level, 0) != budget:
            out.append(Violation("channel_budget", f"level {level} channel budget {budget} but nodes sum "
                                 f"to {sums.get(level, 0)}", (level,)))
    for level in sums:
        if level not in g.level_channel_budget:
            out.append(Violation("channel_budget", f"level {level} has no channel budget", (level,)))
    for n in g.intermediates():
        if not g.inputs(n.id):
            out.append(Violation("no_input", f"intermediate node {n.id} has no incoming edge", (n.id,)))
        if n.level != TOP_LEVEL and not g.outputs(n.id):
            out.append(Violation("no_output", f"intermediate node {n.id} has no outgoing edge", (n.id,)))
    if check_depth and not any(v.code == "level_order" for v in out):
        depth = longest_path_depth(g)
        if depth < MIN_DEPTH:
            out.append(Violation("depth", f"longest stem-to-level-4 path has {depth} edges (< {MIN_DEPTH})"))
    return ValidationReport(out)


def longest_path_depth(g: ArchitectureGraph) -> int:
    """Edge count of the longest path from any stem to any level-4 node (0 if none)."""
    dist: dict[int, int] = {}
    for n in g.topological_order():
        if n.is_stem:
            dist[n.id] = 0
            continue
        reach = [dist[s] + 1 for s in g.inputs(n.id) if s in dist]
        if reach:
            dist[n.id] = max(reach)
    return max((dist[n.id] for n in g.nodes_at(TOP_LEVEL) if n.id in dist), default=0)


# ------------------------------------------------------ parameter accounting


def live_stems(g: ArchitectureGraph) -> list[BlockNode]:
    """Stems with at least one consumer; unused stems are not compiled."""
    return [n for n in g.stems() if g.outputs(n.id)]


def output_width(node: BlockNode, schedule: LayerSchedule) -> int:
    return node.channels if node.is_stem else schedule.expansion * node.channels


def level_input_width(g: ArchitectureGraph, level: int, schedule: LayerSchedule) -> int:
    """Width every incoming edge is projected to before a level-``level`` block.

    Level 1 reads at the stem width. Deeper levels read at the width of the
    whole previous level's output, ``expansion`` times its channel budget.
    Split and merge never change either quantity, which is what keeps block
    parameter counts exactly additive under those operators.
    """
    if level <= 1:
        return max((n.channels for n in g.stems()), default=0)
    return schedule.expansion * sum(n.channels for n in g.nodes_at(level - 1))


def input_width(g: ArchitectureGraph, node_id: int, schedule: LayerSchedule) -> int:
    """Channel count of a block's aggregated input (fixed per level, see ``level_input_width``)."""
    return level_input_width(g, g.node(node_id).level, schedule)


def stem_parameters(node: BlockNode, schedule: LayerSchedule, in_channels: int) -> int:
    k, s = schedule.stem_spatial_kernel, node.channels
    count = k * k * in_channels * s + 2 * s
    if node.kind == APPEARANCE_STEM:
        count += schedule.stem_temporal_taps * s * s + 2 * s
    return count


def block_parameters(node: BlockNode, schedule: LayerSchedule, c_in: int) -> int:
    """Trainable scalars inside one block given its aggregated input width.

    Every term is linear in the node's channel count and ``c_in`` is fixed per
    level, so splitting or merging nodes leaves the per-level total unchanged.
    """
    c, e, D = node.channels, schedule.expansion, schedule.width(node.level)
    count = 0
    for i, kind in enumerate(schedule.modules(node.level)):
        if i == 0:
            count += c_in * c + 2 * c                      # 1x1 reduce
            count += c_in * e * c + 2 * e * c              # projection shortcut
        else:
            taps = 1 if kind == TWO_D else schedule.block_temporal_taps
            count += taps * e * c + 2 * c                  # grouped 1x1 / temporal
        count += 9 * c * D                                 # 3x3, non-affine BN
        count += D * e * c + 2 * e * c                     # 1x1 expand
    return count


def parameter_breakdown(g: ArchitectureGraph, schedule: LayerSchedule, num_classes: int = 12,
                        input_channels: Mapping[str, int] | None = None,
                        sink_combine: str = "avg") -> dict[str, int]:
    """Trainable-scalar counts by component: stems, blocks, adapters, gates, sink."""
    input_channels = dict(DEFAULT_INPUT_CHANNELS, **(input_channels or {}))
    stems = sum(stem_parameters(n, schedule, input_channels[n.kind]) for n in live_stems(g))
    blocks = adapters = 0
    for n in g.intermediates():
        c_in = input_width(g, n.id, schedule)
        blocks += block_parameters(n, schedule, c_in)
        for s in g.inputs(n.id):
            w = output_width(g.node(s), schedule)
            if w != c_in:
                adapters += w * c_in + 2 * c_in
    top = [output_width(n, schedule) for n in g.nodes_at(TOP_LEVEL)]
    if sink_combine == "concat":
        sink = sum(top) * num_classes + num_classes
    else:
        width = max(top, default=0)
        sink = sum(w * width for w in top if w != width) + width * num_classes + num_classes
    return {"stems": stems, "blocks": blocks, "adapters": adapters, "gates": len(g.edges), "sink": sink}


def parameter_count(g: ArchitectureGraph, schedule: LayerSchedule, num_classes: int = 12,
                    input_channels: Mapping[str, int] | None = None, sink_combine: str = "avg") -> int:
    return sum(parameter_breakdown(g, schedule, num_classes, input_channels, sink_combine).values())


# ----------------------------------------------------------------- table I/O


class TableParseError(ValueError):
    def __init__(self, row: int | None, message: str):
        self.row = row
        where = f"row {row}" if row is not None else "table"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class TableRow:
    index: int
    level: int
    inputs: tuple
    channels: int
    temporal_resolution: int
    spatial_stride: int

    def render(self) -> str:
        ins = ", ".join(str(i) for i in self.inputs)
        return f"{self.index}: {self.level}, [{ins}], {self.channels}, {self.temporal_resolution}, {self.spatial_stride}"


_STEM_TOKENS = {"rgb": APPEARANCE_STEM, "appearance": APPEARANCE_STEM,
                "flow": MOTION_STEM, "motion": MOTION_STEM}
_STEM_NAMES = {APPEARANCE_STEM: "RGB", MOTION_STEM: "Flow"}
_ROW = re.compile(r"^\s*(-?\d+)\s*:\s*(-?\d+)\s*,\s*\[([^\]]*)\]\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*,\s*(-?\d+)\s*$")


def to_table(g: ArchitectureGraph) -> list[TableRow]:
    rows = []
    for n in g.nodes:
        inputs = (_STEM_NAMES[n.kind],) if n.is_stem else g.inputs(n.id)
        rows.append(TableRow(n.id, n.level, tuple(inputs), n.channels, n.temporal_resolution, n.spatial_stride))
    return rows


def encode_table(g: ArchitectureGraph) -> str:
    """Render ``g`` as table text: one row per node plus an edge-logit section."""
    lines = ["# index: level, [inputs], C, r, spatial_stride"]
    lines += [r.render() for r in to_table(g)]
    if g.edges:
        lines.append("# edge logits: w src dst value")
        lines += [f"w {s} {d} {w!r}" for (s, d), w in g.edges.items()]
    return "\n".join(lines) + "\n"


def decode_table(text: str) -> ArchitectureGraph:
    nodes: dict[int, BlockNode] = {}
    edges: dict[tuple[int, int], float] = {}
    row_no = 0
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("w ") or line == "w":
            parts = line.split()
            try:
                _, s, d, v = parts
                key, value = (int(s), int(d)), float(v)
            except ValueError:
                raise TableParseError(None, f"malformed edge-logit line {raw.strip()!r}") from None
            if key not in edges:
                raise TableParseError(None, f"logit given for absent edge {key[0]}->{key[1]}")
            edges[key] = value
            continue
        m = _ROW.match(line)
        if not m:
            raise TableParseError(row_no, f"malformed row {raw.strip()!r}")
        idx, level, ins, c, r, stride = m.groups()
        idx, level = int(idx), int(level)
        if idx in nodes:
            raise TableParseError(idx, "duplicate index")
        tokens = [t.strip() for t in ins.split(",") if t.strip()]
        if level == 0:
            if len(tokens) != 1 or tokens[0].lower() not in _STEM_TOKENS:
                raise TableParseError(idx, f"unknown stem input {ins.strip()!r}")
            kind = _STEM_TOKENS[tokens[0].lower()]
        else:
            kind = INTERMEDIATE
            for t in tokens:
                try:
                    src = int(t)
                except ValueError:
                    raise TableParseError(idx, f"unknown input {t!r}") from None
                if src not in nodes:
                    raise TableParseError(idx, f"input {src} is not defined on an earlier row")
                if nodes[src].level >= level:
                    raise TableParseError(idx, f"input {src} (level {nodes[src].level}) is not below level {level}")
                if (src, idx) in edges:
                    raise TableParseError(idx, f"input {src} listed twice")
                edges[(src, idx)] = 0.0
        nodes[idx] = BlockNode(idx, level, kind, int(c), int(r), int(stride))
        row_no += 1
    return ArchitectureGraph(nodes.values(), edges)


# ----------------------------------------------------------------------- DOT


def export_dot(g: ArchitectureGraph, name: str = "architecture") -> str:
    """Graphviz digraph; edge pen width and label follow the sigmoid gate."""
    lines = [f"digraph {name} {{", "  rankdir=BT;", "  node [shape=box, style=filled];"]
    colors = {APPEARANCE_STEM: "#f4c7a1", MOTION_STEM: "#a1c9f4", INTERMEDIATE: "#e8e8e8"}
    for n in g.nodes:
        label = f"{n.id}\\nL{n.level} C={n.channels} r={n.temporal_resolution}"
        lines.append(f'  n{n.id} [label="{label}", fillcolor="{colors.get(n.kind, "white")}"];')
    for (s, d), w in g.edges.items():
        gate = sigmoid(w)
        shade = int(round(200 * (1 - gate)))
        lines.append(f'  n{s} -> n{d} [label="{gate:.3g}", penwidth={0.5 + 4 * gate:.3f}, '
                     f'color="#{shade:02x}{shade:02x}{shade:02x}"];')
    top = g.nodes_at(TOP_LEVEL)
    if top:
        lines.append('  sink [label="sink", shape=ellipse, fillcolor="#c8e6c9"];')
        for n in top:
            lines.append(f"  n{n.id} -> sink [style=dashed];")
    lines.append("}")
    return "\n".join(lines) + "\n"
