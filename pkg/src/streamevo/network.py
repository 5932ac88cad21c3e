"""Compile architecture graphs into trainable networks.

A compiled network runs stems on the raw modalities, then every block in
topological order on the gated sum of its (shape-adapted) inputs, and finally
the sink head over all level-4 outputs.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .graph import (APPEARANCE_STEM, DEFAULT_INPUT_CHANNELS, INTERMEDIATE, TOP_LEVEL,
                    ArchitectureGraph, BlockNode, input_width, live_stems, output_width,
                    validate_graph)
from .schedule import TWO_D, LayerSchedule
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class CompileError(ValueError):
    def __init__(self, message: str, node_id: int | None = None):
        self.node_id = node_id
        prefix = f"node {node_id}: " if node_id is not None else ""
        super().__init__(prefix + message)


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    data = rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))
    return Tensor(data, requires_grad=True)


class ConvUnit:
    """One convolution followed by batch norm and (optionally) ReLU."""

    def __init__(self, kind: str, cin: int, cout: int, rng: np.random.Generator, *, kernel: int = 3,
                 stride: int = 1, dilation: int = 1, groups: int = 1, affine: bool = True, relu: bool = True):
        self.kind, self.stride, self.dilation, self.groups, self.relu = kind, stride, dilation, groups, relu
        self.cin, self.cout = cin, cout
        cin_g, cout_g = cin // groups, cout // groups
        if kind == "2d":
            self.weight = _he_normal(rng, (kernel, kernel, cin, cout), kernel * kernel * cin)
        elif kind == "1x1":
            shape = (cin, cout) if groups == 1 else (groups, cin_g, cout_g)
            self.weight = _he_normal(rng, shape, cin_g)
        elif kind == "temporal":
            shape = (kernel, cin, cout) if groups == 1 else (kernel, groups, cin_g, cout_g)
            self.weight = _he_normal(rng, shape, kernel * cin_g)
        else:
            raise ValueError(f"unknown conv kind {kind!r}")
        self.scale = Tensor(np.ones(cout), requires_grad=True) if affine else None
        self.shift = Tensor(np.zeros(cout), requires_grad=True) if affine else None
        self.running = tn.RunningStats(cout, BN_MOMENTUM)

    def parameters(self) -> list[Tensor]:
        return [p for p in (self.weight, self.scale, self.shift) if p is not None]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if self.kind == "2d":
            y = tn.conv2d(x, self.weight, self.stride)
        elif self.kind == "1x1":
            y = tn.conv1x1(x, self.weight, self.groups, self.stride)
        else:
            y = tn.temporal_conv1d_dilated(x, self.weight, self.dilation, self.groups)
        return tn.batch_norm(y, self.scale, self.shift, BN_EPS, training, self.running, relu=self.relu)

    def __repr__(self) -> str:
        extra = f", r={self.dilation}" if self.kind == "temporal" else ""
        return f"ConvUnit({self.kind}, {self.cin}->{self.cout}, stride={self.stride}{extra})"


class Stem:
    def __init__(self, node: BlockNode, in_channels: int, schedule: LayerSchedule, rng: np.random.Generator):
        s = node.channels
        conv_stride = 2 if node.spatial_stride >= 2 else 1
        self.pool_stride = 2 if node.spatial_stride >= 4 else 1
        self.layers: list = [ConvUnit("2d", in_channels, s, rng, kernel=schedule.stem_spatial_kernel,
                                      stride=conv_stride)]
        if node.kind == APPEARANCE_STEM:
            self.layers.append(ConvUnit("temporal", s, s, rng, kernel=schedule.stem_temporal_taps,
                                        dilation=node.temporal_resolution))
        self.layers.append(("max_pool", 3, self.pool_stride))

    def conv_units(self) -> list[ConvUnit]:
        return [layer for layer in self.layers if isinstance(layer, ConvUnit)]

    def parameters(self) -> list[Tensor]:
        return [p for u in self.conv_units() for p in u.parameters()]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for layer in self.conv_units():
            x = layer(x, training)
        if self.pool_stride > 1:
            x = tn.max_pool_spatial(x, 3, self.pool_stride)
        return x


class ResidualModule:
    def __init__(self, kind: str, main: list[ConvUnit], shortcut: ConvUnit | None):
        self.kind, self.main, self.shortcut = kind, main, shortcut

    def parameters(self) -> list[Tensor]:
        units = self.main + ([self.shortcut] if self.shortcut else [])
        return [p for u in units for p in u.parameters()]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = x
        for unit in self.main:
            h = unit(h, training)
        sc = self.shortcut(x, training) if self.shortcut is not None else x
        return tn.relu(tn.add(h, sc))


class Block:
    """Interleaved 2D / (2+1)D bottleneck residual modules for one node.

    The first module reduces the aggregated input to C channels with a dense
    1x1 and always carries a projection shortcut (which also applies the
    block's spatial stride). Later modules read the 4C-wide residual stream
    through a grouped layer (C groups of ``expansion`` channels), so every
    weight tensor in the block scales linearly with C.
    """

    def __init__(self, node: BlockNode, c_in: int, schedule: LayerSchedule, rng: np.random.Generator):
        c, e = node.channels, schedule.expansion
        D = schedule.width(node.level)
        self.modules: list[ResidualModule] = []
        for i, kind in enumerate(schedule.modules(node.level)):
            stride = node.spatial_stride if i == 0 else 1
            if i == 0:
                first = ConvUnit("1x1", c_in, c, rng)
            elif kind == TWO_D:
                first = ConvUnit("1x1", e * c, c, rng, groups=c)
            else:
                first = ConvUnit("temporal", e * c, c, rng, kernel=schedule.block_temporal_taps,
                                 dilation=node.temporal_resolution, groups=c)
            spatial = ConvUnit("2d", c, D, rng, stride=stride, affine=False)
            expand = ConvUnit("1x1", D, e * c, rng, relu=False)
            shortcut = ConvUnit("1x1", c_in, e * c, rng, stride=stride, relu=False) if i == 0 else None
            self.modules.append(ResidualModule(kind, [first, spatial, expand], shortcut))

    def conv_layers(self) -> list[ConvUnit]:
        """Main-path convolutions (shortcut projections excluded)."""
        return [u for m in self.modules for u in m.main]

    def parameters(self) -> list[Tensor]:
        return [p for m in self.modules for p in m.parameters()]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for m in self.modules:
            x = m(x, training)
        return x


@dataclass(frozen=True)
class FeatureShape:
    height: int
    width: int
    channels: int


class Adapter:
    """Strided max pools to the target spatial size, then a 1x1 to the target width."""

    def __init__(self, src: FeatureShape, dst: FeatureShape, rng: np.random.Generator):
        pools = 0
        h, w = src.height, src.width
        while (h, w) != (dst.height, dst.width):
            if h < dst.height or w < dst.width or (h, w) == (1, 1):
                raise CompileError(f"cannot pool {src.height}x{src.width} down to {dst.height}x{dst.width}")
            h, w = -(-h // 2), -(-w // 2)
            pools += 1
        self.pools = pools
        self.conv = ConvUnit("1x1", src.channels, dst.channels, rng) if src.channels != dst.channels else None

    @property
    def layers(self) -> list:
        return [("max_pool", 3, 2)] * self.pools + ([self.conv] if self.conv else [])

    def parameters(self) -> list[Tensor]:
        return self.conv.parameters() if self.conv else []

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for _ in range(self.pools):
            x = tn.max_pool_spatial(x, 3, 2)
        return self.project(x, training)

    def project(self, pooled: Tensor, training: bool) -> Tensor:
        """Channel projection applied after the pools."""
        return self.conv(pooled, training) if self.conv else pooled


def build_stem(node: BlockNode, in_channels: int, schedule: LayerSchedule, rng: np.random.Generator) -> Stem:
    return Stem(node, in_channels, schedule, rng)


def build_block(node: BlockNode, c_in: int, schedule: LayerSchedule, rng: np.random.Generator) -> Block:
    if node.kind != INTERMEDIATE:
        raise CompileError("blocks are built for intermediate nodes only", node.id)
    return Block(node, c_in, schedule, rng)


def build_adapter(src: FeatureShape, dst: FeatureShape, rng: np.random.Generator) -> Adapter:
    return Adapter(src, dst, rng)


class Sink:
    """Spatial average, cross-node combine, temporal pool, fully connected."""

    def __init__(self, widths: Sequence[int], num_classes: int, rng: np.random.Generator,
                 temporal_pool: str = "avg", combine: str = "avg"):
        if temporal_pool not in ("avg", "max"):
            raise ValueError(f"temporal_pool must be 'avg' or 'max', got {temporal_pool!r}")
        if combine not in ("avg", "concat"):
            raise ValueError(f"combine must be 'avg' or 'concat', got {combine!r}")
        self.temporal_pool, self.combine = temporal_pool, combine
        self.widths = list(widths)
        width = max(widths, default=0)
        self.adapters: list[Tensor | None] = []
        if combine == "avg":
            for w in widths:
                self.adapters.append(None if w == width else _he_normal(rng, (w, width), w))
            fc_in = width
        else:
            self.adapters = [None] * len(widths)
            fc_in = sum(widths)
        self.fc_w = Tensor(rng.standard_normal((fc_in, num_classes)) * np.sqrt(1.0 / max(fc_in, 1)),
                           requires_grad=True)
        self.fc_b = Tensor(np.zeros(num_classes), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [a for a in self.adapters if a is not None] + [self.fc_w, self.fc_b]

    def __call__(self, features: Sequence[Tensor], batch: int) -> Tensor:
        if not features:
            return tn.linear(Tensor(np.zeros((batch, 0))), self.fc_w, self.fc_b)
        pooled = []
        for x, adapter in zip(features, self.adapters):
            p = tn.avg_pool(x, (2, 3))
            if adapter is not None:
                B, T, W = p.shape
                p = tn.reshape(tn.linear(tn.reshape(p, (B * T, W)), adapter), (B, T, adapter.shape[1]))
            pooled.append(p)
        if self.combine == "concat":
            h = tn.concat(pooled, axis=-1)
        else:
            h = pooled[0]
            for p in pooled[1:]:
                h = tn.add(h, p)
            if len(pooled) > 1:
                h = tn.mul(h, 1.0 / len(pooled))
        h = tn.avg_pool(h, (1,)) if self.temporal_pool == "avg" else tn.max_pool(h, axis=1)
        return tn.linear(h, self.fc_w, self.fc_b)


def build_sink(g: ArchitectureGraph, schedule: LayerSchedule, num_classes: int, rng: np.random.Generator,
               temporal_pool: str = "avg", combine: str = "avg") -> Sink:
    top = g.nodes_at(TOP_LEVEL)
    if not top:
        raise CompileError("graph has no level-4 node for the sink")
    return Sink([output_width(n, schedule) for n in top], num_classes, rng, temporal_pool, combine)


# ------------------------------------------------------------------ compile


def infer_shapes(g: ArchitectureGraph, schedule: LayerSchedule, input_hw: tuple[int, int]) -> dict[int, FeatureShape]:
    """Output shape of every live node; a node's input takes the smallest
    spatial size among its sources."""
    shapes: dict[int, FeatureShape] = {}
    H, W = input_hw
    for n in g.topological_order():
        if n.is_stem:
            if not g.outputs(n.id):
                continue
            h, w = H, W
            if n.spatial_stride >= 2:
                h, w = -(-h // 2), -(-w // 2)
            if n.spatial_stride >= 4:
                h, w = -(-h // 2), -(-w // 2)
            shapes[n.id] = FeatureShape(h, w, n.channels)
            continue
        srcs = [shapes[s] for s in g.inputs(n.id) if s in shapes]
        if not srcs:
            raise CompileError("no live input to infer a shape from", n.id)
        h = min(s.height for s in srcs)
        w = min(s.width for s in srcs)
        shapes[n.id] = FeatureShape(-(-h // n.spatial_stride), -(-w // n.spatial_stride),
                                    output_width(n, schedule))
    return shapes


def _digest(*parts) -> str:
    return hashlib.sha256(repr(parts).encode()).hexdigest()


def structural_keys(g: ArchitectureGraph) -> dict[int, tuple[str, int]]:
    """Relabeling-invariant key per node: (ancestor+descendant digest, rank).

    Nodes with equal digests are interchangeable; the rank orders them by id
    so their weights still differ.
    """
    order = g.topological_order()
    attrs = {n.id: (n.kind, n.level, n.channels, n.temporal_resolution, n.spatial_stride) for n in order}
    up: dict[int, str] = {}
    for n in order:
        up[n.id] = _digest(attrs[n.id], sorted((up[s], g.edges[(s, n.id)]) for s in g.inputs(n.id)))
    down: dict[int, str] = {}
    for n in reversed(order):
        down[n.id] = _digest(attrs[n.id], n.level == TOP_LEVEL,
                             sorted((down[d], g.edges[(n.id, d)]) for d in g.outputs(n.id)))
    full = {i: _digest(up[i], down[i]) for i in up}
    keys, seen = {}, {}
    for i in sorted(full, key=lambda i: (full[i], i)):
        keys[i] = (full[i], seen.get(full[i], 0))
        seen[full[i]] = keys[i][1] + 1
    return keys


def _rng_for(seed: int, *parts) -> np.random.Generator:
    h = int(_digest(*parts)[:30], 16)
    return np.random.default_rng(np.random.SeedSequence([seed, h]))


class ExecutableNetwork:
    def __init__(self, graph: ArchitectureGraph, schedule: LayerSchedule, num_classes: int, seed: int = 0,
                 input_hw: tuple[int, int] = (16, 16), input_channels: Mapping[str, int] | None = None,
                 temporal_pool: str = "avg", sink_combine: str = "avg"):
        report = validate_graph(graph)
        if not report.ok:
            raise CompileError(f"invalid graph:\n{report}")
        self.graph = graph
        self.schedule = schedule
        self.num_classes = num_classes
        self.input_hw = tuple(input_hw)
        self.input_channels = dict(DEFAULT_INPUT_CHANNELS, **(input_channels or {}))
        self.shapes = infer_shapes(graph, schedule, self.input_hw)
        keys = structural_keys(graph)

        self.stems: dict[int, Stem] = {}
        for n in live_stems(graph):
            self.stems[n.id] = build_stem(n, self.input_channels[n.kind], schedule, _rng_for(seed, "stem", keys[n.id]))

        self.edge_logits: dict[tuple[int, int], Tensor] = {}
        self.adapters: dict[tuple[int, int], Adapter] = {}
        self.blocks: dict[int, Block] = {}
        self.plan: list[tuple[int, object]] = [(i, s) for i, s in self.stems.items()]
        self.input_order: dict[int, list[int]] = {}
        for n in graph.topological_order():
            if n.is_stem:
                continue
            c_in = input_width(graph, n.id, schedule)
            h = min(self.shapes[s].height for s in graph.inputs(n.id))
            w = min(self.shapes[s].width for s in graph.inputs(n.id))
            target = FeatureShape(h, w, c_in)
            srcs = sorted(graph.inputs(n.id), key=lambda s: keys[s])
            self.input_order[n.id] = srcs
            for s in srcs:
                e = (s, n.id)
                self.adapters[e] = build_adapter(self.shapes[s], target, _rng_for(seed, "adapter", keys[s], keys[n.id]))
                self.edge_logits[e] = Tensor(np.asarray(graph.edges[e]), requires_grad=True, name=f"edge{s}->{n.id}")
            self.blocks[n.id] = build_block(n, c_in, schedule, _rng_for(seed, "block", keys[n.id]))
            self.plan.append((n.id, self.blocks[n.id]))
        top = sorted((n.id for n in graph.nodes_at(TOP_LEVEL)), key=lambda i: keys[i])
        self.top_order = top
        self.sink = Sink([self.shapes[i].channels for i in top], num_classes,
                         _rng_for(seed, "sink", [keys[i] for i in top]), temporal_pool, sink_combine)

    # -- parameters
    def parameters(self) -> list[Tensor]:
        params = [p for s in self.stems.values() for p in s.parameters()]
        for nid, srcs in self.input_order.items():
            for s in srcs:
                params += self.adapters[(s, nid)].parameters()
            params += self.blocks[nid].parameters()
        params += list(self.edge_logits.values())
        params += self.sink.parameters()
        return params

    def decayed_parameters(self) -> list[Tensor]:
        """Convolution and fully connected weights (targets of weight decay)."""
        ws = [u.weight for s in self.stems.values() for u in s.conv_units()]
        for a in self.adapters.values():
            if a.conv:
                ws.append(a.conv.weight)
        for b in self.blocks.values():
            for m in b.modules:
                ws += [u.weight for u in m.main] + ([m.shortcut.weight] if m.shortcut else [])
        ws += [a for a in self.sink.adapters if a is not None] + [self.sink.fc_w]
        return ws

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def logits(self) -> dict[tuple[int, int], float]:
        return {e: float(t.data) for e, t in sorted(self.edge_logits.items())}

    def gates(self) -> dict[tuple[int, int], float]:
        return {e: float(tn._sigmoid(w)) for e, w in self.logits().items()}

    def to_graph(self) -> ArchitectureGraph:
        """The source graph annotated with the current (learned) edge logits."""
        return self.graph.with_logits(self.logits())

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    # -- execution
    def forward(self, appearance: np.ndarray | None, motion: np.ndarray | None, training: bool = False) -> Tensor:
        inputs = {"appearance_stem": appearance, "motion_stem": motion}
        batch = next(x.shape[0] for x in (appearance, motion) if x is not None)
        outs: dict[int, Tensor] = {}
        pooled: dict[tuple[int, int], Tensor] = {}

        def pool(src: int, times: int) -> Tensor:
            # several edges leaving one source share its pooled copies
            if times == 0:
                return outs[src]
            if (src, times) not in pooled:
                pooled[(src, times)] = tn.max_pool_spatial(pool(src, times - 1), 3, 2)
            return pooled[(src, times)]

        for nid, stem in self.stems.items():
            kind = self.graph.node(nid).kind
            if inputs[kind] is None:
                raise ValueError(f"network needs {kind} input")
            outs[nid] = stem(Tensor(inputs[kind]), training)
        for nid, block in self.plan[len(self.stems):]:
            srcs = self.input_order[nid]
            xs = []
            for s in srcs:
                adapter = self.adapters[(s, nid)]
                xs.append(adapter.project(pool(s, adapter.pools), training))
            agg = tn.gated_weighted_sum(xs, [self.edge_logits[(s, nid)] for s in srcs])
            outs[nid] = block(agg, training)
        return self.sink([outs[i] for i in self.top_order], batch)

    def predict_proba(self, appearance, motion) -> np.ndarray:
        with tn.no_grad():
            return tn.softmax(self.forward(appearance, motion, training=False).data)


def compile_network(g: ArchitectureGraph, schedule: LayerSchedule, num_classes: int, seed: int = 0,
                    **kwargs) -> ExecutableNetwork:
    return ExecutableNetwork(g, schedule, num_classes, seed, **kwargs)
