"""Hand-designed multi-stream baselines and the published 15-block model."""
from __future__ import annotations

from typing import Mapping

from .graph import (APPEARANCE_STEM, INTERMEDIATE, MOTION_STEM, ArchitectureGraph, BlockNode,
                    decode_table)
from .schedule import DESK_BUDGET, DESK_SCHEDULE, LayerSchedule

# Rows: index: level, [inputs], C, r, spatial stride
TABLE5_TEXT = """\
# 50-layer evolved model, four stems
0: 0, [RGB], 32, 4, 4
1: 0, [RGB], 32, 4, 4
2: 0, [Flow], 32, 1, 4
3: 0, [Flow], 32, 1, 4
4: 1, [1], 32, 1, 1
5: 1, [0], 32, 4, 1
6: 1, [0,1,2,3], 32, 1, 1
7: 1, [2,3], 32, 2, 1
8: 2, [0, 4, 5, 6, 7], 64, 2, 2
9: 2, [0, 2, 4, 7], 64, 1, 2
10: 2, [0, 5, 7], 64, 4, 2
11: 2, [0, 5], 64, 1, 2
12: 3, [4, 8, 10, 11], 256, 1, 2
13: 3, [8, 9], 256, 4, 2
14: 4, [12, 13], 512, 2, 2
"""

BASELINES = ("two_stream_late_fusion", "two_stream_fuse_lv4", "two_stream_flow_to_rgb",
             "two_stream_fully", "four_stream_fully")

_STRIDES = {1: 1, 2: 2, 3: 2, 4: 2}


def table5_graph() -> ArchitectureGraph:
    return decode_table(TABLE5_TEXT)


def _split(total: int, parts: int) -> list[int]:
    base = total // parts
    return [base + (1 if i < total - base * parts else 0) for i in range(parts)]


def build_baseline(name: str, budget: Mapping[int, int] = DESK_BUDGET,
                   schedule: LayerSchedule = DESK_SCHEDULE) -> ArchitectureGraph:
    """Fixed-connectivity two- or four-stream graph by name."""
    if name not in BASELINES:
        raise KeyError(f"unknown baseline {name!r}; choose from {', '.join(BASELINES)}")
    streams = 4 if name == "four_stream_fully" else 2
    stem_c = schedule.stem_width(streams)
    # even-numbered streams see appearance, odd-numbered see motion
    kinds = [APPEARANCE_STEM if s % 2 == 0 else MOTION_STEM for s in range(streams)]
    nodes = [BlockNode(s, 0, kinds[s], stem_c, 1, 4) for s in range(streams)]
    ids = {0: list(range(streams))}
    next_id = streams
    two_top = name == "two_stream_late_fusion"
    for level in (1, 2, 3, 4):
        count = streams if level < 4 else (2 if two_top else 1)
        ids[level] = []
        for c in _split(budget[level], count):
            nodes.append(BlockNode(next_id, level, INTERMEDIATE, c, 1, _STRIDES[level]))
            ids[level].append(next_id)
            next_id += 1
    edges: dict[tuple[int, int], float] = {}
    for level in (1, 2, 3, 4):
        below, here = ids[level - 1], ids[level]
        for j, dst in enumerate(here):
            if name in ("two_stream_fully", "four_stream_fully") or (level == 4 and not two_top):
                srcs = below
            elif name == "two_stream_flow_to_rgb" and j % 2 == 0:
                srcs = below
            else:
                srcs = [below[j]]
            for s in srcs:
                edges[(s, dst)] = 0.0
    return ArchitectureGraph(nodes, edges, dict(budget))
