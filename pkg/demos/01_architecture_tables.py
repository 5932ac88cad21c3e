"""
Architectures as tables
=======================

A candidate network is a small directed graph. Level 0 holds the stems that
read raw input (RGB frames or optical flow). Levels 1 to 4 hold residual
blocks, and every edge points from a lower level to a higher one. Each edge
carries a logit whose sigmoid later becomes a learned connection weight.

Run with ``python demos/01_architecture_tables.py``.
"""
import numpy as np

from streamevo import (DESK_SCHEDULE, decode_table, encode_table, export_dot, longest_path_depth,
                       parameter_breakdown, validate_graph)
from streamevo.baselines import BASELINES, TABLE5_TEXT, build_baseline

# %% The published 15-block model, written as one row per node:
# index: level, [inputs], channels, temporal dilation, spatial stride
print(TABLE5_TEXT)
g = decode_table(TABLE5_TEXT)
print("nodes:", len(g.nodes), " edges:", len(g.edges), " longest stem-to-top path:", longest_path_depth(g))

# %% Validation explains itself. A fresh decode is valid; deleting the only
# edge into the top block breaks it, and the report says why.
print(validate_graph(g))
broken = g.with_edges({e: w for e, w in g.edges.items() if e[1] != 14})
print(validate_graph(broken))

# %% The table is the canonical serialization: decode(encode(g)) == g.
assert decode_table(encode_table(g)) == g

# %% Parameter accounting at desk scale, split by where the weights live.
for name, count in parameter_breakdown(g, DESK_SCHEDULE).items():
    print(f"  {name:<9}{count:>12,}")

# %% Hand-designed baselines share the same desk channel budget per level.
for name in BASELINES:
    b = build_baseline(name)
    widths = {lv: sum(n.channels for n in b.nodes_at(lv)) for lv in (1, 2, 3, 4)}
    print(f"{name:<24} blocks {len(b.intermediates()):>2}  level widths {widths}")

# %% Graphviz output; paste it into any dot renderer.
print(export_dot(build_baseline("two_stream_fully"))[:300], "...")
