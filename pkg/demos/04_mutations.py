"""
Mutating architectures
======================

Node operators reshape the graph without touching the per-level channel
budget. A split replaces a block with two half-width twins. A merge fuses two
blocks on one level, and a resolution change picks a new temporal dilation.
Edge mutation is where trained connection weights come in: an edge survives
when its learned gate beats a threshold, and new edges are drawn at the rate
at which the parent's training dropped its old ones.

Run with ``python demos/04_mutations.py``.
"""
import numpy as np

from streamevo import DESK_SCHEDULE, parameter_breakdown
from streamevo.graph import channel_sums, sigmoid
from streamevo.mutations import (MutationConfig, guided_edge_sets, make_child, merge_nodes, random_architecture,
                                 split_node)

rng = np.random.default_rng(7)
cfg = MutationConfig()
g = random_architecture(cfg, rng)
print("budget per level:", channel_sums(g.nodes))

# %% Split and merge keep every block-internal weight count exactly.
blocks = parameter_breakdown(g, DESK_SCHEDULE)["blocks"]
even = next(n for n in g.intermediates() if n.channels % 2 == 0)
split = split_node(g, even.id)
print(f"split node {even.id} (C={even.channels}): block parameters {blocks:,} -> "
      f"{parameter_breakdown(split, DESK_SCHEDULE)['blocks']:,}")
level = next(lv for lv in (1, 2, 3, 4) if len(g.nodes_at(lv)) >= 2)
a, b = (n.id for n in g.nodes_at(level)[:2])
merged = merge_nodes(g, a, b, rng)
print(f"merge {a}+{b} on level {level}: block parameters {blocks:,} -> "
      f"{parameter_breakdown(merged, DESK_SCHEDULE)['blocks']:,}")

# %% Pretend training pushed some gates up and others down.
trained = g.with_logits({e: float(rng.normal(0, 2)) for e in g.edges})
strong = sum(sigmoid(w) > 0.5 for w in trained.edges.values())
print(f"{len(trained.edges)} edges, {strong} with a gate above 0.5")

# With a constant threshold of 0.5 the kept set is deterministic; with the
# uniform threshold each edge survives with probability equal to its gate.
for mode in ("constant", "uniform"):
    kept, added = guided_edge_sets(trained, MutationConfig(b_mode=mode), rng)
    print(f"b_mode={mode:<8} kept {len(kept):>2}, added {len(added):>2} of "
          f"{len(trained.possible_edges()) - len(trained.edges)} open slots")

# %% Children for each search strategy, with the operators that produced them.
for strategy in ("guided", "standard_random_edges", "pure_random_search"):
    child, ops = make_child(trained, strategy, cfg, rng)
    print(f"{strategy:<22} {len(child.intermediates()):>2} blocks, {len(child.edges):>2} edges  {ops}")
    assert channel_sums(child.nodes) == channel_sums(g.nodes) or strategy == "pure_random_search"
print("mean gate of kept edges is higher than the mean gate overall:",
      np.mean([sigmoid(trained.edges[e]) for e in guided_edge_sets(trained, cfg, rng)[0]])
      > np.mean([sigmoid(w) for w in trained.edges.values()]))
