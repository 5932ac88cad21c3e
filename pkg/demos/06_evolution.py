"""
Evolving architectures
======================

Tournament evolution with evict-the-worst insertion. A short phase of random
architectures seeds the population. After that, each round picks a parent by
tournament, mutates it, trains the child on the proxy task and inserts it.
Fitness is top-1 plus top-5 validation accuracy. Everything here runs with
real training at a toy scale so it finishes in under a minute. The shipped desk
preset (``streamevo evolve --config ...``) is the serious version.

Run with ``python demos/06_evolution.py``.
"""
import tempfile
from pathlib import Path

from streamevo.evolution import (SearchConfig, checkpoint_load, compare_strategies, run_search)
from streamevo.graph import encode_table
from streamevo.mutations import MutationConfig
from streamevo.proxy import ProxyTaskConfig, TrainerConfig
from streamevo.schedule import LayerSchedule

toy = SearchConfig(
    population_size=4, tournament_size=2, init_rounds=6, rounds=10, seed=0,
    proxy=ProxyTaskConfig(clips_per_class=4, frames=4, height=8, width=8),
    trainer=TrainerConfig(iterations=5),
    mutation=MutationConfig(level_channel_budget={1: 4, 2: 8, 3: 8, 4: 8}, b_mode="constant"),
    schedule=LayerSchedule({1: 0.5, 2: 0.5, 3: 0.5, 4: 0.5}, {1: 4, 2: 4, 3: 4, 4: 4}),
)

# %% One search, checkpointed every round.
with tempfile.TemporaryDirectory() as tmp:
    ckpt = Path(tmp) / "search.json"
    best, history = run_search(toy, checkpoint=ckpt)
    for rec in history[::4]:
        print(f"round {rec.round:>2} {rec.phase:<6} child {rec.child_fitness:.3f}  "
              f"top-3 mean {rec.top3_mean:.3f}  {rec.mutations}")
    state, cfg = checkpoint_load(ckpt)
    print(f"checkpoint holds round {state.round}, best fitness {state.best.fitness:.3f}")
print("best architecture (edge logits omitted):\n" + encode_table(best).split("# edge logits")[0])

# %% Same seed, same history: a second run reproduces every fitness value.
_, again = run_search(toy)
print("rerun identical:", [r.child_fitness for r in again] == [r.child_fitness for r in history])

# %% Strategies side by side. Every strategy continues from the same random
# initial population for a given seed, so only the mutation rule differs.
result = compare_strategies(toy, seeds=[0, 1])
for strategy, per_seed in result.final.items():
    print(f"{strategy:<22}", {seed: round(v, 3) for seed, v in per_seed.items()})
print(result.summary_table())
