"""
The synthetic proxy task
========================

Twelve classes cross four static appearance patterns with three motion
periods. The RGB stream alone can only tell the patterns apart, and the flow
stream alone only the periods. A network has to fuse both modalities to beat
one-in-three. The trainer is plain momentum SGD with a warmup and cosine
schedule, label smoothing and weight decay.

Run with ``python demos/05_proxy_training.py`` (about twenty seconds).
"""
from dataclasses import replace

import numpy as np

from streamevo import DESK_SCHEDULE
from streamevo import tensor as tn
from streamevo.baselines import build_baseline
from streamevo.evolution import fitness
from streamevo.network import ExecutableNetwork
from streamevo.proxy import ProxyTaskConfig, TrainerConfig, evaluate, generate_dataset, lr_schedule, train

task = ProxyTaskConfig(frames=8)
with tn.default_dtype(np.float32):
    data = generate_dataset(replace(task, clips_per_class=30))
print(f"{task.num_classes} classes, {len(data.train)} training clips, {len(data.val)} validation clips")
print("appearance", data.train.appearance.shape, "motion", data.train.motion.shape)

# %% The learning-rate schedule at a glance.
trainer = TrainerConfig(iterations=150, seed=0)
print("lr at steps 0, warmup, middle, end:",
      [round(lr_schedule(s, trainer), 4) for s in (0, trainer.warmup, 80, 150)])

# %% Train a densely connected two-stream baseline and read off its fitness.
with tn.default_dtype(np.float32):
    net = ExecutableNetwork(build_baseline("two_stream_fully"), DESK_SCHEDULE, task.num_classes,
                            seed=0, input_hw=(task.height, task.width))
    before = evaluate(net, data.val)
    result = train(net, data, trainer)
    top1, top5 = evaluate(net, data.val)
print(f"untrained top-1/top-5 {before[0]:.3f}/{before[1]:.3f}")
print(f"loss {np.mean(result.losses[:10]):.3f} -> {np.mean(result.losses[-10:]):.3f}")
print(f"trained   top-1/top-5 {top1:.3f}/{top5:.3f}, fitness {fitness(net, data.val):.3f} (chance {1 / 12:.3f})")
print("learned gates:", {e: round(v, 3) for e, v in list(result.gates.items())[-6:]}, "...")
