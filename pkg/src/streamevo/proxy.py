"""Synthetic two-modality clip classification task and the candidate trainer.

Each class pairs one of several static appearance patterns (oriented
gratings) with one of several motion frequencies (a spatially uniform,
sinusoidally oscillating flow field with random amplitude, phase and
direction). Appearance alone identifies only the pattern group and motion
alone only the frequency, so top-1 accuracy above 1/frequencies needs both
streams, and separating frequencies under random amplitude rewards blocks
that look at several temporal dilations.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .network import ExecutableNetwork

_MAGIC = b"STREAMEVO-DATASET\n"


@dataclass
class ProxyTaskConfig:
    patterns: int = 4
    periods: tuple[int, ...] = (2, 4, 8)
    clips_per_class: int = 60
    frames: int = 16
    height: int = 16
    width: int = 16
    appearance_noise: float = 2.0
    motion_noise: float = 1.0
    amplitude_range: tuple[float, float] = (0.2, 1.0)
    val_fraction: float = 0.2
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.patterns * len(self.periods)


@dataclass
class ClipSet:
    appearance: np.ndarray   # (N, T, Y, X, 3)
    motion: np.ndarray       # (N, T, Y, X, 2)
    labels: np.ndarray       # (N,)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ClipSet":
        return ClipSet(self.appearance[idx], self.motion[idx], self.labels[idx])


@dataclass
class Dataset:
    train: ClipSet
    val: ClipSet
    config: ProxyTaskConfig

    @property
    def num_classes(self) -> int:
        return self.config.num_classes


def _grating(angle: float, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    wavelength = rng.uniform(3.5, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    proj = xx * np.cos(angle) + yy * np.sin(angle)
    return np.sign(np.sin(2 * np.pi * proj / wavelength + phase))


def generate_clip(label: int, cfg: ProxyTaskConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    pattern, freq = divmod(label, len(cfg.periods))
    T, H, W = cfg.frames, cfg.height, cfg.width
    angle = np.pi * pattern / cfg.patterns
    base = _grating(angle, rng, H, W)
    color = rng.uniform(0.5, 1.5, size=3) * rng.choice([-1.0, 1.0])
    appearance = base[None, :, :, None] * color + cfg.appearance_noise * rng.standard_normal((T, H, W, 3))
    period = cfg.periods[freq]
    amp = rng.uniform(*cfg.amplitude_range)
    phase = rng.uniform(0, 2 * np.pi)
    direction = rng.uniform(0, 2 * np.pi)
    wave = amp * np.sin(2 * np.pi * np.arange(T) / period + phase)
    flow = np.stack([wave * np.cos(direction), wave * np.sin(direction)], axis=-1)   # (T, 2)
    motion = np.broadcast_to(flow[:, None, None, :], (T, H, W, 2)) + cfg.motion_noise * rng.standard_normal((T, H, W, 2))
    return appearance, motion


def generate_dataset(cfg: ProxyTaskConfig, rng: np.random.Generator | None = None) -> Dataset:
    """Deterministic train/validation split of synthetic clips."""
    if cfg.num_classes < 6:
        raise ValueError("need at least 6 classes so top-5 accuracy is informative")
    if min(cfg.frames, cfg.height, cfg.width) < 1 or cfg.clips_per_class < 1:
        raise ValueError("degenerate dataset dimensions")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    labels = np.repeat(np.arange(cfg.num_classes), cfg.clips_per_class)
    labels = labels[rng.permutation(len(labels))]
    app, mot = [], []
    for y in labels:
        a, m = generate_clip(int(y), cfg, rng)
        app.append(a)
        mot.append(m)
    dtype = tn.get_default_dtype()
    clips = ClipSet(np.asarray(app, dtype=dtype), np.asarray(mot, dtype=dtype), labels.astype(np.int64))
    n_val = int(round(cfg.val_fraction * len(labels)))
    idx = np.arange(len(labels))
    return Dataset(clips.subset(idx[n_val:]), clips.subset(idx[:n_val]), cfg)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Flat binary: magic line, JSON header line, then raw little-endian arrays."""
    arrays = {}
    for split in ("train", "val"):
        cs = getattr(ds, split)
        arrays[f"{split}/appearance"] = cs.appearance
        arrays[f"{split}/motion"] = cs.motion
        arrays[f"{split}/labels"] = cs.labels
    header = {"version": 1, "config": asdict(ds.config),
              "arrays": [{"name": k, "dtype": v.dtype.newbyteorder("<").str, "shape": list(v.shape)}
                         for k, v in arrays.items()]}
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(json.dumps(header).encode() + b"\n")
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype=v.dtype.newbyteorder("<")).tobytes())


def load_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a dataset file")
    buf = io.BytesIO(raw[len(_MAGIC):])
    header = json.loads(buf.readline())
    if header.get("version") != 1:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"])) * dt.itemsize
        chunk = buf.read(n)
        if len(chunk) != n:
            raise ValueError(f"{path}: truncated array {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(chunk, dtype=dt).reshape(spec["shape"]).copy()
    cfg_d = header["config"]
    cfg = ProxyTaskConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg_d.items()})
    split = {s: ClipSet(arrays[f"{s}/appearance"], arrays[f"{s}/motion"], arrays[f"{s}/labels"]) for s in ("train", "val")}
    return Dataset(split["train"], split["val"], cfg)


# ------------------------------------------------------------------ trainer


@dataclass
class TrainerConfig:
    iterations: int = 300
    batch_size: int = 8
    base_lr: float = 0.05
    warmup_iterations: int | None = None     # default: 5% of iterations
    momentum: float = 0.9
    weight_decay: float = 1e-4
    label_smoothing: float = 0.2
    seed: int = 0

    @property
    def warmup(self) -> int:
        if self.warmup_iterations is not None:
            return self.warmup_iterations
        return int(round(0.05 * self.iterations))

    def __post_init__(self):
        if self.warmup_iterations is not None and self.warmup_iterations > self.iterations:
            raise ValueError("warmup cannot exceed the iteration count")


# full-size reference settings (batch 512, lr 3.2, 12k warmup, 10k proxy iterations)
FULL_SCALE_TRAINER = TrainerConfig(iterations=10_000, batch_size=512, base_lr=3.2, warmup_iterations=None)


def lr_schedule(step: int, cfg: TrainerConfig) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to zero at ``iterations``."""
    warm, total = cfg.warmup, cfg.iterations
    if step < warm:
        return cfg.base_lr * step / warm
    if total <= warm:
        return cfg.base_lr if step < total else 0.0
    progress = min((step - warm) / (total - warm), 1.0)
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * progress))


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        self.step = step
        super().__init__(f"step {step}: {message}")


@dataclass
class TrainResult:
    net: ExecutableNetwork
    final_loss: float
    gates: dict[tuple[int, int], float]
    logits: dict[tuple[int, int], float]
    losses: list[float] = field(default_factory=list)


class MomentumSGD:
    """Heavy-ball SGD: v <- mu*v + g (+ decay*w), w <- w - lr*v."""

    def __init__(self, params, decayed, momentum: float, weight_decay: float):
        self.params = list(params)
        self.decayed = {id(p) for p in decayed}
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and id(p) in self.decayed:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v
            p.grad = None


def train(net: ExecutableNetwork, data: Dataset | ClipSet, cfg: TrainerConfig) -> TrainResult:
    """Momentum SGD with warmup+cosine LR, weight decay and label smoothing."""
    clips = data.train if isinstance(data, Dataset) else data
    rng = np.random.default_rng(cfg.seed)
    opt = MomentumSGD(net.parameters(), net.decayed_parameters(), cfg.momentum, cfg.weight_decay)
    losses: list[float] = []
    order, cursor = rng.permutation(len(clips)), 0
    for step in range(cfg.iterations):
        if cursor + cfg.batch_size > len(order):
            order, cursor = rng.permutation(len(clips)), 0
        idx = np.sort(order[cursor:cursor + cfg.batch_size])
        cursor += cfg.batch_size
        try:
            logits = net.forward(clips.appearance[idx], clips.motion[idx], training=True)
            loss = tn.softmax_cross_entropy(logits, clips.labels[idx], cfg.label_smoothing)
        except tn.NonFiniteError as exc:
            raise TrainingError(step, str(exc)) from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(step, f"loss is {value}")
        losses.append(value)
        loss.backward()
        opt.step(lr_schedule(step, cfg))
    return TrainResult(net, losses[-1] if losses else float("nan"), net.gates(), net.logits(), losses)


def topk_accuracy(probs: np.ndarray, labels: np.ndarray, ks=(1, 5)) -> tuple[float, ...]:
    order = np.argsort(-probs, axis=1, kind="stable")
    out = []
    for k in ks:
        k = min(k, probs.shape[1])
        out.append(float(np.mean((order[:, :k] == labels[:, None]).any(axis=1))))
    return tuple(out)


def evaluate(net, clips: ClipSet | Dataset, batch_size: int = 64) -> tuple[float, float]:
    """(top-1, top-5) accuracy of ``net.predict_proba`` on ``clips``."""
    if isinstance(clips, Dataset):
        clips = clips.val
    probs = []
    for start in range(0, len(clips), batch_size):
        sl = slice(start, start + batch_size)
        probs.append(net.predict_proba(clips.appearance[sl], clips.motion[sl]))
    top1, top5 = topk_accuracy(np.concatenate(probs), clips.labels)
    return top1, top5
