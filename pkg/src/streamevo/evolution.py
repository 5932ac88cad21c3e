"""Tournament-selection evolution over architecture graphs.

The search loop owns a :class:`SearchState` exclusively. Candidate training
jobs are pure functions of (graph, seed, configs) and can be farmed out to a
process pool; their results are merged back in submission order so that a
run is reproducible for a fixed (seed, workers) pair.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import multiprocessing as mp
import numpy as np

from . import tensor as tn
from .graph import ArchitectureGraph, decode_table, encode_table, sigmoid, validate_graph
from .mutations import STRATEGIES, MutationConfig, make_child, random_architecture
from .network import CompileError, ExecutableNetwork
from .proxy import (Dataset, ProxyTaskConfig, TrainerConfig, TrainingError, evaluate, generate_dataset,
                    topk_accuracy, train)
from .schedule import DESK_SCHEDULE, LayerSchedule

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "streamevo-search-checkpoint"
CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("strategy", "seed", "round", "top3_mean", "best", "child_fitness")


class CheckpointError(ValueError):
    """Raised for missing, corrupt or incompatible checkpoint files."""


# ------------------------------------------------------------------ fitness


def fitness_from_probs(probs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 plus top-5 accuracy; needs at least six classes."""
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[1] < 6:
        raise ValueError("fitness needs a (N, K) probability matrix with K >= 6")
    top1, top5 = topk_accuracy(probs, np.asarray(labels))
    return top1 + top5


def fitness(net, valset) -> float:
    """Top-1 plus top-5 validation accuracy of a trained network, in [0, 2]."""
    n_classes = getattr(net, "num_classes", None)
    if n_classes is not None and n_classes < 6:
        raise ValueError(f"fitness needs at least 6 classes, got {n_classes}")
    top1, top5 = evaluate(net, valset)
    return top1 + top5


# ------------------------------------------------------------------ config and state


@dataclass
class SearchConfig:
    population_size: int = 20
    tournament_size: int = 5
    init_rounds: int = 30
    rounds: int = 40
    strategy: str = "guided"
    seed: int = 0
    workers: int = 1
    dtype: str = "float32"
    proxy: ProxyTaskConfig = field(default_factory=ProxyTaskConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    mutation: MutationConfig = field(default_factory=MutationConfig)
    schedule: LayerSchedule = DESK_SCHEDULE

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if not 1 <= self.tournament_size <= self.population_size:
            raise ValueError("tournament_size must lie in [1, population_size]")
        if self.init_rounds < 1 or self.rounds < 0 or self.workers < 1:
            raise ValueError("init_rounds >= 1, rounds >= 0 and workers >= 1 are required")
        if self.init_rounds < self.tournament_size:
            raise ValueError(f"init_rounds ({self.init_rounds}) must be at least tournament_size "
                             f"({self.tournament_size}) so the first tournament can be drawn")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("population_size", "tournament_size", "init_rounds", "rounds",
                                          "strategy", "seed", "workers", "dtype")}
        d["proxy"] = asdict(self.proxy)
        d["trainer"] = asdict(self.trainer)
        m = asdict(self.mutation)
        m["stem_channels"] = {str(k): v for k, v in m["stem_channels"].items()}
        m["level_channel_budget"] = {str(k): v for k, v in m["level_channel_budget"].items()}
        d["mutation"] = m
        d["schedule"] = self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        d = dict(d)
        tup = lambda sub: {k: tuple(v) if isinstance(v, list) else v for k, v in sub.items()}
        proxy = ProxyTaskConfig(**tup(d.pop("proxy", {})))
        trainer = TrainerConfig(**d.pop("trainer", {}))
        m = tup(d.pop("mutation", {}))
        for key in ("stem_channels", "level_channel_budget"):
            if key in m:
                m[key] = {int(k): int(v) for k, v in m[key].items()}
        mutation = MutationConfig(**m)
        schedule = LayerSchedule.from_dict(d.pop("schedule")) if "schedule" in d else DESK_SCHEDULE
        return cls(proxy=proxy, trainer=trainer, mutation=mutation, schedule=schedule, **d)

    def search_key(self) -> dict:
        """Everything that must match for a checkpoint to be resumable."""
        d = self.to_dict()
        d.pop("rounds")
        return d


@dataclass
class Member:
    graph: ArchitectureGraph          # carries the trained edge logits
    fitness: float
    gates: dict[tuple[int, int], float]
    uid: int                          # insertion order, used for tie-breaking and eviction
    born: int                         # round in which it was evaluated


@dataclass
class RoundRecord:
    round: int
    phase: str                        # "init" or "evolve"
    child_fitness: float
    top3_mean: float
    best: float
    parent_uid: int | None
    child_uid: int
    inserted: bool
    mutations: list[str]
    error: str | None = None


@dataclass
class SearchState:
    population: list[Member]
    round: int
    rng: np.random.Generator
    history: list[RoundRecord]
    next_uid: int = 0
    best: Member | None = None

    def top3_mean(self) -> float:
        top = sorted((m.fitness for m in self.population), reverse=True)[:3]
        return float(np.mean(top)) if top else 0.0

    def min_fitness(self) -> float:
        return min(m.fitness for m in self.population)


def top3_mean(population: Sequence[Member]) -> float:
    top = sorted((m.fitness for m in population), reverse=True)[:3]
    return float(np.mean(top)) if top else 0.0


# ------------------------------------------------------------------ selection / insertion


def tournament_select(population: Sequence[Member], k: int, rng: np.random.Generator) -> Member:
    """Best member of a uniform k-subset; ties go to the earliest inserted."""
    if not 1 <= k <= len(population):
        raise ValueError(f"tournament size {k} not in [1, {len(population)}]")
    idx = rng.choice(len(population), size=k, replace=False)
    contenders = [population[i] for i in idx]
    return max(contenders, key=lambda m: (m.fitness, -m.uid))


def insert_member(population: list[Member], member: Member, capacity: int) -> bool:
    """Add ``member``; while over capacity drop the earliest-inserted member of minimal fitness.

    Returns whether ``member`` is still in the population afterwards. A newcomer
    strictly below the current minimum is the unique minimum, so it goes first.
    """
    population.append(member)
    while len(population) > capacity:
        worst = min(population, key=lambda m: (m.fitness, m.uid))
        population[:] = [m for m in population if m is not worst]
    return any(m is member for m in population)


# ------------------------------------------------------------------ candidate evaluation


@dataclass
class CandidateResult:
    graph: ArchitectureGraph
    fitness: float
    gates: dict[tuple[int, int], float]
    error: str | None = None


_DATASETS: dict[str, Dataset] = {}


def _dataset_for(proxy: ProxyTaskConfig, dtype: str) -> Dataset:
    key = json.dumps([asdict(proxy), dtype], sort_keys=True)
    if key not in _DATASETS:
        with tn.default_dtype(dtype):
            _DATASETS[key] = generate_dataset(proxy)
    return _DATASETS[key]


def evaluate_candidate(graph: ArchitectureGraph, seed: int, cfg: SearchConfig,
                       dataset: Dataset | None = None) -> CandidateResult:
    """Compile, train and score one architecture; failures score zero."""
    report = validate_graph(graph)
    if not report:
        raise AssertionError(f"search produced an invalid graph:\n{report}")
    data = dataset if dataset is not None else _dataset_for(cfg.proxy, cfg.dtype)
    with tn.default_dtype(cfg.dtype):
        try:
            net = ExecutableNetwork(graph, cfg.schedule, cfg.proxy.num_classes, seed=seed,
                                    input_hw=(cfg.proxy.height, cfg.proxy.width))
            result = train(net, data, replace(cfg.trainer, seed=seed))
            top1, top5 = evaluate(net, data.val)
        except (TrainingError, CompileError, FloatingPointError) as exc:
            log.warning("candidate failed (%s); scoring 0", exc)
            return CandidateResult(graph, 0.0, {k: sigmoid(v) for k, v in graph.edges.items()}, str(exc))
    return CandidateResult(net.to_graph(), top1 + top5, result.gates)


def _worker_eval(args):
    graph_text, seed, cfg_dict = args
    cfg = SearchConfig.from_dict(cfg_dict)
    res = evaluate_candidate(decode_table(graph_text), seed, cfg)
    return encode_table(res.graph), res.fitness, [(s, d, g) for (s, d), g in res.gates.items()], res.error


class Evaluator:
    """Evaluates batches of (graph, seed) jobs, in process or in a fork pool."""

    def __init__(self, cfg: SearchConfig, dataset: Dataset | None = None):
        self.cfg = cfg
        self.dataset = dataset
        self._pool = None
        if cfg.workers > 1:
            _dataset_for(cfg.proxy, cfg.dtype)   # build once, inherited by forked workers
            self._pool = ProcessPoolExecutor(cfg.workers, mp_context=mp.get_context("fork"))

    def __call__(self, jobs: Sequence[tuple[ArchitectureGraph, int]]) -> list[CandidateResult]:
        if self._pool is None or len(jobs) == 1:
            return [evaluate_candidate(g, s, self.cfg, self.dataset) for g, s in jobs]
        cfg_dict = self.cfg.to_dict()
        out = []
        for text, fit, gates, err in self._pool.map(_worker_eval, [(encode_table(g), s, cfg_dict) for g, s in jobs]):
            out.append(CandidateResult(decode_table(text), fit, {(s, d): g for s, d, g in gates}, err))
        return out

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ------------------------------------------------------------------ the loop


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for the random-init phase and the evolution phase."""
    init_ss, evo_ss = np.random.SeedSequence([seed, 0]), np.random.SeedSequence([seed, 1])
    return np.random.default_rng(init_ss), np.random.default_rng(evo_ss)


def _draw_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


def _record(state: SearchState, cfg: SearchConfig, member: Member, inserted: bool, phase: str,
            parent_uid, mutations, error) -> None:
    if state.best is None or member.fitness > state.best.fitness:
        state.best = member
    state.history.append(RoundRecord(state.round, phase, member.fitness, state.top3_mean(),
                                     state.best.fitness, parent_uid, member.uid, inserted, list(mutations), error))
    state.round += 1


def _absorb(state: SearchState, cfg: SearchConfig, res: CandidateResult, phase: str, parent_uid, mutations):
    member = Member(res.graph, res.fitness, res.gates, state.next_uid, state.round)
    state.next_uid += 1
    inserted = insert_member(state.population, member, cfg.population_size)
    _record(state, cfg, member, inserted, phase, parent_uid, mutations, res.error)


def initialize(cfg: SearchConfig, evaluator: Callable | None = None) -> SearchState:
    """Random-initialization rounds; the best ``population_size`` survive."""
    init_rng, evo_rng = _streams(cfg.seed)
    state = SearchState([], 0, evo_rng, [])
    own = evaluator is None
    evaluator = evaluator or Evaluator(cfg)
    try:
        while state.round < cfg.init_rounds:
            n = min(cfg.workers, cfg.init_rounds - state.round)
            jobs = [(random_architecture(cfg.mutation, init_rng), _draw_seed(init_rng)) for _ in range(n)]
            for res in evaluator(jobs):
                _absorb(state, cfg, res, "init", None, ["random_init"])
    finally:
        if own:
            evaluator.close()
    return state


def evolve_batch(state: SearchState, cfg: SearchConfig, evaluator: Callable, size: int = 1) -> SearchState:
    """Select ``size`` parents from the current snapshot, evaluate children, insert in order."""
    jobs, meta = [], []
    for _ in range(size):
        parent = tournament_select(state.population, cfg.tournament_size, state.rng)
        child, ops = make_child(parent.graph, cfg.strategy, cfg.mutation, state.rng)
        jobs.append((child, _draw_seed(state.rng)))
        meta.append((parent.uid, ops))
    for res, (puid, ops) in zip(evaluator(jobs), meta):
        _absorb(state, cfg, res, "evolve", puid, ops)
    return state


def evolve_round(state: SearchState, cfg: SearchConfig, evaluator: Callable | None = None) -> SearchState:
    """One select, mutate, train, insert, evict cycle."""
    own = evaluator is None
    evaluator = evaluator or Evaluator(replace(cfg, workers=1))
    try:
        return evolve_batch(state, cfg, evaluator, 1)
    finally:
        if own:
            evaluator.close()


def run_search(cfg: SearchConfig, state: SearchState | None = None, *,
               checkpoint: str | Path | None = None, checkpoint_every: int = 1,
               evaluator: Callable | None = None,
               progress: Callable[[SearchState], None] | None = None) -> tuple[ArchitectureGraph, list[RoundRecord]]:
    """Initialize (unless resuming), evolve to ``init_rounds + rounds`` and return the best graph."""
    own = evaluator is None
    evaluator = evaluator or Evaluator(cfg)
    try:
        if state is None:
            state = initialize(cfg, evaluator)
            if checkpoint:
                checkpoint_save(state, cfg, checkpoint)
        state = continue_search(state, cfg, evaluator, checkpoint=checkpoint,
                                checkpoint_every=checkpoint_every, progress=progress)
    finally:
        if own:
            evaluator.close()
    return state.best.graph, state.history


def continue_search(state: SearchState, cfg: SearchConfig, evaluator: Callable, *,
                    checkpoint=None, checkpoint_every: int = 1, progress=None) -> SearchState:
    total = cfg.init_rounds + cfg.rounds
    if state.round < cfg.init_rounds:
        raise ValueError("state is still in the initialization phase")
    since = 0
    while state.round < total:
        size = min(cfg.workers, total - state.round)
        evolve_batch(state, cfg, evaluator, size)
        since += size
        if progress:
            progress(state)
        if checkpoint and (since >= checkpoint_every or state.round == total):
            checkpoint_save(state, cfg, checkpoint)
            since = 0
    return state


# ------------------------------------------------------------------ comparison


def history_rows(strategy: str, seed: int, history: Iterable[RoundRecord]) -> list[dict]:
    return [{"strategy": strategy, "seed": seed, "round": r.round, "top3_mean": r.top3_mean,
             "best": r.best, "child_fitness": r.child_fitness} for r in history]


def write_history_csv(rows: Iterable[dict], path_or_buf) -> None:
    """CSV with floats written via ``repr`` so reruns are byte-identical."""
    own = isinstance(path_or_buf, (str, Path))
    f = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in rows:
            w.writerow([r["strategy"], r["seed"], r["round"], repr(float(r["top3_mean"])),
                        repr(float(r["best"])), repr(float(r["child_fitness"]))])
    finally:
        if own:
            f.close()


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{"strategy": r["strategy"], "seed": int(r["seed"]), "round": int(r["round"]),
                 "top3_mean": float(r["top3_mean"]), "best": float(r["best"]),
                 "child_fitness": float(r["child_fitness"])} for r in csv.DictReader(f)]


@dataclass
class Comparison:
    rows: list[dict]
    final: dict[str, dict[int, float]]      # strategy -> seed -> final top-3 mean

    def summary(self) -> dict[str, tuple[float, float]]:
        return {s: (float(np.mean(list(v.values()))), float(np.std(list(v.values()))))
                for s, v in self.final.items()}

    def to_csv(self, path_or_buf) -> None:
        write_history_csv(self.rows, path_or_buf)

    def summary_table(self) -> str:
        lines = [f"{'strategy':<24}{'final top-3 mean':>18}{'std':>8}{'seeds':>7}"]
        for s, (mu, sd) in self.summary().items():
            lines.append(f"{s:<24}{mu:>18.4f}{sd:>8.4f}{len(self.final[s]):>7}")
        return "\n".join(lines)


def compare_strategies(cfg: SearchConfig, seeds: Sequence[int], strategies: Sequence[str] = STRATEGIES,
                       progress: Callable[[str, int, SearchState], None] | None = None) -> Comparison:
    """Run each strategy from a shared per-seed initial population and collect curves.

    The random-initialization phase depends only on the seed, so it is run
    once per seed and every strategy continues from a copy of it.
    """
    if len(strategies) < 1 or len(seeds) < 1:
        raise ValueError("need at least one strategy and one seed")
    for s in strategies:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}; choose from {', '.join(STRATEGIES)}")
    rows: list[dict] = []
    final: dict[str, dict[int, float]] = {s: {} for s in strategies}
    with Evaluator(cfg) as evaluator:
        for seed in seeds:
            base_cfg = replace(cfg, seed=seed, strategy=strategies[0])
            init_state = initialize(base_cfg, evaluator)
            snapshot = _state_to_dict(init_state)
            for strategy in strategies:
                scfg = replace(cfg, seed=seed, strategy=strategy)
                state = _state_from_dict(snapshot)
                cb = (lambda st, _s=strategy, _seed=seed: progress(_s, _seed, st)) if progress else None
                state = continue_search(state, scfg, evaluator, progress=cb)
                rows.extend(history_rows(strategy, seed, state.history))
                final[strategy][seed] = state.history[-1].top3_mean
    order = {s: i for i, s in enumerate(strategies)}
    rows.sort(key=lambda r: (order[r["strategy"]], r["seed"], r["round"]))
    return Comparison(rows, final)


# ------------------------------------------------------------------ checkpoints


def _member_to_dict(m: Member) -> dict:
    return {"table": encode_table(m.graph), "fitness": m.fitness, "uid": m.uid, "born": m.born,
            "gates": [[s, d, g] for (s, d), g in sorted(m.gates.items())]}


def _member_from_dict(d: dict) -> Member:
    return Member(decode_table(d["table"]), float(d["fitness"]), {(s, t): float(g) for s, t, g in d["gates"]},
                  int(d["uid"]), int(d["born"]))


def _state_to_dict(state: SearchState) -> dict:
    return {
        "round": state.round,
        "next_uid": state.next_uid,
        "rng": state.rng.bit_generator.state,
        "population": [_member_to_dict(m) for m in state.population],
        "best": _member_to_dict(state.best) if state.best else None,
        "history": [asdict(r) for r in state.history],
    }


def _state_from_dict(d: dict) -> SearchState:
    bg_name = d["rng"]["bit_generator"]
    rng = np.random.Generator(getattr(np.random, bg_name)())
    rng.bit_generator.state = d["rng"]
    return SearchState(
        population=[_member_from_dict(m) for m in d["population"]],
        round=int(d["round"]),
        rng=rng,
        history=[RoundRecord(**r) for r in d["history"]],
        next_uid=int(d["next_uid"]),
        best=_member_from_dict(d["best"]) if d["best"] else None,
    )


def checkpoint_save(state: SearchState, cfg: SearchConfig, path: str | Path) -> None:
    """Write a self-describing JSON checkpoint atomically."""
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
               "config": cfg.to_dict(), "state": _state_to_dict(state)}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1))
    os.replace(tmp, path)


def checkpoint_load(path: str | Path) -> tuple[SearchState, SearchConfig]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no such checkpoint") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a search checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {payload.get('version')} "
                              f"is not supported (expected {CHECKPOINT_VERSION})")
    try:
        return _state_from_dict(payload["state"]), SearchConfig.from_dict(payload["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
