"""Command-line entry point: ``streamevo {evolve,compare,build,train,validate}``.

Exit codes: 0 success, 1 usage error, 2 validation/config error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from . import tensor as tn
from .baselines import BASELINES, build_baseline, table5_graph
from .evolution import (CheckpointError, Evaluator, SearchConfig, checkpoint_load, checkpoint_save,
                        compare_strategies, continue_search, history_rows, initialize, write_history_csv)
from .graph import (ArchitectureGraph, TableParseError, decode_table, encode_table, export_dot,
                    parameter_breakdown, validate_graph)
from .mutations import STRATEGIES, MutationConfig
from .network import CompileError, ExecutableNetwork
from .proxy import ProxyTaskConfig, TrainerConfig, TrainingError, evaluate, generate_dataset, train
from .schedule import LayerSchedule

OUTPUT_ENV = "STREAMEVO_OUTPUT_DIR"
DEFAULT_OUTPUT = "streamevo-out"

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2, 3

SECTIONS = ("search", "proxy", "trainer", "mutation", "schedule")

# Values used by the full-size search, shown next to the desk defaults.
REFERENCE = {
    "search.population_size": "20",
    "search.tournament_size": "5",
    "search.init_rounds": "~30 random models before evolution starts",
    "search.rounds": "up to ~200 evolution rounds",
    "search.workers": "10 parallel workers",
    "trainer.iterations": "10000 proxy-training iterations per candidate",
    "trainer.batch_size": "512",
    "trainer.base_lr": "3.2",
    "trainer.warmup_iterations": "12000 (full training)",
    "trainer.momentum": "standard momentum optimizer",
    "trainer.weight_decay": "1e-4",
    "trainer.label_smoothing": "0.2",
    "mutation.b_mode": "constant threshold or uniform random variable",
    "mutation.max_ops_per_child": "0 to 4 node operators per child",
    "mutation.init_edge_prob": "0.5",
    "mutation.init_splits": "1 to 5 splits at initialization",
    "mutation.stem_counts": "2 or 4 stems",
    "mutation.allowed_resolutions": "1, 2, 4 or 8",
    "mutation.standard_edge_fraction": "1/3 of connections for the random-edge baseline",
    "mutation.level_channel_budget": "128 / 256 / 512 / 512 per level (50-layer model)",
    "schedule.m_per_level": "1.5 / 2 / 3 / 1.5 (50-layer); 1.5 / 2 / 11.5 / 1.5 (101-layer)",
    "schedule.D_per_level": "64 / 128 / 256 / 512",
    "schedule.stem_channels": "64 for two stems, 32 for four stems",
    "proxy": "synthetic stand-in for a large video dataset; no full-scale counterpart",
}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ configuration


@dataclass
class RunConfig:
    search: SearchConfig
    seed: int = 0
    output_dir: str | None = None

    def to_dict(self) -> dict:
        s = self.search.to_dict()
        search = {k: s[k] for k in ("population_size", "tournament_size", "init_rounds", "rounds",
                                    "strategy", "workers", "dtype")}
        d = {"seed": self.seed}
        if self.output_dir is not None:
            d["output_dir"] = self.output_dir
        # per-candidate training seeds derive from the top-level seed
        trainer = {k: v for k, v in s["trainer"].items() if k != "seed"}
        d.update(search=search, proxy=s["proxy"], trainer=trainer, mutation=s["mutation"],
                 schedule=s["schedule"])
        return d


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def config_from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from parsed TOML, rejecting unknown keys."""
    _check_keys("top level", raw, ("seed", "output_dir") + SECTIONS)
    base = SearchConfig()
    sections = {}
    for name in SECTIONS:
        sub = raw.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = sub
    search_keys = ("population_size", "tournament_size", "init_rounds", "rounds", "strategy", "workers", "dtype")
    _check_keys("search", sections["search"], search_keys)
    _check_keys("proxy", sections["proxy"], [f.name for f in fields(ProxyTaskConfig)])
    _check_keys("trainer", sections["trainer"], [f.name for f in fields(TrainerConfig) if f.name != "seed"])
    _check_keys("mutation", sections["mutation"], [f.name for f in fields(MutationConfig)])
    _check_keys("schedule", sections["schedule"], [f.name for f in fields(LayerSchedule)])
    seed = int(raw.get("seed", 0))
    try:
        proxy = ProxyTaskConfig(**{**asdict(base.proxy), **_tuples(sections["proxy"])})
        trainer = TrainerConfig(**{**asdict(base.trainer), **sections["trainer"]})
        m = {**asdict(base.mutation), **_tuples(sections["mutation"])}
        for key in ("stem_channels", "level_channel_budget"):
            m[key] = {int(k): int(v) for k, v in m[key].items()}
        mutation = MutationConfig(**m)
        schedule = LayerSchedule.from_dict({**base.schedule.to_dict(), **sections["schedule"]})
        search = SearchConfig(seed=seed, proxy=proxy, trainer=trainer, mutation=mutation, schedule=schedule,
                              **sections["search"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(search, seed, raw.get("output_dir"))


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return config_from_dict({})
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def _toml_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return tomli_w.dumps({"v": v}).split("=", 1)[1].strip()


def render_config(cfg: RunConfig) -> str:
    """TOML text of ``cfg`` with each key annotated by its full-scale reference value."""
    d = cfg.to_dict()
    lines = ["# streamevo run configuration", "# Comments give the full-scale reference value where one exists.", ""]
    lines.append(f"seed = {_toml_value(d['seed'])}")
    if "output_dir" in d:
        lines.append(f"output_dir = {_toml_value(d['output_dir'])}")
    for section in SECTIONS:
        lines += ["", f"[{section}]"]
        if section in REFERENCE:
            lines.append(f"# full-scale reference value: {REFERENCE[section]}")
        nested = []
        for key, value in d[section].items():
            if value is None:
                lines.append(f"# {key} unset (derived default)")
                continue
            if isinstance(value, dict):
                nested.append((key, value))
                continue
            ref = REFERENCE.get(f"{section}.{key}")
            if ref:
                lines.append(f"# full-scale reference value: {ref}")
            lines.append(f"{key} = {_toml_value(value)}")
        for key, value in nested:
            lines += ["", f"[{section}.{key}]"]
            ref = REFERENCE.get(f"{section}.{key}")
            if ref:
                lines.append(f"# full-scale reference value: {ref}")
            lines += [f'"{k}" = {_toml_value(v)}' for k, v in value.items()]
    return "\n".join(lines) + "\n"


def shipped_config_path(name: str = "desk.toml") -> Path:
    return Path(str(resources.files("streamevo").joinpath("configs", name)))


# ------------------------------------------------------------------ helpers


def _output_dir(args, cfg: RunConfig | None = None) -> Path:
    out = args.output_dir or (cfg.output_dir if cfg else None) or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    search = cfg.search
    seed = cfg.seed
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    changes = {"seed": seed}
    for flag, key in (("rounds", "rounds"), ("workers", "workers"), ("init_rounds", "init_rounds"),
                      ("strategy", "strategy")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    try:
        search = replace(search, **changes)
        if getattr(args, "iterations", None) is not None:
            search = replace(search, trainer=replace(search.trainer, iterations=args.iterations))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return replace(cfg, search=search, seed=seed)


def _read_graph(spec: str) -> tuple[ArchitectureGraph, str]:
    if spec in BASELINES:
        return build_baseline(spec), spec
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"{spec!r} is neither a baseline name ({', '.join(BASELINES)}) nor a file")
    return decode_table(path.read_text()), path.stem


def _say(msg: str = "") -> None:
    print(msg, flush=True)


def _summary(g: ArchitectureGraph, schedule: LayerSchedule, num_classes: int) -> str:
    parts = parameter_breakdown(g, schedule, num_classes)
    lines = [f"nodes: {len(g.nodes)} ({len(g.stems())} stems), edges: {len(g.edges)}",
             "channel budget per level: " + ", ".join(f"L{k}={v}" for k, v in sorted(g.level_channel_budget.items())),
             f"parameters: {sum(parts.values())} (" + ", ".join(f"{k} {v}" for k, v in parts.items()) + ")"]
    for n in g.nodes:
        ins = ",".join(str(s) for s in g.inputs(n.id)) or "-"
        lines.append(f"  node {n.id:>3}: level {n.level}, {n.kind}, C={n.channels}, r={n.temporal_resolution}, "
                     f"stride={n.spatial_stride}, inputs [{ins}]")
    return "\n".join(lines)


# ------------------------------------------------------------------ commands


def cmd_evolve(args) -> int:
    if args.resume:
        # the checkpoint carries the full configuration; only the round budget and
        # the worker count may be changed when continuing
        state, ck_cfg = checkpoint_load(args.resume)
        for flag in ("seed", "init_rounds", "strategy", "iterations"):
            if getattr(args, flag, None) is not None:
                raise ConfigError(f"--{flag.replace('_', '-')} cannot be changed when resuming")
        cfg = _apply_overrides(RunConfig(ck_cfg, ck_cfg.seed), args)
    else:
        cfg = _apply_overrides(load_config(args.config), args)
        state = None
    out = _output_dir(args, cfg)
    scfg = cfg.search
    ckpt = out / "checkpoint.json"
    (out / "config.toml").write_text(render_config(cfg))
    start = time.time()

    def progress(st):
        r = st.history[-1]
        if not args.quiet:
            _say(f"round {r.round:>4} [{r.phase}] child {r.child_fitness:.4f}  top-3 mean {r.top3_mean:.4f}  "
                 f"best {r.best:.4f}  ({time.time() - start:.0f}s)")

    with Evaluator(scfg) as ev:
        if state is None:
            state = initialize(scfg, ev)
            checkpoint_save(state, scfg, ckpt)
            if not args.quiet:
                _say(f"initial population: {len(state.population)} members, top-3 mean {state.top3_mean():.4f}")
        state = continue_search(state, scfg, ev, checkpoint=ckpt, checkpoint_every=args.checkpoint_every,
                                progress=progress)
    best = state.best
    write_history_csv(history_rows(scfg.strategy, scfg.seed, state.history), out / "history.csv")
    (out / "best.arch").write_text(f"# fitness {best.fitness!r}, round {best.born}\n" + encode_table(best.graph))
    (out / "best.dot").write_text(export_dot(best.graph, "best"))
    _say(f"best fitness {best.fitness:.4f} (round {best.born}); artifacts in {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    strategies = args.strategies.split(",") if args.strategies else list(STRATEGIES)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}; choose from {', '.join(STRATEGIES)}")
    seeds = _parse_seeds(args.seeds)
    out = _output_dir(args, cfg)
    (out / "config.toml").write_text(render_config(cfg))
    start = time.time()

    def progress(strategy, seed, st):
        r = st.history[-1]
        if not args.quiet:
            _say(f"{strategy:<22} seed {seed} round {r.round:>4} child {r.child_fitness:.4f} "
                 f"top-3 {r.top3_mean:.4f} ({time.time() - start:.0f}s)")

    result = compare_strategies(cfg.search, seeds, strategies, progress)
    result.to_csv(out / "comparison.csv")
    table = result.summary_table()
    (out / "summary.txt").write_text(table + f"\nwall time {time.time() - start:.1f}s\n")
    _say(table)
    return EXIT_OK


def _parse_seeds(text: str) -> list[int]:
    try:
        if "-" in text and "," not in text:
            lo, hi = (int(t) for t in text.split("-"))
            return list(range(lo, hi + 1))
        return [int(t) for t in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --seeds {text!r}; use '0,1,2' or '0-4'") from exc


def cmd_build(args) -> int:
    if args.table5:
        g, name = table5_graph(), "table5"
    elif args.architecture:
        g, name = _read_graph(args.architecture)
    else:
        raise ConfigError("build needs a baseline name, a table file or --table5")
    report = validate_graph(g)
    if not report:
        print(f"{name}: invalid architecture\n{report}", file=sys.stderr)
        return EXIT_INVALID
    cfg = load_config(args.config)
    _say(f"{name}: valid")
    _say(_summary(g, cfg.search.schedule, cfg.search.proxy.num_classes))
    if args.compile:
        with tn.default_dtype(cfg.search.dtype):
            net = ExecutableNetwork(g, cfg.search.schedule, cfg.search.proxy.num_classes,
                                    input_hw=(cfg.search.proxy.height, cfg.search.proxy.width))
        _say(f"compiled: {net.num_parameters()} parameters")
    if args.dot or args.write:
        out = _output_dir(args, cfg)
        if args.dot:
            (out / f"{name}.dot").write_text(export_dot(g, name))
            _say(f"wrote {out / f'{name}.dot'}")
        if args.write:
            (out / f"{name}.arch").write_text(encode_table(g))
            _say(f"wrote {out / f'{name}.arch'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    g, name = _read_graph(args.architecture)
    report = validate_graph(g)
    if not report:
        print(f"{name}: invalid architecture\n{report}", file=sys.stderr)
        return EXIT_INVALID
    s = cfg.search
    out = _output_dir(args, cfg)
    with tn.default_dtype(s.dtype):
        data = generate_dataset(s.proxy)
        net = ExecutableNetwork(g, s.schedule, s.proxy.num_classes, seed=cfg.seed,
                                input_hw=(s.proxy.height, s.proxy.width))
        result = train(net, data, replace(s.trainer, seed=cfg.seed))
        top1, top5 = evaluate(net, data.val)
    _say(f"final loss {result.final_loss:.4f}" if result.losses else "no training steps")
    _say(f"top1 {top1:.4f}  top5 {top5:.4f}  fitness {top1 + top5:.4f}")
    target = out / f"{name}.trained.arch"
    target.write_text(encode_table(net.to_graph()))
    _say(f"wrote {target}")
    return EXIT_OK


def cmd_validate(args) -> int:
    g, name = _read_graph(args.architecture)
    report = validate_graph(g)
    if report:
        _say(f"{name}: valid ({len(g.nodes)} nodes, {len(g.edges)} edges)")
        return EXIT_OK
    print(f"{name}: invalid\n{report}", file=sys.stderr)
    return EXIT_INVALID


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="streamevo", description=__doc__.splitlines()[0])
    p.add_argument("--print-config", action="store_true",
                   help="print the effective configuration (with full-scale reference values) and exit")
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="TOML run configuration", default=argparse.SUPPRESS)
        sp.add_argument("--output-dir", help=f"output directory (default: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
        sp.add_argument("--print-config", action="store_true", default=argparse.SUPPRESS)
        if seed:
            sp.add_argument("--seed", type=int)

    e = sub.add_parser("evolve", help="run one evolutionary search")
    common(e)
    e.add_argument("--rounds", type=int, help="evolution rounds after initialization")
    e.add_argument("--init-rounds", type=int)
    e.add_argument("--strategy", choices=STRATEGIES)
    e.add_argument("--workers", type=int)
    e.add_argument("--iterations", type=int, help="proxy-training iterations per candidate")
    e.add_argument("--resume", help="checkpoint file to continue from")
    e.add_argument("--checkpoint-every", type=int, default=1)
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_evolve)

    c = sub.add_parser("compare", help="compare search strategies across seeds")
    common(c, seed=False)
    c.add_argument("--strategies", help=f"comma-separated subset of {','.join(STRATEGIES)}")
    c.add_argument("--seeds", default="0-4", help="'0,1,2' or an inclusive range '0-4'")
    c.add_argument("--rounds", type=int)
    c.add_argument("--init-rounds", type=int)
    c.add_argument("--workers", type=int)
    c.add_argument("--iterations", type=int)
    c.add_argument("--quiet", action="store_true")
    c.set_defaults(func=cmd_compare)

    b = sub.add_parser("build", help="build, validate and summarize an architecture")
    common(b, seed=False)
    b.add_argument("architecture", nargs="?", help=f"baseline name ({', '.join(BASELINES)}) or table file")
    b.add_argument("--table5", action="store_true", help="the shipped 15-block evolved model")
    b.add_argument("--dot", action="store_true", help="write a Graphviz DOT file to the output directory")
    b.add_argument("--write", action="store_true", help="write the table file to the output directory")
    b.add_argument("--compile", action="store_true", help="also compile the executable network")
    b.set_defaults(func=cmd_build)

    t = sub.add_parser("train", help="train and evaluate one architecture on the proxy task")
    common(t)
    t.add_argument("architecture", help="baseline name or table file")
    t.add_argument("--iterations", type=int)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("validate", help="check an architecture table against the graph rules")
    common(v, seed=False)
    v.add_argument("architecture")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.print_config:
            cfg = load_config(getattr(args, "config", None))
            cfg = _apply_overrides(cfg, args)
            sys.stdout.write(render_config(cfg))
            return EXIT_OK
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except (ConfigError, TableParseError, CheckpointError, CompileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
