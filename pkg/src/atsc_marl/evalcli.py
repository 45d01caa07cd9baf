"""Persistence, evaluation suites, data export and the command-line front end."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import struct
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .microsim import parse_scenario
from .netmodel import NetworkError, TrafficNetwork, build_grid, format_network, parse_grid_spec
from .trainer import (DEFAULT_TEST_SEEDS, A2CAgent, ConfigError, QAgent, RunRecord, TrainConfig,
                      build_network, make_learners, run_episode, success_criterion, train)

MAGIC = b"ATSCCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ExportError(OSError):
    pass


# ---------------------------------------------------------------------------
# configuration files

def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown config key {name!r}")
    kind = str(kinds[name])
    raw = raw.strip()
    try:
        if raw.lower() in ("none", "") and "None" in kind:
            return None
        if kind.startswith("bool"):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(int(s) for s in raw.replace(",", " ").split())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip()
        out[key] = _coerce(key, value)
    return out


def load_config(path, base: TrainConfig | None = None, overrides: dict | None = None) -> TrainConfig:
    """Defaults, then the file, then ``overrides``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    d = (base or TrainConfig()).to_dict()
    d.update(parse_config_text(text))
    d.update(overrides or {})
    return TrainConfig.from_dict(d)


def format_config(config: TrainConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(config: TrainConfig) -> bytes:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).digest()


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   magic[8] version:u8 hash[32] config_len:u32 config_json
#   n_agents:u32, then per agent: id_len:u16 id block_len:u64 block
#   block = n_arrays:u32, then per array: name_len:u16 name ndim:u8 dims:u32* data:f8*

def _learner_arrays(learner) -> dict:
    if isinstance(learner, A2CAgent):
        out = {f"actor/{k}": v for k, v in learner.actor.params.items()}
        out.update({f"critic/{k}": v for k, v in learner.critic.params.items()})
        out.update({f"actor_opt/{k}": v for k, v in learner.actor_opt.acc.items()})
        out.update({f"critic_opt/{k}": v for k, v in learner.critic_opt.acc.items()})
        return out
    if isinstance(learner, QAgent):
        out = {f"q/{k}": v for k, v in learner.model.params.items()}
        opt = getattr(learner.model, "opt", None)
        if opt is not None:
            out.update({f"q_opt/{k}": v for k, v in opt.acc.items()})
        return out
    return {}


def _pack_block(arrays: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def _unpack_block(data: bytes) -> dict:
    view = memoryview(data)
    (n,) = struct.unpack_from("<I", view, 0)
    pos, out = 4, {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + ln]).decode()
        pos += ln
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if pos + 8 * size > len(data):
            raise CheckpointError(f"truncated array {name}")
        out[name] = np.frombuffer(view[pos:pos + 8 * size], dtype="<f8").reshape(shape).astype(float)
        pos += 8 * size
    if pos != len(data):
        raise CheckpointError("trailing bytes in agent block")
    return out


def checkpoint_bytes(learners: dict, config: TrainConfig) -> bytes:
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<B", CHECKPOINT_VERSION) + config_hash(config))
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    buf.write(struct.pack("<I", len(learners)))
    for agent in sorted(learners):
        aid = agent.encode()
        block = _pack_block(_learner_arrays(learners[agent]))
        buf.write(struct.pack("<H", len(aid)) + aid)
        buf.write(struct.pack("<Q", len(block)) + block)
    return buf.getvalue()


def save_checkpoint(path, learners: dict, config: TrainConfig) -> None:
    Path(path).write_bytes(checkpoint_bytes(learners, config))


def read_checkpoint(data: bytes) -> tuple:
    """Returns ``(config, {agent: {array name: array}})`` without building learners."""
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    try:
        version = data[8]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        digest = data[9:41]
        (ln,) = struct.unpack_from("<I", data, 41)
        pos = 45
        cfg = json.loads(data[pos:pos + ln].decode())
        pos += ln
        config = TrainConfig.from_dict(cfg)
        if config_hash(config) != digest:
            raise CheckpointError("config hash mismatch")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        blocks = {}
        for _ in range(n):
            (la,) = struct.unpack_from("<H", data, pos)
            pos += 2
            agent = data[pos:pos + la].decode()
            pos += la
            (lb,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if pos + lb > len(data):
                raise CheckpointError(f"truncated block for agent {agent}")
            blocks[agent] = _unpack_block(data[pos:pos + lb])
            pos += lb
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, IndexError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(data):
        raise CheckpointError("trailing bytes after last agent")
    return config, blocks


def restore_learners(config: TrainConfig, blocks: dict, network: TrafficNetwork) -> dict:
    if sorted(blocks) != sorted(network.agents):
        raise CheckpointError("checkpoint agents do not match the network")
    learners = make_learners(config, network)
    for agent, learner in learners.items():
        target = _learner_arrays(learner)
        stored = blocks[agent]
        if set(target) != set(stored):
            raise CheckpointError(f"agent {agent}: parameter sets differ")
        for name, arr in target.items():
            if arr.shape != stored[name].shape:
                raise CheckpointError(f"agent {agent}: {name} has shape {stored[name].shape}, "
                                      f"network needs {arr.shape}")
            arr[...] = stored[name]
        if isinstance(learner, A2CAgent):
            learner.refresh_snapshot()
    return learners


def load_checkpoint(path, network: TrafficNetwork | None = None) -> tuple:
    """Returns ``(config, network, learners)``."""
    config, blocks = read_checkpoint(Path(path).read_bytes())
    network = build_network(config) if network is None else network
    return config, network, restore_learners(config, blocks, network)


# ---------------------------------------------------------------------------
# records

def record_bytes(record: RunRecord) -> bytes:
    return (json.dumps(record.to_dict(), sort_keys=True) + "\n").encode()


def save_record(path, record: RunRecord) -> None:
    Path(path).write_bytes(record_bytes(record))


def load_record(path) -> RunRecord:
    return RunRecord.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    algorithm: str
    scenario: str
    seeds: list
    per_seed: list
    mean: float = 0.0
    std: float = 0.0  # population standard deviation
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, algorithm, scenario, seeds, values, **metadata) -> "EvalReport":
        v = np.asarray(values, dtype=float)
        return cls(algorithm, str(scenario), [int(s) for s in seeds], [float(x) for x in v],
                   float(v.mean()) if v.size else 0.0, float(v.std()) if v.size else 0.0,
                   metadata)

    def consistent(self, tol: float = 1e-9) -> bool:
        v = np.asarray(self.per_seed, dtype=float)
        return abs(v.mean() - self.mean) <= tol and abs(v.std() - self.std) <= tol

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _scenario_name(scenario) -> str:
    count, window = parse_scenario(scenario)
    return f"{count}/{window}"


def evaluate(learners: dict, config: TrainConfig, network: TrafficNetwork | None = None,
             scenario=None, test_seeds=None) -> EvalReport:
    """One non-learning episode per test seed with actions sampled from the policies."""
    network = build_network(config) if network is None else network
    scenario = config.scenario if scenario is None else _scenario_name(scenario)
    seeds = list(config.test_seeds if test_seeds is None else test_seeds)
    cfg = config.replace(scenario=scenario)
    if sorted(learners) != sorted(network.agents):
        raise CheckpointError("learners do not match the network")
    values = []
    for i, seed in enumerate(seeds):
        frag = run_episode(cfg, network, learners, seed, [int(seed), 3, i], learn=False)
        values.append(frag.episode_avg_queue[0])
    return EvalReport.from_values(config.algorithm, scenario, seeds, values,
                                  train_scenario=config.scenario)


def greedy_report(config: TrainConfig, network=None, scenario=None, test_seeds=None) -> EvalReport:
    network = build_network(config) if network is None else network
    cfg = config.replace(algorithm="greedy")
    return evaluate(make_learners(cfg, network), cfg, network, scenario, test_seeds)


def cross_test(learners: dict, config: TrainConfig, scenarios, network=None,
               test_seeds=None) -> list:
    """Rows ``(algorithm, train scenario, test scenario, report)``; Greedy row per scenario."""
    network = build_network(config) if network is None else network
    rows = []
    for sc in scenarios:
        name = _scenario_name(sc)
        rows.append((config.algorithm, config.scenario, name,
                     evaluate(learners, config, network, name, test_seeds)))
        rows.append(("greedy", "-", name, greedy_report(config, network, name, test_seeds)))
    return rows


def _stability_job(args):
    config, seed = args
    _, record = train(config.replace(train_seed=seed))
    return success_criterion(record), record.episode_avg_queue


def stability_suite(config: TrainConfig, n_runs: int, algorithms=("ma2c", "ia2c"),
                    threads: int | None = None, train_fn=None, threshold: float = 0.8) -> dict:
    """Success counts over ``n_runs`` training runs per algorithm with distinct seeds.

    ``ATSC_THREADS`` (or ``threads``) bounds the number of worker processes.
    Results do not depend on the degree of parallelism.
    """
    if n_runs < 1:
        raise ConfigError("n_runs must be >= 1")
    if "greedy" in algorithms:
        raise ConfigError("greedy does not learn; stability is undefined")
    if threads is None:
        threads = int(os.environ.get("ATSC_THREADS", "1") or 1)
    seeds = [config.train_seed + 1000 * r for r in range(n_runs)]
    out = {}
    for algo in algorithms:
        cfg = config.replace(algorithm=algo)
        jobs = [(cfg, s) for s in seeds]
        if train_fn is not None:
            results = []
            for c, s in jobs:
                rec = train_fn(c.replace(train_seed=s))
                results.append((success_criterion(rec, threshold), rec.episode_avg_queue))
        elif threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(_stability_job, jobs))
        else:
            results = [_stability_job(j) for j in jobs]
        flags = [bool(r[0]) for r in results]
        out[algo] = {"successes": int(sum(flags)), "runs": n_runs, "seeds": seeds,
                     "flags": flags, "curves": [list(r[1]) for r in results]}
    return out


# ---------------------------------------------------------------------------
# export

SERIES = ("queue", "running", "losses")


def series_table(obj, series: str = "queue") -> tuple:
    """``(columns, rows)`` for a record series or an evaluation report."""
    if isinstance(obj, EvalReport):
        return (["index", "seed", "avg_queue"],
                [[i, s, q] for i, (s, q) in enumerate(zip(obj.seeds, obj.per_seed))])
    rec = obj
    if series == "queue":
        steps = np.cumsum(rec.episode_learning_steps).tolist() if rec.episode_learning_steps \
            else [0] * len(rec.episode_avg_queue)
        return (["episode", "learning_step", "avg_queue"],
                [[e, int(s), q] for e, (s, q) in enumerate(zip(steps, rec.episode_avg_queue))])
    if series == "running":
        rows = []
        for e, ticks in enumerate(rec.running_vehicles):
            rows.extend([e, t + 1, n] for t, n in enumerate(ticks))
        return ["episode", "tick", "running"], rows
    if series == "losses":
        cols = ["learning_step", "episode"]
        cols += [f"actor_loss:{a}" for a in rec.agents] + [f"critic_loss:{a}" for a in rec.agents]
        rows = [[k, ep] + list(al) + list(cl) for k, (ep, al, cl)
                in enumerate(zip(rec.step_episode, rec.actor_loss, rec.critic_loss))]
        return cols, rows
    raise ValueError(f"unknown series {series!r}; choose from {SERIES}")


def export(obj, path, fmt: str = "csv", series: str = "queue") -> Path:
    cols, rows = series_table(obj, series)
    path = Path(path)
    try:
        if fmt == "csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(cols)
                w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in rows])
        elif fmt == "json":
            path.write_text(json.dumps({"series": series, "columns": cols, "rows": rows}) + "\n")
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return path


def read_series(path) -> tuple:
    """Inverse of :func:`export`; numbers come back as float."""
    path = Path(path)
    if path.suffix == ".json":
        d = json.loads(path.read_text())
        return d["columns"], [[float(v) for v in r] for r in d["rows"]]
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        cols = next(reader)
        return cols, [[float(v) for v in r] for r in reader]


# ---------------------------------------------------------------------------
# command line

_FLAG_ALIASES = {"algorithm": ["--algo"], "train_seed": ["--seed"]}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    for f in fields(TrainConfig):
        names = [f"--{f.name.replace('_', '-')}"] + _FLAG_ALIASES.get(f.name, [])
        p.add_argument(*names, dest=f.name, default=argparse.SUPPRESS, metavar="V",
                       help=f"config {f.name}")


def _config_from_args(ns: argparse.Namespace) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    flags = {k: _coerce(k, v) for k, v in vars(ns).items() if k in names}
    if getattr(ns, "config", None):
        return load_config(ns.config, overrides=flags)
    d = TrainConfig().to_dict()
    d.update(flags)
    return TrainConfig.from_dict(d)


def _parse_seeds(text: str | None):
    if text in (None, "default"):
        return list(DEFAULT_TEST_SEEDS)
    return [int(s) for s in text.split(",") if s.strip()]


def _print_report(rep: EvalReport, out) -> None:
    print(f"# {rep.algorithm} on {rep.scenario}", file=out)
    print("seed,avg_queue", file=out)
    for s, q in zip(rep.seeds, rep.per_seed):
        print(f"{s},{q:.4f}", file=out)
    print(f"mean,{rep.mean:.4f}\nstd,{rep.std:.4f}", file=out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atsc-marl",
                                     description="Multi-agent signal control training and evaluation")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train agents, write checkpoint and record")
    _add_config_flags(p)
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on test seeds")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seeds", default="default", help="'default' or comma-separated seeds")
    p.add_argument("--scenario")
    p.add_argument("--report", help="write the report as JSON")

    p = sub.add_parser("cross", help="evaluate a checkpoint across loads, with Greedy rows")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenarios", required=True, help="comma-separated, e.g. 2000/2000,3600/3600")
    p.add_argument("--seeds", default="default")

    p = sub.add_parser("stability", help="count successful training runs per algorithm")
    _add_config_flags(p)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--algos", default="ma2c,ia2c")

    p = sub.add_parser("export", help="write a plot-ready series")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--record")
    src.add_argument("--report")
    p.add_argument("--series", choices=SERIES, default="queue")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-net", help="write a grid network description")
    p.add_argument("--grid", default="3x3")
    p.add_argument("--lane-length", type=float, default=200.0)
    p.add_argument("--phases", type=int, default=2)
    p.add_argument("--out", required=True)
    return parser


def _run(ns, out) -> int:
    if ns.command == "train":
        config = _config_from_args(ns)
        outdir = Path(ns.out)
        outdir.mkdir(parents=True, exist_ok=True)
        progress = None
        if not ns.quiet:
            def progress(ep, frag):
                print(f"episode {ep} avg_queue {frag.episode_avg_queue[0]:.3f}", file=sys.stderr)
        learners, record = train(config, progress=progress)
        save_checkpoint(outdir / "checkpoint.bin", learners, config)
        save_record(outdir / "record.json", record)
        (outdir / "config.txt").write_text(format_config(config))
        print(f"wrote {outdir / 'checkpoint.bin'} and {outdir / 'record.json'}", file=out)
        return 0
    if ns.command == "eval":
        config, network, learners = load_checkpoint(ns.checkpoint)
        rep = evaluate(learners, config, network, ns.scenario, _parse_seeds(ns.seeds))
        _print_report(rep, out)
        if ns.report:
            Path(ns.report).write_text(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
        return 0
    if ns.command == "cross":
        config, network, learners = load_checkpoint(ns.checkpoint)
        scenarios = [s for s in ns.scenarios.split(",") if s]
        for sc in scenarios:
            config.replace(scenario=sc)  # validates
        print("algorithm,train,test,mean,std", file=out)
        for algo, tr, te, rep in cross_test(learners, config, scenarios, network,
                                            _parse_seeds(ns.seeds)):
            print(f"{algo},{tr},{te},{rep.mean:.4f},{rep.std:.4f}", file=out)
        return 0
    if ns.command == "stability":
        config = _config_from_args(ns)
        algos = tuple(a for a in ns.algos.split(",") if a)
        res = stability_suite(config, ns.runs, algos)
        print("algorithm,successes,runs", file=out)
        for a, r in res.items():
            print(f"{a},{r['successes']},{r['runs']}", file=out)
        return 0
    if ns.command == "export":
        if ns.record:
            obj = load_record(ns.record)
        else:
            obj = EvalReport.from_dict(json.loads(Path(ns.report).read_text()))
        export(obj, ns.out, ns.format, ns.series)
        return 0
    if ns.command == "gen-net":
        rows, cols = parse_grid_spec(ns.grid)
        net = build_grid(rows, cols, ns.lane_length, ns.phases)
        Path(ns.out).write_text(format_network(net))
        return 0
    raise AssertionError(ns.command)


def cli(argv=None, out=None) -> int:
    """Entry point; returns the process exit code."""
    out = sys.stdout if out is None else out
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return _run(ns, out)
    except (ConfigError, NetworkError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, ExportError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
