"""Command-line entry point.

    adaptroute train CONFIG            train the stream(s), fit routers, write report.json
    adaptroute eval RUN_DIR            re-evaluate a finished run
    adaptroute sweep-memory CONFIG     accuracy against memory fraction
    adaptroute ablate-relaxation CONFIG  Gumbel-sigmoid against softmax routers
    adaptroute flops CONFIG            analytic forward FLOPs per method
    adaptroute export-routing-scores RUN_DIR

Config values come from the YAML file, then environment variables
(ADAPTROUTE_SEED, ADAPTROUTE_OUTPUT_ROOT), then flags; ``--set a.b=value``
overrides any nested field. Outputs go under ``<output_dir>/<kind>-<hash>``
where the hash is taken over the effective config.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .composer import MODES
from .config import RunConfig, from_dict
from .errors import AdaptRouteError, ConfigError, ContractError
from .flops import METHODS, flops_table
from .harness import (
    build_state,
    evaluate,
    fit_routers,
    load_routers,
    load_state,
    load_stream,
    oracle_task_ids,
    routing_matrices,
    save_routers,
    save_state,
    sweep_memory,
    ablate_relaxation,
)
from .router import RELAXATIONS
from .tensorio import atomic_write

log = logging.getLogger("adaptroute")

ENV_SEED = "ADAPTROUTE_SEED"
ENV_OUTPUT = "ADAPTROUTE_OUTPUT_ROOT"
REPORT_MODES = ("lower-bound", "centroid", "wavg", "merge-static", "upper-bound")

CSV_SCHEMAS = {
    "accuracy.csv": "method, one column per task order, average; cells are mean test accuracy",
    "accuracy_per_task.csv": "order, method, task, accuracy; one row per observation",
    "routing_scores_<tag>.csv": "layer, adapter, then one column per evaluation task; mean deterministic "
                                "routing weight of that adapter at that layer on the task's test set",
    "flops.csv": "method, flops, gflops; batch 1 at the stated sequence length",
    "sweep_memory.csv": "seed, fraction, memory_size, average; one row per (seed, fraction)",
    "ablation.csv": "seed, relaxation, average, then one column per task",
}


# -- config -----------------------------------------------------------------

def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _apply_set(raw: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"--set {key}: {p} is not a section")
        node = nxt
    node[parts[-1]] = _parse_value(value)


def resolve_config(path: str | Path, overrides: Sequence[str] = (), seed: int | None = None,
                   output_dir: str | None = None, env=None) -> RunConfig:
    """File values, then environment, then flags."""
    env = os.environ if env is None else env
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    if env.get(ENV_SEED):
        try:
            raw["seed"] = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env[ENV_SEED]!r}") from None
    if env.get(ENV_OUTPUT):
        raw["output_dir"] = env[ENV_OUTPUT]
    for item in overrides:
        _apply_set(raw, item)
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = output_dir
    return from_dict(raw)


def run_dir(config: RunConfig, kind: str) -> Path:
    return Path(config.output_dir) / f"{kind}-{config.hash()}"


# -- output helpers ------------------------------------------------------------

def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue())


def _write_schema(directory: Path, names: Sequence[str]) -> None:
    lines = ["# CSV files in this directory", ""]
    lines += [f"{n}: {CSV_SCHEMAS[n]}" for n in names]
    atomic_write(directory / "SCHEMA.txt", "\n".join(lines) + "\n")


def write_routing_csv(path: Path, matrix: np.ndarray, task_names: Sequence[str]) -> None:
    """``matrix`` is (L, T adapters, E eval sets)."""
    rows = []
    for layer in range(matrix.shape[0]):
        for a in range(matrix.shape[1]):
            rows.append([layer, a + 1] + [repr(float(v)) for v in matrix[layer, a]])
    _write_csv(path, ["layer", "adapter"] + list(task_names), rows)


def format_table(table: dict[str, dict[str, float]], columns: Sequence[str], title: str = "") -> str:
    """Rows are methods, columns are orders (or benchmarks) plus their mean."""
    cols = list(columns) + ["avg"]
    width = max([len("method")] + [len(m) for m in table]) + 2
    out = [title] if title else []
    out.append("method".ljust(width) + "".join(c.rjust(9) for c in cols))
    for method, row in table.items():
        cells = [row[c] for c in columns] + [row["average"]]
        out.append(method.ljust(width) + "".join(f"{100 * v:9.2f}" for v in cells))
    return "\n".join(out)


def _fmt_float(x: float) -> str:
    return repr(float(x))


# -- commands ------------------------------------------------------------------

def _routing_for(state, routers, regime):
    if regime == "CIL":
        return {"cil": routing_matrices(state, routers, "CIL")}
    return {f"til_task{t}": routing_matrices(state, routers, "TIL", t) for t in oracle_task_ids(state)}


def _evaluate_modes(state, routers, modes, regime) -> dict:
    ids = oracle_task_ids(state) if regime == "TIL" else None
    return {m: evaluate(state, routers, m, regime, ids) for m in modes}


def _table(results_by_order: dict[str, dict], modes) -> dict:
    table = {}
    for m in modes:
        row = {o: res[m]["average"] for o, res in results_by_order.items()}
        row["average"] = float(np.mean(list(row.values())))
        table[m] = row
    return table


def _write_accuracy(directory: Path, table: dict, results_by_order: dict, orders, suffix: str = "") -> None:
    _write_csv(directory / f"accuracy{suffix}.csv", ["method"] + list(orders) + ["average"],
               [[m] + [_fmt_float(row[o]) for o in orders] + [_fmt_float(row["average"])] for m, row in table.items()])
    rows = []
    for o in orders:
        for m, rep in results_by_order[o].items():
            for task, acc in rep["per_task"].items():
                rows.append([o, m, task, _fmt_float(acc)])
    _write_csv(directory / f"accuracy_per_task{suffix}.csv", ["order", "method", "task", "accuracy"], rows)


def _flops_rows(config: RunConfig, num_tasks: int, seq_len: int, num_classes: int):
    return flops_table(config.backbone, num_tasks, config.adapter.rank, seq_len, num_classes)


def cmd_train(args) -> int:
    config = resolve_config(args.config, args.set, args.seed, args.output_dir)
    out = run_dir(config, "run")
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.yaml", config.to_yaml())
    modes = list(REPORT_MODES)
    if config.composition not in modes:
        modes.insert(3, config.composition)
    base_stream = load_stream(config, config.seed)
    results, routing, logs = {}, {}, {}
    for order in config.orders:
        state = build_state(config, config.seed, order, base_stream)
        routers = fit_routers(state, config.router, (config.regime,))
        odir = out / f"order_{order}"
        save_state(state, odir)
        save_routers(routers, odir)
        results[order] = _evaluate_modes(state, routers, modes, config.regime)
        names = [t.name for t in state.stream.tasks]
        for tag, mat in _routing_for(state, routers, config.regime).items():
            write_routing_csv(odir / f"routing_scores_{tag}.csv", mat, names)
            routing.setdefault(order, {})[tag] = mat.tolist()
        logs[order] = {"tasks": [{k: v for k, v in lg.items() if k != "history"} for lg in state.logs],
                       "routers": routers.logs}
        _write_schema(odir, ["routing_scores_<tag>.csv"])
        log.info("order %s done", order)
    table = _table(results, modes)
    num_classes = max(len(t.classes) for t in base_stream.tasks)
    fl = _flops_rows(config, base_stream.num_tasks, args.flops_seq_len, num_classes)
    report = {
        "config_hash": config.hash(),
        "seed": config.seed,
        "regime": config.regime,
        "composition": config.composition,
        "family": base_stream.family,
        "tasks": [t.name for t in base_stream.tasks],
        "orders": {o: {"results": results[o], "routing": routing[o], "training": logs[o]} for o in config.orders},
        "table": table,
        "average": table[config.composition]["average"],
        "flops": {f.method: f.flops for f in fl},
        "flops_seq_len": args.flops_seq_len,
    }
    _write_accuracy(out, table, results, config.orders)
    _write_csv(out / "flops.csv", ["method", "flops", "gflops"], [[f.method, f.flops, f"{f.gflops:.6f}"] for f in fl])
    _write_schema(out, ["accuracy.csv", "accuracy_per_task.csv", "flops.csv"])
    atomic_write(out / "report.json", _json(report))
    print(format_table(table, config.orders, f"{config.regime} accuracy (%), family {base_stream.family}"))
    print(f"run directory: {out}")
    return 0


def _load_run(path: Path) -> RunConfig:
    cfg_path = Path(path) / "config.yaml"
    if not cfg_path.exists():
        raise ContractError(f"{path} is not a run directory (no config.yaml)")
    return from_dict(yaml.safe_load(cfg_path.read_text(encoding="utf-8")))


def cmd_eval(args) -> int:
    directory = Path(args.run_dir)
    config = _load_run(directory)
    regime = args.regime or config.regime
    modes = list(REPORT_MODES) if args.mode == "all" else [args.mode or config.composition]
    orders = [args.order] if args.order else list(config.orders)
    results = {}
    for order in orders:
        odir = directory / f"order_{order}"
        state = load_state(odir)
        routers = load_routers(state, odir)
        results[order] = _evaluate_modes(state, routers, modes, regime)
    table = _table(results, modes)
    tag = f"{regime}_{args.mode or config.composition}"
    _write_accuracy(directory, table, results, orders, suffix=f"_eval_{tag}")
    atomic_write(directory / f"eval_{tag}.json", _json({"regime": regime, "orders": results, "table": table}))
    print(format_table(table, orders, f"{regime} accuracy (%)"))
    return 0


def cmd_export_routing(args) -> int:
    directory = Path(args.run_dir)
    config = _load_run(directory)
    regime = args.regime or config.regime
    orders = [args.order] if args.order else list(config.orders)
    for order in orders:
        odir = directory / f"order_{order}"
        state = load_state(odir)
        routers = load_routers(state, odir)
        names = [t.name for t in state.stream.tasks]
        if regime == "CIL":
            if routers.cil is None:
                raise ContractError(f"run has no CIL router in {odir}")
            mats = {"cil": routing_matrices(state, routers, "CIL")}
        else:
            tids = [args.task_id] if args.task_id else sorted(routers.til)
            if not tids or any(t not in routers.til for t in tids):
                raise ContractError(f"run has no TIL router for task(s) {tids} in {odir}")
            mats = {f"til_task{t}": routing_matrices(state, routers, "TIL", t) for t in tids}
        for tag, mat in mats.items():
            path = odir / f"routing_scores_{tag}.csv"
            write_routing_csv(path, mat, names)
            print(path)
    return 0


def _seeds(text: str | None, config: RunConfig) -> list[int]:
    if not text:
        return [config.seed]
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from None


def _fractions(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--fractions expects comma-separated numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    config = resolve_config(args.config, args.set, None, args.output_dir)
    seeds, fractions = _seeds(args.seeds, config), _fractions(args.fractions)
    rows = sweep_memory(config, fractions, seeds, args.mode, config.regime, args.workers)
    out = run_dir(config, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.yaml", config.to_yaml())
    _write_csv(out / "sweep_memory.csv", ["seed", "fraction", "memory_size", "average"],
               [[r["seed"], _fmt_float(r["fraction"]), r["memory_size"], _fmt_float(r["average"])] for r in rows])
    means = {repr(p): float(np.mean([r["average"] for r in rows if r["fraction"] == p])) for p in fractions}
    _write_schema(out, ["sweep_memory.csv"])
    atomic_write(out / "report.json", _json({"config_hash": config.hash(), "seeds": seeds, "mode": args.mode,
                                             "regime": config.regime, "rows": rows, "mean_by_fraction": means}))
    print("fraction  mean accuracy")
    for p in fractions:
        print(f"{p:8.3f}  {means[repr(p)]:.4f}")
    print(f"run directory: {out}")
    return 0


def cmd_ablate(args) -> int:
    config = resolve_config(args.config, args.set, None, args.output_dir)
    seeds = _seeds(args.seeds, config)
    res = ablate_relaxation(config, seeds, config.regime, args.workers)
    out = run_dir(config, "ablate")
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.yaml", config.to_yaml())
    names = list(res["results"][0]["per_task"])
    _write_csv(out / "ablation.csv", ["seed", "relaxation", "average"] + names,
               [[r["seed"], r["relaxation"], _fmt_float(r["average"])] + [_fmt_float(r["per_task"][n]) for n in names]
                for r in res["results"]])
    for relax, mat in res["routing"].items():
        write_routing_csv(out / f"routing_scores_{relax}.csv", np.asarray(mat), names)
    _write_schema(out, ["ablation.csv", "routing_scores_<tag>.csv"])
    atomic_write(out / "report.json", _json({"config_hash": config.hash(), "regime": config.regime, **res}))
    for relax in RELAXATIONS:
        print(f"{relax:15s} mean accuracy {res[f'mean_{relax}']:.4f}")
    print(f"run directory: {out}")
    return 0


def cmd_flops(args) -> int:
    config = resolve_config(args.config, args.set, None, args.output_dir)
    if args.num_tasks is not None:
        T = args.num_tasks
    elif config.data is not None:
        T = config.data.num_tasks
    else:
        T = load_stream(config, config.seed).num_tasks
    if T < 1:
        raise ConfigError("--num-tasks must be >= 1")
    num_classes = config.data.num_classes if config.data is not None else 2
    fl = _flops_rows(config, T, args.seq_len, num_classes)
    out = run_dir(config, "flops")
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "flops.csv", ["method", "flops", "gflops"], [[f.method, f.flops, f"{f.gflops:.6f}"] for f in fl])
    _write_schema(out, ["flops.csv"])
    print(f"forward FLOPs, batch 1, seq_len {args.seq_len}, T={T}")
    for f in fl:
        print(f"{f.method:9s} {f.flops:>16,d}  ({f.gflops:.4f} GFLOPs)")
    print(f"run directory: {out}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="adaptroute",
        description="Continual learning with isolated low-rank adapters and memory-trained routers.",
        epilog=f"Environment: {ENV_SEED} overrides the config seed, {ENV_OUTPUT} the output root. "
               "Flags win over both.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_cmd(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("config", help="YAML run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. router.lr=0.03 (repeatable)")
        sp.add_argument("--output-dir", help="output root (overrides config and environment)")
        return sp

    sp = config_cmd("train", "train every configured task order, fit routers, evaluate and report")
    sp.add_argument("--seed", type=int, help="run seed (overrides config and environment)")
    sp.add_argument("--flops-seq-len", type=int, default=128, help="sequence length for the FLOPs table")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a finished run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--mode", choices=MODES + ("all",), help="composition mode (default: the run's)")
    sp.add_argument("--regime", choices=("CIL", "TIL"), help="default: the run's regime")
    sp.add_argument("--order", help="evaluate a single task order")
    sp.set_defaults(func=cmd_eval)

    sp = config_cmd("sweep-memory", "refit routers for several memory fractions")
    sp.add_argument("--fractions", default="0.01,0.05,0.1,0.2,0.3", help="ascending, comma-separated")
    sp.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    sp.add_argument("--mode", default="wavg", choices=("wavg", "merge-per-input", "merge-static"))
    sp.add_argument("--workers", type=int, default=1, help="parallel seeds")
    sp.set_defaults(func=cmd_sweep)

    sp = config_cmd("ablate-relaxation", "compare Gumbel-sigmoid and softmax routers on the same adapters")
    sp.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    sp.add_argument("--workers", type=int, default=1, help="parallel seeds")
    sp.set_defaults(func=cmd_ablate)

    sp = config_cmd("flops", f"analytic forward FLOPs for {', '.join(METHODS)}")
    sp.add_argument("--seq-len", type=int, default=128)
    sp.add_argument("--num-tasks", type=int, help="default: the config's task count")
    sp.set_defaults(func=cmd_flops)

    sp = sub.add_parser("export-routing-scores", help="write per-layer routing score CSVs for a run")
    sp.add_argument("run_dir")
    sp.add_argument("--regime", choices=("CIL", "TIL"))
    sp.add_argument("--task-id", type=int, help="TIL router stack to export (default: all)")
    sp.add_argument("--order", help="a single task order")
    sp.set_defaults(func=cmd_export_routing)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AdaptRouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
