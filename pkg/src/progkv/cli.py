"""``progkv`` command line.

Offline stages (``profile``, ``allocate``, ``calibrate``) write JSON artifacts
that ``simulate`` consumes. Every subcommand accepts ``--config`` with the
same keys as its flags (dashes become underscores); flags override the file.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure
(including infeasible budgets and exhausted caches).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import selftest as selftest_mod
from .allocate import AllocationPlan, solve
from .cache import CacheConfig, KVBlockCache, required_budget
from .calib import GRID_POINTS, RopeConfig, calibrate
from .errors import ConfigError, InfeasibleBudgetError, ProgKVError
from .quant import GroupSpec, dequantize_tensor, quantize_tensor, save_packed
from .sensitivity import SensitivityTable, load_block_table, profile_blocks
from .shrink import STRATEGIES, mapping_table
from .simulate import POLICY_KINDS, StreamSpec, compare_strategies, report, run_policies
from .tensorio import dumps_json, load_tensor, read_json, synth_kv_arrays, synth_queries, write_csv

log = logging.getLogger("progkv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# Keys each subcommand accepts in --config, with defaults.
SCHEMAS = {
    "quantize": {"input": None, "bits": 2, "axis": "token", "group_size": 128},
    "shrink-ablate": {"bits": [2, 4, 8], "strategies": list(STRATEGIES), "compare": None},
    "profile": {"blocks": 4, "options": [2, 4], "tokens": 256, "heads": 1, "head_dim": 32,
                "queries": 16, "samples": 1, "cache": {}, "entries": None},
    "allocate": {"sensitivity": None, "budget_bytes": None},
    "calibrate": {"kv_stream": [], "scale": 4.0, "bits": 2, "base": 10000.0, "grid": GRID_POINTS,
                  "axis": "channel", "group_size": 128, "tokens": 512, "head_dim": 64,
                  "outlier_channels": [3], "outlier_scale": 10.0},
    "simulate": {"stream": {}, "policies": list(POLICY_KINDS), "cache": {}, "blocks": None,
                 "plan": None, "calibration": None, "format": "csv", "dump_state": None},
    "selftest": {"instances": 200},
}


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON file with this subcommand's settings")
    p.add_argument("--seed", type=int, help="seed for every random draw")
    p.add_argument("--out", help="output path (stdout when omitted)")
    p.add_argument("--json-errors", action="store_true", help="emit errors as JSON on stderr")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="progkv", description="Progressive mixed-precision KV-cache toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", parents=[common], help="pack a tensor file")
    q.add_argument("--input")
    q.add_argument("--bits", type=int)
    q.add_argument("--axis", choices=["token", "channel"])
    q.add_argument("--group-size", type=int)

    s = sub.add_parser("shrink-ablate", parents=[common], help="code mapping tables per strategy")
    s.add_argument("--bits", type=int, nargs="+")
    s.add_argument("--strategies", nargs="+", choices=list(STRATEGIES))

    p = sub.add_parser("profile", parents=[common], help="per-block sensitivity table")
    p.add_argument("--blocks", type=int)
    p.add_argument("--options", type=int, nargs="+")
    p.add_argument("--tokens", type=int)
    p.add_argument("--samples", type=int)

    a = sub.add_parser("allocate", parents=[common], help="optimal widths under a byte budget")
    a.add_argument("--sensitivity")
    a.add_argument("--budget-bytes", type=int)

    c = sub.add_parser("calibrate", parents=[common], help="reparameterization alpha search")
    c.add_argument("--kv-stream", nargs="+")
    c.add_argument("--scale", type=float)
    c.add_argument("--bits", type=int)
    c.add_argument("--grid", type=int)

    m = sub.add_parser("simulate", parents=[common], help="decode-loop error traces")
    m.add_argument("--format", choices=["csv", "json"])
    m.add_argument("--dump-state", help="write final cache state dumps to this JSON path")

    t = sub.add_parser("selftest", parents=[common], help="exhaustive invariant suites")
    t.add_argument("--instances", type=int)
    parser.commands = sub.choices
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then ``--config``, then explicit flags."""
    schema = SCHEMAS[command]
    cfg = dict(schema)
    if args.config:
        doc = read_json(args.config)
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(doc) - set(schema) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown {command} config keys: {sorted(unknown)}")
        cfg.update(doc)
    for key in schema:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg["seed_from_flag"] = True
    else:
        cfg["seed"] = int(cfg.get("seed") or 0)
        cfg["seed_from_flag"] = False
    return cfg


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _need(cfg, key, flag):
    if cfg.get(key) in (None, []):
        raise UsageError(f"{flag} is required (flag or config key {key!r})")
    return cfg[key]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_quantize(cfg, out):
    t = load_tensor(_need(cfg, "input", "--input"))
    spec = GroupSpec(cfg["axis"], int(cfg["group_size"]))
    pt = quantize_tensor(t, int(cfg["bits"]), spec)
    err = float(np.abs(dequantize_tensor(pt).array().astype(np.float64) - t.array()).max())
    summary = {"dims": list(pt.dims), "bit_width": pt.bit_width, "groups": pt.n_groups,
               "nbytes": pt.nbytes, "max_abs_error": err}
    if out:
        summary["files"] = save_packed(pt, out)["files"]
    sys.stdout.write(dumps_json(summary) + "\n")


def cmd_shrink_ablate(cfg, out):
    rows = []
    for strategy in cfg["strategies"]:
        if strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {strategy!r}")
        for b in cfg["bits"]:
            src, dst = mapping_table(int(b), strategy)
            rows.extend((strategy, int(b), int(x), int(y)) for x, y in zip(src, dst))
    header = ("strategy", "half_bits", "source_code", "target_code")
    if out:
        write_csv(rows, header, out)
    else:
        write_csv(rows, header, sys.stdout)
    if cfg.get("compare"):
        comp = dict(cfg["compare"])
        fbit = int(comp.pop("fbit", 2))
        cache = CacheConfig.from_dict(comp.pop("cache", {}))
        stream = StreamSpec.from_dict({"seed": cfg["seed"], **comp})
        if cfg["seed_from_flag"]:
            stream.seed = cfg["seed"]
        res = compare_strategies(stream, fbit, cfg["strategies"], cache)
        sys.stderr.write(dumps_json(res) + "\n")


def cmd_profile(cfg, out):
    cache = CacheConfig.from_dict(cfg["cache"])
    options = [int(b) for b in cfg["options"]]
    if cfg.get("entries"):
        table = load_block_table(cfg["entries"], options, cache, int(cfg["heads"]),
                                 int(cfg["head_dim"]), lambda p: load_tensor(p).array())
    else:
        table = profile_blocks(int(cfg["blocks"]), options, int(cfg["tokens"]), int(cfg["heads"]),
                               int(cfg["head_dim"]), int(cfg["queries"]), int(cfg["samples"]),
                               cfg["seed"], cache)
    _emit(dumps_json(table.to_dict()) + "\n", out)


def cmd_allocate(cfg, out):
    table = SensitivityTable.from_dict(read_json(_need(cfg, "sensitivity", "--sensitivity")))
    budget = int(_need(cfg, "budget_bytes", "--budget-bytes"))
    plan = solve(table, budget)
    _emit(dumps_json(plan.to_dict()) + "\n", out)


def _calib_arrays(cfg):
    if cfg["kv_stream"]:
        parts = []
        for path in cfg["kv_stream"]:
            arr = load_tensor(path).array().astype(np.float64)
            if arr.ndim != 3 or arr.shape[0] != 3:
                raise ConfigError(f"{path}: expected dims [3, tokens, head_dim], got {arr.shape}")
            parts.append(arr)
        stacked = np.concatenate(parts, axis=1)
        return stacked[0], stacked[1], stacked[2]
    n, d = int(cfg["tokens"]), int(cfg["head_dim"])
    K, V = synth_kv_arrays(cfg["seed"], n, 1, d, cfg["outlier_channels"], float(cfg["outlier_scale"]))
    Q = synth_queries(cfg["seed"], n, 1, d)
    return (Q[:, 0].astype(np.float64), K[:, 0].astype(np.float64), V[:, 0].astype(np.float64))


def cmd_calibrate(cfg, out):
    Q, K, V = _calib_arrays(cfg)
    rcfg = RopeConfig(K.shape[1], float(cfg["base"]), float(cfg["scale"]))
    res = calibrate(Q, K, V, int(cfg["bits"]), rcfg, GroupSpec(cfg["axis"], int(cfg["group_size"])),
                    int(cfg["grid"]))
    _emit(dumps_json(res) + "\n", out)


def _block_configs(cfg, blocks: int) -> list[CacheConfig]:
    base = CacheConfig.from_dict(cfg["cache"])
    if cfg.get("blocks"):
        if len(cfg["blocks"]) != blocks:
            raise ConfigError(f"{len(cfg['blocks'])} block configs for {blocks} blocks")
        configs = [CacheConfig.from_dict({**base.to_dict(), **b}) for b in cfg["blocks"]]
    else:
        configs = [base] * blocks
    if cfg.get("plan"):
        plan = AllocationPlan.from_dict(read_json(cfg["plan"]))
        if len(plan.choice) != blocks:
            raise ConfigError(f"plan covers {len(plan.choice)} blocks, stream has {blocks}")
        configs = [c.replace(fbit=b) for c, b in zip(configs, plan.choice)]
    return configs


def cmd_simulate(cfg, out):
    stream = StreamSpec.from_dict({"seed": cfg["seed"], **cfg["stream"]})
    if cfg["seed_from_flag"]:
        stream.seed = cfg["seed"]
    configs = _block_configs(cfg, stream.blocks)
    lam = None
    if cfg.get("calibration"):
        lam = read_json(cfg["calibration"])["lambda"]
    kinds = list(cfg["policies"])
    for k in kinds:
        if k not in POLICY_KINDS:
            raise ConfigError(f"unknown policy {k!r}")
    traces = run_policies(kinds, configs, stream, reparam=lam)
    fmt = cfg["format"]
    for kind, trace in traces.items():
        text = report(trace, fmt)
        if out and len(traces) > 1:
            p = Path(out)
            p.with_name(f"{p.stem}.{kind}{p.suffix}").write_text(text)
        elif out:
            Path(out).write_text(text)
        else:
            sys.stdout.write(text)
    summary = {k: t.summary() for k, t in traces.items()}
    if cfg.get("dump_state"):
        dumps = {}
        for kind in kinds:
            if kind == "fp_reference":
                continue
            states = []
            for i in range(stream.blocks):
                K, V, _ = stream.block_arrays(i)
                c = configs[i]
                if c.budget_bytes is None:
                    c = c.replace(budget_bytes=required_budget(c, stream.heads, stream.head_dim,
                                                               "progressive"))
                cache = KVBlockCache(c, stream.heads, stream.head_dim, kind)
                Kc = K / np.asarray(lam) if lam is not None else K
                for t in range(stream.steps):
                    cache.append(Kc[t], V[t])
                states.append(cache.dump_state())
            dumps[kind] = states
        Path(cfg["dump_state"]).write_text(dumps_json(dumps) + "\n")
    (sys.stderr if not out else sys.stdout).write(dumps_json(summary) + "\n")


def cmd_selftest(cfg, out):
    suites = [selftest_mod.shift_identity(),
              selftest_mod.knapsack_oracle(int(cfg["instances"]), seed=cfg["seed"])]
    res = {"ok": all(s["ok"] for s in suites), "suites": suites}
    _emit(dumps_json(res) + "\n", out)
    if not res["ok"]:
        raise ProgKVError("selftest failed")


COMMANDS = {
    "quantize": cmd_quantize,
    "shrink-ablate": cmd_shrink_ablate,
    "profile": cmd_profile,
    "allocate": cmd_allocate,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "selftest": cmd_selftest,
}


def _fail(exc, code, json_errors):
    if json_errors:
        doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if isinstance(exc, InfeasibleBudgetError):
            doc["min_budget_bytes"] = exc.min_budget
        sys.stderr.write(json.dumps(doc) + "\n")
    else:
        sys.stderr.write(f"progkv: {exc}\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    json_errors = "--json-errors" in argv
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 1, json_errors)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        log.info("running %s with %s", args.command, cfg)
        COMMANDS[args.command](cfg, args.out)
    except UsageError as exc:
        parser.commands[args.command].print_usage(sys.stderr)
        return _fail(exc, 1, args.json_errors)
    except ConfigError as exc:
        return _fail(exc, 1, args.json_errors)
    except (ProgKVError, OSError, ValueError, KeyError, AssertionError) as exc:
        return _fail(exc, 2, args.json_errors)
    return 0


if __name__ == "__main__":
    sys.exit(main())
