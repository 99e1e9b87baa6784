"""Command-line experiment runner.

Subcommands: simulate, verify, rl, generate.  Each takes an optional YAML
config file; ``--set key.path=value`` overrides single keys (values are
parsed as YAML scalars).  Exit codes: 0 success, 1 usage or config error,
2 verification failure, 3 runtime error.

Config schema (all keys optional unless noted)::

    seed: 1                       # required; no wall-clock seeding
    output: results/              # output directory
    target:                       # simulate / verify
      kind: permutation           # binary | permutation | ising
      n: 100
      weights: lognormal(3)       # see targets.target_from_config
    kernels: [rw, gb, lb1, lb2]   # names, or {name: blockwise-barker, block_size: 10}
    iterations: 100000
    seconds: null                 # if set, per-kernel wall-clock budget instead of iterations
    thin: 1
    burn_in: 0                    # rows dropped before ESS
    pilot: 0                      # informed warm-up iterations for the shared start
    summaries: {references: 2, level: true}
    sweep: {n: [100, 200], lambda: [1, 3, 5]}   # simulate: grid over target.n and the
                                                # roughness (permutation lognormal lambda,
                                                # ising preset)
    exact: {cap: 4096}
    verify: {balanced: [sqrt, barker, min, max], peskun_targets: 20, quick: false}
    rl:
      x: a.csv
      y: b.csv
      fields: null
      scheme: lb
      iterations: 100000
      hyper_every: 100
      thin: 1
      burn_in: 0
      block_size: null
      beta: 0.001
      chains: 2
      floor: 0.01
    generate: {n_records: 300, p_match: 0.5, levels: [20, 12, 30, 8, 50], beta: 0.02}
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
import warnings
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from . import __version__
from . import exact as ex
from .diagnostics import efficiency_table, write_efficiency_csv, write_rows_csv
from .kernels import KernelSpec, chain_rng, run_chain

log = logging.getLogger("lbmcmc")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3


class ConfigError(ValueError):
    """Bad config: carries the offending key path and, when known, its line."""

    def __init__(self, msg: str, path: str = "", line: Optional[int] = None, source: str = ""):
        where = source
        if line is not None:
            where += f":{line}"
        prefix = f"{where}: " if where else ""
        key = f"{path}: " if path else ""
        super().__init__(f"{prefix}{key}{msg}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# config loading


class Config:
    """Nested mapping with the source line of every key, for diagnostics."""

    def __init__(self, data: dict, lines: dict, source: str = "<flags>"):
        self.data = data
        self.lines = lines
        self.source = source

    def error(self, path: str, msg: str) -> ConfigError:
        return ConfigError(msg, path, self.lines.get(path), self.source if path in self.lines else "")

    def get(self, path: str, default: Any = None) -> Any:
        cur: Any = self.data
        for part in path.split("."):
            if not isinstance(cur, dict) or part not in cur:
                return default
            cur = cur[part]
        return cur if cur is not None else default

    def section(self, path: str) -> dict:
        v = self.get(path, {})
        if not isinstance(v, dict):
            raise self.error(path, "expected a mapping")
        return v

    def number(self, path: str, default=None, kind=int, minimum=None):
        v = self.get(path, default)
        if v is None:
            return None
        try:
            out = kind(v)
        except (TypeError, ValueError):
            raise self.error(path, f"expected {kind.__name__}, got {v!r}") from None
        if minimum is not None and out < minimum:
            raise self.error(path, f"must be at least {minimum}, got {out}")
        return out

    def hash(self) -> str:
        # where results go does not change what is computed
        data = {k: v for k, v in self.data.items() if k != "output"}
        blob = json.dumps(data, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def _line_map(node, prefix: str = "", out: Optional[dict] = None) -> dict:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _line_map(v, path, out)
    return out


def load_config(path: Optional[str], overrides=()) -> Config:
    data: dict = {}
    lines: dict = {}
    source = "<flags>"
    if path:
        source = path
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", source=path) from None
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark is not None else None
            raise ConfigError(f"YAML syntax: {getattr(exc, 'problem', exc)}", line=line,
                              source=path) from None
        if not isinstance(data, dict):
            raise ConfigError("top level must be a mapping", source=path)
        lines = _line_map(node)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        cur = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            nxt = cur.get(part)
            if not isinstance(nxt, dict):
                nxt = {}
                cur[part] = nxt
            cur = nxt
        cur[parts[-1]] = value
        lines.pop(key.strip(), None)
    return Config(data, lines, source)


def _seed(cfg: Config) -> int:
    if cfg.get("seed") is None:
        raise cfg.error("seed", "a seed is required (set it in the config or with --set seed=N)")
    return cfg.number("seed", kind=int, minimum=0)


def _output(cfg: Config, default: str) -> Path:
    out = Path(cfg.get("output", default))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _kernel_specs(cfg: Config) -> list:
    raw = cfg.get("kernels")
    if raw is None:
        raise cfg.error("kernels", "at least one kernel is required")
    if isinstance(raw, (str, dict)):
        raw = [raw]
    if not raw:
        raise cfg.error("kernels", "at least one kernel is required")
    specs = []
    for k, item in enumerate(raw):
        try:
            if isinstance(item, dict):
                specs.append(KernelSpec.from_name(str(item["name"]), int(item.get("block_size", 0))))
            else:
                specs.append(KernelSpec.from_name(str(item)))
        except (KeyError, ValueError) as exc:
            raise cfg.error("kernels", f"entry {k}: {exc}") from None
    return specs


def _manifest(cfg: Config, command: str, outputs: list, extra: Optional[dict] = None) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config_hash": cfg.hash(),
        "config": cfg.data,
        "config_source": cfg.source,
        "outputs": [str(p) for p in outputs],
        "python": platform.python_version(),
        "numpy": np.__version__,
        **(extra or {}),
    }


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _safe(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in label)


# --------------------------------------------------------------------------
# simulate


def _build_target(cfg: Config, target_cfg: dict, seed: int):
    from .targets import target_from_config

    try:
        return target_from_config(target_cfg, np.random.default_rng([seed, 0]))
    except (KeyError, ValueError, OSError) as exc:
        raise cfg.error("target", str(exc)) from None


def _simulate_one(cfg: Config, target, specs, seed: int, outdir: Optional[Path]):
    from .experiments import budget_iterations, pilot_state

    rng = chain_rng(seed, 10 ** 6 + 7)
    init = target.random_state(rng)
    pilot = cfg.number("pilot", 0, minimum=0)
    if pilot:
        init = pilot_state(target, pilot, seed, init=init)
    summ = cfg.section("summaries")
    n_refs = int(summ.get("references", 1))
    refs = [target.random_state(rng) for _ in range(n_refs)]
    level = bool(summ.get("level", True))
    iterations = cfg.number("iterations", 10000, minimum=1)
    seconds = cfg.number("seconds", None, kind=float, minimum=0.0)
    thin = cfg.number("thin", 1, minimum=1)
    traces = {}
    outputs = []
    for k, spec in enumerate(specs):
        it = budget_iterations(spec, target, init, seconds, seed) if seconds else iterations
        tr = run_chain(spec, target, init=init, iterations=it, thin=thin, references=refs,
                       record_level=level, seed=seed, chain=k)
        traces[spec.label] = tr
        log.info("%s: %d iterations, acceptance %.4f, %.0f flips/s", spec.label, it,
                 tr.acceptance_rate, tr.flips_per_sec)
        if outdir is not None:
            base = outdir / f"trace_{_safe(spec.label)}"
            tr.to_csv(base.with_suffix(".csv"))
            tr.write_json(base.with_suffix(".json"), {"target": cfg.get("target")})
            outputs += [base.with_suffix(".csv"), base.with_suffix(".json")]
    return traces, outputs


def _efficiency(traces: dict, burn: int):
    ref = next(iter(traces))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return efficiency_table(traces, ref, burn_in=burn)
    except ValueError:
        return None  # too few recorded rows for ESS


def cmd_simulate(cfg: Config) -> int:
    seed = _seed(cfg)
    specs = _kernel_specs(cfg)
    tcfg = cfg.section("target")
    if not tcfg:
        raise cfg.error("target", "a target section is required")
    outdir = _output(cfg, "lbmcmc-simulate")
    burn = cfg.number("burn_in", 0, minimum=0)
    sweep = cfg.section("sweep")
    outputs = []
    if sweep:
        ns = sweep.get("n", [tcfg.get("n")])
        rough = sweep.get("lambda", [None])
        rows = []
        for n in ns:
            for lam in rough:
                point = copy.deepcopy(tcfg)
                point["n"] = n
                if lam is not None:
                    kind = str(point.get("kind", "")).lower()
                    if kind == "permutation":
                        point["weights"] = f"lognormal({lam})"
                    elif kind == "ising":
                        point["preset"] = lam
                    else:
                        raise cfg.error("sweep.lambda", f"no roughness axis for target kind {kind!r}")
                target = _build_target(cfg, point, seed)
                traces, _ = _simulate_one(cfg, target, specs, seed, None)
                ref = next(iter(traces.values()))
                for label, tr in traces.items():
                    rows.append([n, lam, label, tr.iterations, tr.acceptance_rate,
                                 tr.acceptance_kind, tr.flips_per_sec,
                                 tr.flips_per_sec / ref.flips_per_sec if ref.flips_per_sec > 0 else ""])
        path = outdir / "sweep.csv"
        write_rows_csv(path, ["n", "lambda", "scheme", "iterations", "acceptance_rate",
                              "acceptance_kind", "flips_per_sec", "relative_flips_per_sec"], rows)
        outputs.append(path)
    else:
        target = _build_target(cfg, tcfg, seed)
        traces, outputs = _simulate_one(cfg, target, specs, seed, outdir)
        rows = _efficiency(traces, burn)
        if rows is not None:
            path = outdir / "efficiency.csv"
            write_efficiency_csv(path, rows)
            outputs.append(path)
    _write_json(outdir / "manifest.json", _manifest(cfg, "simulate", outputs))
    print(f"wrote {len(outputs)} files to {outdir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def cmd_verify(cfg: Config) -> int:
    from .experiments import (battery_schemes, run_verify, verify_flow_symmetry,
                              verify_stationarity)
    from .balance import from_name

    seed = _seed(cfg)
    cap = cfg.number("exact.cap", ex.DEFAULT_CAP, minimum=2)
    vcfg = cfg.section("verify")
    balanced = vcfg.get("balanced", ["sqrt", "barker", "min", "max"])
    try:
        gs = [from_name(str(b)) for b in balanced]
    except ValueError as exc:
        raise cfg.error("verify.balanced", str(exc)) from None
    report = run_verify(seed=seed, cap=cap, balanced=[g.kind for g in gs],
                        peskun_targets_n=int(vcfg.get("peskun_targets", 20)),
                        quick=bool(vcfg.get("quick", False)))
    tcfg = cfg.section("target")
    if tcfg:
        target = _build_target(cfg, tcfg, seed)
        targets = {"config-target": target}
        specs = _kernel_specs(cfg) if cfg.get("kernels") else battery_schemes()
        for a in verify_stationarity(targets, specs, cap=cap):
            report.add(a)
        for a in verify_flow_symmetry(targets, gs, cap=cap):
            report.add(a)
    outdir = _output(cfg, "lbmcmc-verify")
    path = outdir / "verify_report.json"
    _write_json(path, {**report.as_dict(), "version": __version__, "config_hash": cfg.hash()})
    _write_json(outdir / "manifest.json", _manifest(cfg, "verify", [path]))
    failed = [a.name for a in report.assertions if not a.passed]
    print(f"{len(report.assertions) - len(failed)}/{len(report.assertions)} assertions passed; "
          f"report at {path}")
    for name in failed:
        print(f"FAILED {name}")
    return EXIT_OK if not failed else EXIT_VERIFY


# --------------------------------------------------------------------------
# record linkage


def cmd_rl(cfg: Config) -> int:
    from .recordlinkage import RLConfig, read_csv_pair, run_rl_sampler, write_pair_probabilities

    seed = _seed(cfg)
    r = cfg.section("rl")
    for key in ("x", "y"):
        if not r.get(key):
            raise cfg.error(f"rl.{key}", "path to the CSV file is required")
    dataset = read_csv_pair(r["x"], r["y"], r.get("fields"))
    try:
        rc = RLConfig(
            scheme=str(r.get("scheme", "lb")),
            iterations=int(r.get("iterations", 100000)),
            hyper_every=int(r.get("hyper_every", 100)),
            thin=int(r.get("thin", 1)),
            beta=float(r.get("beta", RLConfig.beta)),
            block_size=int(r["block_size"]) if r.get("block_size") else None,
            burn_in=int(r.get("burn_in", 0)),
            p_rule=str(r.get("p_rule", "conjugate")),
            lambda_support=str(r.get("lambda_support", "max")),
        )
        rc.kernel()
    except (TypeError, ValueError) as exc:
        raise cfg.error("rl", str(exc)) from None
    chains = cfg.number("rl.chains", 1, minimum=1)
    floor = cfg.number("rl.floor", 0.01, kind=float, minimum=0.0)
    outdir = _output(cfg, "lbmcmc-rl")
    outputs = []
    results = []
    for c in range(chains):
        res = run_rl_sampler(dataset, rc, seed=seed, chain=c)
        results.append(res)
        base = outdir / f"trace_chain{c}"
        res.trace.to_csv(base.with_suffix(".csv"))
        res.trace.write_json(base.with_suffix(".json"), {
            "n_x": dataset.n_x, "n_y": dataset.n_y, "pair_samples": res.n_pair_samples,
            "final_matches": res.final.n_matches,
            "hyper_mean": res.hyper_trace.mean(axis=0).tolist() if len(res.hyper_trace) else None,
        })
        outputs += [base.with_suffix(".csv"), base.with_suffix(".json")]
        log.info("chain %d: %d matches at the end, %.3f s", c, res.final.n_matches,
                 res.trace.wall_clock)
    pooled: dict = {}
    total = sum(res.n_pair_samples for res in results)
    for res in results:
        for k, v in res.pair_counts.items():
            pooled[k] = pooled.get(k, 0) + v
    probs = {k: v / max(total, 1) for k, v in pooled.items()}
    path = outdir / "pair_probabilities.csv"
    write_pair_probabilities(probs, path, floor)
    outputs.append(path)
    summary = {"chains": chains, "pair_samples": total, "couples_above_floor":
               sum(p >= floor for p in probs.values())}
    if chains >= 2:
        per = [res.pair_probabilities() for res in results]
        keys = sorted(set().union(*per))
        table = np.array([[p.get(k, 0.0) for p in per] for k in keys]) if keys else np.zeros((0, chains))
        path = outdir / "replicate_scatter.csv"
        write_rows_csv(path, ["i", "j", *[f"chain{c}" for c in range(chains)]],
                       [[i, j, *map(repr, row)] for (i, j), row in zip(keys, table.tolist())])
        outputs.append(path)
        if len(keys) > 1:
            summary["replicate_correlation"] = float(np.corrcoef(table[:, 0], table[:, 1])[0, 1])
    _write_json(outdir / "summary.json", summary)
    outputs.append(outdir / "summary.json")
    _write_json(outdir / "manifest.json", _manifest(cfg, "rl", outputs))
    print(f"wrote {len(outputs)} files to {outdir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# generate


def cmd_generate(cfg: Config) -> int:
    from .experiments import synthetic_rl_dataset
    from .recordlinkage import write_dataset_csv

    seed = _seed(cfg)
    g = cfg.section("generate")
    try:
        ds, truth = synthetic_rl_dataset(
            n_records=int(g.get("n_records", 300)), p_match=float(g.get("p_match", 0.5)),
            field_levels=[int(v) for v in g.get("levels", [20, 12, 30, 8, 50])],
            beta=float(g.get("beta", 0.02)), seed=seed)
    except (TypeError, ValueError) as exc:
        raise cfg.error("generate", str(exc)) from None
    outdir = _output(cfg, "lbmcmc-data")
    paths = [outdir / "x.csv", outdir / "y.csv", outdir / "truth.csv"]
    write_dataset_csv(ds, *paths[:2], true_matching=truth, path_truth=paths[2])
    _write_json(outdir / "manifest.json", _manifest(cfg, "generate", paths, {
        "n_x": ds.n_x, "n_y": ds.n_y, "true_matches": truth.n_matches}))
    print(f"{ds.n_x} + {ds.n_y} records, {truth.n_matches} true matches, written to {outdir}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "verify": cmd_verify, "rl": cmd_rl, "generate": cmd_generate}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lbmcmc", description="Locally balanced MCMC experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "simulate": "run kernels on a target; traces and efficiency table",
        "verify": "exact-mode verification battery; JSON report",
        "rl": "record-linkage posterior from two CSV files",
        "generate": "write a synthetic record-linkage dataset",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("config", nargs="?", help="YAML config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("-o", "--output", help="output directory (overrides config 'output')")
        sp.add_argument("--seed", type=int, help="RNG seed (overrides config 'seed')")
        if name == "rl":
            sp.add_argument("--x", help="CSV file of the first database")
            sp.add_argument("--y", help="CSV file of the second database")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.output:
        overrides.append(f"output={args.output}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    for key in ("x", "y"):
        if getattr(args, key, None):
            overrides.append(f"rl.{key}={getattr(args, key)}")
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ex.StateSpaceOverflow as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # reported, not re-raised: the exit code carries the outcome
        from .recordlinkage import IngestionError

        kind = "input error" if isinstance(exc, (IngestionError, OSError)) else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
