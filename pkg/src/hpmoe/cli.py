"""Command-line entry point: compile, simulate, verify, bench, export-trace.

Exit codes: 0 success, 2 input error, 3 simulation deadlock, 4 verification
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bench
from .compiler import CompileOptions, compile_moe, compile_swiglu_add, check_compiled
from .cost import CostModel
from .errors import DeadlockError, HpmoeError
from .graph import ShapeConfig
from .numeric import random_problem, serial_backward, swiglu
from .routing import RoutingPlan, balanced_plan, natural_plan
from .scheduler import deserialize_ssc, serialize_ssc, validate_schedule
from .sim import simulate, trace_json
from .taskflow import moe_inputs, taskflow_execute

EXIT_OK, EXIT_INPUT, EXIT_DEADLOCK, EXIT_VERIFY = 0, 2, 3, 4
TOLERANCE = 1e-5
GRAPHS = ("forward", "backward", "swiglu_add")


class InputError(HpmoeError):
    """Bad command-line or RunSpec input."""


@dataclass
class RunSpec:
    graph: str = "forward"
    shape: ShapeConfig = field(default_factory=ShapeConfig)
    routing: dict = field(default_factory=lambda: {"kind": "balanced"})
    swiglu_add: dict = field(default_factory=lambda: {"m": 256, "hidden_in": 64,
                                                      "rows_per_tile": 32})
    cost_model: str | None = None
    ratr: bool = True
    ratr_combine: bool = True
    interleave: bool = True
    strict_single_trigger: bool = False
    mode: str = "pipelined"
    dispatch: str = "static"
    output_dir: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> RunSpec:
        d = dict(d)
        flags = d.pop("flags", {}) or {}
        known = {"graph", "shape", "shape_config", "routing", "swiglu_add", "cost_model",
                 "output_dir", "seed"}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown RunSpec keys {sorted(unknown)}")
        shape = d.pop("shape", None) or d.pop("shape_config", None) or {}
        spec = cls(**{k: v for k, v in d.items() if k != "shape_config"},
                   shape=ShapeConfig.from_dict(shape))
        for k, v in flags.items():
            if k not in {"ratr", "ratr_combine", "interleave", "strict_single_trigger", "mode",
                         "dispatch"}:
                raise InputError(f"unknown RunSpec flag {k!r}")
            setattr(spec, k, v)
        if spec.graph not in GRAPHS:
            raise InputError(f"graph must be one of {GRAPHS}, got {spec.graph!r}")
        return spec

    def options(self) -> CompileOptions:
        return CompileOptions(ratr=self.ratr, ratr_combine=self.ratr_combine,
                              interleave=self.interleave,
                              strict_single_trigger=self.strict_single_trigger)

    def plan(self) -> RoutingPlan:
        c = self.shape.validate()
        kind = self.routing.get("kind", "balanced")
        if kind == "balanced":
            return balanced_plan(c)
        if kind == "natural":
            return natural_plan(c, seed=int(self.routing.get("seed", 0)),
                                skew=float(self.routing.get("skew", 1.0)))
        raise InputError(f"unknown routing kind {kind!r}")


def load_runspec(path: str | None) -> RunSpec:
    spec = RunSpec()
    if path:
        try:
            spec = RunSpec.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise InputError(f"cannot read RunSpec {path}: {e}") from e
        except TypeError as e:
            raise InputError(f"bad RunSpec {path}: {e}") from e
    env_seed = os.environ.get("HPMOE_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as e:
            raise InputError(f"HPMOE_SEED must be an integer, got {env_seed!r}") from e
        spec.seed = seed
        spec.routing = {**spec.routing, "seed": seed}
    return spec


def load_cost_model(path: str | None) -> CostModel:
    if not path:
        return CostModel()
    try:
        return CostModel.from_json(Path(path).read_text())
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise InputError(f"cannot read cost model {path}: {e}") from e


def _apply_flags(spec: RunSpec, args) -> RunSpec:
    if getattr(args, "no_ratr", False):
        spec.ratr = False
    if getattr(args, "ratr_combine", None) is not None:
        spec.ratr_combine = args.ratr_combine
    if getattr(args, "no_interleave", False):
        spec.interleave = False
    if getattr(args, "strict_single_trigger", False):
        spec.strict_single_trigger = True
    if getattr(args, "mode", None):
        spec.mode = args.mode
    if getattr(args, "dispatch", None):
        spec.dispatch = args.dispatch
    if getattr(args, "out", None):
        spec.output_dir = args.out
    return spec


def compile_runspec(spec: RunSpec):
    if spec.graph == "swiglu_add":
        p = spec.swiglu_add
        return compile_swiglu_add(int(p["m"]), int(p["hidden_in"]), p.get("rows_per_tile"),
                                  interleave=spec.interleave)
    return compile_moe(spec.graph, spec.shape, spec.plan(), spec.options())


def _write(path: Path, text: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(text, bytes):
        path.write_bytes(text)
    else:
        path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_compile(args) -> int:
    spec = _apply_flags(load_runspec(args.config), args)
    ct = compile_runspec(spec)
    out = Path(spec.output_dir)
    for s in ct.sscs:
        _write(out / f"ssc_rank{s.rank_id}.json", serialize_ssc(s))
    if ct.plan is not None:
        _write(out / "routing.json", ct.plan.to_json() + "\n")
    problems = check_compiled(ct)
    report = {**ct.report(), "violations": problems}
    _write(out / "report.json", _dump(report))
    print(f"compiled {len(ct.sscs)} rank(s) into {out}")
    if problems:
        print(_dump({"error": "DeadlockError", "violations": problems}), file=sys.stderr)
        return EXIT_DEADLOCK
    return EXIT_OK


def _load_sscs(paths):
    sscs = []
    for p in paths:
        try:
            sscs.append(deserialize_ssc(Path(p).read_bytes()))
        except OSError as e:
            raise InputError(f"cannot read SSC {p}: {e}") from e
    return sscs


def _simulate_files(args):
    spec = _apply_flags(load_runspec(args.config), args)
    cm = load_cost_model(args.cost_model or spec.cost_model)
    sscs = _load_sscs(args.ssc)
    chk = validate_schedule(sscs)
    if not chk.ok:
        raise DeadlockError("schedule has a wait cycle", [list(u) for u in chk.witness])
    return spec, simulate(sscs, cm, spec.mode, spec.dispatch)


def cmd_simulate(args) -> int:
    spec, result = _simulate_files(args)
    out = Path(spec.output_dir)
    _write(out / "metrics.json", _dump(result.report()))
    _write(out / "trace.json", trace_json(result.trace))
    print(f"{spec.mode}/{spec.dispatch}: makespan {result.makespan:.3f} us")
    return EXIT_OK


def cmd_export_trace(args) -> int:
    _, result = _simulate_files(args)
    _write(Path(args.trace_out), trace_json(result.trace))
    return EXIT_OK


def corrupting_hook():
    """Fault hook that perturbs the first element written by the first compute task."""
    done = []

    def hook(rank, i, td, arrays):
        if done or td.task_type == "PutMemSignal" or td.outputs[0].numel == 0:
            return
        s = td.outputs[0]
        arrays[s.tensor_id][tuple(s.offsets)] += 1.0
        done.append((rank, i))

    return hook


def verify_runspec(spec: RunSpec, dtype=np.float64, fault=None) -> dict[str, tuple[float, tuple]]:
    """Max relative error and worst element per output tensor."""
    ct = compile_runspec(spec)
    cm = load_cost_model(spec.cost_model)
    results: dict[str, tuple[float, tuple]] = {}

    def record(name, got, ref):
        got = np.asarray(got, dtype=np.float64)
        ref = np.asarray(ref, dtype=np.float64)
        if np.dtype(dtype) == np.float64:
            err = np.abs(got - ref) / (np.abs(ref) + 1e-12)
        else:
            err = np.abs(got - ref) / max(float(np.abs(ref).max(initial=0.0)), 1e-12)
        where = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        results[name] = (float(err.max(initial=0.0)), tuple(int(w) for w in where))

    if spec.graph == "swiglu_add":
        p = spec.swiglu_add
        rng = np.random.default_rng(spec.seed)
        h = rng.standard_normal((int(p["m"]), int(p["hidden_in"])))
        res = rng.standard_normal((int(p["m"]), int(p["hidden_in"]) // 2))
        tf = taskflow_execute(ct, [{"h": h, "residual": res}], dtype=dtype, cm=cm, fault=fault)
        record("out", tf.buffers[0]["out"], swiglu(h) + res)
        return results
    plan = ct.plan
    c = spec.shape
    prob = random_problem(plan, c.hidden, c.intermediate, seed=spec.seed)
    ref = serial_backward(prob["x"], prob["w1"], prob["w2"], plan, prob["dy"])
    if spec.graph == "forward":
        tf = taskflow_execute(ct, moe_inputs("forward", prob, plan), dtype=dtype, cm=cm,
                              fault=fault)
        for r, got in enumerate(tf.get("out")):
            record(f"out[rank{r}]", got, ref["forward"]["out"][r])
    else:
        tf = taskflow_execute(ct, moe_inputs("backward", prob, plan, ref["forward"]),
                              dtype=dtype, cm=cm, fault=fault)
        for r, got in enumerate(tf.get("dx")):
            record(f"dx[rank{r}]", got, ref["dx"][r])
        record("dw1", np.concatenate(tf.get("dw1")), ref["dw1"])
        record("dw2", np.concatenate(tf.get("dw2")), ref["dw2"])
    return results


def cmd_verify(args) -> int:
    spec = _apply_flags(load_runspec(args.config), args)
    dtype = np.float32 if args.dtype == "f32" else np.float64
    results = verify_runspec(spec, dtype, corrupting_hook() if args.inject_fault else None)
    worst_name = max(results, key=lambda k: results[k][0])
    for name, (err, where) in sorted(results.items()):
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name}: max relative error {err:.3e} at {list(where)} [{status}]")
    if results[worst_name][0] >= TOLERANCE:
        err, where = results[worst_name]
        print(_dump({"error": "VerificationError", "tensor": worst_name,
                     "element": list(where), "relative_error": err}), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_bench(args) -> int:
    values = [int(v) for v in args.values.split(",")] if args.values else None
    rows = bench.run_suite(args.suite, values, jobs=args.jobs)
    text = bench.rows_to_csv(rows)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _schedule_flags(p):
    p.add_argument("--config", help="RunSpec JSON")
    p.add_argument("--no-ratr", action="store_true", help="keep naive destination order")
    p.add_argument("--ratr-combine", dest="ratr_combine", action="store_true", default=None,
                   help="apply ring rotation to combine traffic (default)")
    p.add_argument("--no-ratr-combine", dest="ratr_combine", action="store_false")
    p.add_argument("--no-interleave", action="store_true", help="disable queue interleaving")
    p.add_argument("--strict-single-trigger", action="store_true",
                   help="every producer triggers exactly one counter")


def _sim_flags(p):
    p.add_argument("--cost-model", help="CostModel JSON")
    p.add_argument("--mode", choices=("pipelined", "serial_baseline"))
    p.add_argument("--dispatch", choices=("static", "dynamic"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hpmoe", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile a RunSpec into per-rank SSC files")
    _schedule_flags(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("simulate", help="simulate SSC files")
    p.add_argument("ssc", nargs="+")
    p.add_argument("--config", help="RunSpec JSON")
    _sim_flags(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="compare the taskflow against the float64 oracle")
    _schedule_flags(p)
    p.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="run a benchmark suite and write CSV")
    p.add_argument("suite")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--values", help="comma-separated sweep values overriding the defaults")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-trace", help="simulate SSC files and write a Chrome trace")
    p.add_argument("ssc", nargs="+")
    p.add_argument("--config", help="RunSpec JSON")
    _sim_flags(p)
    p.add_argument("--trace-out", required=True)
    p.set_defaults(func=cmd_export_trace)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DeadlockError as e:
        print(_dump({"error": "DeadlockError", "message": str(e), "blocked": e.blocked}),
              file=sys.stderr)
        return EXIT_DEADLOCK
    except (HpmoeError, ValueError) as e:
        print(_dump({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
