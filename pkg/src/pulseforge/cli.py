"""Command-line runner.

Every command reads a JSON run config, runs one pipeline, and writes a
result record (JSON) plus plot data (CSV) atomically into the output
directory. Exit codes: 0 success, 2 invalid input, 3 runtime failure,
64 unknown command.
"""
import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, gates
from .agent import TrainConfig, train
from .annealing import SaConfig, reward_cost, sa_run
from .benchmark import (
    RbConfig,
    build_cnot,
    build_swap,
    calibrate_cr,
    calibrate_drag,
    compare_rb,
    ideal_zx,
    irb,
    repetition_error,
    run_rb,
)
from .control import Depolarize, Gate, Pulse, PwcWaveform, as_schedule, echoed_cr, gate_schedule
from .device import DeviceEnvironment, load_device
from .reward import DEFAULT_STATES, RewardSpec
from .simulate import ValidationError

COMMANDS = ("train-drl", "train-sa", "rb", "irb", "repeat", "describe")
RECORD_SCHEMA = 1
RUN_SCHEMA = 1
EXIT_OK, EXIT_INVALID, EXIT_FAILURE, EXIT_USAGE = 0, 2, 3, 64


# --- config handling ----------------------------------------------------------


def parse_override(text: str):
    if "=" not in text:
        raise ValidationError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(config: dict, key: str, value) -> None:
    node = config
    parts = key.split(".")
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ValidationError(f"override path {key!r} crosses a non-object value")
        node = nxt
    node[parts[-1]] = value


def load_run_config(path, overrides=(), seed=None) -> dict:
    path = Path(path)
    try:
        config = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file {path} does not exist")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}")
    if config.get("run_schema", RUN_SCHEMA) != RUN_SCHEMA:
        raise ValidationError(f"unsupported run_schema {config.get('run_schema')!r}")
    for item in overrides:
        apply_override(config, *parse_override(item))
    if seed is not None:
        config["seed"] = seed
    if "seed" not in config:
        raise ValidationError("the run config must set a seed")
    config["_base_dir"] = str(path.parent.resolve())
    return config


def _resolve_path(config: dict, value: str) -> str:
    if value.startswith("preset:") or os.path.isabs(value):
        return value
    return str(Path(config.get("_base_dir", ".")) / value)


def _device(config):
    if "device" not in config:
        raise ValidationError("the run config must name a device")
    path = _resolve_path(config, config["device"])
    if not path.startswith("preset:") and not os.path.exists(path):
        raise ValidationError(f"device file {path} does not exist")
    return load_device(path)


def _reward(config, target) -> RewardSpec:
    section = config.get("reward")
    if section is None:
        return RewardSpec.for_target(target)
    section = dict(section)
    section.setdefault("initial_states", list(DEFAULT_STATES[target]))
    return RewardSpec.from_dict(section)


def load_waveform(path: str) -> PwcWaveform:
    data = json.loads(Path(path).read_text())
    if "payload" in data:
        data = data["payload"]
    if "best_waveform" in data:
        data = data["best_waveform"]
    return PwcWaveform.from_dict(data)


def resolve_gate(spec: dict, model, config: dict, target: str):
    """Turn a gate description from the run config into a schedule."""
    spec = dict(spec or {"kind": "default"})
    kind = spec.get("kind", "default")
    if target == "rx90":
        if kind in ("default", "drag"):
            sched = as_schedule(calibrate_drag(model))
        elif kind == "waveform":
            sched = as_schedule(load_waveform(_resolve_path(config, spec["path"])))
        elif kind == "ideal":
            sched = (Gate(gates.rx(np.pi / 2), (0,), "rx90"),)
        else:
            raise ValidationError(f"unknown gate kind {kind!r}")
        qubits = (0,)
    else:
        if kind in ("default", "cr-default"):
            zx = calibrate_cr(model).schedule()
        elif kind == "waveform":
            zx = echoed_cr(load_waveform(_resolve_path(config, spec["path"])))
        elif kind == "ideal":
            zx = (ideal_zx(),)
        else:
            raise ValidationError(f"unknown gate kind {kind!r}")
        if target == "zx-90":
            sched = as_schedule(zx)
        elif target == "cnot":
            sched = build_cnot(zx)
        elif target == "swap":
            sched = build_swap(zx)
        else:
            raise ValidationError(f"unknown target {target!r}")
        qubits = (0, 1)
    err = float(spec.get("depolarizing_error", 0.0))
    if err:
        sched = (Depolarize(err, qubits),) + tuple(sched)
    return tuple(sched)


# --- commands ------------------------------------------------------------------


def cmd_train_drl(config):
    model = _device(config)
    section = dict(config.get("train", {}))
    target = section.get("target", "rx90" if model.n_qubits == 1 else "zx-90")
    section["target"] = target
    section["seed"] = config["seed"]
    if "reward" not in section:
        section["reward"] = _reward(config, target).to_dict()
    base = TrainConfig() if model.n_qubits == 1 else TrainConfig.two_qubit(target=target)
    merged = base.to_dict()
    merged.update(section)
    tc = TrainConfig.from_dict(merged)
    result = train(tc, DeviceEnvironment(model))
    rows = [("episode", "reward")] + [(i, r) for i, r in enumerate(result.reward_history)]
    extra = {}
    if result.best_waveform is not None:
        extra["waveform"] = result.best_waveform.to_dict()
    return result.payload(), rows, extra


def cmd_train_sa(config):
    model = _device(config)
    section = dict(config.get("sa", {}))
    target = section.pop("target", "rx90" if model.n_qubits == 1 else "zx-90")
    section["seed"] = config["seed"]
    sc = SaConfig.from_dict(section)
    spec = _reward(config, target)
    if "initial" in config:
        initial = load_waveform(_resolve_path(config, config["initial"]))
    elif model.n_qubits == 1:
        initial = calibrate_drag(model)
    else:
        initial = calibrate_cr(model).waveform
    env = DeviceEnvironment(model)
    result = sa_run(initial, reward_cost(env, spec, target, initial, sc.seed), sc)
    payload = result.payload()
    payload["target"] = target
    payload["initial_waveform"] = initial.to_dict()
    rows = [("step", "cost", "best_cost")] + [
        (i, c, b) for i, (c, b) in enumerate(zip(result.cost_history, result.best_history))
    ]
    return payload, rows, {"waveform": result.best_waveform.to_dict()}


def _rb_config(config):
    section = dict(config.get("rb", {}))
    section["seed"] = config["seed"]
    return RbConfig.from_dict(section)


def cmd_rb(config):
    model = _device(config)
    if model.n_qubits != 1:
        raise ValidationError("rb runs on single-transmon devices; use irb for two qubits")
    rc = _rb_config(config)
    gate = resolve_gate(config.get("gate"), model, config, "rx90")
    if "reference" in config:
        ref = resolve_gate(config["reference"], model, config, "rx90")
        res_ref, res_gate = compare_rb(ref, gate, rc, model)
        payload = res_gate.payload()
        payload["reference"] = res_ref.payload()
        payload["improvement"] = res_ref.epg / res_gate.epg if res_gate.epg > 0 else None
        rows = [("m", "mean", "std", "reference_mean", "reference_std")] + [
            a + b[1:] for a, b in zip(res_gate.csv_rows(), res_ref.csv_rows())
        ]
        return payload, rows, {}
    res = run_rb(gate, rc, model)
    return res.payload(), [("m", "mean", "std")] + res.csv_rows(), {}


def cmd_irb(config):
    model = _device(config)
    if model.n_qubits != 2:
        raise ValidationError("irb needs a two-transmon device")
    rc = _rb_config(config)
    clifford_cnot = resolve_gate(config.get("clifford_gate"), model, config, "cnot")
    interleaved = resolve_gate(config.get("gate"), model, config, config.get("target", "cnot"))
    res = irb(clifford_cnot, interleaved, rc, model)
    rows = [("m", "reference_mean", "reference_std", "interleaved_mean", "interleaved_std")]
    return res.payload(), rows + res.csv_rows(), {}


def cmd_repeat(config):
    model = _device(config)
    target = config.get("target", "rx90" if model.n_qubits == 1 else "cnot")
    gate = resolve_gate(config.get("gate"), model, config, target)
    section = dict(config.get("repeat", {}))
    states = section.get("initial_states", {"rx90": ["0", "1"]}.get(target, list(DEFAULT_STATES[target])))
    res = repetition_error(
        gate,
        states,
        section.get("n_values", [1, 2, 4, 8, 16]),
        model,
        target,
        runs_per_state=section.get("runs_per_state", 5),
        shots=section.get("shots", 1024),
        seed=config["seed"],
    )
    payload = res.payload()
    payload["target"] = target
    return payload, [("n", "mean_infidelity", "std_infidelity")] + res.csv_rows(), {}


RUNNERS = {
    "train-drl": cmd_train_drl,
    "train-sa": cmd_train_sa,
    "rb": cmd_rb,
    "irb": cmd_irb,
    "repeat": cmd_repeat,
}


# --- output --------------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def payload_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, allow_nan=True)


def write_outputs(out_dir: Path, command: str, config: dict, payload: dict, rows, extra, wall):
    echo = {k: v for k, v in config.items() if not k.startswith("_")}
    record = {
        "record_schema": RECORD_SCHEMA,
        "command": command,
        "version": f"pulseforge {__version__}",
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "wall_time_s": wall,
        "seed": config["seed"],
        "config": echo,
        "payload": payload,
    }
    paths = {}
    json_path = out_dir / f"{command}.json"
    _atomic_write(json_path, json.dumps(record, indent=2, sort_keys=True) + "\n")
    paths["record"] = json_path
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    csv_path = out_dir / f"{command}.csv"
    _atomic_write(csv_path, buf.getvalue())
    paths["csv"] = csv_path
    if "waveform" in extra:
        wf_path = out_dir / f"{command}-waveform.json"
        _atomic_write(wf_path, json.dumps(extra["waveform"], indent=2) + "\n")
        paths["waveform"] = wf_path
    return paths


def execute(command: str, config_path=None, overrides=(), seed=None, out=None, threads=None,
            device=None, stdout=None) -> int:
    """Run one command; returns the process exit code."""
    stdout = stdout or sys.stdout
    if command not in COMMANDS:
        print(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if command == "describe":
            target = device or config_path
            if target is None:
                raise ValidationError("describe needs a device file or a run config")
            if str(target).endswith(".json") and not str(target).startswith("preset:"):
                data = json.loads(Path(target).read_text())
                if "device_schema" not in data:
                    target = _resolve_path({"_base_dir": str(Path(target).parent)}, data["device"])
            print(load_device(target).summary(), file=stdout)
            return EXIT_OK
        if config_path is None:
            raise ValidationError(f"{command} needs --config")
        config = load_run_config(config_path, overrides, seed)
        out_dir = Path(out or config.get("out") or os.environ.get("PULSEFORGE_OUT") or "results")
        if not out_dir.is_absolute() and out is None and config.get("out"):
            out_dir = Path(config["_base_dir"]) / out_dir
        start = time.perf_counter()
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                payload, rows, extra = RUNNERS[command](config)
        else:
            payload, rows, extra = RUNNERS[command](config)
        paths = write_outputs(out_dir, command, config, payload, rows, extra,
                              time.perf_counter() - start)
        print(f"{command}: wrote {paths['record']}", file=stdout)
        if "epg" in payload:
            print(f"{command}: EPG = {payload['epg']:.4e}", file=stdout)
        return EXIT_OK
    except (ValidationError, FileNotFoundError, json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pulseforge",
        description="Design and benchmark quantum gate pulses on a simulated transmon device.",
    )
    parser.add_argument("command", help=f"one of: {', '.join(COMMANDS)}")
    parser.add_argument("device", nargs="?", help="device JSON (or preset:<name>) for describe")
    parser.add_argument("--config", help="run config JSON")
    parser.add_argument("--seed", type=int, help="root seed (overrides the config)")
    parser.add_argument("--out", help="output directory (default: $PULSEFORGE_OUT or ./results)")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, value parsed as JSON; repeatable")
    parser.add_argument("--threads", type=int, help="cap on numerical worker threads")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return execute(args.command, args.config, args.override, args.seed, args.out, args.threads,
                   device=args.device)


if __name__ == "__main__":
    sys.exit(main())
