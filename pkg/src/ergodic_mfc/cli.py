"""Config-driven experiment runner.

Usage::

    ergodic-mfc CONFIG.json [--output-dir DIR]

The config is one JSON document whose ``command`` field selects
``solve-direct``, ``solve-dgm``, ``benchmark-fd``, ``simulate``, ``evaluate``
or ``sweep``.  Every run writes ``config.json`` (the config as given),
``summary.json`` and command-specific CSV files into ``output_dir``.  CSV
files start with a ``# config_hash: ...`` comment line.

Exit codes: 0 success, 2 invalid config (or refused re-evaluation),
3 solver abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import algo1, bench, dgm, model, net, sde
from .optim import TrainingAborted

log = logging.getLogger("ergodic_mfc")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT = 0, 2, 3
SCHEMA_VERSION = 1  # version of the summary.json and CSV layouts
COMMANDS = ("solve-direct", "solve-dgm", "benchmark-fd", "simulate", "evaluate", "sweep")

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}
_terms = {
    "type": "array",
    "items": {
        "type": "object",
        "additionalProperties": False,
        "required": ["amplitude", "frequency"],
        "properties": {
            "amplitude": {"type": "number"},
            "frequency": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
            "phase": {"type": "number"},
        },
    },
}
_network = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "hidden": {"type": "array", "items": _pos_int, "minItems": 1},
        "activation": {"enum": ["tanh_embedded", "sin_periodic"]},
        "gamma1": _pos_num,
        "gamma2": _pos_num,
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["command", "output_dir"],
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "output_dir": {"type": "string", "minLength": 1},
        "testcase": {"type": "integer", "minimum": 1, "maximum": 5},
        "d": _pos_int,
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "required": ["d"],
            "properties": {
                "d": _pos_int,
                "b0": {"type": "number", "not": {"const": 0}},
                "kind": {"enum": ["MFC", "MFG"]},
                "coupling": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {"kind": {"enum": ["none", "quadratic", "log"]},
                                   "c": {"type": "number"}},
                },
                "f_tilde0": _terms,
                "b_tilde": _terms,
                "pairwise": _terms,
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "network": _network,
        "network_nu": _network,
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["adam", "sgd"]},
                "lr": _pos_num,
                "lr_decay": {"type": "number", "minimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": _pos_num,
            },
        },
        "iterations": {"type": "integer", "minimum": 0},
        "L": _pos_int,
        "Q": _pos_int,
        "eval_every": _pos_int,
        "project": {"type": "boolean"},
        "grad_tol": _pos_num,
        "dgm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_interior": _pos_int,
                "n_boundary": _pos_int,
                "periodicity": {"enum": ["exact", "penalty"]},
                "weights": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: {"type": "number", "minimum": 0} for k in
                                   ("fp", "hjb", "periodicity", "normalization", "p_mean")},
                },
            },
        },
        "fd": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"M": {"type": "integer", "minimum": 16},
                           "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                           "tol": _pos_num, "max_iter": _pos_int},
        },
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_particles": _pos_int, "dt": _pos_num, "horizon": _pos_num,
                "burn_in": {"type": "number", "minimum": 0}, "bins": _pos_int,
                "record_every": _pos_int,
                "control": {"enum": ["exact", "checkpoint"]},
                "checkpoint": {"type": "string"},
            },
        },
        "evaluate": {
            "type": "object",
            "additionalProperties": False,
            "required": ["source"],
            "properties": {"source": {"enum": ["exact", "run"]},
                           "run_dir": {"type": "string"},
                           "expected_hash": {"type": "string"}},
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["parameter", "values"],
            "properties": {"parameter": {"enum": ["units", "samples"]},
                           "values": {"type": "array", "items": _pos_int, "minItems": 1},
                           "seeds": _pos_int},
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"grid": _pos_int, "n_mc": _pos_int, "seed": {"type": "integer"}},
        },
    },
}


class ConfigError(ValueError):
    """Invalid configuration; the message carries line-located diagnostics."""


# --- loading and validation ------------------------------------------------

def _line_map(text: str) -> dict:
    """Map JSON paths (tuples) to 1-based line numbers using the YAML composer."""
    lines: dict = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, path):
        lines[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                lines[path + (k.value,)] = k.start_mark.line + 1
                walk(v, path + (k.value,))
                lines[path + (k.value,)] = k.start_mark.line + 1
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    if root is not None:
        walk(root, ())
    return lines


def _locate(lines: dict, path: tuple) -> int:
    path = tuple(str(p) if not isinstance(p, int) else p for p in path)
    while path and path not in lines:
        path = path[:-1]
    return lines.get(path, 1)


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse and validate a config document; raise ConfigError with line numbers."""
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        lines = _line_map(text)
        msgs = []  # (line, text)
        for e in errors:
            path = tuple(e.absolute_path)
            where = "/".join(map(str, path)) or "<root>"
            if e.validator == "additionalProperties":
                extra = sorted(set(e.instance) - set(e.schema.get("properties", {})))
                for key in extra:
                    line = _locate(lines, path + (key,))
                    msgs.append((line, f"{source}:{line}: unknown key {key!r} in {where}"))
                continue
            line = _locate(lines, path)
            msgs.append((line, f"{source}:{line}: {where}: {e.message}"))
        raise ConfigError("\n".join(m for _, m in sorted(msgs)))
    _semantic_checks(cfg, text, source)
    return cfg


def _semantic_checks(cfg: dict, text: str, source: str) -> None:
    lines = _line_map(text)

    def fail(path, msg):
        raise ConfigError(f"{source}:{_locate(lines, path)}: {msg}")

    cmd = cfg["command"]
    if ("testcase" in cfg) == ("problem" in cfg):
        fail(("testcase",) if "testcase" in cfg else (),
             "exactly one of 'testcase' and 'problem' is required")
    if "testcase" in cfg and cfg["testcase"] in (1, 2, 3) and cfg.get("d", 1) != 1:
        fail(("d",), f"test case {cfg['testcase']} is one-dimensional")
    for term_key in ("f_tilde0", "b_tilde", "pairwise"):
        for i, t in enumerate(cfg.get("problem", {}).get(term_key, [])):
            if len(t["frequency"]) not in (1, cfg["problem"]["d"]):
                fail(("problem", term_key, i, "frequency"), "frequency length must be 1 or d")
    if cmd == "sweep" and "sweep" not in cfg:
        fail(("command",), "command 'sweep' needs a 'sweep' section")
    if cmd == "evaluate":
        ev = cfg.get("evaluate")
        if ev is None:
            fail(("command",), "command 'evaluate' needs an 'evaluate' section")
        if ev["source"] == "run" and "run_dir" not in ev:
            fail(("evaluate",), "source 'run' needs run_dir")
    if cmd == "simulate" and cfg.get("simulate", {}).get("control") == "checkpoint" \
            and "checkpoint" not in cfg["simulate"]:
        fail(("simulate",), "control 'checkpoint' needs a checkpoint path")
    if cmd == "benchmark-fd" and _dimension(cfg) != 1:
        fail(("command",), "benchmark-fd needs a one-dimensional problem")
    if cmd == "solve-dgm":
        mode = cfg.get("dgm", {}).get("periodicity", "exact")
        for key in ("network", "network_nu"):
            act = cfg.get(key, {}).get("activation", "tanh_embedded")
            if mode == "exact" and act != "tanh_embedded":
                fail((key, "activation"), "exact periodicity needs tanh_embedded networks")
            if mode == "penalty" and act != "sin_periodic":
                fail((key, "activation"), "penalty mode needs raw-coordinate (sin_periodic) networks")


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _dimension(cfg: dict) -> int:
    return cfg["problem"]["d"] if "problem" in cfg else cfg.get("d", 1)


# --- building objects from a config ----------------------------------------

def build_problem(cfg: dict):
    """``(spec, exact or None)`` for a test case or a custom Fourier problem."""
    if "testcase" in cfg:
        return model.testcase(cfg["testcase"], cfg.get("d", 1))
    pc = cfg["problem"]
    d = pc["d"]

    def terms(key):
        return [(t["amplitude"], t["frequency"], t.get("phase", 0.0)) for t in pc.get(key, [])]

    coupling = pc.get("coupling", {"kind": "none"})
    spec = model.ProblemSpec(
        d=d, b0=pc.get("b0", 1.0),
        b_tilde=model.fourier_field(terms("b_tilde"), d),
        f_tilde0=model.fourier_field(terms("f_tilde0"), d),
        f_tilde2=model.fourier_kernel(terms("pairwise"), d) if pc.get("pairwise") else None,
        coupling=model.Coupling(coupling["kind"], coupling.get("c", 1.0)),
        kind=pc.get("kind", "MFC"), name="custom")
    return spec, None


def build_arch(cfg: dict, key: str = "network", d: int = 1) -> net.NetworkArch:
    nc = cfg.get(key, cfg.get("network", {}))
    return net.NetworkArch((d, *nc.get("hidden", [20]), 1),
                           activation=nc.get("activation", "tanh_embedded"),
                           gamma1=nc.get("gamma1"), gamma2=nc.get("gamma2"))


def _opt_kwargs(cfg: dict) -> dict:
    oc = cfg.get("optimizer", {})
    return {"optimizer": oc.get("name", "adam"), "lr": oc.get("lr", 1e-2),
            "lr_decay": oc.get("lr_decay", 5e-4), "beta1": oc.get("beta1", 0.9),
            "beta2": oc.get("beta2", 0.999), "eps": oc.get("eps", 1e-8)}


def build_train_config(cfg: dict, dump_dir=None) -> algo1.TrainConfig:
    return algo1.TrainConfig(
        iterations=cfg.get("iterations", 20_000), L=cfg.get("L", 1000), Q=cfg.get("Q", 1000),
        seed=cfg.get("seed", 0), project=cfg.get("project", False),
        eval_every=cfg.get("eval_every", 1000), grad_tol=cfg.get("grad_tol"),
        dump_dir=dump_dir, **_opt_kwargs(cfg))


def build_dgm_config(cfg: dict, dump_dir=None) -> dgm.DgmConfig:
    dc = cfg.get("dgm", {})
    w = dc.get("weights", {})
    mode = dc.get("periodicity", "exact")
    return dgm.DgmConfig(
        iterations=cfg.get("iterations", 30_000), n_interior=dc.get("n_interior", 500),
        n_boundary=dc.get("n_boundary", 100), w_fp=w.get("fp", 0.1), w_hjb=w.get("hjb", 1.0),
        w_periodicity=w.get("periodicity", 0.0 if mode == "exact" else 1.0),
        w_normalization=w.get("normalization", 10.0), w_p_mean=w.get("p_mean", 1.0),
        periodicity=mode, seed=cfg.get("seed", 0), eval_every=cfg.get("eval_every", 1000),
        dump_dir=dump_dir, **{**_opt_kwargs(cfg), "lr_decay": cfg.get("optimizer", {}).get(
            "lr_decay", 1e-4)})


def _eval_settings(cfg: dict) -> dict:
    ec = cfg.get("evaluation", {})
    return {"grid": ec.get("grid", 512 if _dimension(cfg) == 1 else 16),
            "n_mc": ec.get("n_mc", 100_000), "seed": ec.get("seed", 12345)}


def reference_solution(spec, exact, cfg: dict):
    """``(p, nu, lam)`` of the exact solution, or of the FD benchmark in 1D."""
    if exact is not None:
        return exact.p, exact.nu, exact.lam
    if spec.d == 1:
        fc = cfg.get("fd", {})
        fd = bench.solve_fd(spec, bench.Grid1D(fc.get("M", 512)), fc.get("damping", 0.5),
                            fc.get("tol", 1e-10), fc.get("max_iter", 5000))
        return fd.p_field(), fd.nu_field(), fd.lam
    return None


def relative_errors(p_fn, nu_fn, ref, d: int, ev: dict) -> dict:
    if ref is None:
        return {}
    return {"relative_L2_p": bench.relative_l2(p_fn, ref[0], ev["n_mc"], ev["seed"], d),
            "relative_L2_nu": bench.relative_l2(nu_fn, ref[1], ev["n_mc"], ev["seed"], d)}


def _centered(field, d: int, n: int):
    grid = algo1.tensor_grid(d, n)
    c = float(np.mean(field(grid)))
    return lambda x: field(x) - c


# --- output helpers ---------------------------------------------------------

class _Run:
    def __init__(self, cfg: dict, out: Path):
        self.cfg, self.out, self.hash = cfg, out, config_hash(cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        self.t0 = time.perf_counter()

    def csv(self, name: str, header, rows) -> None:
        with open(self.out / name, "w") as fh:
            fh.write(f"# config_hash: {self.hash}\n")
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(v if isinstance(v, str) else
                                  (str(v) if isinstance(v, (int, np.integer)) else f"{v:.17g}")
                                  for v in row) + "\n")

    def summary(self, **fields) -> dict:
        s = {"schema_version": SCHEMA_VERSION, "command": self.cfg["command"],
             "config_hash": self.hash,
             "seed": self.cfg.get("seed", 0),
             "runtime_seconds": time.perf_counter() - self.t0, **fields}
        with open(self.out / "summary.json", "w") as fh:
            json.dump(_jsonable(s), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return s


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _solution_csv(run: _Run, name: str, x, p, nu, extra=None):
    d = x.shape[1]
    header = [f"x{i + 1}" for i in range(d)] + ["p", "nu"]
    cols = [x, p[:, None], nu[:, None]]
    if extra is not None:
        header += [f"phi{i + 1}" for i in range(d)]
        cols.append(extra)
    run.csv(name, header, np.hstack(cols))


# --- commands ---------------------------------------------------------------

def _solve_direct(cfg: dict, run: _Run):
    spec, exact = build_problem(cfg)
    arch = build_arch(cfg, d=spec.d)
    tc = build_train_config(cfg, dump_dir=str(run.out))
    ev = _eval_settings(cfg)
    ref = reference_solution(spec, exact, cfg)
    monitor = None
    if ref is not None:
        mon_ev = {**ev, "n_mc": min(ev["n_mc"], 20_000)}

        def monitor(theta):
            r = algo1.recover_solution(spec, arch, theta, ev["grid"])
            e = relative_errors(r.p_field, r.nu_field, ref, spec.d, mon_ev)
            return e["relative_L2_p"], e["relative_L2_nu"]

    state = algo1.train(spec, arch, tc, monitor=monitor)
    report = algo1.recover_solution(spec, arch, state.theta, ev["grid"])
    errs = relative_errors(report.p_field, report.nu_field, ref, spec.d, ev)
    cols = ["iteration", "loss"] + (["relative_L2_p", "relative_L2_nu"] if ref else [])
    run.csv("history.csv", cols, state.history)
    _solution_csv(run, "solution.csv", report.x, report.p, report.nu, report.phi)
    net.save_checkpoint(run.out / "model.ckpt",
                        {"arch": arch.to_dict(), "seed": tc.seed, "iteration": state.iteration,
                         "config_hash": run.hash, "solver": "direct"}, state.theta)
    return run.summary(lam=report.lam, errors=errs, evaluation=ev,
                       reference_lam=None if ref is None else ref[2],
                       last_logged_loss=state.history[-1][1] if state.history else None,
                       iterations=state.iteration, clamp_count=state.clamp_count,
                       checkpoint="model.ckpt")


def _solve_dgm(cfg: dict, run: _Run):
    spec, exact = build_problem(cfg)
    arch_p = build_arch(cfg, "network", spec.d)
    arch_nu = build_arch(cfg, "network_nu", spec.d)
    dc = build_dgm_config(cfg, dump_dir=str(run.out))
    ev = _eval_settings(cfg)
    ref = reference_solution(spec, exact, cfg)
    state = dgm.train_dgm(spec, arch_nu, arch_p, dc)
    p_c = _centered(state.p, spec.d, ev["grid"])
    errs = relative_errors(p_c, state.nu, ref, spec.d, ev)
    run.csv("history.csv", dgm.CSV_COLUMNS, state.history)
    x = algo1.tensor_grid(spec.d, ev["grid"])
    _solution_csv(run, "solution.csv", x, p_c(x), state.nu(x))
    state.save(run.out / "model.ckpt", {"config_hash": run.hash, "seed": dc.seed,
                                         "solver": "dgm"})
    return run.summary(lam=state.lam, errors=errs, evaluation=ev,
                       reference_lam=None if ref is None else ref[2],
                       last_logged_loss=state.history[-1][6] if state.history else None,
                       iterations=state.iteration, checkpoint="model.ckpt")


def _benchmark_fd(cfg: dict, run: _Run):
    spec, exact = build_problem(cfg)
    fc = cfg.get("fd", {})
    grid = bench.Grid1D(fc.get("M", 512))
    sol = bench.solve_fd(spec, grid, fc.get("damping", 0.5), fc.get("tol", 1e-10),
                         fc.get("max_iter", 5000))
    run.csv("fd_solution.csv", ["x", "p", "nu"], np.column_stack([grid.x, sol.p, sol.nu]))
    errs = {}
    if exact is not None:
        errs = relative_errors(sol.p_field(), sol.nu_field(), (exact.p, exact.nu),
                               1, _eval_settings(cfg))
    return run.summary(lam=sol.lam, mass=sol.mass, iterations=sol.iterations,
                       residual=sol.residual, converged=sol.converged, M=grid.M, errors=errs)


def _load_run(run_dir: Path):
    summary = json.loads((run_dir / "summary.json").read_text())
    cfg = json.loads((run_dir / "config.json").read_text())
    header, vector = net.load_checkpoint(run_dir / summary["checkpoint"])
    return summary, cfg, header, vector


def _simulate(cfg: dict, run: _Run):
    spec, exact = build_problem(cfg)
    sc = cfg.get("simulate", {})
    sim_cfg = sde.SimConfig(
        n_particles=sc.get("n_particles", 1000), dt=sc.get("dt", 1e-3),
        horizon=sc.get("horizon", 200.0), burn_in=sc.get("burn_in", 10.0),
        bins=sc.get("bins", 100 if spec.d == 1 else 20), seed=cfg.get("seed", 0),
        record_every=sc.get("record_every", 1))
    h_field = None
    if sc.get("control", "exact") == "exact":
        if exact is None:
            raise ConfigError("control 'exact' needs a test case with a closed-form solution")
        p = exact.p
        control = lambda x: spec.b0 * p.grad(x)  # noqa: E731
        h_field = model.h_from_adjoint(spec, p)
        ref_nu = exact.nu
    else:
        header, theta = net.load_checkpoint(sc["checkpoint"])
        if header.get("solver") == "dgm":
            a2 = net.NetworkArch.from_dict(header["arch2"])
            n1 = net.NetworkArch.from_dict(header["arch1"]).n_params
            p_net = net.NetField(a2, theta[n1:-1])
            control = lambda x: spec.b0 * p_net.jet(x).grad  # noqa: E731
            p_field = model.Field(p_net, lambda x: p_net.jet(x).grad,
                                  lambda x: p_net.jet(x).laplacian, name="p_dgm")
            h_field = model.h_from_adjoint(spec, p_field)
        else:
            nf = net.NetField(net.NetworkArch.from_dict(header["arch"]), theta)
            control = lambda x: (0.5 * nf.jet(x).grad - spec.b_tilde.grad(x)) / spec.b0  # noqa
            h_field = nf
        ref_nu = exact.nu if exact is not None else None
    result = sde.simulate(spec, control, sim_cfg)
    run.csv("histogram.csv", [f"bin_center_{i + 1}" for i in range(spec.d)] + ["mass"],
            np.column_stack([result.bin_centers(), result.mass.ravel()]))
    extra = {}
    if ref_nu is not None:
        extra["tv_distance"] = sde.total_variation(result, ref_nu)
    if spec.d <= 3:
        extra["quadrature_cost"] = bench.quadrature_cost(spec, h_field, resolution=1024
                                                         if spec.d == 1 else 64)
    return run.summary(time_avg_cost=result.time_avg_cost, n_recorded_steps=result.n_steps,
                       **extra)


def _evaluate(cfg: dict, run: _Run):
    ev_cfg = cfg["evaluate"]
    if ev_cfg["source"] == "exact":
        spec, exact = build_problem(cfg)
        if exact is None:
            raise ConfigError("source 'exact' needs a test case with a closed-form solution")
        errs = relative_errors(exact.p, exact.nu, (exact.p, exact.nu), spec.d,
                               _eval_settings(cfg))
        return run.summary(errors=errs, lam=exact.lam)
    run_dir = Path(ev_cfg["run_dir"])
    summary, old_cfg, header, vector = _load_run(run_dir)
    stored = summary.get("config_hash")
    if header.get("config_hash") != stored or config_hash(old_cfg) != stored:
        raise RefusedError(f"config hash mismatch in {run_dir}: refusing to re-evaluate")
    if "expected_hash" in ev_cfg and ev_cfg["expected_hash"] != stored:
        raise RefusedError(f"run {run_dir} has config hash {stored}, "
                           f"expected {ev_cfg['expected_hash']}")
    spec, exact = build_problem(old_cfg)
    ev = summary["evaluation"]
    ref = reference_solution(spec, exact, old_cfg)
    if header["solver"] == "direct":
        arch = net.NetworkArch.from_dict(header["arch"])
        report = algo1.recover_solution(spec, arch, vector, ev["grid"])
        errs = relative_errors(report.p_field, report.nu_field, ref, spec.d, ev)
        lam = report.lam
    else:
        a1 = net.NetworkArch.from_dict(header["arch1"])
        a2 = net.NetworkArch.from_dict(header["arch2"])
        st = dgm.DgmState(a1, a2, vector[:a1.n_params].copy(), vector[a1.n_params:-1].copy(),
                          float(vector[-1]))
        errs = relative_errors(_centered(st.p, spec.d, ev["grid"]), st.nu, ref, spec.d, ev)
        lam = st.lam
    diffs = {k: abs(errs[k] - summary["errors"][k]) for k in errs}
    return run.summary(errors=errs, lam=lam, source_run=str(run_dir), source_hash=stored,
                       max_error_change=max(diffs.values()) if diffs else 0.0)


def _sweep(cfg: dict, run: _Run):
    sw = cfg["sweep"]
    spec, exact = build_problem(cfg)
    ref = reference_solution(spec, exact, cfg)
    if ref is None:
        raise ConfigError("sweep needs a reference solution (closed form or 1D benchmark)")
    ev = _eval_settings(cfg)
    n_seeds = sw.get("seeds", 10)
    base = cfg.get("seed", 0)
    rows = []
    for value in sw["values"]:
        for k in range(n_seeds):
            sub = dict(cfg, seed=base + k)
            if sw["parameter"] == "units":
                sub["network"] = dict(cfg.get("network", {}), hidden=[value])
            else:
                sub["L"] = sub["Q"] = value
            arch = build_arch(sub, d=spec.d)
            state = algo1.train(spec, arch, build_train_config(sub, dump_dir=str(run.out)))
            rep = algo1.recover_solution(spec, arch, state.theta, ev["grid"])
            e = relative_errors(rep.p_field, rep.nu_field, ref, spec.d, ev)
            rows.append((value, base + k, e["relative_L2_p"], e["relative_L2_nu"], rep.lam))
            log.info("sweep %s=%d seed=%d: p error %.4g", sw["parameter"], value, base + k,
                     e["relative_L2_p"])
    run.csv("sweep.csv", [sw["parameter"], "seed", "relative_L2_p", "relative_L2_nu", "lam"],
            rows)
    agg = aggregate_sweep(rows)
    run.csv("sweep_summary.csv",
            [sw["parameter"], "n", "mean_p", "sd_p", "median_p", "mean_nu", "sd_nu", "median_nu"],
            [(v, *a) for v, a in agg.items()])
    return run.summary(parameter=sw["parameter"], values=sw["values"], seeds=n_seeds,
                       median_p={str(v): a[3] for v, a in agg.items()},
                       median_nu={str(v): a[6] for v, a in agg.items()})


def aggregate_sweep(rows) -> dict:
    """Per value: (n, mean, sd, median) of the p errors, then of the nu errors."""
    out = {}
    for v in dict.fromkeys(r[0] for r in rows):
        ep = np.array([r[2] for r in rows if r[0] == v])
        en = np.array([r[3] for r in rows if r[0] == v])
        sd = (lambda a: float(a.std(ddof=1)) if len(a) > 1 else 0.0)
        out[v] = (len(ep), float(ep.mean()), sd(ep), float(np.median(ep)),
                  float(en.mean()), sd(en), float(np.median(en)))
    return out


class RefusedError(RuntimeError):
    """Re-evaluation refused because artifacts do not share one config hash."""


_HANDLERS = {"solve-direct": _solve_direct, "solve-dgm": _solve_dgm,
             "benchmark-fd": _benchmark_fd, "simulate": _simulate,
             "evaluate": _evaluate, "sweep": _sweep}


def run(cfg: dict) -> tuple[int, dict]:
    """Execute a validated config; returns ``(exit status, summary or error info)``."""
    out = Path(cfg["output_dir"])
    try:
        r = _Run(cfg, out)
        summary = _HANDLERS[cfg["command"]](cfg, r)
    except (ConfigError, RefusedError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG, {"error": str(exc)}
    except TrainingAborted as exc:
        log.error("%s; state dump: %s", exc, exc.dump_path)
        return EXIT_ABORT, {"error": str(exc), "state_dump": exc.dump_path}
    except RuntimeError as exc:
        log.error("solver abort: %s", exc)
        return EXIT_ABORT, {"error": str(exc)}
    return EXIT_OK, summary


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="ergodic-mfc", description=__doc__.split("\n")[0])
    ap.add_argument("config", help="JSON run configuration")
    ap.add_argument("--output-dir", help="override output_dir from the config")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text()
        cfg = parse_config(text, args.config)
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    if args.output_dir:
        cfg["output_dir"] = args.output_dir
    status, info = run(cfg)
    if status == EXIT_OK:
        print(os.path.join(cfg["output_dir"], "summary.json"))
    else:
        print(f"error: {info['error']}", file=sys.stderr)
        if info.get("state_dump"):
            print(f"state dump: {info['state_dump']}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
