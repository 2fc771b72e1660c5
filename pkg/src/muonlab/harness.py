"""Experiment runner and command-line interface.

A run is fully described by an ExperimentConfig (problem, optimizer,
schedule, horizon, diagnostics cadence, seeds, outputs).  Configs round-trip
through a flat ``section.key = value`` text file.  Given a config and a seed,
every emitted byte is reproducible: randomness comes only from seeded
generators, and artifacts carry no timestamps.

CSV schema (one row per recorded step, stable column order):
    t, f, grad_F, grad_nuc, eta, J_t, L_t, hatJ_t, distF, distOp,
    ratio_lhs, ratio_rhs, flags
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import matcore, optim, problems
from .diagnostics import (FLAG_DIVERGED, FLAG_FD_KINK, FLAG_POWER_FALLBACK,
                          FLAG_RAYLEIGH, FLAG_ZERO_DIRECTION, RunSummary,
                          StepRecord, average_j, comparison_ratio,
                          direction_rank, distance_metrics, hat_j_t, j_t, l_t,
                          ratio_condition, spectrum, validate_record,
                          weighted_j_tilde)
from .problems import Problem, f_star

CSV_COLUMNS = ("t", "f", "grad_F", "grad_nuc", "eta", "J_t", "L_t", "hatJ_t",
               "distF", "distOp", "ratio_lhs", "ratio_rhs", "flags")

DIVERGENCE_FACTOR = 1e6

MUON_KINDS = ("muon", "simplified_muon")
OPTIMIZER_KINDS = MUON_KINDS + ("gd", "gd_nesterov", "adam", "adamw")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def _parse_scalar(s: str):
    s = s.strip()
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def _parse_value(s: str):
    s = s.strip()
    if "," in s:
        return tuple(_parse_scalar(p) for p in s.split(","))
    return _parse_scalar(s)


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment (possibly several seeds)."""

    problem: dict
    optimizer: dict
    schedule: dict
    T: int = 100
    cadence: int = 1
    want_J: bool = False
    want_L: bool = False
    want_hatJ: bool = False
    seeds: tuple = (0,)
    out_dir: Optional[str] = None
    name: str = "run"
    lr_grid: Optional[tuple] = None
    workers: int = 1
    w0: str = "zeros"
    checkpoint: bool = False

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.cadence < 1:
            raise ValueError("cadence must be at least 1")
        if isinstance(self.seeds, (int, np.integer)):
            self.seeds = (int(self.seeds),)
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.lr_grid is not None:
            if isinstance(self.lr_grid, (int, float)):
                self.lr_grid = (float(self.lr_grid),)
            self.lr_grid = tuple(float(x) for x in self.lr_grid)
        if self.w0 not in ("zeros", "gaussian", "init"):
            raise ValueError("w0 must be zeros, gaussian or init")

    def to_text(self) -> str:
        lines = []
        run_keys = {
            "T": self.T, "cadence": self.cadence, "want_J": self.want_J,
            "want_L": self.want_L, "want_hatJ": self.want_hatJ,
            "seeds": self.seeds, "name": self.name, "workers": self.workers,
            "w0": self.w0, "checkpoint": self.checkpoint,
        }
        if self.out_dir is not None:
            run_keys["out_dir"] = self.out_dir
        if self.lr_grid is not None:
            run_keys["lr_grid"] = self.lr_grid
        for section, data in (("problem", self.problem),
                              ("optimizer", self.optimizer),
                              ("schedule", self.schedule),
                              ("run", run_keys)):
            for key in sorted(data):
                lines.append(f"{section}.{key} = {_format_value(data[key])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        sections = {"problem": {}, "optimizer": {}, "schedule": {}, "run": {}}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line or "." not in line.split("=", 1)[0]:
                raise ValueError(f"config line {lineno}: expected 'section.key = value'")
            lhs, rhs = line.split("=", 1)
            section, key = lhs.strip().split(".", 1)
            if section not in sections:
                raise ValueError(f"config line {lineno}: unknown section {section!r}")
            sections[section][key.strip()] = _parse_value(rhs)
        run = sections["run"]
        kwargs = {
            "problem": sections["problem"],
            "optimizer": sections["optimizer"],
            "schedule": sections["schedule"],
        }
        for key in ("T", "cadence", "want_J", "want_L", "want_hatJ", "seeds",
                    "out_dir", "name", "lr_grid", "workers", "w0", "checkpoint"):
            if key in run:
                kwargs[key] = run[key]
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def build_problem(spec: dict, run_seed: int = 0) -> Problem:
    """Construct a Problem from a config section.

    problem.seed is the data seed; with seed_mode = per_run the run seed is
    mixed in so every run draws its own instance (used for the quadratic
    optimum resampling studies).
    """
    kind = spec.get("kind", "quadratic")
    base_seed = int(spec.get("seed", 0))
    per_run = spec.get("seed_mode", "fixed") == "per_run"
    eff = np.random.default_rng([base_seed, run_seed] if per_run else [base_seed])
    if kind == "quadratic":
        m = int(spec.get("m", 15))
        n = int(spec.get("n", 20))
        cond = float(spec.get("cond", 1e4))
        decay = spec.get("decay", "two_cluster")
        half = bool(spec.get("half", True))
        scale = float(spec.get("wstar_scale", 50.0))
        q_seed = int(eff.integers(0, 2 ** 31))
        Q = problems.make_ill_conditioned_Q(m, cond, decay, seed=q_seed)
        law = spec.get("wstar", "uniform")
        if law == "uniform":
            W_star = eff.uniform(-scale, scale, size=(m, n))
        elif law == "gaussian":
            W_star = eff.standard_normal((m, n)) * scale
        else:
            raise ValueError(f"unknown wstar law {law!r}")
        return problems.quadratic_new(Q, W_star, half=half)
    if kind == "linear_mse":
        d = int(spec.get("d", 196))
        B = int(spec.get("B", 400))
        c = int(spec.get("c", 10))
        features = spec.get("features", "gaussian")
        if features == "gaussian":
            X = problems.gaussian_features(d, B, seed=base_seed)
        elif features == "lowrank":
            X = problems.lowrank_features(d, B, float(spec.get("target_ratio", 1.41)),
                                          seed=base_seed)
        elif features == "csv":
            X = problems.load_features_csv(spec["path"],
                                           skip_header=bool(spec.get("skip_header", False)))
        else:
            raise ValueError(f"unknown features {features!r}")
        Y = problems.onehot_labels(c, X.shape[1], seed=base_seed + 1)
        return problems.linear_mse_new(X, Y)
    if kind == "mlp":
        input_dim = int(spec.get("input_dim", 10))
        dims = spec.get("dims", (8, 6, 4))
        if isinstance(dims, (int, np.integer)):
            dims = (int(dims),)
        dims = tuple(int(x) for x in dims)
        B = int(spec.get("B", 120))
        loss = spec.get("loss", "softmax_ce")
        data = spec.get("data", "lowrank")
        if data == "lowrank":
            X = problems.lowrank_features(input_dim, B,
                                          float(spec.get("target_ratio", 2.0)),
                                          seed=base_seed)
            X = X * (np.sqrt(B) / np.linalg.norm(X, "fro"))
        elif data == "gaussian":
            X = problems.gaussian_features(input_dim, B, seed=base_seed) / np.sqrt(input_dim)
        else:
            raise ValueError(f"unknown data {data!r}")
        Y = problems.onehot_labels(dims[-1], B, seed=base_seed + 1)
        shapes = []
        prev = input_dim
        for width in dims:
            shapes.append((width, prev))
            prev = width
        train_layer = spec.get("train_layer")
        prob = problems.mlp_new(shapes, X, Y, loss=loss, seed=base_seed + 2,
                                train_layer=None if train_layer is None else int(train_layer))
        return prob
    raise ValueError(f"unknown problem kind {kind!r}")


class _OptRun:
    """Stateful adapter from optimizer config to a step function.

    step() returns the new parameter together with the semi-orthogonal update
    direction when the optimizer is one of the Muon family (None otherwise).
    """

    def __init__(self, spec: dict):
        self.kind = spec.get("kind", "gd")
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        self.spec = spec
        if self.kind == "muon":
            self.state = optim.MuonState(
                beta=float(spec.get("beta", 0.9)),
                orthogonalizer=spec.get("orthogonalizer", "svd"),
                ns_steps=int(spec.get("ns_steps", 5)))
        elif self.kind == "gd_nesterov":
            self.state = optim.NesterovState()
        elif self.kind in ("adam", "adamw"):
            self.state = optim.AdamState()
        else:
            self.state = None

    def step(self, W, G, eta):
        s = self.spec
        if self.kind == "muon":
            W_new = optim.muon_step(self.state, W, G, eta)
            return W_new, self.state.last_direction
        if self.kind == "simplified_muon":
            O = optim.orthogonalize(G, s.get("orthogonalizer", "svd"),
                                    int(s.get("ns_steps", 5)))
            return W - eta * O, O
        if self.kind == "gd":
            return optim.gd_step(W, G, eta), None
        if self.kind == "gd_nesterov":
            return optim.gd_nesterov_step(self.state, W, G, eta,
                                          mu=float(s.get("mu", 0.9))), None
        if self.kind == "adam":
            return optim.adam_step(self.state, W, G, eta,
                                   beta1=float(s.get("beta1", 0.9)),
                                   beta2=float(s.get("beta2", 0.999)),
                                   eps=float(s.get("eps", 1e-8))), None
        if self.kind == "adamw":
            return optim.adamw_step(self.state, W, G, eta,
                                    beta1=float(s.get("beta1", 0.9)),
                                    beta2=float(s.get("beta2", 0.999)),
                                    eps=float(s.get("eps", 1e-8)),
                                    weight_decay=float(s.get("weight_decay", 0.01))), None
        raise AssertionError("unreachable")


def make_schedule(spec: dict, problem: Problem, T: int, W0: np.ndarray):
    """Resolve a schedule config against problem metadata.

    Returns (schedule, resolved) where resolved records the constants that
    were filled in from metadata, for provenance in the run summary.
    """
    kind = spec.get("kind", "constant")
    meta = problem.metadata
    r = min(problem.shape)
    resolved = {"kind": kind}
    if kind == "constant":
        sched = optim.constant_schedule(float(spec["eta"]))
        resolved["eta"] = float(spec["eta"])
        return sched, resolved

    fs = f_star(problem)
    delta = None
    if fs is not None:
        delta = problem.value(W0) - fs
    if kind in ("nonconvex_L", "nonconvex_Lstar", "theory_J") and delta is None:
        raise ValueError(f"schedule {kind!r} needs a known optimal value to form delta")

    beta = float(spec.get("beta", 0.0))
    if kind == "nonconvex_L":
        L = float(spec.get("L", meta.get("L")))
        sched = optim.nonconvex_L_schedule(delta, r, T, L, beta)
        resolved.update({"delta": delta, "r": r, "T": T, "L": L, "beta": beta,
                         "source": "metadata" if "L" not in spec else "config"})
    elif kind == "nonconvex_Lstar":
        Ls = float(spec.get("L_star", meta.get("L_star")))
        sched = optim.nonconvex_Lstar_schedule(delta, T, Ls, beta)
        resolved.update({"delta": delta, "T": T, "L_star": Ls, "beta": beta,
                         "source": "metadata" if "L_star" not in spec else "config"})
    elif kind == "adaptive_rL":
        L = float(spec.get("L", meta.get("L")))
        sched = optim.adaptive_rL_schedule(r, L)
        resolved.update({"r": r, "L": L,
                         "source": "metadata" if "L" not in spec else "config"})
    elif kind == "adaptive_Lstar":
        Ls = float(spec.get("L_star", meta.get("L_star")))
        sched = optim.adaptive_Lstar_schedule(Ls)
        resolved.update({"L_star": Ls,
                         "source": "metadata" if "L_star" not in spec else "config"})
    elif kind == "theory_J":
        J = float(spec["J"])
        sched = optim.theory_J_schedule(delta, J, T)
        resolved.update({"delta": delta, "J": J, "T": T})
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return sched, resolved


def _initial_w(config: ExperimentConfig, problem: Problem, seed: int) -> np.ndarray:
    if config.w0 == "zeros":
        return np.zeros(problem.shape)
    if config.w0 == "gaussian":
        return np.random.default_rng([seed, 10007]).standard_normal(problem.shape)
    if config.w0 == "init":
        W_init = problem.metadata.get("W_init")
        if W_init is None:
            raise ValueError("problem carries no stored initialization for w0=init")
        return W_init.copy()
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass
class RunArtifact:
    """In-memory handle to one run plus the files it emitted."""

    config_text: str
    seed: int
    records: list
    summary: RunSummary
    final_W: np.ndarray
    truncated: bool = False
    grid_results: Optional[list] = None
    best_eta: Optional[float] = None
    csv_path: Optional[str] = None
    summary_path: Optional[str] = None
    config_path: Optional[str] = None
    grid_path: Optional[str] = None
    checkpoint_t: Optional[int] = None
    checkpoint_path: Optional[str] = None
    checkpoint_W: Optional[np.ndarray] = None
    schedule_resolved: Optional[dict] = None
    wall_clock: float = 0.0  # in-memory only; never serialized


def _lean_final_f(problem: Problem, opt_spec: dict, eta: float, T: int,
                  W0: np.ndarray):
    """Final loss of a diagnostics-free run; (inf, True) on divergence."""
    opt = _OptRun(opt_spec)
    W = W0.copy()
    f0 = problem.value(W0)
    guard = DIVERGENCE_FACTOR * max(abs(f0), 1e-12)
    for _ in range(T):
        f, G = problem.eval_value_grad(W)
        if not np.isfinite(f) or f > guard:
            return float("inf"), True
        W, _ = opt.step(W, G, eta)
    f = problem.value(W)
    if not np.isfinite(f) or f > guard:
        return float("inf"), True
    return float(f), False


def _diagnostic_run(problem: Problem, config: ExperimentConfig, schedule,
                    W0: np.ndarray, seed: int):
    opt = _OptRun(config.optimizer)
    is_muon = opt.kind in MUON_KINDS
    adaptive = schedule.kind in (optim.ADAPTIVE_RL, optim.ADAPTIVE_LSTAR)
    W = W0.copy()
    f0 = problem.value(W0)
    guard = DIVERGENCE_FACTOR * max(abs(f0), 1e-12)
    W_star = problem.metadata.get("W_star")
    r = min(problem.shape)
    records = []
    truncated = False
    ckpt_t = config.cadence * ((config.T // 2) // config.cadence) if config.checkpoint else None
    ckpt_W = None
    t = 0
    while t < config.T:
        f, G = problem.eval_value_grad(W)
        if not np.isfinite(f) or f > guard:
            truncated = True
            break
        recording = (t % config.cadence == 0)
        need_norms = recording or adaptive
        grad_F = float(np.linalg.norm(G, "fro"))
        grad_nuc = matcore.nuclear_norm(G) if need_norms else None
        eta = optim.next_eta(schedule, t=t, grad_nuc=grad_nuc)
        if ckpt_t is not None and t == ckpt_t:
            ckpt_W = W.copy()
        W_next, O = opt.step(W, G, eta)
        if recording:
            rec = StepRecord(t=t, f=float(f), grad_F=grad_F, grad_nuc=grad_nuc,
                             eta=float(eta))
            flags = []
            rank_t = None
            if config.want_J or config.want_hatJ:
                O_diag = O if (is_muon and O is not None) else optim.orthogonalize(G)
                if not np.any(O_diag):
                    flags.append(FLAG_ZERO_DIRECTION)
                    rec.J_t = 0.0
                    rank_t = 0
                else:
                    rec.J_t = j_t(problem, W, O_diag)
                    rank_t = direction_rank(O_diag)
                if config.want_hatJ:
                    grad_next = problem.grad(W_next)
                    diff = G - grad_next
                    if not np.any(diff):
                        flags.append(FLAG_ZERO_DIRECTION)
                        rec.hatJ_t = 0.0
                    else:
                        rec.hatJ_t = hat_j_t(problem, W, O_diag, G, grad_next)
            if config.want_L:
                val, conv = l_t(problem, W, seed=seed * 1000003 + t)
                rec.L_t = float(val)
                if not conv:
                    flags.append(FLAG_POWER_FALLBACK)
            if rec.J_t is not None and rec.L_t is not None:
                ok, lhs, rhs = ratio_condition(rec.J_t, rec.L_t, grad_F, grad_nuc)
                rec.ratio_ok, rec.ratio_lhs, rec.ratio_rhs = ok, lhs, rhs
            if problem.kink_margin is not None and (config.want_J or config.want_L):
                if problem.kink_margin(W) < 1e-7:
                    flags.append(FLAG_FD_KINK)
            if W_star is not None:
                rec.dist_F, rec.dist_op = distance_metrics(W, W_star)
            if not validate_record(rec, r, rank_t, strict=problem.hvp_exact):
                flags.append(FLAG_RAYLEIGH)
            rec.flags = ";".join(flags)
            records.append(rec)
        W = W_next
        t += 1
    # terminal row: state after the last completed step (or at truncation)
    f_end = problem.value(W)
    G_end = problem.grad(W)
    rec = StepRecord(t=t, f=float(f_end),
                     grad_F=float(np.linalg.norm(G_end, "fro")),
                     grad_nuc=float(np.sum(matcore.svd(G_end).S)))
    if W_star is not None:
        rec.dist_F, rec.dist_op = distance_metrics(W, W_star)
    if truncated:
        rec.flags = FLAG_DIVERGED
    validate_record(rec, r)
    records.append(rec)
    return records, W, truncated, (ckpt_t, ckpt_W)


def _summarize(records, problem: Problem, schedule) -> RunSummary:
    fs = f_star(problem)
    final = records[-1]
    summary = RunSummary(T=final.t, final_f=final.f)
    if fs is not None:
        summary.final_gap = final.f - fs
    j_vals = [rec.J_t for rec in records if rec.J_t is not None]
    if j_vals:
        summary.J_mean = average_j(j_vals)
    d_fs = [rec.dist_F for rec in records if rec.dist_F is not None]
    d_ops = [rec.dist_op for rec in records if rec.dist_op is not None]
    if d_fs:
        summary.D_F = max(d_fs)
        summary.D_op = max(d_ops)
    if (schedule.kind == optim.CONSTANT and summary.D_op
            and len(j_vals) == final.t and j_vals):
        eta = schedule.params["eta"]
        if 0 < eta <= summary.D_op:
            summary.J_tilde = weighted_j_tilde(j_vals, eta, summary.D_op)
    meta = problem.metadata
    if (summary.D_F and summary.D_op and meta.get("L") and meta.get("L_star")):
        summary.comparison_ratio = comparison_ratio(summary.D_F, summary.D_op,
                                                    meta["L"], meta["L_star"])
    return summary


def run_experiment(config: ExperimentConfig, seed: Optional[int] = None) -> RunArtifact:
    """Execute one seeded run: optional stepsize tuning, then the recorded run.

    The tuning loop (when run.lr_grid is set) evaluates every grid point with
    a lean pass, never selects a diverged point, and keeps all grid results in
    the artifact so stepsize claims stay auditable.
    """
    t_start = time.perf_counter()
    if seed is None:
        seed = config.seeds[0]
    problem = build_problem(config.problem, run_seed=seed)
    W0 = _initial_w(config, problem, seed)
    grid_results = None
    best_eta = None
    if config.lr_grid:
        grid_results = []
        best = (float("inf"), None)
        for eta in config.lr_grid:
            fT, diverged = _lean_final_f(problem, config.optimizer, eta, config.T, W0)
            grid_results.append({"eta": float(eta),
                                 "final_f": None if diverged else fT,
                                 "diverged": diverged})
            if not diverged and fT < best[0]:
                best = (fT, eta)
        if best[1] is None:
            raise RuntimeError("every stepsize in the tuning grid diverged")
        best_eta = float(best[1])
        schedule = optim.constant_schedule(best_eta)
        resolved = {"kind": "constant", "eta": best_eta, "source": "lr_grid"}
    else:
        schedule, resolved = make_schedule(config.schedule, problem, config.T, W0)
    records, final_W, truncated, (ckpt_t, ckpt_W) = _diagnostic_run(
        problem, config, schedule, W0, seed)
    summary = _summarize(records, problem, schedule)
    artifact = RunArtifact(
        config_text=config.to_text(), seed=seed, records=records,
        summary=summary, final_W=final_W, truncated=truncated,
        grid_results=grid_results, best_eta=best_eta,
        checkpoint_t=ckpt_t, checkpoint_W=ckpt_W,
        schedule_resolved=resolved)
    if config.out_dir:
        _write_artifact(config, artifact)
    artifact.wall_clock = time.perf_counter() - t_start
    return artifact


def run_all(config: ExperimentConfig) -> list:
    """Run every seed in the config; seeds are independent runs."""
    if config.workers > 1 and len(config.seeds) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(lambda s: run_experiment(config, s), config.seeds))
    return [run_experiment(config, s) for s in config.seeds]


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def emit_csv(records: Sequence[StepRecord], path: str) -> None:
    """Write step records with the stable column order of CSV_COLUMNS."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for rec in records:
            row = [rec.t, rec.f, rec.grad_F, rec.grad_nuc, rec.eta, rec.J_t,
                   rec.L_t, rec.hatJ_t, rec.dist_F, rec.dist_op,
                   rec.ratio_lhs, rec.ratio_rhs]
            fh.write(",".join(_fmt_cell(v) for v in row) + "," + rec.flags + "\n")


def read_records_csv(path: str) -> list:
    """Inverse of emit_csv."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header in {path}")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            vals = dict(zip(CSV_COLUMNS, parts))

            def fnum(key):
                return float(vals[key]) if vals[key] != "" else None

            lhs, rhs = fnum("ratio_lhs"), fnum("ratio_rhs")
            records.append(StepRecord(
                t=int(vals["t"]), f=float(vals["f"]),
                grad_F=float(vals["grad_F"]), grad_nuc=fnum("grad_nuc"),
                eta=fnum("eta"), J_t=fnum("J_t"), L_t=fnum("L_t"),
                hatJ_t=fnum("hatJ_t"), dist_F=fnum("distF"),
                dist_op=fnum("distOp"), ratio_lhs=lhs, ratio_rhs=rhs,
                ratio_ok=None if lhs is None else bool(lhs <= rhs),
                flags=vals["flags"]))
    return records


def emit_summary(summary, path: str) -> None:
    """Write a summary (RunSummary or plain dict) as stable JSON."""
    payload = summary.to_dict() if hasattr(summary, "to_dict") else summary
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def emit_spectrum_csv(singular_values, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("index,sigma\n")
        for i, s in enumerate(np.asarray(singular_values, dtype=np.float64)):
            fh.write(f"{i},{repr(float(s))}\n")


def _write_artifact(config: ExperimentConfig, artifact: RunArtifact) -> None:
    os.makedirs(config.out_dir, exist_ok=True)
    stem = os.path.join(config.out_dir, f"{config.name}_seed{artifact.seed}")
    artifact.csv_path = stem + ".csv"
    emit_csv(artifact.records, artifact.csv_path)
    artifact.summary_path = stem + "_summary.json"
    payload = artifact.summary.to_dict()
    payload["seed"] = artifact.seed
    payload["truncated"] = artifact.truncated
    payload["schedule_resolved"] = artifact.schedule_resolved
    if artifact.best_eta is not None:
        payload["best_eta"] = artifact.best_eta
    emit_summary(payload, artifact.summary_path)
    artifact.config_path = stem + "_config.txt"
    with open(artifact.config_path, "w", encoding="utf-8") as fh:
        fh.write(artifact.config_text)
    if artifact.grid_results is not None:
        artifact.grid_path = stem + "_grid.json"
        emit_summary({"grid": artifact.grid_results}, artifact.grid_path)
    if artifact.checkpoint_W is not None:
        artifact.checkpoint_path = stem + f"_ckpt_t{artifact.checkpoint_t}.csv"
        problems.save_matrix_csv(artifact.checkpoint_W, artifact.checkpoint_path)


# ---------------------------------------------------------------------------
# Study drivers
# ---------------------------------------------------------------------------


def default_grid(opt_kind: str, problem: Problem) -> tuple:
    """Nine-point logarithmic stepsize grid spanning four decades.

    Gradient-descent grids are centered at 1/L when the smoothness constant
    is known; Muon-family and Adam grids are absolute.
    """
    L = problem.metadata.get("L")
    if opt_kind in ("gd", "gd_nesterov"):
        base = np.logspace(-2, 2, 9)
        return tuple(base / L) if L else tuple(np.logspace(-2, 2, 9))
    if opt_kind in ("adam", "adamw"):
        return tuple(np.logspace(-4, 0, 9))
    return tuple(np.logspace(-3.5, 0.5, 9))


def ratio_study(m: int = 15, n: int = 20, samples: int = 1000, cond: float = 1e4,
                decay: str = "two_cluster", seed: int = 0, half: bool = True,
                wstar_scale: float = 50.0, out_dir: Optional[str] = None,
                workers: int = 1):
    """Distribution of the rate-comparison ratio over random optima.

    Draws W* with i.i.d. uniform entries, keeps W0 = 0, and computes
    D_F^2 L / (D_op^2 L_star) from the initial displacement for each sample.
    Returns (rows, summary); each row is (sample, dist_F, dist_op, ratio) and
    is reproducible from (seed, sample) alone.
    """
    if samples < 1:
        raise ValueError("samples must be positive")
    # scalar curvature has no conditioning to speak of; the ratio is exactly 1
    Q = (np.array([[1.0]]) if m == 1
         else problems.make_ill_conditioned_Q(m, cond, decay, seed=seed))
    c = 0.5 if half else 1.0
    S = matcore.svd(Q).S
    L = 2.0 * c * float(S[0])
    L_star = 2.0 * c * float(np.sum(S))

    def one(k: int):
        rng = np.random.default_rng([seed, k])
        W_star = rng.uniform(-wstar_scale, wstar_scale, size=(m, n))
        d_f, d_op = distance_metrics(np.zeros((m, n)), W_star)
        return (k, d_f, d_op, comparison_ratio(d_f, d_op, L, L_star))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(samples)))
    else:
        rows = [one(k) for k in range(samples)]
    ratios = np.array([r[3] for r in rows])
    summary = {
        "m": m, "n": n, "samples": samples, "cond": cond, "decay": decay,
        "seed": seed, "L": L, "L_star": L_star,
        "ratio_q10": float(np.quantile(ratios, 0.10)),
        "ratio_q25": float(np.quantile(ratios, 0.25)),
        "ratio_median": float(np.median(ratios)),
        "ratio_q75": float(np.quantile(ratios, 0.75)),
        "ratio_q90": float(np.quantile(ratios, 0.90)),
        "ratio_mean": float(np.mean(ratios)),
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "ratio_study.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write("sample,distF,distOp,ratio\n")
            for k, d_f, d_op, ratio in rows:
                fh.write(f"{k},{repr(d_f)},{repr(d_op)},{repr(ratio)}\n")
        emit_summary(summary, os.path.join(out_dir, "ratio_study_summary.json"))
    return rows, summary


def figure1_study(seeds: Sequence[int], T: int = 4000, m: int = 15, n: int = 20,
                  cond: float = 1e4, decay: str = "two_cluster",
                  muon_beta: float = 0.9, out_dir: Optional[str] = None):
    """Tuned Muon against fixed-stepsize GD (eta = 1/L) on ill-conditioned quadratics.

    Every seed draws its own optimum; Muon picks its stepsize from the default
    grid by final loss, GD uses the prescribed 1/L.  Returns per-seed final
    losses.
    """
    results = []
    for seed in seeds:
        prob_spec = {"kind": "quadratic", "m": m, "n": n, "cond": cond,
                     "decay": decay, "seed": 0, "seed_mode": "per_run"}
        problem = build_problem(prob_spec, run_seed=seed)
        W0 = np.zeros((m, n))
        grid = default_grid("muon", problem)
        best_muon = (float("inf"), None)
        for eta in grid:
            fT, diverged = _lean_final_f(problem, {"kind": "muon", "beta": muon_beta},
                                         eta, T, W0)
            if not diverged and fT < best_muon[0]:
                best_muon = (fT, eta)
        eta_gd = 1.0 / problem.metadata["L"]
        f_gd, _ = _lean_final_f(problem, {"kind": "gd"}, eta_gd, T, W0)
        results.append({"seed": int(seed), "muon_final_f": best_muon[0],
                        "muon_eta": best_muon[1], "gd_final_f": f_gd,
                        "gd_eta": eta_gd})
    wins = sum(1 for r in results if r["muon_final_f"] < r["gd_final_f"])
    summary = {"T": T, "m": m, "n": n, "cond": cond, "decay": decay,
               "seeds": [int(s) for s in seeds], "muon_wins": wins,
               "win_fraction": wins / len(results), "runs": results}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        emit_summary(summary, os.path.join(out_dir, "figure1_summary.json"))
    return summary


def figure2_suite(kind: str = "lowrank", c: int = 100, seed: int = 0,
                  d: int = 196, B: int = 400, T: int = 400,
                  paper_dims: bool = False, out_dir: Optional[str] = None,
                  grids: Optional[dict] = None):
    """Four tuned optimizers on the linear classification MSE.

    kind selects the feature matrix: 'lowrank' targets the concentrated
    spectrum (ratio 1.41), 'gaussian' the flat one.  The comparison ratio is
    computed against the best tuned final iterate taken as the optimum.
    Returns (artifacts, summary).
    """
    if kind not in ("lowrank", "gaussian"):
        raise ValueError("kind must be lowrank or gaussian")
    if paper_dims:
        d, B = 784, 1000
    prob_spec = {"kind": "linear_mse", "features": kind, "d": d, "B": B,
                 "c": c, "seed": seed}
    if kind == "lowrank":
        prob_spec["target_ratio"] = 1.41
    problem = build_problem(prob_spec, run_seed=seed)
    artifacts = {}
    opt_specs = {
        "gd": {"kind": "gd"},
        "gd_nesterov": {"kind": "gd_nesterov", "mu": 0.9},
        "adam": {"kind": "adam"},
        "muon": {"kind": "muon", "beta": 0.9},
    }
    cadence = max(1, T // 50)
    for name, spec in opt_specs.items():
        grid = (grids or {}).get(name) or default_grid(name, problem)
        config = ExperimentConfig(
            problem=prob_spec, optimizer=spec, schedule={"kind": "constant", "eta": 1.0},
            T=T, cadence=cadence, seeds=(seed,), lr_grid=tuple(grid),
            out_dir=out_dir, name=f"fig2_{kind}_c{c}_{name}")
        artifacts[name] = run_experiment(config, seed)
    best_name = min(artifacts, key=lambda k: artifacts[k].summary.final_f)
    W_best = artifacts[best_name].final_W
    d_f, d_op = distance_metrics(np.zeros(problem.shape), W_best)
    meta = problem.metadata
    ratio = comparison_ratio(d_f, d_op, meta["L"], meta["L_star"])
    summary = {
        "kind": kind, "c": c, "d": d, "B": B, "T": T, "seed": seed,
        "concentration_ratio": meta["L_star"] / meta["L"],
        "best_optimizer": best_name,
        "D_F": d_f, "D_op": d_op, "comparison_ratio": ratio,
        "final_f": {name: art.summary.final_f for name, art in artifacts.items()},
        "best_eta": {name: art.best_eta for name, art in artifacts.items()},
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        emit_summary(summary, os.path.join(out_dir, f"fig2_{kind}_c{c}_summary.json"))
    return artifacts, summary


def figure3_suite(input_dim: int = 10, dims: tuple = (8, 6, 4), B: int = 120,
                  T: int = 200, cadence: int = 10, seed: int = 0,
                  loss: str = "softmax_ce", data: str = "lowrank",
                  out_dir: Optional[str] = None, grids: Optional[dict] = None):
    """Curvature diagnostics for GD and momentum-free Muon on a small MLP.

    Trains the designated middle layer, logging J_t, L_t, both gradient norms
    and the two sides of the rate-comparison condition at the given cadence.
    Returns (artifacts, summary); the summary counts the sampled steps where
    Muon's nuclear-to-curvature side beats GD's Frobenius-to-curvature side.
    """
    prob_spec = {"kind": "mlp", "input_dim": input_dim, "dims": tuple(dims),
                 "B": B, "loss": loss, "data": data, "seed": seed}
    problem = build_problem(prob_spec, run_seed=seed)
    artifacts = {}
    for name, spec in (("gd", {"kind": "gd"}),
                       ("muon", {"kind": "simplified_muon"})):
        grid = (grids or {}).get(name) or default_grid(name, problem)
        config = ExperimentConfig(
            problem=prob_spec, optimizer=spec,
            schedule={"kind": "constant", "eta": 1.0},
            T=T, cadence=cadence, want_J=True, want_L=True,
            seeds=(seed,), lr_grid=tuple(grid), out_dir=out_dir,
            name=f"fig3_{name}", w0="init", checkpoint=True)
        artifacts[name] = run_experiment(config, seed)
    muon_side = {}
    gd_side = {}
    for rec in artifacts["muon"].records:
        if rec.J_t is not None and rec.J_t > 0:
            muon_side[rec.t] = rec.grad_nuc ** 2 / rec.J_t
        elif rec.J_t is not None:
            muon_side[rec.t] = float("inf")
    for rec in artifacts["gd"].records:
        if rec.L_t is not None and rec.L_t > 0:
            gd_side[rec.t] = rec.grad_F ** 2 / rec.L_t
    common = sorted(set(muon_side) & set(gd_side))
    wins = sum(1 for t in common if muon_side[t] >= gd_side[t])
    summary = {
        "input_dim": input_dim, "dims": list(dims), "B": B, "T": T,
        "cadence": cadence, "seed": seed, "loss": loss,
        "sampled_steps": len(common), "muon_side_wins": wins,
        "win_fraction": wins / len(common) if common else None,
        "final_f": {name: art.summary.final_f for name, art in artifacts.items()},
        "best_eta": {name: art.best_eta for name, art in artifacts.items()},
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        emit_summary(summary, os.path.join(out_dir, "fig3_summary.json"))
    return artifacts, summary


def quadratic_check_run(m: int = 15, n: int = 20, cond: float = 1e4,
                        decay: str = "two_cluster", seed: int = 0, T: int = 500,
                        schedule_kind: str = "adaptive_Lstar",
                        eta: Optional[float] = None, want_J: bool = True,
                        half: bool = True, wstar_scale: float = 50.0):
    """Cadence-1 momentum-free Muon run on a random quadratic, for bound checks.

    With schedule_kind='constant' and no explicit eta, the stepsize follows
    the epsilon/(C*D) prescription with epsilon set to 1% of the initial gap
    and D the initial operator distance.
    """
    prob_spec = {"kind": "quadratic", "m": m, "n": n, "cond": cond,
                 "decay": decay, "seed": 0, "seed_mode": "per_run",
                 "half": half, "wstar_scale": wstar_scale}
    problem = build_problem(prob_spec, run_seed=seed)
    W0 = np.zeros((m, n))
    if schedule_kind == "constant" and eta is None:
        delta = problem.value(W0)
        d_hat = distance_metrics(W0, problem.metadata["W_star"])[1]
        eta = min(0.01 * delta / (problem.metadata["L_star"] * d_hat), d_hat)
    sched_spec = {"kind": schedule_kind}
    if eta is not None:
        if schedule_kind != "constant":
            raise ValueError("eta override applies to constant schedules only")
        sched_spec["eta"] = float(eta)
    config = ExperimentConfig(
        problem=prob_spec, optimizer={"kind": "simplified_muon"},
        schedule=sched_spec, T=T, cadence=1, want_J=want_J, seeds=(seed,))
    artifact = run_experiment(config, seed)
    return artifact.records, problem


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


class _OutputGuard:
    """Removes partially written outputs when a command fails."""

    def __init__(self):
        self.paths = []

    def track_dir(self, out_dir):
        if out_dir:
            self.before = set()
            self.out_dir = out_dir
            if os.path.isdir(out_dir):
                self.before = {os.path.join(out_dir, p) for p in os.listdir(out_dir)}
        else:
            self.out_dir = None

    def cleanup(self):
        if getattr(self, "out_dir", None) and os.path.isdir(self.out_dir):
            for p in {os.path.join(self.out_dir, q) for q in os.listdir(self.out_dir)} - self.before:
                try:
                    os.remove(p)
                except OSError:
                    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="muonlab",
        description="Matrix-optimizer experiments, diagnostics and bound checks")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="execute a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out")
    p_run.add_argument("--iters", type=int)
    p_run.add_argument("--optimizer")
    p_run.add_argument("--lr", type=float)
    p_run.add_argument("--beta", type=float)

    p_ratio = sub.add_parser("ratio-study", help="comparison-ratio distribution")
    p_ratio.add_argument("--m", type=int, default=15)
    p_ratio.add_argument("--n", type=int, default=20)
    p_ratio.add_argument("--samples", type=int, default=1000)
    p_ratio.add_argument("--cond", type=float, default=1e4)
    p_ratio.add_argument("--decay", default="two_cluster")
    p_ratio.add_argument("--seed", type=int, default=0)
    p_ratio.add_argument("--out")

    p_fig2 = sub.add_parser("fig2", help="tuned optimizer comparison on linear MSE")
    p_fig2.add_argument("--kind", choices=("lowrank", "gaussian"), default="lowrank")
    p_fig2.add_argument("--classes", type=int, default=100)
    p_fig2.add_argument("--seed", type=int, default=0)
    p_fig2.add_argument("--iters", type=int, default=400)
    p_fig2.add_argument("--paper-dims", action="store_true")
    p_fig2.add_argument("--out")

    p_fig3 = sub.add_parser("fig3", help="MLP curvature diagnostics")
    p_fig3.add_argument("--seed", type=int, default=0)
    p_fig3.add_argument("--iters", type=int, default=200)
    p_fig3.add_argument("--cadence", type=int, default=10)
    p_fig3.add_argument("--paper-dims", action="store_true",
                        help="use the 784-input 128/64/10 network instead of the desk 8/6/4")
    p_fig3.add_argument("--out")

    p_spec = sub.add_parser("spectra", help="singular values of a feature matrix")
    p_spec.add_argument("--csv", help="load the matrix from a CSV file")
    p_spec.add_argument("--kind", choices=("gaussian", "lowrank"))
    p_spec.add_argument("--d", type=int, default=784)
    p_spec.add_argument("--B", type=int, default=1000)
    p_spec.add_argument("--ratio", type=float, default=1.41)
    p_spec.add_argument("--seed", type=int, default=0)
    p_spec.add_argument("--out")

    p_ver = sub.add_parser("verify", help="run a bound or inequality check")
    p_ver.add_argument("--check", required=True,
                       choices=("norm-lemmas", "momentum-error", "taylor",
                                "descent-rL", "descent-Lstar", "adaptive-rL",
                                "adaptive-Lstar", "constant-rL", "constant-Lstar",
                                "constant-J", "rate-J", "nonconvex-rL",
                                "nonconvex-Lstar"))
    p_ver.add_argument("--instances", type=int, default=1000)
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--iters", type=int, default=500)
    p_ver.add_argument("--sigma", type=float, default=1.0)
    p_ver.add_argument("--batch", type=int, default=1)
    p_ver.add_argument("--beta", type=float, default=0.9)
    p_ver.add_argument("--trials", type=int, default=200)
    p_ver.add_argument("--out")
    return parser


def _cmd_run(args) -> int:
    if not os.path.isfile(args.config):
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 2
    config = ExperimentConfig.from_file(args.config)
    if args.out:
        config.out_dir = args.out
    if args.iters:
        config.T = args.iters
    if args.optimizer:
        config.optimizer = dict(config.optimizer, kind=args.optimizer)
    if args.lr is not None:
        config.schedule = {"kind": "constant", "eta": args.lr}
        config.lr_grid = None
    if args.beta is not None:
        config.optimizer = dict(config.optimizer, beta=args.beta)
    seeds = (args.seed,) if args.seed is not None else config.seeds
    for seed in seeds:
        artifact = run_experiment(config, seed)
        print(f"seed {seed}: final f = {artifact.summary.final_f:.6g}"
              + (" (diverged)" if artifact.truncated else ""))
    return 0


def _cmd_verify(args) -> int:
    from . import verify as _verify
    check = args.check
    if check == "norm-lemmas":
        report = _verify.check_norm_lemmas(args.instances, seed=args.seed)
    elif check == "momentum-error":
        report = _verify.check_momentum_error_lemma(
            sigma=args.sigma, batch=args.batch, beta=args.beta,
            T=min(args.iters, 200), trials=args.trials, seed=args.seed)
    elif check in ("taylor", "descent-rL", "descent-Lstar", "constant-rL",
                   "constant-Lstar", "constant-J", "rate-J", "adaptive-rL",
                   "adaptive-Lstar"):
        sched = "constant"
        if check.startswith("adaptive"):
            sched = "adaptive_rL" if check.endswith("rL") else "adaptive_Lstar"
        records, problem = quadratic_check_run(seed=args.seed, T=args.iters,
                                               schedule_kind=sched)
        if check == "taylor":
            report = _verify.check_quadratic_taylor_identity(records, problem)
        elif check == "rate-J":
            report = _verify.check_nonconvex_J_bound(records, problem)
        elif check.startswith("descent"):
            report = _verify.check_descent_inequalities(
                records, problem, which="rL" if check.endswith("rL") else "Lstar")
        elif check.startswith("constant"):
            which = {"constant-rL": "rL", "constant-Lstar": "Lstar",
                     "constant-J": "J"}[check]
            report = _verify.check_constant_step_linear_bound(records, problem, which=which)
        else:
            report = _verify.check_adaptive_rate_bound(
                records, problem, which="rL" if check.endswith("rL") else "Lstar")
    elif check in ("nonconvex-rL", "nonconvex-Lstar"):
        prob_spec = {"kind": "quadratic", "m": 8, "n": 10, "cond": 100.0,
                     "decay": "two_cluster", "seed": args.seed}
        problem = build_problem(prob_spec, run_seed=args.seed)
        runs = max(20, args.trials) if args.sigma > 0 else 1
        report = _verify.check_nonconvex_rate_bound(
            problem, which="rL" if check.endswith("rL") else "Lstar",
            T=min(args.iters, 300), beta=args.beta, sigma=args.sigma,
            batch=args.batch, runs=runs, seed=args.seed)
    else:
        raise AssertionError("unreachable")
    text = report.to_json()
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text, end="")
    print(f"{report.name}: {'PASS' if report.passed else 'FAIL'} "
          f"({len(report.violations)} violations / {report.instances} instances)")
    return 0 if report.passed else 1


def _cmd_spectra(args) -> int:
    if args.csv:
        A = problems.load_features_csv(args.csv)
    elif args.kind == "gaussian":
        A = problems.gaussian_features(args.d, args.B, seed=args.seed)
    elif args.kind == "lowrank":
        A = problems.lowrank_features(args.d, args.B, args.ratio, seed=args.seed)
    else:
        print("error: pass --csv or --kind", file=sys.stderr)
        return 2
    sv = spectrum(A)
    ratio = float(np.sum(sv ** 2) / sv[0] ** 2)
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        emit_spectrum_csv(sv, args.out)
    print(f"top singular value {sv[0]:.6g}, concentration ratio {ratio:.4f}")
    return 0


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    guard = _OutputGuard()
    guard.track_dir(getattr(args, "out", None))
    try:
        if args.cmd == "run":
            return _cmd_run(args)
        if args.cmd == "ratio-study":
            _, summary = ratio_study(m=args.m, n=args.n, samples=args.samples,
                                     cond=args.cond, decay=args.decay,
                                     seed=args.seed, out_dir=args.out)
            print(f"median ratio {summary['ratio_median']:.4f} over {args.samples} samples")
            return 0
        if args.cmd == "fig2":
            _, summary = figure2_suite(kind=args.kind, c=args.classes,
                                       seed=args.seed, T=args.iters,
                                       paper_dims=args.paper_dims, out_dir=args.out)
            print(f"comparison ratio {summary['comparison_ratio']:.4f}; "
                  f"final losses {summary['final_f']}")
            return 0
        if args.cmd == "fig3":
            mlp_kw = ({"input_dim": 784, "dims": (128, 64, 10)}
                      if args.paper_dims else {})
            _, summary = figure3_suite(seed=args.seed, T=args.iters,
                                       cadence=args.cadence, out_dir=args.out,
                                       **mlp_kw)
            print(f"Muon side wins at {summary['muon_side_wins']} of "
                  f"{summary['sampled_steps']} sampled steps")
            return 0
        if args.cmd == "spectra":
            return _cmd_spectra(args)
        if args.cmd == "verify":
            return _cmd_verify(args)
        raise AssertionError("unreachable")
    except (OSError, ValueError, RuntimeError) as exc:
        guard.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
