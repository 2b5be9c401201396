"""Adam-driven optimization loop with metric logging and checkpointing.

Each iteration draws fresh times and samples, assembles the problem's Monte
Carlo loss, backpropagates, and applies one bias-corrected Adam update.  A
global-norm gradient clip at 100 guards against blow-ups but is inert in
healthy runs.  Training and final evaluation use independent RNG streams
derived from the same seed so reported numbers never depend on how long the
training stream was consumed.
"""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .conditioner import Architecture
from .flow import FlowModel, build_model, load_model, save_model
from .oracles import reference_objective, rmse_on_grid
from .problems import loss_for, objective_eval


class NonFiniteLossError(RuntimeError):
    """Training aborted on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, step, checkpoint):
        self.step = step
        self.checkpoint = checkpoint
        where = f"; last good checkpoint: {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")


def tune_allocator():
    """Keep large numpy temporaries in the heap arena (Linux glibc only).

    Reverse-mode tapes allocate many transient megabyte-scale arrays; without
    this, glibc serves each from a fresh mmap and the page faults dominate.
    Safe no-op elsewhere.
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except Exception:
        pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 30_000
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    penalty_weight: float = 500.0
    n_time: int = 20
    n_latent: int = 64
    n_boundary: int = 2048
    n_terminal: int = 64
    dt_velocity: Optional[float] = None  # defaults to 1e-3 * horizon
    dx_score: float = 1e-3
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 1000
    grad_clip: float = 100.0
    eval_samples: int = 100_000

    def __post_init__(self):
        if min(self.n_time, self.n_latent, self.n_boundary, self.n_terminal) < 1:
            raise ValueError("all batch sizes must be >= 1")
        if self.lr <= 0 or self.steps < 1:
            raise ValueError("need lr > 0 and steps >= 1")

    def resolved(self, horizon):
        if self.dt_velocity is not None:
            return self
        return replace(self, dt_velocity=1e-3 * horizon)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state, cfg):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    t = state.step + 1
    m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grads
    v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grads * grads
    m_hat = m / (1.0 - cfg.adam_beta1 ** t)
    v_hat = v / (1.0 - cfg.adam_beta2 ** t)
    new_params = params - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return new_params, AdamState(m, v, t)


@dataclass
class RunMetrics:
    """Per-logged-step loss decomposition plus the final oracle comparison."""

    seed: int
    rows: list = field(default_factory=list)  # (iter, loss, kinetic, penalty, terminal, gnorm, wall)
    objective: Optional[float] = None
    objective_stderr: Optional[float] = None
    benchmark: Optional[float] = None
    benchmark_label: Optional[str] = None
    rel_error: Optional[float] = None
    density_rmse: Optional[float] = None

    def log(self, iteration, parts, gnorm, wall):
        self.rows.append((iteration, parts["loss"], parts["kinetic"],
                          parts["penalty"], parts["terminal"], gnorm, wall))

    def to_csv(self, path):
        # wall-clock stays out of the file so reruns are byte-identical
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "kinetic", "penalty", "terminal", "grad_norm"])
            for row in self.rows:
                w.writerow([row[0]] + [f"{x:.12g}" for x in row[1:6]])

    def summary(self):
        out = {"seed": self.seed, "iterations": self.rows[-1][0] if self.rows else 0,
               "final_loss": self.rows[-1][1] if self.rows else None,
               "objective": self.objective, "objective_stderr": self.objective_stderr,
               "benchmark": self.benchmark, "benchmark_label": self.benchmark_label,
               "rel_error": self.rel_error}
        if self.density_rmse is not None:
            out["density_rmse"] = self.density_rmse
        return out


def evaluate(model, spec, cfg, metrics=None, quad=None):
    """Objective estimate vs the matching oracle; fills ``metrics`` if given."""
    metrics = metrics if metrics is not None else RunMetrics(seed=cfg.seed)
    eval_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    cfg = cfg.resolved(spec.horizon)
    est = objective_eval(model, spec, n_eval=cfg.eval_samples, rng=eval_rng,
                         dt=cfg.dt_velocity, dx=cfg.dx_score)
    metrics.objective, metrics.objective_stderr = est.value, est.stderr
    ref = reference_objective(spec, quad=quad)
    if ref is not None:
        metrics.benchmark, metrics.benchmark_label = ref
        if metrics.benchmark != 0:
            metrics.rel_error = abs(est.value - metrics.benchmark) / abs(metrics.benchmark)
    if getattr(spec, "reference", None) is not None and model.arch.dim == 2:
        metrics.density_rmse = rmse_on_grid(
            model, lambda x: spec.reference(x, spec.horizon), 5.0, 500, spec.horizon)
    return metrics


def train(spec, cfg, arch=None, checkpoint_path=None, on_log=None, quad=None):
    """Run the full optimization; returns (model, metrics).

    ``checkpoint_path`` (a path prefix) enables periodic saves and the
    last-good-checkpoint reference on numerical aborts.  ``on_log`` receives
    (iteration, parts) at every logged step.
    """
    tune_allocator()
    cfg = cfg.resolved(spec.horizon)
    if arch is None:
        arch = Architecture(dim=spec.dim, time_scale=spec.horizon)
    if arch.dim != spec.dim:
        raise ValueError(f"architecture dimension {arch.dim} != problem dimension {spec.dim}")
    loss_fn = loss_for(spec)

    seq = np.random.SeedSequence([cfg.seed, 1])
    rng = np.random.default_rng(seq)
    model = build_model(arch, seed=cfg.seed)
    state = AdamState.zeros(len(model.params))
    metrics = RunMetrics(seed=cfg.seed)
    last_checkpoint = None
    started = time.perf_counter()

    for it in range(1, cfg.steps + 1):
        holder = {}

        def closure(p):
            total, parts = loss_fn(model, spec, cfg, rng, params=p)
            holder["parts"] = parts
            return total

        try:
            value, grads = ad.grad(closure, model.params)
        except ad.GradientError as exc:
            raise NonFiniteLossError(it, last_checkpoint) from exc
        if not math.isfinite(value):
            raise NonFiniteLossError(it, last_checkpoint)

        gnorm = float(np.linalg.norm(grads))
        if gnorm > cfg.grad_clip:
            grads = grads * (cfg.grad_clip / gnorm)
        model.params, state = adam_step(model.params, grads, state, cfg)

        if it == 1 or it % cfg.eval_every == 0 or it == cfg.steps:
            metrics.log(it, holder["parts"], gnorm, time.perf_counter() - started)
            if on_log is not None:
                on_log(it, holder["parts"])
        if checkpoint_path and (it % cfg.checkpoint_every == 0 or it == cfg.steps):
            save_model(model, checkpoint_path)
            last_checkpoint = checkpoint_path

    evaluate(model, spec, cfg, metrics, quad=quad)
    return model, metrics
