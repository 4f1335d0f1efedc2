"""Adaptive-moment descent over lens parameters.

Per-parameter learning rates are rescaled every step by the current
paraxial focal length f, which makes the update behave as if the lens were
scaled to unit focal length: curvature eta/f, thickness eta*f, conic eta,
and aspheric coefficient a_i eta/f^(i-1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import math
from typing import Callable, Sequence

import numpy as np

from . import adjoint as ad
from .geometry import PARAM_KINDS, SagDomainError
from .losses import (
    SPOT_PUPIL,
    WEIGHTS,
    DesignSpec,
    combine,
    field_set,
    freeze_sampling,
    merit_terms,
    min_gap,
)
from .psf import taped_psf
from .system import LensSystem, lens_state
from .trace import AfocalSystemError, FieldSpec, TraceError, paraxial_effl

log = logging.getLogger(__name__)


class OptimizationAborted(RuntimeError):
    pass


def scaled_rates(effl: float, eta: float, kinds: Sequence[str] = PARAM_KINDS) -> dict:
    """Learning rate per parameter kind for focal length ``effl``."""
    f = abs(float(effl))
    if not math.isfinite(f) or f == 0.0:
        raise AfocalSystemError("cannot scale learning rates without a finite focal length")
    rates = {}
    for kind in kinds:
        if kind == "c":
            rates[kind] = eta / f
        elif kind == "d":
            rates[kind] = eta * f
        elif kind == "k":
            rates[kind] = eta
        else:
            rates[kind] = eta / f ** (int(kind[1:]) - 1)
    return rates


@dataclass
class PSFMeritHook:
    """External merit on PSF grids.

    ``evaluate`` receives one ``(channels, size, size)`` array per field in
    ``fields`` and returns ``(value, cotangents)`` with cotangents of the same
    shapes.  The optimizer adds ``weight * value`` to the merit and injects
    ``weight * cotangent`` into the backward pass.
    """

    fields: Sequence[float]
    evaluate: Callable
    weight: float = 1.0
    n_pupil: int = 33
    size: int = 63


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    steps: int = 200
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    multipliers: dict = field(default_factory=dict)  # kind -> factor
    fields: tuple | None = None
    n_pupil: int = SPOT_PUPIL
    weights: dict = field(default_factory=lambda: dict(WEIGHTS))
    resample_every: int = 25  # refit vignetting every this many steps
    max_halvings: int = 8
    log_every: int = 1
    deterministic: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if any(not v > 0 for v in self.multipliers.values()):
            raise ValueError("rate multipliers must be strictly positive")
        bad = set(self.multipliers) - set(PARAM_KINDS)
        if bad:
            raise ValueError(f"unknown parameter kinds {sorted(bad)}")


@dataclass
class StepRecord:
    step: int
    losses: dict
    total: float
    effl: float
    min_gap: float
    scale: float
    params: dict

    def to_json(self) -> str:
        return json.dumps(
            {"step": self.step, "total": self.total, "losses": self.losses, "effl": self.effl,
             "min_gap": self.min_gap, "scale": self.scale, "params": self.params},
            sort_keys=True,
        )


@dataclass
class OptimizationResult:
    system: LensSystem
    trajectory: list
    aborted: bool = False
    message: str = ""

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.trajectory:
                fh.write(rec.to_json() + "\n")


_FAILURES = (TraceError, SagDomainError, ValueError, FloatingPointError)


def _evaluate(system, spec, sampling, config, hook):
    """Merit value, per-term values and gradient over trainable parameters."""
    tape = ad.Tape()
    state = lens_state(system, tape)
    terms = merit_terms(system, spec, sampling, state)
    total = combine(terms, config.weights)
    values = {k: float(ad.value(v)) for k, v in terms.items()}
    if hook is not None:
        psfs, extra = [], None
        for angle in hook.fields:
            chans, _ = taped_psf(system, state, FieldSpec(float(angle)), hook.n_pupil, hook.size)
            psfs.append(chans)
        arrays = [np.stack([np.asarray(ad.value(c)).reshape(hook.size, hook.size) for c in ch]) for ch in psfs]
        value, cots = hook.evaluate(arrays)
        for chans, cot in zip(psfs, cots):
            for c, g in zip(chans, np.asarray(cot)):
                term = ad.sum(c * g.ravel())
                extra = term if extra is None else extra + term
        values["psf"] = float(value)
        if extra is not None:
            # the surrogate sum(cot * psf) carries the hook's gradient
            total = total + hook.weight * (extra - float(ad.value(extra)) + float(value))
    grad = np.zeros(len(state.leaves))
    if state.leaves and ad.is_var(total):
        g = tape.backward(total, wrt=state.leaves)
        grad = np.array([float(g[v]) for v in state.leaves])
    return float(ad.value(total)), values, grad


def _record(step, system, total, values, scale) -> StepRecord:
    entries = system.param_vector().trainable()
    return StepRecord(
        step, dict(values), total, float(paraxial_effl(system)), min_gap(system), scale,
        dict(zip(entries.labels(), (float(v) for v in entries.values))),
    )


def optimize(system: LensSystem, spec: DesignSpec, config: OptimizerConfig | None = None,
             hook: PSFMeritHook | None = None) -> OptimizationResult:
    """Run the descent loop and return the final system with its trajectory.

    A step that leaves the lens untraceable or self-intersecting is retried
    with the step scale halved, up to ``config.max_halvings`` times; after
    that the run stops and returns the last valid lens.
    """
    config = OptimizerConfig() if config is None else config
    fields = field_set(system) if config.fields is None else tuple(config.fields)
    entries = system.param_vector().trainable()
    kinds = [e.kind for e in entries]
    if not kinds:
        raise ValueError("no trainable parameters")
    beta1, beta2 = config.betas
    m = np.zeros(len(kinds))
    v = np.zeros(len(kinds))
    sampling = freeze_sampling(system, fields, config.n_pupil)
    total, values, grad = _evaluate(system, spec, sampling, config, hook)
    trajectory = [_record(0, system, total, values, 1.0)]
    x = system.trainable_values()
    for step in range(1, config.steps + 1):
        f = paraxial_effl(system)
        rates = scaled_rates(f, config.lr, kinds)
        lr = np.array([rates[k] * config.multipliers.get(k, 1.0) for k in kinds])
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        mhat = m / (1 - beta1**step)
        vhat = v / (1 - beta2**step)
        delta = lr * mhat / (np.sqrt(vhat) + config.eps)
        scale = 1.0
        refit = config.resample_every and step % config.resample_every == 0
        for attempt in range(config.max_halvings + 1):
            cand_x = x - scale * delta
            try:
                cand = system.with_trainable(cand_x)
                if min_gap(cand) <= 0.0:
                    raise ValueError("surfaces intersect")
                vig = None if refit else [fs.vignetting for fs in sampling.fields]
                cand_sampling = freeze_sampling(cand, fields, config.n_pupil, vig)
                res = _evaluate(cand, spec, cand_sampling, config, hook)
                if not np.isfinite(res[0]) or not np.all(np.isfinite(res[2])):
                    raise FloatingPointError("non-finite merit")
                break
            except _FAILURES as exc:
                log.debug("step %d attempt %d failed: %s", step, attempt, exc)
                scale *= 0.5
        else:
            return OptimizationResult(system, trajectory, True,
                                      f"step {step}: no valid update after {config.max_halvings} halvings")
        system, sampling, x = cand, cand_sampling, cand_x
        total, values, grad = res
        if step % config.log_every == 0 or step == config.steps:
            trajectory.append(_record(step, system, total, values, scale))
    return OptimizationResult(system, trajectory)
