"""Stochastic discrete relaxations: Gumbel-softmax and relaxed Bernoulli.

All noise comes from an explicit seeded numpy Generator so draws can be
frozen for gradient checks. Hard mode emits exact discrete samples in the
forward pass and the soft relaxation's gradient in the backward pass
(straight-through).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

_EPS_UNIFORM = 1e-12   # clamp for uniform draws before the double log
_EPS_PROB = 1e-6       # clamp for Bernoulli probabilities


@dataclass
class GumbelConfig:
    tau_s: float = 1.0
    hard: bool = True

    def __post_init__(self):
        if self.tau_s <= 0:
            raise ValueError(f"tau_s must be positive, got {self.tau_s}")


@dataclass
class TemperatureSchedule:
    start: float = 5.0
    end: float = 1.0
    anneal_epochs: int = 50

    def __post_init__(self):
        if not self.start >= self.end > 0:
            raise ValueError(f"need start >= end > 0, got {self.start}, {self.end}")


def temperature_at(epoch: int, sched: TemperatureSchedule) -> float:
    """Cosine interpolation start -> end over anneal_epochs, then constant."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch >= sched.anneal_epochs:
        return sched.end
    t = epoch / sched.anneal_epochs
    return sched.end + (sched.start - sched.end) * (1.0 + math.cos(math.pi * t)) / 2.0


def sample_gumbel(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """i.i.d. Gumbel(0, 1) draws: -log(-log(u)), u uniform on (0, 1)."""
    u = rng.random(shape)
    u = np.clip(u, _EPS_UNIFORM, 1.0 - _EPS_UNIFORM)
    return (-np.log(-np.log(u))).astype(dtype)


def _one_hot_argmax(perturbed: np.ndarray) -> np.ndarray:
    # argmax over last axis with lowest-index tie-break (numpy default)
    idx = perturbed.argmax(axis=-1)
    out = np.zeros_like(perturbed)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def gumbel_softmax(logits: Tensor, cfg: GumbelConfig, rng: np.random.Generator,
                   noise: np.ndarray | None = None) -> Tensor:
    """Gumbel-softmax sample over the last axis of `logits`.

    Soft mode returns softmax((logits + g)/tau_s). Hard mode forwards the
    exact one-hot argmax of the perturbed logits (a true draw from
    softmax(logits)) with the soft sample's gradient. `noise` overrides the
    Gumbel draw, for frozen-noise gradient checks.
    """
    if noise is None:
        noise = sample_gumbel(logits.data.shape, rng, logits.dtype)
    perturbed = logits + Tensor(noise)
    soft = T.softmax(perturbed * (1.0 / cfg.tau_s), axis=-1)
    if not cfg.hard:
        return soft
    hard = _one_hot_argmax(perturbed.data)
    return T.straight_through(hard, soft)


def sample_logistic(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """Standard logistic draws: log(u) - log(1 - u)."""
    u = rng.random(shape)
    u = np.clip(u, _EPS_UNIFORM, 1.0 - _EPS_UNIFORM)
    return (np.log(u) - np.log1p(-u)).astype(dtype)


def bernoulli_relaxed(prob: Tensor, cfg: GumbelConfig, rng: np.random.Generator,
                      noise: np.ndarray | None = None) -> Tensor:
    """Relaxed Bernoulli(prob) via logistic noise.

    Soft mode: sigmoid((logit(p) + L)/tau_s) with L standard logistic.
    Hard mode: threshold the soft sample at 0.5 (an exact Bernoulli(p) draw,
    for any tau_s) with straight-through gradient.
    """
    p = prob.data
    if np.any(p < -1e-9) or np.any(p > 1.0 + 1e-9):
        raise ValueError(f"bernoulli_relaxed: probabilities outside [0, 1], "
                         f"range [{p.min()}, {p.max()}]")
    if noise is None:
        noise = sample_logistic(p.shape, rng, p.dtype)
    pc = T.clip(prob, _EPS_PROB, 1.0 - _EPS_PROB)
    logit = T.log(pc) - T.log(1.0 - pc)
    soft = T.sigmoid((logit + Tensor(noise)) * (1.0 / cfg.tau_s))
    if not cfg.hard:
        return soft
    hard = (soft.data > 0.5).astype(p.dtype)
    return T.straight_through(hard, soft)
