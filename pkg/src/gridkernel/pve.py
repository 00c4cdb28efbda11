"""Probabilistic voltage envelopes from trained GP voltage models.

The sample bound is the worst-case performance bound for the empirical
maximum of T i.i.d. draws; replacing the empirical maximum of true
voltages by ``max mu + kappa * sigma`` over GP predictions costs a factor
``(1 - gamma(kappa))**T`` in confidence.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .acpf import sample_injections, stream_seed
from .errors import ValidationError
from .gpr import GpModel, predict
from .netcase import GridCase


@dataclass(frozen=True)
class PveConfig:
    epsilon: float = 0.02
    delta: float = 1e-4
    kappa: float = 3.75
    T: int | None = None

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValidationError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValidationError(f"delta must lie in (0, 1), got {self.delta}")
        if self.kappa < 0:
            raise ValidationError(f"kappa must be non-negative, got {self.kappa}")
        if self.T is None:
            object.__setattr__(self, "T", max(1000, required_samples(self.epsilon, self.delta)))
        elif self.T < 1:
            raise ValidationError(f"T must be at least 1, got {self.T}")


@dataclass(frozen=True)
class Envelope:
    node: int
    topology_label: str
    beta_upper: float
    beta_lower: float
    config: PveConfig
    adjusted_confidence: float
    evaluation_count: int
    train_solves: int = 0

    def contains(self, v) -> np.ndarray:
        v = np.asarray(v)
        return (v >= self.beta_lower) & (v <= self.beta_upper)


def required_samples(epsilon: float, delta: float) -> int:
    """Smallest T with T >= ln(1/delta) / ln(1 / (1 - epsilon/2))."""
    if not 0 < epsilon < 1:
        raise ValidationError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not 0 < delta < 1:
        raise ValidationError(f"delta must lie in (0, 1), got {delta}")
    bound = math.log(1 / delta) / -math.log1p(-epsilon / 2)
    return max(1, math.ceil(bound - 1e-9))


def implied_epsilon(T: int, delta: float) -> float:
    """Violation level guaranteed by T samples at confidence 1 - delta."""
    return 2.0 * (1.0 - math.exp(-math.log(1 / delta) / T))


def gamma_tail(kappa: float) -> float:
    """Standard normal upper tail 1 - Phi(kappa)."""
    if kappa < 0:
        raise ValidationError("kappa must be non-negative")
    return 0.5 * math.erfc(kappa / math.sqrt(2.0))


def adjusted_confidence(delta: float, kappa: float, T: int) -> float:
    return (1.0 - delta) * (1.0 - gamma_tail(kappa)) ** T


def estimate_beta(model: GpModel, eval_samples, kappa: float) -> tuple[float, float]:
    """(beta_upper, beta_lower) = (max mu + kappa sigma, min mu - kappa sigma)."""
    S = getattr(eval_samples, "injections", eval_samples)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if len(S) == 0:
        raise ValidationError("no evaluation samples")
    mu, var = predict(model, S)
    sd = np.sqrt(var)
    return float(np.max(mu + kappa * sd)), float(np.min(mu - kappa * sd))


def build_envelopes(models: Mapping[tuple[int, str], GpModel], config: PveConfig, case: GridCase,
                    seed: int, fraction: float = 0.1) -> list[Envelope]:
    """One envelope per (node, topology) model from T fresh hypercube draws.

    Evaluation uses model predictions only; the only power-flow cost is the
    solves already spent on training, carried in ``train_solves``.
    """
    out = []
    for (node, label), model in sorted(models.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        draws = sample_injections(case, fraction, config.T, stream_seed(seed, "pve", node, label), label)
        upper, lower = estimate_beta(model, draws, config.kappa)
        out.append(Envelope(node, label, upper, lower, config,
                            adjusted_confidence(config.delta, config.kappa, config.T), config.T,
                            model.solve_count))
    return out


ENVELOPE_HEADER = ["node", "topology", "beta_lower", "beta_upper", "kappa", "T", "epsilon", "delta",
                   "confidence", "train_solves"]


def write_envelopes(envelopes, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ENVELOPE_HEADER)
        for e in envelopes:
            c = e.config
            w.writerow([e.node, e.topology_label, repr(e.beta_lower), repr(e.beta_upper), c.kappa,
                        e.evaluation_count, c.epsilon, c.delta, repr(e.adjusted_confidence),
                        e.train_solves])
