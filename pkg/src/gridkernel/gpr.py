"""Exact GP regression: marginal likelihood, Adam-based MLE fit, prediction."""

from __future__ import annotations

import json
import logging
import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from .errors import ConditioningError, InitializationError, ValidationError
from .kernels import (
    Hyperparameters,
    KernelSpec,
    PairTerms,
    Standardizer,
    assemble,
    grad_terms,
    pairwise,
    prior_variance,
    sub_grams,
    _check_theta,
)

log = logging.getLogger(__name__)

JITTERS = [0.0] + [1e-10 * 10**i for i in range(7)]
LOG_2PI = math.log(2 * math.pi)
MODEL_FORMAT = "gridkernel-model/1"


@dataclass(frozen=True)
class TrainingSet:
    inputs: np.ndarray
    targets: np.ndarray
    target_node: int | None = None
    topology_label: str = ""

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        if len(X) != len(y):
            raise ValidationError(f"{len(X)} inputs but {len(y)} targets")
        if not np.all(np.isfinite(y)) or np.any(y <= 0):
            raise ValidationError("targets must be finite, positive voltage magnitudes")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return len(self.targets)

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.inputs[idx], self.targets[idx], self.target_node, self.topology_label)


# --------------------------------------------------------------------------
# factorization with jitter escalation

_factor_sizes: list[list[int]] = []


@contextmanager
def track_factorizations():
    """Collect the sizes of every Cholesky factorization made inside the block."""
    sizes: list[int] = []
    _factor_sizes.append(sizes)
    try:
        yield sizes
    finally:
        _factor_sizes.remove(sizes)


def factorize(M: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of M, adding diagonal jitter only if needed."""
    for sizes in _factor_sizes:
        sizes.append(M.shape[0])
    eye = np.eye(M.shape[0])
    for jitter in JITTERS:
        try:
            return cholesky(M + jitter * eye, lower=True, check_finite=False), jitter
        except (LinAlgError, ValueError):
            continue
    raise ConditioningError(f"Cholesky failed on a {M.shape[0]}x{M.shape[0]} matrix even with jitter {JITTERS[-1]:g}")


@dataclass
class _Posterior:
    lml: float
    grad: np.ndarray | None
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float


def _posterior(terms: PairTerms, y: np.ndarray, theta: Hyperparameters, need_grad=True) -> _Posterior:
    n = len(y)
    subs = sub_grams(terms, theta)
    K = assemble(terms, theta, subs)
    noise2 = theta.noise ** 2
    K[np.diag_indices(n)] += noise2
    L, jitter = factorize(K)
    alpha = cho_solve((L, True), y, check_finite=False)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI
    grad = None
    if need_grad:
        W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n), check_finite=False)
        grad = np.zeros(len(theta))
        for k, dK in grad_terms(terms, theta, subs):
            grad[k] = 0.5 * np.vdot(W, dK)
        grad[theta.noise_index] = noise2 * np.trace(W)
    return _Posterior(float(lml), grad, L, alpha, jitter)


def log_marginal_likelihood(theta: Hyperparameters, data: TrainingSet, spec: KernelSpec,
                            standardizer: Standardizer | None = None) -> tuple[float, np.ndarray]:
    """Log evidence of ``data.targets`` (used as given) and its log-space gradient."""
    _check_theta(spec, theta)
    terms = pairwise(data.inputs, data.inputs, spec, standardizer)
    post = _posterior(terms, data.targets, theta)
    return post.lml, post.grad


# --------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class GpModel:
    spec: KernelSpec
    theta: Hyperparameters
    inputs: np.ndarray
    targets: np.ndarray
    standardizer: Standardizer
    y_mean: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    lml: float
    lml_trace: tuple[float, ...] = ()
    theta0: Hyperparameters | None = None
    solve_count: int = 0
    label: str = ""
    target_node: int | None = None
    case_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.targets)

    def predict(self, S) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, S)

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "label": self.label,
            "target_node": self.target_node,
            "case_id": self.case_id,
            "spec": self.spec.to_dict(),
            "theta_log": self.theta.to_list(),
            "theta0_log": None if self.theta0 is None else self.theta0.to_list(),
            "x_train": self.inputs.tolist(),
            "y_train": self.targets.tolist(),
            "y_mean": self.y_mean,
            "standardization": self.standardizer.to_dict(),
            "lml": self.lml,
            "lml_trace": list(self.lml_trace),
            "solve_count": self.solve_count,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpModel":
        if d.get("format") != MODEL_FORMAT:
            raise ValidationError(f"not a gridkernel model (format={d.get('format')!r})")
        spec = KernelSpec.from_dict(d["spec"])
        theta = Hyperparameters.from_vector(d["theta_log"], spec.n_sub, spec.n_weights)
        theta0 = d.get("theta0_log")
        if theta0 is not None:
            theta0 = Hyperparameters.from_vector(theta0, spec.n_sub, spec.n_weights)
        X = np.asarray(d["x_train"], dtype=float)
        y = np.asarray(d["y_train"], dtype=float)
        std = Standardizer.from_dict(d["standardization"])
        y_mean = float(d["y_mean"])
        post = _posterior(pairwise(X, X, spec, std), y - y_mean, theta, need_grad=False)
        return cls(spec, theta, X, y, std, y_mean, post.chol, post.alpha, post.jitter, float(d["lml"]),
                   tuple(d.get("lml_trace", ())), theta0, int(d.get("solve_count", 0)),
                   d.get("label", ""), d.get("target_node"), d.get("case_id", ""), d.get("meta", {}))


def save_model(model: GpModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_model(path) -> GpModel:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read model {path}: {exc}") from None
    return GpModel.from_dict(data)


def _adam_ascent(objective, x0: np.ndarray, iters: int, lr: float, free: np.ndarray,
                 beta1=0.9, beta2=0.999, eps=1e-8):
    x = x0.copy()
    L, g, state = objective(x)
    if not np.isfinite(L):
        raise InitializationError("log marginal likelihood is not finite at the initial hyperparameters")
    best = (L, x.copy(), state)
    trace = [L]
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t in range(1, iters + 1):
        g = np.where(free, g, 0.0)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        step = lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
        x = np.where(free, x + step, x)
        try:
            L, g, state = objective(x)
        except ConditioningError:
            log.warning("factorization failed at iteration %d; keeping best iterate", t)
            break
        trace.append(L)
        if L > best[0]:
            best = (L, x.copy(), state)
    return best, trace


def fit(data: TrainingSet, spec: KernelSpec, theta0: Hyperparameters | None = None, iters: int = 50,
        lr: float = 0.05, fixed=None, standardize: bool = False, center: bool = True,
        solve_count: int = 0, case_id: str = "", label: str | None = None) -> GpModel:
    """Maximise the log marginal likelihood by ``iters`` Adam steps in log-space.

    ``fixed`` lists hyperparameter indices held at their ``theta0`` value.
    The returned model sits at the best iterate seen (including ``theta0``).
    """
    if len(data) < 2:
        raise ValidationError("need at least two training samples")
    theta0 = spec.initial_theta() if theta0 is None else theta0
    _check_theta(spec, theta0)
    std = Standardizer.fit(data.inputs) if standardize else Standardizer.identity(data.inputs.shape[1])
    y_mean = float(data.targets.mean()) if center else 0.0
    y = data.targets - y_mean
    terms = pairwise(data.inputs, data.inputs, spec, std)
    n_sub, n_w = spec.n_sub, spec.n_weights

    def objective(x):
        post = _posterior(terms, y, Hyperparameters.from_vector(x, n_sub, n_w))
        return post.lml, post.grad, post

    free = np.ones(len(theta0), dtype=bool)
    if fixed is not None:
        free[np.asarray(list(fixed), dtype=int)] = False
    (lml, x, post), trace = _adam_ascent(objective, theta0.vector(), iters, lr, free)
    theta = Hyperparameters.from_vector(x, n_sub, n_w)
    return GpModel(spec, theta, data.inputs.copy(), data.targets.copy(), std, y_mean, post.chol,
                   post.alpha, post.jitter, lml, tuple(trace), theta0, solve_count,
                   data.topology_label if label is None else label, data.target_node, case_id)


def predict(model: GpModel, S) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and latent variance, clamped at zero."""
    S = np.asarray(S, dtype=float)
    single = S.ndim == 1
    S = np.atleast_2d(S)
    if S.shape[1] != model.inputs.shape[1]:
        raise ValidationError(f"input dimension {S.shape[1]} != model dimension {model.inputs.shape[1]}")
    Ks = assemble(pairwise(S, model.inputs, model.spec, model.standardizer), model.theta)
    mean = Ks @ model.alpha + model.y_mean
    V = solve_triangular(model.chol, Ks.T, lower=True, check_finite=False)
    var = prior_variance(len(S), model.spec, model.theta) - np.einsum("ij,ij->j", V, V)
    if np.any(var < -1e-8):
        warnings.warn(f"predictive variance down to {var.min():.3g}; model is ill-conditioned",
                      RuntimeWarning, stacklevel=2)
    var = np.maximum(var, 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def mae(model: GpModel, test: TrainingSet) -> float:
    if len(test) == 0:
        raise ValidationError("test set is empty")
    mean, _ = predict(model, test.inputs)
    return float(np.mean(np.abs(mean - test.targets)))
