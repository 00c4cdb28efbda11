"""Squared-exponential, vertex-degree (VDK) and multi-task VDK kernels.

A VDK is a sum of one isotropic SE sub-kernel per bus, each reading only
the injections of that bus and its in-service neighbours. The multi-task
form adds frozen source-topology VDKs scaled by a trainable weight.

Hyperparameters live in log-space and are laid out as::

    [log tau_1..tau_K, log ell_1..ell_K, log sigma_n, log omega(s)]

with K = 1 for ``full_se`` and K = n_bus otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ValidationError
from .netcase import Neighborhoods

KINDS = ("full_se", "vdk", "mt_vdk")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float).reshape(-1)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Standardizer:
    """Per-coordinate affine map ``(x - shift) / scale``."""

    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shift", _frozen(self.shift))
        object.__setattr__(self, "scale", _frozen(self.scale))

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        # constant coordinates: centre only
        flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        std = np.where(flat, 1.0, std)
        return cls(mean, std)

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.shift) / self.scale

    def to_dict(self) -> dict:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(d["shift"], d["scale"])


@dataclass(frozen=True)
class Hyperparameters:
    log_tau: np.ndarray
    log_ell: np.ndarray
    log_noise: float
    log_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "log_tau", _frozen(self.log_tau))
        object.__setattr__(self, "log_ell", _frozen(self.log_ell))
        object.__setattr__(self, "log_weights", _frozen(self.log_weights))
        object.__setattr__(self, "log_noise", float(self.log_noise))
        if self.log_tau.shape != self.log_ell.shape:
            raise ValidationError("tau and ell vectors differ in length")

    @classmethod
    def initial(cls, n_sub: int, n_weights: int = 0, log_tau: float = 1.0, log_ell: float = 1.0,
                log_noise: float = -5.0, log_weight: float = 0.0) -> "Hyperparameters":
        return cls(np.full(n_sub, log_tau), np.full(n_sub, log_ell), log_noise,
                   np.full(n_weights, log_weight))

    @property
    def n_sub(self) -> int:
        return len(self.log_tau)

    @property
    def n_weights(self) -> int:
        return len(self.log_weights)

    def __len__(self) -> int:
        return 2 * self.n_sub + 1 + self.n_weights

    @property
    def tau(self) -> np.ndarray:
        return np.exp(self.log_tau)

    @property
    def ell(self) -> np.ndarray:
        return np.exp(self.log_ell)

    @property
    def noise(self) -> float:
        return float(np.exp(self.log_noise))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def noise_index(self) -> int:
        return 2 * self.n_sub

    def vector(self) -> np.ndarray:
        return np.r_[self.log_tau, self.log_ell, self.log_noise, self.log_weights]

    @classmethod
    def from_vector(cls, vec, n_sub: int, n_weights: int = 0) -> "Hyperparameters":
        vec = np.asarray(vec, dtype=float)
        if len(vec) != 2 * n_sub + 1 + n_weights:
            raise ValidationError(
                f"hyperparameter vector has length {len(vec)}, expected {2 * n_sub + 1 + n_weights}")
        return cls(vec[:n_sub], vec[n_sub:2 * n_sub], vec[2 * n_sub], vec[2 * n_sub + 1:])

    def to_list(self) -> list[float]:
        return self.vector().tolist()


@dataclass(frozen=True)
class FrozenSource:
    """A trained source-topology VDK whose hyperparameters never change."""

    neighborhoods: Neighborhoods
    theta: Hyperparameters
    standardizer: Standardizer | None = None
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "neighborhoods": self.neighborhoods.to_dict(),
            "theta_log": self.theta.to_list(),
            "standardization": None if self.standardizer is None else self.standardizer.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrozenSource":
        nbr = Neighborhoods.from_dict(d["neighborhoods"])
        theta = Hyperparameters.from_vector(d["theta_log"], nbr.n_nodes)
        std = d.get("standardization")
        return cls(nbr, theta, None if std is None else Standardizer.from_dict(std), d.get("label", ""))


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    neighborhoods: Neighborhoods | None = None
    sources: tuple[FrozenSource, ...] = ()
    per_source_weights: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        if self.kind != "full_se" and self.neighborhoods is None:
            raise ValidationError(f"{self.kind} kernel needs a neighborhood structure")
        if self.kind == "mt_vdk" and not self.sources:
            raise ValidationError("mt_vdk kernel needs at least one frozen source")
        if self.kind != "mt_vdk" and self.sources:
            raise ValidationError(f"{self.kind} kernel takes no sources")
        object.__setattr__(self, "sources", tuple(self.sources))

    @property
    def n_sub(self) -> int:
        return 1 if self.kind == "full_se" else self.neighborhoods.n_nodes

    @property
    def n_weights(self) -> int:
        if self.kind != "mt_vdk":
            return 0
        return len(self.sources) if self.per_source_weights else 1

    @property
    def n_params(self) -> int:
        return 2 * self.n_sub + 1 + self.n_weights

    def initial_theta(self, **kw) -> Hyperparameters:
        return Hyperparameters.initial(self.n_sub, self.n_weights, **kw)

    def blocks(self, dim: int) -> list[np.ndarray]:
        """Injection columns read by each sub-kernel."""
        if self.kind == "full_se":
            return [np.arange(dim)]
        return [self.neighborhoods.columns(n) for n in range(self.neighborhoods.n_nodes)]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "neighborhoods": None if self.neighborhoods is None else self.neighborhoods.to_dict(),
            "sources": [s.to_dict() for s in self.sources],
            "per_source_weights": self.per_source_weights,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        nbr = d.get("neighborhoods")
        return cls(d["kind"], None if nbr is None else Neighborhoods.from_dict(nbr),
                   tuple(FrozenSource.from_dict(s) for s in d.get("sources", ())),
                   d.get("per_source_weights", False))


# --------------------------------------------------------------------------
# pointwise evaluation


def se_eval(x, x2, tau: float, ell: float) -> float:
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x.shape != x2.shape:
        raise ValidationError(f"dimension mismatch: {x.shape} vs {x2.shape}")
    if tau <= 0 or ell <= 0:
        raise ValidationError("tau and ell must be positive")
    d2 = float(np.sum((x - x2) ** 2))
    return tau**2 * np.exp(-d2 / (2 * ell**2))


def vdk_eval(s, s2, nbr: Neighborhoods, theta: Hyperparameters) -> float:
    s = np.asarray(s, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    tau, ell = theta.tau, theta.ell
    total = 0.0
    for n in range(nbr.n_nodes):
        cols = nbr.columns(n)
        total += se_eval(s[cols], s2[cols], tau[n], ell[n])
    return total


def _source_eval(s, s2, src) -> float:
    if isinstance(src, FrozenSource):
        if src.standardizer is not None:
            s, s2 = src.standardizer(s), src.standardizer(s2)
        return vdk_eval(s, s2, src.neighborhoods, src.theta)
    nbr, theta = src
    return vdk_eval(s, s2, nbr, theta)


def mt_vdk_eval(s, s2, target: tuple[Neighborhoods, Hyperparameters], sources: Sequence,
                omega) -> float:
    """Target VDK plus weighted frozen source VDKs.

    ``omega`` is a scalar (one shared weight) or one weight per source.
    ``sources`` holds :class:`FrozenSource` objects or ``(nbr, theta)`` pairs.
    """
    w = np.atleast_1d(np.asarray(omega, dtype=float))
    if np.any(w < 0):
        raise ValidationError("source weight must be non-negative")
    nbr, theta = target
    value = vdk_eval(s, s2, nbr, theta)
    terms = [_source_eval(s, s2, src) for src in sources]
    if len(w) == 1:
        return value + w[0] * sum(terms)
    if len(w) != len(terms):
        raise ValidationError("need one weight per source")
    return value + float(np.dot(w, terms))


# --------------------------------------------------------------------------
# Gram matrices


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return cdist(A, B, "sqeuclidean")


def _vdk_gram(X1, X2, nbr: Neighborhoods, theta: Hyperparameters) -> np.ndarray:
    K = np.zeros((len(X1), len(X2)))
    tau, ell = theta.tau, theta.ell
    for n in range(nbr.n_nodes):
        cols = nbr.columns(n)
        K += tau[n] ** 2 * np.exp(-_sqdist(X1[:, cols], X2[:, cols]) / (2 * ell[n] ** 2))
    return K


@dataclass
class PairTerms:
    """Hyperparameter-independent pieces of a Gram matrix.

    ``sqdist[k]`` is the squared distance matrix seen by sub-kernel k and
    ``source_grams[m]`` the fixed Gram of frozen source m (summed into a
    single entry when the sources share one weight).
    """

    sqdist: list[np.ndarray]
    source_grams: list[np.ndarray]
    shape: tuple[int, int]


def pairwise(S1, S2, spec: KernelSpec, standardizer: Standardizer | None = None) -> PairTerms:
    S1 = np.atleast_2d(np.asarray(S1, dtype=float))
    S2 = np.atleast_2d(np.asarray(S2, dtype=float))
    shape = (len(S1), len(S2))
    if S1.size == 0 or S2.size == 0:
        return PairTerms([], [], shape)
    if S1.shape[1] != S2.shape[1]:
        raise ValidationError("sample lists have different dimensions")
    X1 = S1 if standardizer is None else standardizer(S1)
    X2 = S2 if standardizer is None else standardizer(S2)
    sq = [_sqdist(X1[:, c], X2[:, c]) for c in spec.blocks(S1.shape[1])]
    grams = []
    for src in spec.sources:
        A = S1 if src.standardizer is None else src.standardizer(S1)
        B = S2 if src.standardizer is None else src.standardizer(S2)
        grams.append(_vdk_gram(A, B, src.neighborhoods, src.theta))
    if grams and not spec.per_source_weights:
        grams = [sum(grams)]
    return PairTerms(sq, grams, shape)


def sub_grams(terms: PairTerms, theta: Hyperparameters) -> list[np.ndarray]:
    tau, ell = theta.tau, theta.ell
    return [tau[k] ** 2 * np.exp(-d / (2 * ell[k] ** 2)) for k, d in enumerate(terms.sqdist)]


def assemble(terms: PairTerms, theta: Hyperparameters, subs: list[np.ndarray] | None = None) -> np.ndarray:
    if not terms.sqdist:
        return np.zeros(terms.shape)
    subs = sub_grams(terms, theta) if subs is None else subs
    K = np.sum(subs, axis=0) if len(subs) > 1 else subs[0].copy()
    for w, G in zip(theta.weights, terms.source_grams):
        K += w * G
    return K


def grad_terms(terms: PairTerms, theta: Hyperparameters,
               subs: list[np.ndarray] | None = None) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(index, dK/d log theta_index)`` for every parameter except the noise."""
    subs = sub_grams(terms, theta) if subs is None else subs
    n_sub = theta.n_sub
    ell2 = theta.ell ** 2
    for k, G in enumerate(subs):
        yield k, 2.0 * G
    for k, (G, d) in enumerate(zip(subs, terms.sqdist)):
        yield n_sub + k, G * (d / ell2[k])
    for m, (w, G) in enumerate(zip(theta.weights, terms.source_grams)):
        yield 2 * n_sub + 1 + m, w * G


def gram(S1, S2, spec: KernelSpec, theta: Hyperparameters,
         standardizer: Standardizer | None = None) -> np.ndarray:
    """K[i, j] = k(S1[i], S2[j])."""
    _check_theta(spec, theta)
    return assemble(pairwise(S1, S2, spec, standardizer), theta)


def gram_grad(S, spec: KernelSpec, theta: Hyperparameters,
              standardizer: Standardizer | None = None) -> list[np.ndarray]:
    """Derivatives of ``gram(S, S)`` w.r.t. each log-hyperparameter.

    The list follows the hyperparameter vector layout; the noise slot is a
    zero matrix because the noise enters only through ``K + sigma^2 I``.
    """
    _check_theta(spec, theta)
    terms = pairwise(S, S, spec, standardizer)
    out = [np.zeros(terms.shape) for _ in range(len(theta))]
    for k, dK in grad_terms(terms, theta):
        out[k] = dK
    return out


def prior_variance(n: int, spec: KernelSpec, theta: Hyperparameters) -> np.ndarray:
    """k(s, s) for ``n`` points (it does not depend on s for stationary parts)."""
    value = float(np.sum(theta.tau ** 2))
    src = [float(np.sum(s.theta.tau ** 2)) for s in spec.sources]
    if src:
        if spec.per_source_weights:
            value += float(np.dot(theta.weights, src))
        else:
            value += float(theta.weights[0] * sum(src))
    return np.full(n, value)


def _check_theta(spec: KernelSpec, theta: Hyperparameters) -> None:
    if theta.n_sub != spec.n_sub or theta.n_weights != spec.n_weights:
        raise ValidationError(
            f"hyperparameters ({theta.n_sub} sub-kernels, {theta.n_weights} weights) do not fit "
            f"{spec.kind} spec ({spec.n_sub}, {spec.n_weights})")
