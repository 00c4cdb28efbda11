"""Hyperparameter hot-start (HTL) and multi-task VDK training from source models."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .acpf import generate_dataset, sample_injections, solve_category, stream_seed
from .errors import RegistryError, ValidationError
from .gpr import GpModel, TrainingSet, fit, load_model, save_model
from .kernels import FrozenSource, Hyperparameters, KernelSpec
from .netcase import GridCase, Topology, apply_outage, base_topology, neighborhoods

log = logging.getLogger(__name__)

# branch outages defining the source topologies (base topology always added)
SOURCE_SETS = {
    "A": (1, 5, 10),
    "B": (1, 5, 8, 10),
    "C": (12, 15, 18, 22, 35),
    "N2": (1, 10),
}

SOURCE_SAMPLES = 512
SOURCE_ITERS = 50


@dataclass(frozen=True)
class SourceRegistry:
    entries: tuple[GpModel, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            return
        first = self.entries[0]
        for m in self.entries:
            if m.spec.kind != "vdk":
                raise RegistryError(f"source {m.label!r} is a {m.spec.kind} model, expected vdk")
            if m.case_id != first.case_id:
                raise RegistryError(f"source {m.label!r} was trained on a different case")
            if m.target_node != first.target_node:
                raise RegistryError(f"source {m.label!r} models node {m.target_node}, "
                                    f"expected {first.target_node}")
            if len(m.theta) != len(first.theta):
                raise RegistryError(f"source {m.label!r} has {len(m.theta)} hyperparameters, "
                                    f"expected {len(first.theta)}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> list[str]:
        return [m.label for m in self.entries]

    @property
    def target_node(self):
        return self.entries[0].target_node if self.entries else None

    @property
    def case_id(self) -> str:
        return self.entries[0].case_id if self.entries else ""

    def frozen_sources(self) -> tuple[FrozenSource, ...]:
        return tuple(FrozenSource(m.spec.neighborhoods, m.theta, m.standardizer, m.label)
                     for m in self.entries)


def _require(registry: SourceRegistry) -> None:
    if len(registry) == 0:
        raise RegistryError("source registry is empty")


def htl_init(registry: SourceRegistry, domain: str = "log") -> Hyperparameters:
    """Average of the source optima, coordinate-wise.

    ``domain="log"`` averages log-hyperparameters (geometric mean of the raw
    values); ``domain="raw"`` averages the raw positive values.
    """
    _require(registry)
    vecs = np.array([m.theta.vector() for m in registry])
    if domain == "log":
        avg = vecs.mean(axis=0)
    elif domain == "raw":
        avg = np.log(np.exp(vecs).mean(axis=0))
    else:
        raise ValidationError(f"unknown averaging domain {domain!r}")
    first = registry.entries[0].theta
    return Hyperparameters.from_vector(avg, first.n_sub, first.n_weights)


def _check_target(registry: SourceRegistry, case: GridCase, topo: Topology, data: TrainingSet) -> None:
    _require(registry)
    if topo.label in registry.labels:
        raise ValidationError(f"target topology {topo.label!r} is already a source")
    if registry.case_id and registry.case_id != case.fingerprint:
        raise RegistryError("registry was trained on a different case")
    if data.target_node is not None and registry.target_node is not None \
            and data.target_node != registry.target_node:
        raise RegistryError(f"registry models node {registry.target_node}, data is for {data.target_node}")


def train_vdk(data: TrainingSet, case: GridCase, topo: Topology, iters: int = 50,
              theta0: Hyperparameters | None = None, **kw) -> GpModel:
    """Cold-start VDK-GP on one topology."""
    spec = KernelSpec("vdk", neighborhoods(case, topo))
    model = fit(data, spec, theta0, iters=iters, case_id=case.fingerprint, label=topo.label, **kw)
    model.meta["method"] = "vdk"
    return model


def train_full_gp(data: TrainingSet, case: GridCase, topo: Topology, iters: int = 50, **kw) -> GpModel:
    model = fit(data, KernelSpec("full_se"), iters=iters, case_id=case.fingerprint, label=topo.label, **kw)
    model.meta["method"] = "full_gp"
    return model


def train_htl(data: TrainingSet, case: GridCase, topo: Topology, registry: SourceRegistry,
              iters: int = 50, domain: str = "log", **kw) -> GpModel:
    """VDK-GP on the target topology, started from the averaged source optimum."""
    _check_target(registry, case, topo, data)
    model = train_vdk(data, case, topo, iters, theta0=htl_init(registry, domain), **kw)
    model.meta["method"] = "htl"
    return model


def train_mt(data: TrainingSet, case: GridCase, topo: Topology, registry: SourceRegistry,
             iters: int = 50, per_source_weights: bool = False, omega0: float = 1.0,
             freeze_omega: bool = False, domain: str = "log", **kw) -> GpModel:
    """Multi-task VDK: trainable target VDK plus weighted frozen source VDKs."""
    _check_target(registry, case, topo, data)
    spec = KernelSpec("mt_vdk", neighborhoods(case, topo), registry.frozen_sources(), per_source_weights)
    start = htl_init(registry, domain)
    with np.errstate(divide="ignore"):
        log_w = np.full(spec.n_weights, np.log(omega0))
    theta0 = Hyperparameters(start.log_tau, start.log_ell, start.log_noise, log_w)
    fixed = None
    if freeze_omega:
        fixed = range(theta0.noise_index + 1, len(theta0))
    snapshot = [m.theta.vector().tobytes() for m in registry]
    model = fit(data, spec, theta0, iters=iters, fixed=fixed, case_id=case.fingerprint,
                label=topo.label, **kw)
    if snapshot != [m.theta.vector().tobytes() for m in registry]:
        raise AssertionError("frozen source hyperparameters changed during target training")
    model.meta["method"] = "mt_vdk"
    return model


def source_topologies(case: GridCase, outages) -> list[Topology]:
    base = base_topology(case)
    return [base] + [apply_outage(base, [b]) if np.isscalar(b) else apply_outage(base, b)
                     for b in outages]


def train_sources(case: GridCase, nodes, outages, n_samples: int = SOURCE_SAMPLES,
                  iters: int = SOURCE_ITERS, seed: int = 0, fraction: float = 0.1) -> dict[int, SourceRegistry]:
    """Train one VDK source model per (node, source topology).

    Each source topology gets its own sample stream; one power-flow solve
    yields every node voltage, so datasets are shared across nodes.
    """
    per_node: dict[int, list[GpModel]] = {n: [] for n in nodes}
    for topo in source_topologies(case, outages):
        samples = sample_injections(case, fraction, n_samples, stream_seed(seed, "source", topo.label),
                                    topo.label)
        with solve_category("source"):
            ds = generate_dataset(case, topo, samples, nodes)
        for node in nodes:
            model = train_vdk(ds.training_set(node), case, topo, iters, solve_count=ds.solves)
            model.meta["role"] = "source"
            per_node[node].append(model)
            log.info("source %s node %s: lml %.2f", topo.label, node, model.lml)
    return {n: SourceRegistry(tuple(ms)) for n, ms in per_node.items()}


def _filename(model: GpModel) -> str:
    slug = re.sub(r"[^A-Za-z0-9]+", "_", model.label).strip("_") or "model"
    return f"node{model.target_node}_{slug}.json"


def save_registry(registry: SourceRegistry, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in registry:
        p = d / _filename(m)
        save_model(m, p)
        paths.append(p)
    return paths


def load_registry(directory, node: int | None = None) -> SourceRegistry:
    """Load every model JSON in ``directory`` (optionally only those for ``node``)."""
    d = Path(directory)
    if not d.is_dir():
        raise RegistryError(f"registry directory not found: {d}")
    models = []
    for p in sorted(d.glob("*.json")):
        try:
            m = load_model(p)
        except (ValidationError, KeyError, TypeError, ValueError) as exc:
            raise RegistryError(f"corrupt model file {p}: {exc}") from None
        if node is None or m.target_node == node:
            models.append(m)
    return SourceRegistry(tuple(models))
