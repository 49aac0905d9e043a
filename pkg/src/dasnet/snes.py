"""Separable Natural Evolution Strategies (minimization).

The search distribution is a diagonal Gaussian ``N(mu, diag(sigma**2))``.
Each generation draws ``p`` candidates ``mu + sigma * s_k``, ranks them by
cost and moves ``mu`` and ``log(sigma)`` along the natural gradient using
rank-based utilities.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .dataio import FormatError
from .numerics import NumericalError, RngStream


@dataclass
class SearchDistribution:
    mu: np.ndarray
    sigma: np.ndarray
    generation: int = 0

    def __post_init__(self):
        self.mu = np.array(self.mu, dtype=np.float64)
        self.sigma = np.array(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ValueError(f"mu {self.mu.shape} and sigma {self.sigma.shape} must be equal-length vectors")
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be strictly positive")

    @property
    def dim(self) -> int:
        return len(self.mu)

    @classmethod
    def isotropic(cls, mu, sigma: float) -> "SearchDistribution":
        mu = np.asarray(mu, dtype=np.float64)
        return cls(mu, np.full_like(mu, sigma))


@dataclass
class CandidateBatch:
    noise: np.ndarray  # (p, d) standard normal draws
    params: np.ndarray  # (p, d) = mu + sigma * noise
    costs: np.ndarray | None = None

    def __len__(self):
        return len(self.noise)


def learning_rates(d: int) -> tuple[float, float]:
    """Default ``(eta_mu, eta_sigma)`` for dimension ``d``."""
    return 1.0, (3.0 + np.log(d)) / (5.0 * np.sqrt(d))


def shaped_utilities(p: int) -> np.ndarray:
    """Rank-based utilities, best rank first; they sum to zero."""
    if p < 2:
        raise ValueError("population must hold at least two candidates")
    ranks = np.arange(1, p + 1)
    raw = np.maximum(0.0, np.log(p / 2.0 + 1.0) - np.log(ranks))
    return raw / raw.sum() - 1.0 / p


def sample(dist: SearchDistribution, pop: int, rng: RngStream) -> CandidateBatch:
    if pop < 2:
        raise ValueError("population must hold at least two candidates")
    noise = rng.normal((pop, dist.dim))
    return CandidateBatch(noise, dist.mu + dist.sigma * noise)


def utilities_for(costs: np.ndarray) -> np.ndarray:
    """Utility of each candidate in index order (lowest cost gets the largest)."""
    costs = np.asarray(costs, dtype=np.float64)
    order = np.argsort(costs, kind="stable")
    util = np.empty(len(costs))
    util[order] = shaped_utilities(len(costs))
    return util


def update(
    dist: SearchDistribution,
    batch: CandidateBatch,
    costs=None,
    eta_mu: float | None = None,
    eta_sigma: float | None = None,
) -> SearchDistribution:
    """Natural-gradient step from the costs of ``batch``; returns a new distribution."""
    costs = np.asarray(batch.costs if costs is None else costs, dtype=np.float64)
    if costs.shape != (len(batch),):
        raise ValueError(f"expected {len(batch)} costs, got shape {costs.shape}")
    if not np.all(np.isfinite(costs)):
        bad = np.flatnonzero(~np.isfinite(costs))
        raise NumericalError(f"generation {dist.generation}: non-finite cost for candidates {bad.tolist()}")
    d_mu, d_sigma = learning_rates(dist.dim)
    eta_mu = d_mu if eta_mu is None else eta_mu
    eta_sigma = d_sigma if eta_sigma is None else eta_sigma
    u = utilities_for(costs)
    grad_mu = u @ batch.noise
    grad_sigma = u @ (batch.noise**2 - 1.0)
    mu = dist.mu + eta_mu * dist.sigma * grad_mu
    sigma = dist.sigma * np.exp(0.5 * eta_sigma * grad_sigma)
    return SearchDistribution(mu, sigma, dist.generation + 1)


def minimize(
    cost: Callable[[np.ndarray], float],
    dist: SearchDistribution,
    pop: int,
    generations: int,
    seed: int = 0,
    target: float | None = None,
) -> tuple[SearchDistribution, list[dict]]:
    """Run SNES on ``cost`` for up to ``generations`` generations.

    Generation ``g`` samples from stream ``(seed, g)``, so the trajectory is
    fully determined by the seed and the starting distribution. Stops early
    once ``cost(mu)`` falls below ``target``.
    """
    history = []
    for _ in range(generations):
        batch = sample(dist, pop, RngStream(seed, dist.generation))
        batch.costs = np.array([cost(theta) for theta in batch.params])
        dist = update(dist, batch)
        at_mu = float(cost(dist.mu))
        history.append({
            "generation": dist.generation,
            "mean_cost": float(batch.costs.mean()),
            "best_cost": float(batch.costs.min()),
            "mu_cost": at_mu,
        })
        if target is not None and at_mu < target:
            break
    return dist, history


# --------------------------------------------------------------------------
# Checkpoints

_MAGIC = b"SNES"
_VERSION = 1
_HEADER = struct.Struct("<IQQQ")  # version, d, p, generation


def save(dist: SearchDistribution, path, pop: int = 0, rng: RngStream | None = None) -> None:
    """Write ``dist`` plus the population size and RNG position."""
    state = rng.get_state() if rng is not None else np.zeros(13, dtype=np.uint64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_HEADER.pack(_VERSION, dist.dim, pop, dist.generation))
        fh.write(dist.mu.astype("<f8").tobytes())
        fh.write(dist.sigma.astype("<f8").tobytes())
        fh.write(struct.pack("<B", rng is not None))
        fh.write(state.astype("<u8").tobytes())


def load(path) -> tuple[SearchDistribution, int, RngStream | None]:
    """Inverse of :func:`save`: ``(dist, pop, rng)``."""
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, not an SNES checkpoint")
    if len(blob) < 4 + _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    version, d, pop, gen = _HEADER.unpack_from(blob, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + _HEADER.size
    need = off + 16 * d + 1 + 8 * 13
    if len(blob) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(blob)}")
    mu = np.frombuffer(blob, "<f8", d, off).astype(np.float64)
    sigma = np.frombuffer(blob, "<f8", d, off + 8 * d).astype(np.float64)
    has_rng = blob[off + 16 * d]
    state = np.frombuffer(blob, "<u8", 13, off + 16 * d + 1)
    rng = RngStream.from_state(state) if has_rng else None
    return SearchDistribution(mu, sigma, gen), pop, rng


# --------------------------------------------------------------------------
# Benchmark functions


def sphere(x) -> float:
    x = np.asarray(x)
    return float(np.dot(x, x))


def rosenbrock(x) -> float:
    x = np.asarray(x)
    return float(np.sum(100.0 * (x[1:] - x[:-1] ** 2) ** 2 + (1.0 - x[:-1]) ** 2))
