"""Distributions over depth configurations, sampled once per training iteration."""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .arch import DepthConfig, Scheme
from .errors import ConfigError

FIXED = "fixed"
FULL_ELSE_UNIFORM = "full_else_uniform"
CATEGORICAL = "categorical"


def _exact(x) -> Fraction:
    # str() round-trips floats to their shortest decimal, so 0.2 means 1/5
    return Fraction(str(x)) if isinstance(x, float) else Fraction(x)


def link_budget_bits(throughput_bps, deadline_s) -> int:
    """``floor(throughput * deadline)`` with exact decimal arithmetic."""
    return math.floor(_exact(throughput_bps) * _exact(deadline_s))


@dataclass(frozen=True)
class DepthPolicy:
    scheme: Scheme
    total_units: int
    kind: str
    n: int = 0
    p_full: float = 1.0
    weights: tuple[float, ...] = ()  # weights[i] is the mass on n = i + 1

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        N = self.total_units
        if N < 1:
            raise ConfigError("policy needs at least one unit")
        if self.kind == FIXED:
            if not 0 <= self.n <= N:
                raise ConfigError(f"fixed depth {self.n} outside [0, {N}]")
        elif self.kind == FULL_ELSE_UNIFORM:
            if not 0.0 <= self.p_full <= 1.0:
                raise ConfigError(f"p_full must lie in [0, 1], got {self.p_full}")
        elif self.kind == CATEGORICAL:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (N,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigError("categorical weights must be N nonnegative values summing to 1")
            object.__setattr__(self, "weights", tuple(float(v) for v in w))
        else:
            raise ConfigError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def fixed(cls, scheme, n: int, total_units: int) -> DepthPolicy:
        return cls(scheme, total_units, FIXED, n=n)

    @classmethod
    def full_else_uniform(cls, scheme, p_full: float, total_units: int) -> DepthPolicy:
        return cls(scheme, total_units, FULL_ELSE_UNIFORM, p_full=p_full)

    @classmethod
    def categorical(cls, scheme, weights, total_units: int) -> DepthPolicy:
        return cls(scheme, total_units, CATEGORICAL, weights=tuple(weights))

    def probabilities(self) -> np.ndarray:
        """Mass on n = 0..N."""
        N = self.total_units
        p = np.zeros(N + 1)
        if self.kind == FIXED:
            p[self.n] = 1.0
        elif self.kind == FULL_ELSE_UNIFORM:
            if N == 1:
                p[1] = 1.0
            else:
                p[N] = self.p_full
                p[1:N] += (1.0 - self.p_full) / (N - 1)
        else:
            p[1:] = self.weights
        return p

    def expected_units(self) -> float:
        p = self.probabilities()
        return float(np.dot(np.arange(p.size), p))


def sample(policy: DepthPolicy, rng: np.random.Generator) -> DepthConfig:
    N = policy.total_units
    if policy.kind == FIXED:
        n = policy.n
    elif policy.kind == FULL_ELSE_UNIFORM:
        if N == 1 or rng.random() < policy.p_full:
            n = N
        else:
            n = int(rng.integers(1, N))
    else:
        cdf = np.cumsum(policy.weights)
        i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        n = min(i, N - 1) + 1
    return DepthConfig(policy.scheme, n)


def _categorical_from_counts(scheme, counts: Mapping[int, float], N: int) -> DepthPolicy:
    w = np.zeros(N)
    for n, c in counts.items():
        w[max(n, 1) - 1] += c
    total = w.sum()
    if total <= 0:
        raise ConfigError("frequencies must have positive total")
    return DepthPolicy.categorical(scheme, w / total, N)


def from_throughput(
    throughput_samples: Iterable[float],
    deadline_s: float,
    size_fn: Callable[[int], int],
    scheme,
    total_units: int,
) -> DepthPolicy:
    """Weight each depth by how often it is the largest one deliverable in time.

    Samples whose budget does not even fit the smallest model count towards
    n = 1.
    """
    samples = list(throughput_samples)
    if not samples:
        raise ConfigError("need at least one throughput sample")
    if deadline_s <= 0:
        raise ConfigError("deadline must be positive")
    sizes = [size_fn(n) for n in range(total_units + 1)]
    counts: Counter[int] = Counter()
    for t in samples:
        budget = link_budget_bits(t, deadline_s)
        fits = [n for n, s in enumerate(sizes) if s <= budget]
        counts[max(fits) if fits else 0] += 1
    return _categorical_from_counts(scheme, counts, total_units)


def from_size_requests(
    histogram: Mapping[int, float],
    size_fn: Callable[[int], int],
    scheme,
    total_units: int,
) -> DepthPolicy:
    """Weight each depth by how often it is the smallest one meeting a size request."""
    if not histogram:
        raise ConfigError("size-request histogram is empty")
    sizes = [size_fn(n) for n in range(1, total_units + 1)]
    counts: Counter[int] = Counter()
    for requested, freq in histogram.items():
        if freq < 0:
            raise ConfigError("frequencies must be nonnegative")
        n = next((i + 1 for i, s in enumerate(sizes) if s >= requested), total_units)
        counts[n] += freq
    return _categorical_from_counts(scheme, counts, total_units)


POLICY_NAMES = ("baseline", "coml-05", "coml-03", "blockcoml-05", "blockcoml-03")


def named_policy(name: str, total_units: int, p_full: float | None = None) -> DepthPolicy:
    """Policies by their experiment names, e.g. ``coml-05`` or ``baseline``."""
    name = name.lower()
    if name == "baseline":
        return DepthPolicy.fixed(Scheme.COML, total_units, total_units)
    scheme_name, _, tag = name.partition("-")
    scheme = Scheme.parse(scheme_name)
    if p_full is None:
        if tag not in ("05", "03"):
            raise ConfigError(f"unknown policy {name!r}; expected one of {POLICY_NAMES}")
        p_full = int(tag) / 10
    return DepthPolicy.full_else_uniform(scheme, p_full, total_units)
