"""Mergeable moment accumulators and paired Monte Carlo reports."""

from dataclasses import asdict, dataclass, field
import math

import numpy as np


class EstimatorState:
    """Count, mean vector and co-moment matrix of a stream of vectors.

    Two states merge exactly (Chan et al. pairwise update), so a parallel
    ensemble can be reduced batch by batch.
    """

    __slots__ = ("count", "mean", "M2")

    def __init__(self, dim, count=0, mean=None, M2=None):
        self.count = int(count)
        self.mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=float)
        self.M2 = np.zeros((dim, dim)) if M2 is None else np.asarray(M2, dtype=float)

    @property
    def dim(self):
        return self.mean.shape[0]

    @classmethod
    def from_samples(cls, samples):
        s = np.asarray(samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        n = s.shape[0]
        if n == 0:
            return cls(s.shape[1])
        mean = s.mean(axis=0)
        d = s - mean
        return cls(s.shape[1], n, mean, d.T @ d)

    def merge(self, other):
        if other.count == 0:
            return self.copy()
        if self.count == 0:
            return other.copy()
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.M2 + other.M2 + np.outer(delta, delta) * (self.count * other.count / n)
        return EstimatorState(self.dim, n, mean, m2)

    __add__ = merge

    def copy(self):
        return EstimatorState(self.dim, self.count, self.mean.copy(), self.M2.copy())

    def covariance(self):
        if self.count < 2:
            return np.full((self.dim, self.dim), np.nan)
        return self.M2 / (self.count - 1)

    def variance(self):
        return np.diag(self.covariance())

    def stderr(self):
        return np.sqrt(self.variance() / self.count)

    def __repr__(self):
        return f"EstimatorState(count={self.count}, mean={self.mean})"


def merge(a, b):
    return a.merge(b)


@dataclass
class SideSummary:
    mean: float
    stderr: float
    n: int


@dataclass
class MCReport:
    """Paired comparison of two estimators computed on common paths."""

    name: str
    lhs: SideSummary
    rhs: SideSummary
    cov: float
    z: float
    threshold: float
    excluded: int = 0
    exclusion_budget: float = 1e-3
    meta: dict = field(default_factory=dict)

    @property
    def exclusion_ok(self):
        total = self.lhs.n + self.excluded
        return total > 0 and self.excluded <= self.exclusion_budget * total

    @property
    def passed(self):
        return bool(self.exclusion_ok and np.isfinite(self.z) and self.z <= self.threshold)

    @property
    def verdict(self):
        if not self.exclusion_ok:
            return "fail (exclusions)"
        return "pass" if self.passed else "fail"

    def record(self):
        out = asdict(self)
        out["passed"] = self.passed
        out["verdict"] = self.verdict
        return out


def paired_report(name, state, i, j, threshold=3.0, excluded=0, budget=1e-3, meta=None):
    """Report for columns ``i`` (left) and ``j`` (right) of a merged state."""
    n = state.count
    cov = state.covariance()
    se_l = math.sqrt(cov[i, i] / n) if n > 1 else float("nan")
    se_r = math.sqrt(cov[j, j] / n) if n > 1 else float("nan")
    c = cov[i, j] / n if n > 1 else float("nan")
    diff_var = max(cov[i, i] + cov[j, j] - 2.0 * cov[i, j], 0.0) / n if n > 1 else float("nan")
    gap = abs(state.mean[i] - state.mean[j])
    if diff_var > 0:
        z = gap / math.sqrt(diff_var)
    else:
        # identical columns: only an exact tie counts as agreement
        z = 0.0 if gap == 0.0 else float("inf")
    return MCReport(name, SideSummary(float(state.mean[i]), se_l, n),
                    SideSummary(float(state.mean[j]), se_r, n), float(c), float(z),
                    threshold, excluded, budget, dict(meta or {}))


def one_sample_z(mean, stderr, target):
    if stderr > 0:
        return abs(mean - target) / stderr
    return 0.0 if mean == target else float("inf")
