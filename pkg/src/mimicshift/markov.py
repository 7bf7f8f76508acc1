"""First-order Markov chains over condition classes: the attacker's control knob."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.sparse.csgraph import connected_components

TOL = 1e-9


class MarkovValidationError(ValueError):
    pass


@dataclass(frozen=True)
class MarkovParams:
    """Initial distribution ``pi`` over K classes and row-stochastic ``trans``."""

    pi: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pi", np.asarray(self.pi, dtype=np.float64))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64))

    @property
    def n_classes(self):
        return self.pi.shape[0]

    def to_dict(self):
        return {"pi": self.pi.tolist(), "trans": self.trans.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["pi"], d["trans"])

    def __eq__(self, other):
        if not isinstance(other, MarkovParams):
            return NotImplemented
        return np.array_equal(self.pi, other.pi) and np.array_equal(self.trans, other.trans)

    def __hash__(self):
        return hash((self.pi.tobytes(), self.trans.tobytes()))


# Attack distribution settings A0, A1, A2 used for every dataset.
PUBLISHED_PROFILES = (
    MarkovParams([0.9, 0.05, 0.05],
                 [[0.98, 0.01, 0.01],
                  [0.1, 0.6, 0.3],
                  [0.0, 0.1, 0.9]]),
    MarkovParams([0.05, 0.05, 0.9],
                 [[0.9, 0.1, 0.0],
                  [0.1, 0.6, 0.3],
                  [0.03, 0.02, 0.95]]),
    MarkovParams([0.05, 0.9, 0.05],
                 [[0.9, 0.1, 0.0],
                  [0.1, 0.7, 0.2],
                  [0.0, 0.1, 0.9]]),
)


@dataclass(frozen=True)
class ShiftProfile:
    """Candidate parameter settings; one is drawn uniformly (with replacement) per interval."""

    profiles: tuple

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        if not self.profiles:
            raise MarkovValidationError("shift profile needs at least one setting")
        k = self.profiles[0].n_classes
        for i, p in enumerate(self.profiles):
            try:
                validate_params(p)
            except MarkovValidationError as exc:
                raise MarkovValidationError(f"profile {i}: {exc}") from None
            if p.n_classes != k:
                raise MarkovValidationError(f"profile {i} has {p.n_classes} classes, expected {k}")

    def __len__(self):
        return len(self.profiles)

    def __getitem__(self, i):
        return self.profiles[i]


def validate_params(params):
    """Raise :class:`MarkovValidationError` naming the first offending entry."""
    pi, A = params.pi, params.trans
    if pi.ndim != 1:
        raise MarkovValidationError("pi must be a vector")
    K = pi.shape[0]
    if A.shape != (K, K):
        raise MarkovValidationError(f"trans has shape {A.shape}, expected ({K}, {K})")
    if not (np.all(np.isfinite(pi)) and np.all(np.isfinite(A))):
        raise MarkovValidationError("non-finite entry")
    for i in range(K):
        if pi[i] < 0:
            raise MarkovValidationError(f"pi[{i}] is negative ({pi[i]:g})")
    if abs(pi.sum() - 1.0) > TOL:
        raise MarkovValidationError(f"pi sums to {pi.sum():g}")
    for i in range(K):
        for j in range(K):
            if A[i, j] < 0:
                raise MarkovValidationError(f"trans[{i}][{j}] is negative ({A[i, j]:g})")
        s = A[i].sum()
        if abs(s - 1.0) > TOL:
            raise MarkovValidationError(f"row {i} sums to {s:g}")
    return True


def _draw(cdf, u):
    # inverse-CDF draw per row; cdf (n, K), u (n,)
    # cdf rows end at exactly 1 and u < 1, so zero-mass tail classes are never hit
    return (u[:, None] >= cdf).sum(axis=1)


def sample_class_sequences(params, n, L, rng):
    """Draw ``n`` class sequences of length ``L``; returns an (n, L) int array."""
    if L < 1:
        raise ValueError("L must be >= 1")
    rng = np.random.default_rng(rng)
    pi_cdf = np.cumsum(params.pi)
    pi_cdf /= pi_cdf[-1]
    A_cdf = np.cumsum(params.trans, axis=1)
    A_cdf /= A_cdf[:, -1:]
    out = np.empty((n, L), dtype=np.int64)
    u = rng.random((n, L))
    out[:, 0] = _draw(np.broadcast_to(pi_cdf, (n, pi_cdf.size)), u[:, 0])
    for t in range(1, L):
        out[:, t] = _draw(A_cdf[out[:, t - 1]], u[:, t])
    return out


def sample_class_sequence(params, L, seed):
    validate_params(params)
    return sample_class_sequences(params, 1, L, seed)[0]


class TransitionEstimate(NamedTuple):
    matrix: np.ndarray
    unobserved: np.ndarray  # rows with no transitions, filled uniform


def empirical_transition(sequences, n_classes=None):
    """Row-normalised transition counts pooled over ``sequences``."""
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
    if not seqs or all(s.size == 0 for s in seqs):
        raise ValueError("no sequences given")
    K = n_classes or int(max(s.max() for s in seqs if s.size)) + 1
    counts = np.zeros((K, K))
    for s in seqs:
        if s.size > 1:
            np.add.at(counts, (s[:-1], s[1:]), 1)
    rows = counts.sum(axis=1)
    unobserved = rows == 0
    mat = np.where(unobserved[:, None], 1.0 / K, counts / np.where(unobserved, 1, rows)[:, None])
    return TransitionEstimate(mat, unobserved)


class StationaryResult(NamedTuple):
    distribution: np.ndarray
    irreducible: bool
    absorbing: np.ndarray  # per-class flag: the class is a closed singleton


def stationary_distribution(params, tol=1e-10, max_iter=100_000):
    """Left fixed point of ``trans`` by power iteration started from ``pi``.

    Iterates the lazy chain ``(A + I) / 2``, which shares the fixed points of
    ``A`` but cannot oscillate on periodic chains. For reducible chains the
    limit depends on ``pi`` and ``irreducible`` is reported False.
    """
    validate_params(params)
    A = params.trans
    K = A.shape[0]
    n_comp, _ = connected_components(A > 0, directed=True, connection="strong")
    absorbing = np.isclose(np.diag(A), 1.0)
    lazy = 0.5 * (A + np.eye(K))
    v = params.pi.copy()
    for _ in range(max_iter):
        nxt = v @ lazy
        if np.abs(nxt - v).max() < tol:
            v = nxt / nxt.sum()
            return StationaryResult(v, n_comp == 1, absorbing)
        v = nxt
    raise RuntimeError(f"power iteration did not converge in {max_iter} iterations")
