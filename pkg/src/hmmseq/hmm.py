"""Latent-state machinery shared by the 2-state magnitude process and the
3-state differential process: finite-mixture and stationary-HMM chain laws,
single-site conditional priors, and conjugate Dirichlet updates of the
weight/transition parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FMM = "fmm"
HMM = "hmm"


class StateModelError(ValueError):
    pass


@dataclass
class StateModel:
    """A latent-state prior over m states (m = 2 or 3).

    ``kind`` selects between independent draws from ``weights`` (finite
    mixture) and a stationary Markov chain with transition matrix ``trans``.
    ``nu``/``kappa2`` hold the per-state normal emission parameters of the
    value attached to each state.
    """

    kind: str
    m: int
    weights: np.ndarray | None = None
    trans: np.ndarray | None = None
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kappa2: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.kind not in (FMM, HMM):
            raise StateModelError(f"unknown state model kind {self.kind!r}")
        if self.m not in (2, 3):
            raise StateModelError(f"m must be 2 or 3, got {self.m}")
        if self.kind == FMM:
            self.weights = np.asarray(self.weights, dtype=float)
            if self.weights.shape != (self.m,):
                raise StateModelError("weights must have length m")
        else:
            self.trans = np.asarray(self.trans, dtype=float)
            if self.trans.shape != (self.m, self.m):
                raise StateModelError("trans must be m x m")
        self.nu = np.asarray(self.nu, dtype=float)
        self.kappa2 = np.asarray(self.kappa2, dtype=float)
        self.validate()

    def validate(self):
        if self.kind == FMM:
            if np.any(self.weights < 0):
                raise StateModelError("mixture weights must be nonnegative")
            if abs(self.weights.sum() - 1.0) > 1e-12:
                raise StateModelError("mixture weights must sum to 1")
        else:
            if np.any(self.trans < 0):
                raise StateModelError("transition entries must be nonnegative")
            if np.any(np.abs(self.trans.sum(axis=1) - 1.0) > 1e-12):
                raise StateModelError("transition rows must sum to 1")
        if self.nu.size and self.nu.shape != (self.m,):
            raise StateModelError("nu must have length m")
        if self.kappa2.size:
            if self.kappa2.shape != (self.m,):
                raise StateModelError("kappa2 must have length m")
            if np.any(self.kappa2 < 0):
                raise StateModelError("emission variances must be >= 0")

    def stationary(self) -> np.ndarray:
        """Marginal state distribution: weights for FMM, pi for HMM."""
        if self.kind == FMM:
            return self.weights.copy()
        return stationary_distribution(self.trans)


def stationary_distribution(trans: np.ndarray) -> np.ndarray:
    """Solve pi' T = pi', sum(pi) = 1 for a row-stochastic T.

    Requires the chain to be irreducible and aperiodic; this is checked by
    looking for a power of T (up to m^2) with all entries positive.
    """
    trans = np.asarray(trans, dtype=float)
    m = trans.shape[0]
    if trans.shape != (m, m):
        raise StateModelError("transition matrix must be square")
    if np.any(trans < 0) or np.any(np.abs(trans.sum(axis=1) - 1.0) > 1e-9):
        raise StateModelError("transition matrix must be row-stochastic")

    power = trans.copy()
    for _ in range(m * m):
        if np.all(power > 0):
            break
        power = power @ trans
    else:
        raise StateModelError("transition matrix is reducible or periodic")

    # pi solves (T' - I) pi = 0; replace one equation with the normalization.
    a = trans.T - np.eye(m)
    a[-1, :] = 1.0
    b = np.zeros(m)
    b[-1] = 1.0
    pi = np.linalg.solve(a, b)
    if np.any(pi < -1e-12):
        raise StateModelError("stationary solve produced negative mass")
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def conditional_state_prior(seq: np.ndarray, i: int, model: StateModel) -> np.ndarray:
    """P(state at position i | all other states) under the chain law.

    States are 1-based. For an FMM this is just the weight vector; for an
    HMM it is the normalized product of the incoming and outgoing transition
    probabilities (one-sided at the chromosome ends, with the stationary
    distribution standing in on the left).
    """
    seq = np.asarray(seq)
    n = seq.shape[0]
    if not 0 <= i < n:
        raise IndexError(f"position {i} out of range for sequence of length {n}")
    if model.kind == FMM:
        return model.weights.copy()

    trans = model.trans
    if n == 1:
        p = stationary_distribution(trans)
    elif i == 0:
        p = stationary_distribution(trans) * trans[:, seq[1] - 1]
    elif i == n - 1:
        p = trans[seq[n - 2] - 1, :].copy()
    else:
        p = trans[seq[i - 1] - 1, :] * trans[:, seq[i + 1] - 1]
    total = p.sum()
    if total <= 0:
        raise StateModelError("conditional state prior has zero mass")
    return p / total


def log_joint_states(seq: np.ndarray, model: StateModel) -> float:
    """Log probability of a full 1-based state sequence under the chain law."""
    seq = np.asarray(seq)
    if seq.size == 0:
        return 0.0
    if np.any(seq < 1) or np.any(seq > model.m):
        raise StateModelError("state values out of range")
    if model.kind == FMM:
        return float(np.log(model.weights[seq - 1]).sum())
    pi = stationary_distribution(model.trans)
    total = np.log(pi[seq[0] - 1])
    if seq.size > 1:
        total += np.log(model.trans[seq[:-1] - 1, seq[1:] - 1]).sum()
    return float(total)


def update_state_model_params(
    seq: np.ndarray,
    model: StateModel,
    alpha: float | np.ndarray = 1.0,
    rng: np.random.Generator | None = None,
) -> StateModel:
    """Conjugate Dirichlet refresh of the mixture weights / transition rows.

    FMM: weights ~ Dirichlet(alpha + state occupancy counts).
    HMM: row v   ~ Dirichlet(alpha_v + transition counts out of v).
    Emission parameters are left untouched.
    """
    rng = np.random.default_rng() if rng is None else rng
    seq = np.asarray(seq)
    m = model.m
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (m,))
    if np.any(alpha <= 0):
        raise StateModelError("Dirichlet concentration must be positive")

    if model.kind == FMM:
        counts = np.bincount(seq - 1, minlength=m).astype(float)
        weights = rng.dirichlet(alpha + counts)
        return StateModel(FMM, m, weights=weights, nu=model.nu, kappa2=model.kappa2)

    counts = np.zeros((m, m))
    if seq.size > 1:
        np.add.at(counts, (seq[:-1] - 1, seq[1:] - 1), 1.0)
    trans = np.empty((m, m))
    for v in range(m):
        trans[v] = rng.dirichlet(alpha + counts[v])
    return StateModel(HMM, m, trans=trans, nu=model.nu, kappa2=model.kappa2)
