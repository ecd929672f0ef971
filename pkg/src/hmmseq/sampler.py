"""MCMC engine for the hierarchical Poisson model: Laplace-approximation
Metropolis-Hastings updates of the latent (state, value) pairs, subject
random-effect updates for paired designs, a restricted bivariate-normal
update of the expression-level means, and conjugate Gibbs updates of the
remaining hyperparameters.

Per-site proposals follow the working-value construction: linearizing the
Poisson log-likelihood at the current value lambda* gives pseudo-data
w = log lambda* + (Y - lambda*)/lambda* with precision lambda*, which
collapses across a gene's observations into a single sufficient (w*,
precision) pair. States are proposed from the conditional chain prior times
the Gaussian evidence of w*, values from the matching conjugate posterior,
and the pair is accepted against the exact Poisson target with the reverse
proposal re-derived at the proposed point.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import gammaln
from scipy.special import ndtr, ndtri

from .hmm import (
    FMM,
    HMM,
    StateModel,
    stationary_distribution,
    update_state_model_params,
)
from .ingest import ChromosomeBlock, CountMatrix, upper_quartile_effects

U1 = -0.5 * math.log(2.0)
L3 = 0.5 * math.log(2.0)

MODEL_CHOICES = ("FF", "FH", "HF", "HH")

VAR_FLOOR = 1e-12
VAR_CEIL = 1e12


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    iterations: int = 100_000
    burnin: int = 50_000
    thin: int = 10
    delta_sep: float = 0.5
    a_tau: float | tuple = 2.0
    b_tau: float | tuple = 0.05
    sigma_eps2: float = 0.0
    seed: int = 0
    # which blocks of the sampler run; fixing pieces at their initial values
    # is needed for calibration studies against partial oracles
    update_beta: bool = True
    update_hyperparams: bool = True
    update_state_models: bool = True
    check_invariants: bool = False

    def __post_init__(self):
        self.a_tau = tuple(float(v) for v in np.broadcast_to(self.a_tau, (3,)))
        self.b_tau = tuple(float(v) for v in np.broadcast_to(self.b_tau, (3,)))
        self.validate()

    def validate(self):
        if self.iterations < 1:
            raise SamplerError("iterations must be >= 1")
        if not 0 <= self.burnin < self.iterations:
            raise SamplerError("burnin must lie in [0, iterations)")
        if self.thin < 1:
            raise SamplerError("thin must be >= 1")
        if self.delta_sep <= 0:
            raise SamplerError("delta_sep must be positive")
        if min(self.a_tau) <= 0 or min(self.b_tau) <= 0:
            raise SamplerError("tau2 prior parameters must be positive")
        if self.sigma_eps2 < 0:
            raise SamplerError("sigma_eps2 must be >= 0")


def _copy_model(model: StateModel) -> StateModel:
    return StateModel(
        model.kind,
        model.m,
        weights=None if model.weights is None else model.weights.copy(),
        trans=None if model.trans is None else model.trans.copy(),
        nu=model.nu.copy(),
        kappa2=model.kappa2.copy(),
    )


@dataclass
class ChainState:
    beta: np.ndarray
    delta: np.ndarray
    s: np.ndarray
    h: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    phi: np.ndarray
    tau2: np.ndarray
    beta_model: StateModel
    delta_model: StateModel
    eps: np.ndarray | None = None

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)
        self.s = np.asarray(self.s, dtype=np.int64)
        self.h = np.asarray(self.h, dtype=np.int64)
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma2 = np.asarray(self.sigma2, dtype=float)
        self.phi = np.asarray(self.phi, dtype=float)
        self.tau2 = np.asarray(self.tau2, dtype=float)
        if self.eps is not None:
            self.eps = np.asarray(self.eps, dtype=float)

    def sync_emissions(self):
        self.beta_model.nu = self.mu.copy()
        self.beta_model.kappa2 = self.sigma2.copy()
        self.delta_model.nu = np.array([self.phi[0], 0.0, self.phi[1]])
        self.delta_model.kappa2 = self.tau2.copy()

    def validate(self, delta_sep: float):
        if not (self.mu[0] <= self.mu[1] - delta_sep):
            raise SamplerError(
                f"mu1 must not exceed mu2 - {delta_sep}, got {self.mu}"
            )
        if not self.phi[0] < U1:
            raise SamplerError(f"phi1 must lie below {U1:.4f}, got {self.phi[0]}")
        if not self.phi[1] > L3:
            raise SamplerError(f"phi3 must lie above {L3:.4f}, got {self.phi[1]}")
        if np.any(self.sigma2 <= 0) or np.any(self.tau2 <= 0):
            raise SamplerError("variances must be positive")
        if np.any(self.s < 1) or np.any(self.s > 2):
            raise SamplerError("s states out of range")
        if np.any(self.h < 1) or np.any(self.h > 3):
            raise SamplerError("h states out of range")
        for name in ("beta", "delta", "mu", "sigma2", "phi", "tau2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise SamplerError(f"non-finite values in {name}")
        if self.eps is not None and not np.all(np.isfinite(self.eps)):
            raise SamplerError("non-finite values in eps")

    def copy(self) -> "ChainState":
        return ChainState(
            self.beta.copy(),
            self.delta.copy(),
            self.s.copy(),
            self.h.copy(),
            self.mu.copy(),
            self.sigma2.copy(),
            self.phi.copy(),
            self.tau2.copy(),
            _copy_model(self.beta_model),
            _copy_model(self.delta_model),
            None if self.eps is None else self.eps.copy(),
        )


@dataclass
class WorkingSite:
    xi: np.ndarray
    z: np.ndarray
    lambda_star: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        self.lambda_star = np.asarray(self.lambda_star, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if np.any(self.lambda_star <= 0):
            raise SamplerError("lambda_star must be positive")


@dataclass
class CollapsedSite:
    w_star: float
    precision: float

    def __post_init__(self):
        if not self.precision > 0:
            raise SamplerError("precision must be positive")


class _Design:
    """Per-block observation layout shared by all update steps."""

    def __init__(self, block: ChromosomeBlock):
        treatments = np.array([lib.treatment for lib in block.libraries])
        if not (np.any(treatments == 1) and np.any(treatments == 2)):
            raise SamplerError("both treatments must be present")
        self.y = np.asarray(block.counts, dtype=float)
        self.sign = np.where(treatments == 2, 1.0, -1.0)
        self.rho = np.asarray(block.rho, dtype=float)
        subjects = [lib.subject for lib in block.libraries]
        if subjects and subjects[0] is not None:
            ids = sorted(set(subjects))
            self.subjects = ids
            self.subj_of = np.array([ids.index(s) for s in subjects])
            cols = np.empty((len(ids), 2), dtype=np.int64)
            for k, sid in enumerate(ids):
                for j in (1, 2):
                    (col,) = [
                        l
                        for l, lib in enumerate(block.libraries)
                        if lib.subject == sid and lib.treatment == j
                    ]
                    cols[k, j - 1] = col
            self.subj_cols = cols
        else:
            self.subjects = None
            self.subj_of = None
            self.subj_cols = None

    @property
    def paired(self) -> bool:
        return self.subj_cols is not None


def chrom_seed(seed: int, chromosome: str) -> int:
    """Deterministic per-chromosome RNG seed (crc32, not the salted hash())."""
    return (int(seed) ^ zlib.crc32(str(chromosome).encode())) & 0xFFFFFFFF


def _norm_lpdf(x, mean, var):
    return -0.5 * ((x - mean) ** 2 / var + np.log(2.0 * np.pi * var))


def _laplace(y, xi, z, theta):
    """Working-value linearization at theta; z entries are +-1 throughout."""
    theta = np.asarray(theta, dtype=float)
    log_lam = xi + z * theta[..., None]
    lam = np.exp(log_lam)
    prec = (z * z * lam).sum(axis=-1)
    w_star = theta + (z * (y - lam)).sum(axis=-1) / prec
    return log_lam, lam, prec, w_star


def _moments(w_star, prec, nu, kappa2):
    """Per-state log evidence of w* and the conjugate posterior of theta."""
    var = kappa2 + 1.0 / prec[..., None]
    ldens = _norm_lpdf(w_star[..., None], nu, var)
    v = 1.0 / (1.0 / kappa2 + prec[..., None])
    m = v * (nu / kappa2 + (prec * w_star)[..., None])
    return ldens, m, v


def _eps_term(state: ChainState, des: _Design):
    if state.eps is None or des.subj_of is None:
        return 0.0
    return state.eps[:, des.subj_of]


def _target_parts(target: str, state: ChainState, des: _Design):
    eps_term = _eps_term(state, des)
    if target == "delta":
        xi = state.beta[:, None] + eps_term + des.rho
        z = np.broadcast_to(des.sign, des.y.shape)
        return des.y, xi, z, state.delta, state.h, state.delta_model
    if target == "beta":
        xi = des.sign * state.delta[:, None] + eps_term + des.rho
        z = np.ones_like(des.y)
        return des.y, xi, z, state.beta, state.s, state.beta_model
    raise SamplerError(f"unknown target {target!r}")


def working_decomposition(
    target: str,
    i: int,
    state: ChainState,
    block: ChromosomeBlock,
    subject: int | None = None,
) -> WorkingSite:
    """Working values for one MH site: (h_i, delta_i), (s_i, beta_i), or
    eps_{i,subject}."""
    des = _Design(block)
    if target == "eps":
        if state.eps is None or not des.paired:
            raise SamplerError("eps target requires a paired design")
        if subject is None:
            raise SamplerError("eps target requires a subject index")
        cols = des.subj_cols[subject]
        y = des.y[i, cols]
        xi = state.beta[i] + des.sign[cols] * state.delta[i] + des.rho[cols]
        z = np.ones(2)
        theta = state.eps[i, subject]
    else:
        y_all, xi_all, z_all, vals, _, _ = _target_parts(target, state, des)
        y, z = y_all[i], z_all[i]
        xi = np.broadcast_to(xi_all[i], y.shape).astype(float)
        theta = vals[i]
    log_lam = xi + z * theta
    lam = np.exp(log_lam)
    w = log_lam + (y - lam) / lam
    return WorkingSite(xi, z, lam, w)


def collapse_sufficient(site: WorkingSite) -> CollapsedSite:
    """Precision-weighted reduction of a site's working values."""
    if site.w.size == 0:
        raise SamplerError("site has no observations")
    precision = (site.z**2 * site.lambda_star).sum()
    w_star = (site.lambda_star * site.z * (site.w - site.xi)).sum() / precision
    return CollapsedSite(float(w_star), float(precision))


def state_emission_likelihood(cs: CollapsedSite, model: StateModel) -> np.ndarray:
    """Density of w* under each state: Normal(nu_t, kappa_t^2 + 1/precision)."""
    var = model.kappa2 + 1.0 / cs.precision
    return np.exp(-0.5 * (cs.w_star - model.nu) ** 2 / var) / np.sqrt(
        2.0 * np.pi * var
    )


def _site_cache(target, state, des, idx, z_norm):
    """All per-site quantities that do not depend on neighbor states.

    Only the conditional chain prior couples sites within a sweep, so the
    Laplace construction (forward and reverse) is precomputed for every gene
    and every candidate state before the sequential accept loop.
    """
    y, xi, z, vals, seq, model = _target_parts(target, state, des)
    y, z = y[idx], z[idx]
    xi = np.broadcast_to(xi, y.shape)[idx] if np.ndim(xi) == 0 else xi[idx]
    theta = vals[idx]
    tcur = seq[idx] - 1
    nu, kappa2 = model.nu, model.kappa2

    log_lam, lam, prec, w_star = _laplace(y, xi, z, theta)
    ldens, m, v = _moments(w_star, prec, nu, kappa2)
    dens = np.exp(ldens - ldens.max(-1, keepdims=True))
    cand = m + np.sqrt(v) * z_norm[:, None]

    log_lam2, lam2, prec2, w_star2 = _laplace(
        y[:, None, :], xi[:, None, :], z[:, None, :], cand
    )
    ldens2, m2, v2 = _moments(w_star2, prec2, nu, kappa2)
    dens2 = np.exp(ldens2 - ldens2.max(-1, keepdims=True))

    n, nstates = cand.shape
    rows = np.arange(n)[:, None]
    cols = np.arange(nstates)[None, :]
    m2c = m2[rows, cols, tcur[:, None]]
    v2c = v2[rows, cols, tcur[:, None]]

    return {
        "tcur": tcur,
        "dens": dens,
        "dens2": dens2,
        "cand": cand,
        "ll_cur": (y * log_lam - lam).sum(-1),
        "ll_cand": (y[:, None, :] * log_lam2 - lam2).sum(-1),
        "lp_cur": _norm_lpdf(theta, nu[tcur], kappa2[tcur]),
        "lp_cand": _norm_lpdf(cand, nu, kappa2),
        "lqf": _norm_lpdf(cand, m, v),
        "lqr": _norm_lpdf(theta[:, None], m2c, v2c),
    }


def _chain_prior_variants(m, kind_hmm, trans, pi, weights, seq0, idx):
    """Conditional state prior at each site for every possible left state.

    The left neighbor is the only quantity a sweep mutates before reaching a
    site (sites are visited in ascending index order, so the right neighbor
    keeps its value from the start of the call). Evaluating all m left-state
    rows up front lets the rest of the update run vectorized; _site_scan
    later picks the realized row.
    """
    npos = idx.size
    if not kind_hmm:
        return np.broadcast_to(weights, (1, npos, m))
    last = seq0.size - 1
    right = np.ones((npos, m))
    inner = idx < last
    if inner.any():
        right[inner] = trans.T[seq0[idx[inner] + 1] - 1]
    cpv = trans[:, None, :] * right[None, :, :]
    first = idx == 0
    if first.any():
        cpv[:, first, :] = pi * right[first]
    return cpv


def _site_outcomes(m, cpv, cache, u_state, lacc):
    """Proposed state, proposed value index, and accept decision per site,
    one row of tables per left-state variant in cpv."""
    dens = cache["dens"]
    dens2 = cache["dens2"]
    tcur = cache["tcur"]
    ll_cur = cache["ll_cur"]
    ll_cand = cache["ll_cand"]
    lp_cur = cache["lp_cur"]
    lp_cand = cache["lp_cand"]
    lqf = cache["lqf"]
    lqr = cache["lqr"]
    nvar = cpv.shape[0]
    npos = tcur.size
    rows = np.arange(npos)
    tpv = np.empty((nvar, npos), dtype=np.int64)
    okv = np.empty((nvar, npos), dtype=bool)
    for v in range(nvar):
        cp = cpv[v]
        p = cp * dens
        acc1 = p[:, 0]
        if m == 2:
            tot = acc1 + p[:, 1] + 0.0
            u = u_state * tot
            tp = (u >= acc1).astype(np.int64)
        else:
            acc2 = acc1 + p[:, 1]
            tot = acc2 + p[:, 2]
            u = u_state * tot
            c1 = u >= acc1
            tp = c1.astype(np.int64) + (c1 & (u >= acc2))
        d2 = dens2[rows, tp]
        p2 = cp * d2
        if m == 2:
            tot2 = p2[:, 0] + p2[:, 1] + 0.0
        else:
            tot2 = p2[:, 0] + p2[:, 1] + p2[:, 2]
        cpc = cp[rows, tcur]
        p2c = p2[rows, tcur]
        with np.errstate(divide="ignore", invalid="ignore"):
            lr = (
                ll_cand[rows, tp]
                + lp_cand[rows, tp]
                + np.log(cp[rows, tp])
                + np.log(p2c / tot2)
                + lqr[rows, tp]
                - ll_cur
                - lp_cur
                - np.log(cpc)
                - np.log(p[rows, tp] / tot)
                - lqf[rows, tp]
            )
            okv[v] = (cpc > 0.0) & (p2c > 0.0) & (lacc < lr)
        tpv[v] = tp
    return tpv, okv


def _site_scan(seq, vals, idx, kind_hmm, tpv, okv, cand):
    """Apply the precomputed per-variant decisions in site order, threading
    each accepted state into the next site's left-neighbor lookup."""
    tps = tpv.tolist()
    oks = okv.tolist()
    cl = cand.tolist()
    accepted = 0
    for j, i in enumerate(idx):
        v = seq[i - 1] - 1 if kind_hmm and i > 0 else 0
        if oks[v][j]:
            t = tps[v][j]
            seq[i] = t + 1
            vals[i] = cl[j][t]
            accepted += 1
    return accepted


def _update_sites(target, state, des, idx, u_state, z_norm, lacc):
    cache = _site_cache(target, state, des, idx, z_norm)
    model = state.delta_model if target == "delta" else state.beta_model
    kind_hmm = model.kind == HMM
    trans = model.trans if kind_hmm else None
    pi = stationary_distribution(model.trans) if kind_hmm else None
    weights = None if kind_hmm else model.weights
    if target == "delta":
        seq0, vals0 = state.h, state.delta
    else:
        seq0, vals0 = state.s, state.beta
    cpv = _chain_prior_variants(model.m, kind_hmm, trans, pi, weights, seq0, idx)
    tpv, okv = _site_outcomes(model.m, cpv, cache, u_state, lacc)
    seq, vals = seq0.tolist(), vals0.tolist()
    accepted = _site_scan(seq, vals, idx.tolist(), kind_hmm, tpv, okv, cache["cand"])
    if target == "delta":
        state.h = np.array(seq, dtype=np.int64)
        state.delta = np.array(vals)
    else:
        state.s = np.array(seq, dtype=np.int64)
        state.beta = np.array(vals)
    return accepted


def mh_update_site(
    target: str,
    i: int,
    state: ChainState,
    block: ChromosomeBlock,
    rng: np.random.Generator,
) -> tuple[ChainState, bool]:
    """One joint (state, value) Metropolis-Hastings update at gene i.

    target "delta" updates (h_i, delta_i), target "beta" updates (s_i,
    beta_i). Consumes exactly three draws: a uniform for the state proposal,
    a normal for the value proposal, and a uniform for the accept decision.
    """
    des = _Design(block)
    u = np.array([rng.random()])
    zn = np.array([rng.standard_normal()])
    la = np.log(np.array([rng.random()]))
    accepted = _update_sites(target, state, des, np.array([i]), u, zn, la)
    return state, bool(accepted)


def log_accept_ratio(
    target: str,
    i: int,
    state: ChainState,
    block: ChromosomeBlock,
    t_prop: int,
    theta_prop: float,
) -> float:
    """Exact MH log-ratio for proposing 1-based state t_prop with value
    theta_prop at gene i (diagnostic mirror of the sweep arithmetic)."""
    des = _Design(block)
    y, xi, z, vals, seq, model = _target_parts(target, state, des)
    y, z = y[i], z[i]
    xi = np.broadcast_to(xi[i], y.shape).astype(float)
    theta = vals[i]
    tc = seq[i] - 1
    tp = t_prop - 1
    nu, kappa2 = model.nu, model.kappa2

    log_lam, lam, prec, w_star = _laplace(y, xi, z, theta)
    ldens, m, v = _moments(w_star, prec, nu, kappa2)
    dens = np.exp(ldens - ldens.max())
    from .hmm import conditional_state_prior

    cp = conditional_state_prior(seq, i, model)
    p = cp * dens

    log_lam2, lam2, prec2, w_star2 = _laplace(y, xi, z, np.float64(theta_prop))
    ldens2, m2, v2 = _moments(w_star2, prec2, nu, kappa2)
    dens2 = np.exp(ldens2 - ldens2.max())
    p2 = cp * dens2

    ll_cur = (y * log_lam - lam).sum()
    ll_prop = (y * log_lam2 - lam2).sum()
    # grouped as forward/reverse pairs so an identity proposal cancels exactly
    return float(
        (ll_prop - ll_cur)
        + (_norm_lpdf(theta_prop, nu[tp], kappa2[tp]) - _norm_lpdf(theta, nu[tc], kappa2[tc]))
        + (math.log(cp[tp]) - math.log(cp[tc]))
        + (math.log(p2[tc] / p2.sum()) - math.log(p[tp] / p.sum()))
        + (_norm_lpdf(theta, m2[tc], v2[tc]) - _norm_lpdf(theta_prop, m[tp], v[tp]))
    )


def _update_eps(state: ChainState, des: _Design, sigma_eps2: float, rng):
    """Vectorized Laplace-MH refresh of all subject effects.

    No latent state and no cross-site coupling, so every (gene, subject)
    pair updates independently given the current beta and delta.
    """
    y = des.y[:, des.subj_cols]
    sign = des.sign[des.subj_cols]
    rho = des.rho[des.subj_cols]
    xi = state.beta[:, None, None] + sign * state.delta[:, None, None] + rho
    theta = state.eps

    zn = rng.standard_normal(theta.shape)
    lacc = np.log(rng.random(theta.shape))

    log_lam = xi + theta[..., None]
    lam = np.exp(log_lam)
    prec = lam.sum(-1)
    w_star = theta + (y - lam).sum(-1) / prec
    v = 1.0 / (1.0 / sigma_eps2 + prec)
    m = v * prec * w_star
    cand = m + np.sqrt(v) * zn

    log_lam2 = xi + cand[..., None]
    lam2 = np.exp(log_lam2)
    prec2 = lam2.sum(-1)
    w_star2 = cand + (y - lam2).sum(-1) / prec2
    v2 = 1.0 / (1.0 / sigma_eps2 + prec2)
    m2 = v2 * prec2 * w_star2

    lr = (
        (y * log_lam2 - lam2).sum(-1)
        + _norm_lpdf(cand, 0.0, sigma_eps2)
        + _norm_lpdf(theta, m2, v2)
        - (y * log_lam - lam).sum(-1)
        - _norm_lpdf(theta, 0.0, sigma_eps2)
        - _norm_lpdf(cand, m, v)
    )
    accept = lacc < lr
    state.eps = np.where(accept, cand, theta)
    return int(accept.sum())


def update_subject_effects(
    state: ChainState,
    block: ChromosomeBlock,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> ChainState:
    des = _Design(block)
    if state.eps is None or not des.paired:
        raise SamplerError("subject effects require a paired design")
    if cfg.sigma_eps2 <= 0:
        raise SamplerError("sigma_eps2 must be positive in paired mode")
    _update_eps(state, des, cfg.sigma_eps2, rng)
    return state


def _trunc_draw(mean, sd, lo, hi, u):
    a = (lo - mean) / sd if math.isfinite(lo) else -math.inf
    b = (hi - mean) / sd if math.isfinite(hi) else math.inf
    if a <= 0.0:
        fa = float(ndtr(a))
        fb = float(ndtr(b))
        x = mean + sd * float(ndtri(fa + u * (fb - fa)))
    else:
        # both bounds in the upper tail: survival scale keeps precision
        sa = float(ndtr(-a))
        sb = float(ndtr(-b))
        x = mean - sd * float(ndtri(sa - u * (sa - sb)))
    if not math.isfinite(x):
        # quantile underflow deep in a tail: fall back to the nearest bound
        x = lo if math.isfinite(lo) and mean < lo else hi
    if math.isfinite(lo):
        x = max(x, lo)
    if math.isfinite(hi):
        x = min(x, hi)
    return x


def update_mu_pair(
    state: ChainState, cfg: SamplerConfig, rng: np.random.Generator
) -> ChainState:
    """Draw (mu1, mu2) from the product of per-state normal factors
    restricted to mu2 - mu1 >= delta_sep.

    With both states occupied the restricted pair is sampled exactly: the
    gap mu2 - mu1 and the precision-weighted mean are independent normals,
    and only the gap is truncated. With one state empty its factor is flat,
    so that mean is held and the other is drawn truncated against it.
    """
    sep = cfg.delta_sep
    mu1, mu2 = state.mu
    n1 = int((state.s == 1).sum())
    n2 = int((state.s == 2).sum())
    if n1 and n2:
        m1 = float(state.beta[state.s == 1].mean())
        m2 = float(state.beta[state.s == 2].mean())
        v1 = state.sigma2[0] / n1
        v2 = state.sigma2[1] / n2
        vsum = v1 + v2
        gap = _trunc_draw(m2 - m1, math.sqrt(vsum), sep, np.inf, rng.random())
        wmean = (m1 / v1 + m2 / v2) / (1.0 / v1 + 1.0 / v2)
        wvar = 1.0 / (1.0 / v1 + 1.0 / v2)
        w = wmean + math.sqrt(wvar) * rng.standard_normal()
        mu1 = w - v1 / vsum * gap
        mu2 = w + v2 / vsum * gap
    elif n1:
        m1 = float(state.beta[state.s == 1].mean())
        mu1 = _trunc_draw(
            m1, math.sqrt(state.sigma2[0] / n1), -np.inf, mu2 - sep, rng.random()
        )
    elif n2:
        m2 = float(state.beta[state.s == 2].mean())
        mu2 = _trunc_draw(
            m2, math.sqrt(state.sigma2[1] / n2), mu1 + sep, np.inf, rng.random()
        )
    state.mu = np.array([mu1, mu2])
    state.sync_emissions()
    return state


def _inv_gamma(shape, rate, rng):
    g = rng.gamma(shape)
    if g <= 0:
        return VAR_CEIL
    return min(max(rate / g, VAR_FLOOR), VAR_CEIL)


def update_variance_hyperparams(
    state: ChainState, cfg: SamplerConfig, rng: np.random.Generator
) -> ChainState:
    """Gibbs refresh of phi1, phi3 (truncated normals), tau2 (conjugate
    inverse-gamma), and sigma2 (inverse-gamma from the scale-invariant
    prior, skipped for empty states)."""
    h, delta = state.h, state.delta
    n1 = int((h == 1).sum())
    n3 = int((h == 3).sum())
    if n1:
        phi1 = _trunc_draw(
            float(delta[h == 1].mean()),
            math.sqrt(state.tau2[0] / n1),
            -np.inf,
            U1,
            rng.random(),
        )
        state.phi[0] = min(phi1, U1 - 1e-9)
    if n3:
        phi3 = _trunc_draw(
            float(delta[h == 3].mean()),
            math.sqrt(state.tau2[2] / n3),
            L3,
            np.inf,
            rng.random(),
        )
        state.phi[1] = max(phi3, L3 + 1e-9)

    centers = (state.phi[0], 0.0, state.phi[1])
    for t in range(3):
        sel = h == t + 1
        nt = int(sel.sum())
        ss = float(((delta[sel] - centers[t]) ** 2).sum())
        state.tau2[t] = _inv_gamma(
            cfg.a_tau[t] + 0.5 * nt, cfg.b_tau[t] + 0.5 * ss, rng
        )

    for u in range(2):
        sel = state.s == u + 1
        nu_ = int(sel.sum())
        if nu_ == 0:
            continue
        ss = float(((state.beta[sel] - state.mu[u]) ** 2).sum())
        state.sigma2[u] = _inv_gamma(0.5 * nu_, 0.5 * max(ss, VAR_FLOOR), rng)

    state.sync_emissions()
    return state


def _two_means(x: np.ndarray):
    """Deterministic 1-d two-cluster split (centers seeded at min/max)."""
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-9:
        return np.ones(x.size, dtype=np.int64), lo, lo + 1.0
    c1, c2 = lo, hi
    labels = None
    for _ in range(100):
        new = np.where(x <= (c1 + c2) / 2.0, 1, 2)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        if np.any(labels == 1):
            c1 = float(x[labels == 1].mean())
        if np.any(labels == 2):
            c2 = float(x[labels == 2].mean())
    return labels.astype(np.int64), c1, c2


def _init_model(letter: str, m: int, seq: np.ndarray) -> StateModel:
    # posterior-mean point estimate under a flat Dirichlet, deterministic
    if letter == "F":
        counts = np.bincount(seq - 1, minlength=m) + 1.0
        return StateModel(FMM, m, weights=counts / counts.sum())
    counts = np.ones((m, m))
    if seq.size > 1:
        np.add.at(counts, (seq[:-1] - 1, seq[1:] - 1), 1.0)
    return StateModel(HMM, m, trans=counts / counts.sum(axis=1, keepdims=True))


def initial_state(
    block: ChromosomeBlock, model_choice: str, cfg: SamplerConfig
) -> ChainState:
    """Moment-based starting point: working scales for beta, continuity-
    corrected half log-ratios for delta, threshold states, and within-state
    moments for the hyperparameters."""
    if model_choice not in MODEL_CHOICES:
        raise SamplerError(f"model choice must be one of {MODEL_CHOICES}")
    des = _Design(block)
    y = des.y
    beta = np.log1p(y.mean(axis=1)) - des.rho.mean()
    mean1 = y[:, des.sign < 0].mean(axis=1)
    mean2 = y[:, des.sign > 0].mean(axis=1)
    delta = 0.5 * np.log((mean2 + 0.5) / (mean1 + 0.5))

    s, c1, c2 = _two_means(beta)
    h = np.where(delta <= -L3, 1, np.where(delta >= L3, 3, 2)).astype(np.int64)

    mu = np.array(
        [
            beta[s == 1].mean() if np.any(s == 1) else c1,
            beta[s == 2].mean() if np.any(s == 2) else c2,
        ]
    )
    if mu[0] > mu[1] - cfg.delta_sep:
        mu[0] = mu[1] - cfg.delta_sep
    sigma2 = np.array(
        [
            max(float(beta[s == u].var()), 0.05) if np.any(s == u) else 0.5
            for u in (1, 2)
        ]
    )

    phi1 = min(float(delta[h == 1].mean()), U1 - 0.05) if np.any(h == 1) else -0.4
    phi3 = max(float(delta[h == 3].mean()), L3 + 0.05) if np.any(h == 3) else 0.4
    tau2 = np.array(
        [
            max(float(delta[h == t].var()), 5e-3) if np.any(h == t) else 0.02
            for t in (1, 2, 3)
        ]
    )

    eps = np.zeros((block.n_genes, len(des.subjects))) if des.paired else None
    state = ChainState(
        beta,
        delta,
        s,
        h,
        mu,
        sigma2,
        np.array([phi1, phi3]),
        tau2,
        _init_model(model_choice[0], 2, s),
        _init_model(model_choice[1], 3, h),
        eps,
    )
    state.sync_emissions()
    return state


def _block_loglik(state: ChainState, des: _Design, lgamma_const: np.ndarray):
    log_lam = (
        state.beta[:, None]
        + des.sign * state.delta[:, None]
        + _eps_term(state, des)
        + des.rho
    )
    return (des.y * log_lam - np.exp(log_lam)).sum(axis=1) - lgamma_const


@dataclass
class ChainSamples:
    chromosome: str
    gene_ids: list[str]
    positions: np.ndarray
    model_choice: str
    iterations_kept: np.ndarray
    h: np.ndarray
    s: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    eps: np.ndarray | None
    mu: np.ndarray
    sigma2: np.ndarray
    phi: np.ndarray
    tau2: np.ndarray
    loglik: np.ndarray
    deviance: np.ndarray
    accept_rates: dict
    seed: int
    config: dict

    @property
    def n_samples(self) -> int:
        return self.h.shape[0]

    @property
    def n_genes(self) -> int:
        return self.h.shape[1]

    def save(self, prefix: str):
        """Write <prefix>.samples.tsv (iteration, gene, h, delta, beta, s)
        and <prefix>.meta.json. The full log-likelihood trace and subject
        effects are summarized, not serialized."""
        with open(f"{prefix}.samples.tsv", "w") as fh:
            fh.write("iteration\tgene\th\tdelta\tbeta\ts\n")
            for k in range(self.n_samples):
                it = int(self.iterations_kept[k])
                fh.writelines(
                    f"{it}\t{gid}\t{self.h[k, i]}\t{float(self.delta[k, i])!r}\t"
                    f"{float(self.beta[k, i])!r}\t{self.s[k, i]}\n"
                    for i, gid in enumerate(self.gene_ids)
                )
        meta = {
            "chromosome": self.chromosome,
            "model_choice": self.model_choice,
            "seed": self.seed,
            "config": self.config,
            "gene_ids": self.gene_ids,
            "positions": [int(p) for p in self.positions],
            "iterations_kept": [int(v) for v in self.iterations_kept],
            "accept_rates": self.accept_rates,
            "paired": self.eps is not None,
            "deviance": [float(v) for v in self.deviance],
            "mu": [[float(v) for v in row] for row in self.mu],
            "sigma2": [[float(v) for v in row] for row in self.sigma2],
            "phi": [[float(v) for v in row] for row in self.phi],
            "tau2": [[float(v) for v in row] for row in self.tau2],
            "loglik_mean": float(self.loglik.mean()),
        }
        with open(f"{prefix}.meta.json", "w") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, prefix: str) -> "ChainSamples":
        with open(f"{prefix}.meta.json") as fh:
            meta = json.load(fh)
        gene_ids = meta["gene_ids"]
        index = {g: i for i, g in enumerate(gene_ids)}
        kept = [int(v) for v in meta["iterations_kept"]]
        kpos = {it: k for k, it in enumerate(kept)}
        n_s, n_g = len(kept), len(gene_ids)
        h = np.zeros((n_s, n_g), dtype=np.int64)
        s = np.zeros((n_s, n_g), dtype=np.int64)
        beta = np.zeros((n_s, n_g))
        delta = np.zeros((n_s, n_g))
        with open(f"{prefix}.samples.tsv") as fh:
            header = fh.readline()
            if not header.startswith("iteration"):
                raise SamplerError("malformed samples file")
            for line in fh:
                it, gid, hv, dv, bv, sv = line.rstrip("\n").split("\t")
                k, i = kpos[int(it)], index[gid]
                h[k, i] = int(hv)
                s[k, i] = int(sv)
                delta[k, i] = float(dv)
                beta[k, i] = float(bv)
        deviance = np.array(meta["deviance"], dtype=float)
        return cls(
            chromosome=meta["chromosome"],
            gene_ids=gene_ids,
            positions=np.array(meta["positions"]),
            model_choice=meta["model_choice"],
            iterations_kept=np.array(kept),
            h=h,
            s=s,
            beta=beta,
            delta=delta,
            eps=None,
            mu=np.array(meta["mu"], dtype=float),
            sigma2=np.array(meta["sigma2"], dtype=float),
            phi=np.array(meta["phi"], dtype=float),
            tau2=np.array(meta["tau2"], dtype=float),
            loglik=-0.5 * deviance,
            deviance=deviance,
            accept_rates=meta["accept_rates"],
            seed=meta["seed"],
            config=meta["config"],
        )


def run_chain(
    block: ChromosomeBlock,
    model_choice: str,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
    init: ChainState | None = None,
) -> ChainSamples:
    """Run the full per-chromosome chain and return thinned post-burn-in
    samples with likelihood and acceptance diagnostics.

    Per iteration: the (h, delta) sweep, the (s, beta) sweep, subject
    effects (paired only), the restricted (mu1, mu2) draw, the variance and
    phi Gibbs block, and the Dirichlet refresh of the state-model
    parameters. Bit-reproducible given (cfg.seed, block, model_choice).
    """
    if model_choice not in MODEL_CHOICES:
        raise SamplerError(f"model choice must be one of {MODEL_CHOICES}")
    if block.n_genes == 0:
        raise SamplerError("empty chromosome block")
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(chrom_seed(cfg.seed, block.chromosome))

    des = _Design(block)
    state = init.copy() if init is not None else initial_state(block, model_choice, cfg)
    if state.beta.size != block.n_genes:
        raise SamplerError("initial state does not match the block size")
    if des.paired:
        if state.eps is None:
            raise SamplerError("paired block requires eps in the initial state")
        if cfg.sigma_eps2 <= 0:
            raise SamplerError("sigma_eps2 must be positive for paired data")
    state.validate(cfg.delta_sep)

    n = block.n_genes
    idx = np.arange(n)
    lgamma_const = gammaln(des.y + 1.0).sum(axis=1)
    n_kept = (cfg.iterations - cfg.burnin) // cfg.thin
    if n_kept < 1:
        raise SamplerError("configuration retains no samples")
    n_subj = len(des.subjects) if des.paired else 0

    h_out = np.empty((n_kept, n), dtype=np.int64)
    s_out = np.empty((n_kept, n), dtype=np.int64)
    beta_out = np.empty((n_kept, n))
    delta_out = np.empty((n_kept, n))
    eps_out = np.empty((n_kept, n, n_subj)) if des.paired else None
    mu_out = np.empty((n_kept, 2))
    sigma2_out = np.empty((n_kept, 2))
    phi_out = np.empty((n_kept, 2))
    tau2_out = np.empty((n_kept, 3))
    kept_iters = np.empty(n_kept, dtype=np.int64)
    loglik = np.empty(cfg.iterations)
    deviance = np.empty(n_kept)

    acc = {"delta": 0, "beta": 0, "eps": 0}
    k = 0
    for it in range(1, cfg.iterations + 1):
        acc["delta"] += _update_sites(
            "delta",
            state,
            des,
            idx,
            rng.random(n),
            rng.standard_normal(n),
            np.log(rng.random(n)),
        )
        if cfg.update_beta:
            acc["beta"] += _update_sites(
                "beta",
                state,
                des,
                idx,
                rng.random(n),
                rng.standard_normal(n),
                np.log(rng.random(n)),
            )
        if des.paired:
            acc["eps"] += _update_eps(state, des, cfg.sigma_eps2, rng)
        if cfg.update_hyperparams:
            update_mu_pair(state, cfg, rng)
            update_variance_hyperparams(state, cfg, rng)
        if cfg.update_state_models:
            state.beta_model = update_state_model_params(
                state.s, state.beta_model, 1.0, rng
            )
            state.delta_model = update_state_model_params(
                state.h, state.delta_model, 1.0, rng
            )

        gene_ll = _block_loglik(state, des, lgamma_const)
        total = gene_ll.sum()
        if not np.isfinite(total):
            bad = int(np.argmin(np.isfinite(gene_ll)))
            raise SamplerError(
                f"non-finite log-likelihood for gene "
                f"{block.genes[bad].id!r} at iteration {it}"
            )
        loglik[it - 1] = total
        if cfg.check_invariants:
            state.validate(cfg.delta_sep)

        if it > cfg.burnin and (it - cfg.burnin) % cfg.thin == 0:
            h_out[k] = state.h
            s_out[k] = state.s
            beta_out[k] = state.beta
            delta_out[k] = state.delta
            if eps_out is not None:
                eps_out[k] = state.eps
            mu_out[k] = state.mu
            sigma2_out[k] = state.sigma2
            phi_out[k] = state.phi
            tau2_out[k] = state.tau2
            deviance[k] = -2.0 * total
            kept_iters[k] = it
            k += 1

    denom = cfg.iterations * n
    rates = {"delta": acc["delta"] / denom}
    if cfg.update_beta:
        rates["beta"] = acc["beta"] / denom
    if des.paired:
        rates["eps"] = acc["eps"] / (cfg.iterations * n * n_subj)

    return ChainSamples(
        chromosome=block.chromosome,
        gene_ids=block.gene_ids(),
        positions=np.array([g.position for g in block.genes]),
        model_choice=model_choice,
        iterations_kept=kept_iters,
        h=h_out,
        s=s_out,
        beta=beta_out,
        delta=delta_out,
        eps=eps_out,
        mu=mu_out,
        sigma2=sigma2_out,
        phi=phi_out,
        tau2=tau2_out,
        loglik=loglik,
        deviance=deviance,
        accept_rates=rates,
        seed=cfg.seed,
        config=asdict(cfg),
    )


def estimate_sigma_eps(
    cm: CountMatrix, rho: np.ndarray | None = None, n_iter: int = 25
) -> float:
    """Empirical-Bayes subject-effect variance for paired designs.

    Per gene, iterated working-value least squares fits (beta, delta) and
    per-subject effects; a method-of-moments step subtracts the mean
    sampling variance of the effect estimates from their between-subject
    variance. Returns the median across genes, floored at 1e-6.
    """
    if not cm.paired:
        raise SamplerError("paired layout required")
    subjects = sorted({lib.subject for lib in cm.libraries})
    n_subj = len(subjects)
    if n_subj < 2:
        raise SamplerError("at least 2 subjects required")
    if rho is None:
        rho = upper_quartile_effects(cm)
    rho = np.asarray(rho, dtype=float)

    treatments = np.array([lib.treatment for lib in cm.libraries])
    sign = np.where(treatments == 2, 1.0, -1.0)
    subj_of = np.array([subjects.index(lib.subject) for lib in cm.libraries])
    ind = np.zeros((cm.n_libraries, n_subj))
    ind[np.arange(cm.n_libraries), subj_of] = 1.0

    y = np.asarray(cm.counts, dtype=float)
    beta = np.log(y.mean(axis=1) + 0.5) - rho.mean()
    mean1 = y[:, sign < 0].mean(axis=1)
    mean2 = y[:, sign > 0].mean(axis=1)
    delta = 0.5 * np.log((mean2 + 0.5) / (mean1 + 0.5))
    eps = np.zeros((cm.n_genes, n_subj))

    for _ in range(n_iter):
        log_lam = beta[:, None] + sign * delta[:, None] + eps[:, subj_of] + rho
        lam = np.exp(log_lam)
        w = log_lam + (y - lam) / lam
        r = w - rho - eps[:, subj_of]
        a = lam.sum(axis=1)
        b = (lam * sign).sum(axis=1)
        sy = (lam * r).sum(axis=1)
        szy = (lam * sign * r).sum(axis=1)
        det = a * a - b * b
        beta = (a * sy - b * szy) / det
        delta = (a * szy - b * sy) / det
        res = w - rho - beta[:, None] - sign * delta[:, None]
        den = lam @ ind
        eps = (lam * res) @ ind / den
        eps -= eps.mean(axis=1, keepdims=True)

    sampling_var = (1.0 / den).mean(axis=1)
    between = eps.var(axis=1, ddof=1)
    per_gene = np.maximum(between - sampling_var, 0.0)
    return float(max(np.median(per_gene), 1e-6))
