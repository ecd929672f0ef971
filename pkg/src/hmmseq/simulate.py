"""Ground-truth count generators for benchmarking the caller.

Latent expression states follow either independent draws or a stationary
Markov chain along each chromosome; gene means and fold changes are drawn
from the corresponding two- and three-state normal mixtures, and counts are
Poisson or gamma-mixed Poisson (negative binomial) around the resulting
rates. Everything is deterministic given the seed, with one RNG substream
per chromosome.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hmm import FMM, HMM, StateModel
from .ingest import CountMatrix, GeneMeta, LibraryMeta
from .sampler import MODEL_CHOICES, chrom_seed

DEFAULT_MU = (1.0, 3.91)
DEFAULT_SIGMA2 = (0.37, 2.4)
DEFAULT_WEIGHTS_P = (0.1, 0.9)
DEFAULT_TRANS_A = ((0.50, 0.50), (0.05, 0.95))
DEFAULT_PHI = (-0.4, 0.4)
DEFAULT_TAU2 = (0.013, 0.01, 0.013)
DEFAULT_WEIGHTS_Q = (0.22, 0.56, 0.22)
DEFAULT_TRANS_B = ((0.50, 0.25, 0.25), (0.10, 0.80, 0.10), (0.25, 0.25, 0.50))


class SimulateError(ValueError):
    pass


@dataclass(frozen=True)
class SimSpec:
    chromosomes: int = 12
    genes_per_chromosome: int = 800
    replicates: int = 6
    model: str = "HH"
    mu: tuple = DEFAULT_MU
    sigma2: tuple = DEFAULT_SIGMA2
    weights_p: tuple = DEFAULT_WEIGHTS_P
    trans_a: tuple = DEFAULT_TRANS_A
    phi: tuple = DEFAULT_PHI
    tau2: tuple = DEFAULT_TAU2
    weights_q: tuple = DEFAULT_WEIGHTS_Q
    trans_b: tuple = DEFAULT_TRANS_B
    rho: tuple | None = None
    noise: str = "poisson"
    gamma_shape: float = 2.0
    gamma_scale: float = 0.1
    zeta: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.chromosomes < 1 or self.genes_per_chromosome < 1 or self.replicates < 1:
            raise SimulateError("chromosome, gene, and replicate counts must be >= 1")
        if self.model not in MODEL_CHOICES:
            raise SimulateError(f"model must be one of {MODEL_CHOICES}")
        if self.noise not in ("poisson", "negbin"):
            raise SimulateError("noise must be 'poisson' or 'negbin'")
        if self.noise == "negbin":
            if self.zeta is not None:
                if self.zeta <= 0:
                    raise SimulateError("fixed dispersion must be positive")
            elif self.gamma_shape <= 0 or self.gamma_scale <= 0:
                raise SimulateError("gamma dispersion parameters must be positive")
        if self.rho is not None and len(self.rho) != 2 * self.replicates:
            raise SimulateError("rho must have one entry per library")
        if any(v <= 0 for v in self.sigma2) or any(v <= 0 for v in self.tau2):
            raise SimulateError("variances must be positive")

    def beta_model(self) -> StateModel:
        if self.model[0] == "F":
            return StateModel(FMM, 2, weights=np.array(self.weights_p))
        return StateModel(HMM, 2, trans=np.array(self.trans_a))

    def delta_model(self) -> StateModel:
        if self.model[1] == "F":
            return StateModel(FMM, 3, weights=np.array(self.weights_q))
        return StateModel(HMM, 3, trans=np.array(self.trans_b))

    def rho_vector(self) -> np.ndarray:
        if self.rho is None:
            return np.zeros(2 * self.replicates)
        return np.asarray(self.rho, dtype=float)


@dataclass(frozen=True)
class SimTruth:
    """Per-gene generating values; de marks a fold-change state other
    than the null middle state."""

    gene_ids: tuple
    chromosomes: tuple
    s: np.ndarray
    h: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    zeta: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.gene_ids)
        if len(self.chromosomes) != n:
            raise SimulateError("chromosomes length mismatch")
        for name in ("s", "h", "beta", "delta"):
            if getattr(self, name).shape != (n,):
                raise SimulateError(f"{name} length mismatch")
        if self.zeta is not None and self.zeta.shape != (n,):
            raise SimulateError("zeta length mismatch")

    @property
    def de(self) -> np.ndarray:
        return self.h != 2


def simulate_states(model: StateModel, n: int, rng) -> np.ndarray:
    """1-based latent state sequence: i.i.d. for a mixture model, a
    stationary-start Markov chain otherwise."""
    if n < 1:
        raise SimulateError("sequence length must be >= 1")
    u = rng.random(n)
    if model.kind == FMM:
        cum = np.cumsum(model.weights)
        return np.searchsorted(cum, u, side="right").astype(np.int64) + 1
    states = np.empty(n, dtype=np.int64)
    cum_pi = np.cumsum(model.stationary())
    cum_rows = np.cumsum(model.trans, axis=1)
    states[0] = np.searchsorted(cum_pi, u[0], side="right") + 1
    for i in range(1, n):
        states[i] = np.searchsorted(cum_rows[states[i - 1] - 1], u[i], side="right") + 1
    return states


def _simulate(spec: SimSpec):
    reps = spec.replicates
    rho = spec.rho_vector()
    sign = np.array([-1.0] * reps + [1.0] * reps)
    libraries = [LibraryMeta(f"t{t}r{r}", t, r) for t in (1, 2) for r in range(1, reps + 1)]
    beta_model = spec.beta_model()
    delta_model = spec.delta_model()
    centers = np.array([spec.phi[0], 0.0, spec.phi[1]])
    mu = np.array(spec.mu)
    sigma2 = np.array(spec.sigma2)
    tau2 = np.array(spec.tau2)

    genes = []
    chroms = []
    gene_ids = []
    all_counts = []
    all_s = []
    all_h = []
    all_beta = []
    all_delta = []
    all_zeta = []
    n = spec.genes_per_chromosome
    for c in range(spec.chromosomes):
        name = f"chr{c + 1:02d}"
        rng = np.random.default_rng(chrom_seed(spec.seed, name))
        s = simulate_states(beta_model, n, rng)
        h = simulate_states(delta_model, n, rng)
        beta = rng.normal(mu[s - 1], np.sqrt(sigma2[s - 1]))
        delta = rng.normal(centers[h - 1], np.sqrt(tau2[h - 1]))
        lam = np.exp(beta[:, None] + sign * delta[:, None] + rho)
        if spec.noise == "poisson":
            counts = rng.poisson(lam)
        else:
            if spec.zeta is not None:
                zeta = np.full(n, float(spec.zeta))
            else:
                zeta = rng.gamma(spec.gamma_shape, spec.gamma_scale, n)
            # unit-mean gamma mixing of the Poisson rate gives the
            # variance lam + zeta * lam^2 of a negative binomial
            zsafe = np.maximum(zeta, 1e-12)
            g = rng.gamma(1.0 / zsafe[:, None], zsafe[:, None], size=lam.shape)
            counts = rng.poisson(lam * g)
            all_zeta.append(zeta)
        for i in range(n):
            gid = f"{name}_g{i + 1:04d}"
            genes.append(GeneMeta(gid, name, i + 1))
            gene_ids.append(gid)
            chroms.append(name)
        all_counts.append(counts)
        all_s.append(s)
        all_h.append(h)
        all_beta.append(beta)
        all_delta.append(delta)

    cm = CountMatrix(genes, libraries, np.concatenate(all_counts, axis=0))
    truth = SimTruth(
        gene_ids=tuple(gene_ids),
        chromosomes=tuple(chroms),
        s=np.concatenate(all_s),
        h=np.concatenate(all_h),
        beta=np.concatenate(all_beta),
        delta=np.concatenate(all_delta),
        zeta=np.concatenate(all_zeta) if all_zeta else None,
    )
    return cm, truth


def simulate_poisson_dataset(spec: SimSpec):
    if spec.noise != "poisson":
        raise SimulateError("spec noise is not 'poisson'")
    return _simulate(spec)


def simulate_negbin_dataset(spec: SimSpec):
    if spec.noise != "negbin":
        raise SimulateError("spec noise is not 'negbin'")
    return _simulate(spec)


def fit_dispersion_gamma(dispersions):
    """Method-of-moments gamma fit: shape = mean^2/var, scale = var/mean."""
    d = np.asarray(dispersions, dtype=float)
    if d.size < 2:
        raise SimulateError("need at least two dispersion values")
    if np.any(d <= 0):
        raise SimulateError("dispersions must be positive")
    mean = d.mean()
    var = d.var(ddof=1)
    if np.all(d == d[0]) or var == 0:
        raise SimulateError("zero variance: degenerate gamma")
    return mean * mean / var, var / mean


def paper_preset(seed: int = 0, noise: str = "poisson", model: str = "HH") -> SimSpec:
    return SimSpec(seed=seed, noise=noise, model=model)


def desk_preset(seed: int = 0, noise: str = "poisson", model: str = "HH") -> SimSpec:
    return SimSpec(
        chromosomes=2,
        genes_per_chromosome=200,
        seed=seed,
        noise=noise,
        model=model,
    )


PRESETS = {"paper": paper_preset, "desk": desk_preset}


def write_counts(cm: CountMatrix, path: str, header_lines=()):
    names = [lib.name for lib in cm.libraries]
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("\t".join(("gene_id", "chromosome", "position", *names)) + "\n")
        for i, gene in enumerate(cm.genes):
            row = "\t".join(str(int(v)) for v in cm.counts[i])
            fh.write(f"{gene.id}\t{gene.chromosome}\t{gene.position}\t{row}\n")


def write_layout(cm: CountMatrix, path: str, meta: dict | None = None):
    import json

    payload: dict = {}
    if meta:
        payload["_meta"] = meta
    for lib in cm.libraries:
        entry: dict = {"treatment": lib.treatment, "replicate": lib.replicate}
        if lib.subject is not None:
            entry["subject"] = lib.subject
        payload[lib.name] = entry
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


TRUTH_COLUMNS = ("gene_id", "s", "h", "beta", "delta", "zeta", "de")


def write_truth(truth: SimTruth, path: str, header_lines=()):
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("\t".join(TRUTH_COLUMNS) + "\n")
        de = truth.de
        for i, gid in enumerate(truth.gene_ids):
            zeta = "NA" if truth.zeta is None else repr(float(truth.zeta[i]))
            fh.write(
                f"{gid}\t{truth.s[i]}\t{truth.h[i]}\t{float(truth.beta[i])!r}\t"
                f"{float(truth.delta[i])!r}\t{zeta}\t{int(de[i])}\n"
            )


def read_truth(path: str) -> dict:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    if not lines or tuple(lines[0].rstrip("\n").split("\t")) != TRUTH_COLUMNS:
        raise SimulateError("malformed truth file")
    cols: dict = {name: [] for name in TRUTH_COLUMNS}
    for ln in lines[1:]:
        parts = ln.rstrip("\n").split("\t")
        if len(parts) != len(TRUTH_COLUMNS):
            raise SimulateError("ragged truth row")
        for name, val in zip(TRUTH_COLUMNS, parts):
            cols[name].append(val)
    zeta = None
    if any(v != "NA" for v in cols["zeta"]):
        zeta = np.array([float(v) for v in cols["zeta"]])
    return {
        "gene_id": cols["gene_id"],
        "s": np.array([int(v) for v in cols["s"]]),
        "h": np.array([int(v) for v in cols["h"]]),
        "beta": np.array([float(v) for v in cols["beta"]]),
        "delta": np.array([float(v) for v in cols["delta"]]),
        "zeta": zeta,
        "de": np.array([int(v) for v in cols["de"]], dtype=bool),
    }
