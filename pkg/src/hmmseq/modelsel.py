"""DIC model comparison across the four latent-structure choices.

The deviance is conditional on the gene-level parameters (beta, delta, and
subject effects when paired), so it is a closed-form Poisson log-likelihood
per retained sample and is comparable across FF/FH/HF/HH. DIC = 2*D_bar -
D(theta_hat) with theta_hat the posterior means of those parameters; smaller
is better.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .ingest import ChromosomeBlock
from .sampler import MODEL_CHOICES, ChainSamples, SamplerConfig, SamplerError, run_chain


class ModelSelError(RuntimeError):
    pass


def _log_lambda(beta, delta, block: ChromosomeBlock, eps):
    sign = np.array([1.0 if lib.treatment == 2 else -1.0 for lib in block.libraries])
    log_lam = beta[:, None] + sign * delta[:, None] + block.rho
    if eps is not None:
        subjects = sorted({lib.subject for lib in block.libraries})
        col = {s: k for k, s in enumerate(subjects)}
        idx = np.array([col[lib.subject] for lib in block.libraries])
        log_lam = log_lam + eps[:, idx]
    return log_lam


def deviance(beta, delta, block: ChromosomeBlock, eps=None) -> float:
    """-2 log Poisson likelihood of the block's counts at the given
    gene-level parameters."""
    beta = np.asarray(beta, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if not (np.isfinite(beta).all() and np.isfinite(delta).all()):
        raise ModelSelError("non-finite parameters")
    if eps is not None:
        eps = np.asarray(eps, dtype=float)
        if not np.isfinite(eps).all():
            raise ModelSelError("non-finite subject effects")
    log_lam = _log_lambda(beta, delta, block, eps)
    y = block.counts
    ll = (y * log_lam - np.exp(log_lam) - gammaln(y + 1.0)).sum()
    return float(-2.0 * ll)


@dataclass(frozen=True)
class ModelScore:
    label: str
    d_bar: float
    d_hat: float
    p_d: float
    dic: float

    def __post_init__(self):
        if abs(self.dic - (2.0 * self.d_bar - self.d_hat)) > 1e-9 * max(1.0, abs(self.dic)):
            raise ModelSelError(f"DIC identity violated for {self.label}")


@dataclass(frozen=True)
class DicReport:
    scores: tuple
    selected: str
    warnings: tuple = ()

    def __post_init__(self):
        if not self.scores:
            raise ModelSelError("empty report")
        best = min(self.scores, key=lambda sc: (sc.dic, sc.label))
        if self.selected != best.label:
            raise ModelSelError("selected model is not the DIC argmin")

    def score(self, label: str) -> ModelScore:
        for sc in self.scores:
            if sc.label == label:
                return sc
        raise ModelSelError(f"no score for {label!r}")

    def to_lines(self) -> list:
        lines = [
            f"model={sc.label}\td_bar={sc.d_bar!r}\td_hat={sc.d_hat!r}\t"
            f"p_d={sc.p_d!r}\tdic={sc.dic!r}"
            for sc in self.scores
        ]
        lines.append(f"selected={self.selected}")
        lines.extend(f"warning={w}" for w in self.warnings)
        return lines


def dic_parts(samples: ChainSamples, block: ChromosomeBlock):
    """(D_bar, D(theta_hat)) for one chain on one block."""
    if samples.n_samples < 1:
        raise ModelSelError("no retained samples")
    d_bar = float(samples.deviance.mean())
    eps_hat = None if samples.eps is None else samples.eps.mean(axis=0)
    d_hat = deviance(samples.beta.mean(axis=0), samples.delta.mean(axis=0), block, eps_hat)
    return d_bar, d_hat


def _as_blocks(blocks):
    if isinstance(blocks, ChromosomeBlock):
        return [blocks]
    blocks = list(blocks)
    if not blocks:
        raise ModelSelError("no chromosome blocks")
    return blocks


def fit_all_models(blocks, cfg: SamplerConfig, models=MODEL_CHOICES, threads: int = 1):
    """Run one chain per (model, chromosome); returns label -> list of
    ChainSamples aligned with the block order."""
    blocks = _as_blocks(blocks)
    jobs = [(label, k) for label in models for k in range(len(blocks))]

    def _run(job):
        label, k = job
        try:
            return run_chain(blocks[k], label, cfg)
        except SamplerError as exc:
            raise ModelSelError(f"{label}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run, jobs))
    else:
        results = [_run(job) for job in jobs]
    fits = {label: [] for label in models}
    for (label, _), samples in zip(jobs, results):
        fits[label].append(samples)
    return fits


def dic_report(fits, blocks) -> DicReport:
    """Sum per-chromosome deviance summaries into one score per model."""
    blocks = _as_blocks(blocks)
    scores = []
    warnings = []
    for label, chains in fits.items():
        if len(chains) != len(blocks):
            raise ModelSelError(f"{label}: chain/block count mismatch")
        d_bar = d_hat = 0.0
        for samples, block in zip(chains, blocks):
            db, dh = dic_parts(samples, block)
            d_bar += db
            d_hat += dh
        p_d = d_bar - d_hat
        scores.append(ModelScore(label, d_bar, d_hat, p_d, d_bar + p_d))
        if p_d < 0:
            warnings.append(f"negative p_D for {label}; chains may be poorly mixed")
    selected = min(scores, key=lambda sc: (sc.dic, sc.label)).label
    return DicReport(tuple(scores), selected, tuple(warnings))


def dic_select(blocks, cfg: SamplerConfig, models=MODEL_CHOICES, threads: int = 1) -> DicReport:
    """Fit every candidate model and pick the DIC argmin (lowest label on
    exact ties)."""
    fits = fit_all_models(blocks, cfg, models=models, threads=threads)
    return dic_report(fits, blocks)
