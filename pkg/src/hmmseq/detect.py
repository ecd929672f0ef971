"""Posterior DE probabilities and FDR-controlled calling.

A gene is flagged differentially expressed when its latent fold-change state
is 1 (under-expressed) or 3 (over-expressed). The posterior probability of
that event is the Monte Carlo frequency over retained samples; genes are
ranked by it and the call threshold is chosen so the Bayesian expected FDR
of the called prefix stays below the nominal level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampler import ChainSamples


class DetectError(ValueError):
    pass


@dataclass(frozen=True)
class PosteriorSummary:
    """Per-gene posterior quantities, ordered as the genes were fit."""

    gene_ids: tuple
    chromosomes: tuple
    positions: np.ndarray
    p_de: np.ndarray
    p_under: np.ndarray
    p_over: np.ndarray
    mean_delta: np.ndarray
    mean_beta: np.ndarray

    def __post_init__(self):
        n = len(self.gene_ids)
        for name in ("positions", "p_de", "p_under", "p_over", "mean_delta", "mean_beta"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise DetectError(f"{name} must have one entry per gene")
        if len(self.chromosomes) != n:
            raise DetectError("chromosomes must have one entry per gene")
        for name in ("p_de", "p_under", "p_over"):
            arr = getattr(self, name)
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                raise DetectError(f"{name} outside [0, 1]")
        if not np.array_equal(self.p_de, self.p_under + self.p_over):
            raise DetectError("p_de must equal p_under + p_over")

    @property
    def n_genes(self) -> int:
        return len(self.gene_ids)


def posterior_de_prob(samples: ChainSamples) -> PosteriorSummary:
    """Monte Carlo posterior P(h != 2) per gene, split by direction."""
    if samples.n_samples < 1:
        raise DetectError("no retained samples")
    p_under = (samples.h == 1).mean(axis=0)
    p_over = (samples.h == 3).mean(axis=0)
    return PosteriorSummary(
        gene_ids=tuple(samples.gene_ids),
        chromosomes=(samples.chromosome,) * samples.n_genes,
        positions=np.asarray(samples.positions, dtype=np.int64),
        p_de=p_under + p_over,
        p_under=p_under,
        p_over=p_over,
        mean_delta=samples.delta.mean(axis=0),
        mean_beta=samples.beta.mean(axis=0),
    )


def combine_summaries(summaries) -> PosteriorSummary:
    summaries = list(summaries)
    if not summaries:
        raise DetectError("no summaries to combine")
    ids = [g for s in summaries for g in s.gene_ids]
    if len(set(ids)) != len(ids):
        raise DetectError("duplicate gene ids across summaries")
    return PosteriorSummary(
        gene_ids=tuple(ids),
        chromosomes=tuple(c for s in summaries for c in s.chromosomes),
        positions=np.concatenate([s.positions for s in summaries]),
        p_de=np.concatenate([s.p_de for s in summaries]),
        p_under=np.concatenate([s.p_under for s in summaries]),
        p_over=np.concatenate([s.p_over for s in summaries]),
        mean_delta=np.concatenate([s.mean_delta for s in summaries]),
        mean_beta=np.concatenate([s.mean_beta for s in summaries]),
    )


def expected_fdr_path(p_hat) -> np.ndarray:
    """Expected FDR of the top-d prefix after sorting p_hat decreasingly.

    The d-th entry is the mean of (1 - p_hat) over the d most probable
    genes, which is nondecreasing in d; the running maximum only guards
    against float summation dips.
    """
    p = np.asarray(p_hat, dtype=float)
    if p.ndim != 1:
        raise DetectError("p_hat must be a vector")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise DetectError("p_hat outside [0, 1]")
    ordered = np.sort(p)[::-1]
    path = np.cumsum(1.0 - ordered) / np.arange(1, p.size + 1)
    return np.maximum.accumulate(path)


@dataclass(frozen=True)
class DetectionResult:
    """Ranked gene order with its expected-FDR path and the called prefix."""

    order: np.ndarray
    fdr_path: np.ndarray
    n_called: int
    q0: float

    def __post_init__(self):
        if self.order.shape != self.fdr_path.shape:
            raise DetectError("order and fdr_path must align")
        if not 0 <= self.n_called <= self.order.size:
            raise DetectError("called prefix out of range")

    def called_mask(self) -> np.ndarray:
        mask = np.zeros(self.order.size, dtype=bool)
        mask[self.order[: self.n_called]] = True
        return mask

    def ranks(self) -> np.ndarray:
        ranks = np.empty(self.order.size, dtype=np.int64)
        ranks[self.order] = np.arange(1, self.order.size + 1)
        return ranks


def call_de(summary: PosteriorSummary, q0: float) -> DetectionResult:
    """Call the largest prefix of the p_de ranking whose expected FDR < q0.

    Ties in p_de are ordered by chromosome then position so the ranking is
    deterministic.
    """
    if not 0.0 < q0 < 1.0:
        raise DetectError("q0 must lie in (0, 1)")
    n = summary.n_genes
    p = summary.p_de
    order = sorted(
        range(n),
        key=lambda i: (-p[i], summary.chromosomes[i], summary.positions[i]),
    )
    order = np.asarray(order, dtype=np.int64)
    path = expected_fdr_path(p)
    n_called = int((path < q0).sum())
    return DetectionResult(order=order, fdr_path=path, n_called=n_called, q0=q0)


GENE_TABLE_COLUMNS = (
    "gene_id",
    "chromosome",
    "position",
    "p_de",
    "p_under",
    "p_over",
    "mean_delta",
    "mean_beta",
    "rank",
    "fdr_hat",
    "called",
)


def write_gene_table(summary: PosteriorSummary, result: DetectionResult, path: str,
                     header_lines=()):
    """One row per gene in input order; rank/fdr_hat refer to the p_de
    ranking and called marks membership in the q0 prefix."""
    ranks = result.ranks()
    fdr_by_gene = np.empty(summary.n_genes)
    fdr_by_gene[result.order] = result.fdr_path
    called = result.called_mask()
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("\t".join(GENE_TABLE_COLUMNS) + "\n")
        for i, gid in enumerate(summary.gene_ids):
            fh.write(
                f"{gid}\t{summary.chromosomes[i]}\t{summary.positions[i]}\t"
                f"{float(summary.p_de[i])!r}\t{float(summary.p_under[i])!r}\t"
                f"{float(summary.p_over[i])!r}\t{float(summary.mean_delta[i])!r}\t"
                f"{float(summary.mean_beta[i])!r}\t{ranks[i]}\t"
                f"{float(fdr_by_gene[i])!r}\t{int(called[i])}\n"
            )


def read_gene_table(path: str) -> dict:
    """Parse a gene table back into column arrays (comments skipped)."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    if not lines:
        raise DetectError("empty gene table")
    header = lines[0].rstrip("\n").split("\t")
    if tuple(header) != GENE_TABLE_COLUMNS:
        raise DetectError("unexpected gene table columns")
    cols: dict = {name: [] for name in header}
    for ln in lines[1:]:
        parts = ln.rstrip("\n").split("\t")
        if len(parts) != len(header):
            raise DetectError("ragged gene table row")
        for name, val in zip(header, parts):
            cols[name].append(val)
    out: dict = {
        "gene_id": cols["gene_id"],
        "chromosome": cols["chromosome"],
        "position": np.array([int(v) for v in cols["position"]]),
        "rank": np.array([int(v) for v in cols["rank"]]),
        "called": np.array([int(v) for v in cols["called"]], dtype=bool),
    }
    for name in ("p_de", "p_under", "p_over", "mean_delta", "mean_beta", "fdr_hat"):
        out[name] = np.array([float(v) for v in cols[name]])
    return out
