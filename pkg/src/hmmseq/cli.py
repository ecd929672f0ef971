"""Command-line pipeline: simulate, fit, detect, select, eval, spatial-test.

Every artifact is plain delimited text with a leading metadata header
(tool version, seed, hash of the resolved configuration) so a rerun with
the same flags reproduces it byte for byte. Option precedence is
command-line flags, then a JSON config file, then built-in defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .detect import (
    DetectError,
    call_de,
    combine_summaries,
    posterior_de_prob,
    read_gene_table,
    write_gene_table,
)
from .evaluate import (
    EvalError,
    fdr_calibration,
    overlap_counts,
    roc_curve,
    spatial_geometric_test,
)
from .hmm import StateModelError
from .ingest import (
    IngestError,
    filter_low_counts,
    load_counts,
    split_by_chromosome,
    upper_quartile_effects,
)
from .modelsel import ModelSelError, dic_report, fit_all_models
from .sampler import (
    MODEL_CHOICES,
    ChainSamples,
    SamplerConfig,
    SamplerError,
    estimate_sigma_eps,
    run_chain,
)
from .simulate import (
    PRESETS,
    SimulateError,
    simulate_negbin_dataset,
    simulate_poisson_dataset,
    write_counts,
    write_layout,
    write_truth,
)
from .simulate import read_truth

KNOWN_ERRORS = (
    IngestError,
    SamplerError,
    DetectError,
    ModelSelError,
    SimulateError,
    EvalError,
    StateModelError,
    OSError,
)

FDR_GRID = (0.01, 0.02, 0.05, 0.10, 0.15, 0.20)

COMMON_DEFAULTS = {
    "out_dir": ".",
    "seed": 0,
    "threads": None,
    "q0": 0.05,
    "iters": 100_000,
    "burnin": 50_000,
    "thin": 10,
    "model": "HH",
    "paired": False,
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Resolved options for one subcommand invocation."""

    command: str
    options: dict

    def __post_init__(self):
        q0 = self.options.get("q0")
        if q0 is not None and not 0.0 < float(q0) < 1.0:
            raise SamplerError("q0 must lie in (0, 1)")
        model = self.options.get("model")
        if model is not None and model not in MODEL_CHOICES + ("auto",):
            raise SamplerError(f"model must be one of {MODEL_CHOICES + ('auto',)}")

    def __getitem__(self, key):
        return self.options[key]

    def hash(self) -> str:
        # out_dir and threads do not affect the numbers produced
        payload = {
            "command": self.command,
            **{k: v for k, v in self.options.items() if k not in ("out_dir", "threads")},
        }
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def meta_lines(self) -> tuple:
        return (
            f"hmmseq {__version__}",
            f"seed={self.options.get('seed', 0)}",
            f"config={self.hash()}",
        )


def _resolve(args: argparse.Namespace, defaults: dict) -> RunConfig:
    """flags > config file > defaults"""
    from_file: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            from_file = json.load(fh)
        if not isinstance(from_file, dict):
            raise IngestError("config file must hold a JSON object")
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise IngestError(f"unknown config keys: {sorted(unknown)}")
    options = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None and flag is not False:
            options[key] = flag
        elif key in from_file:
            options[key] = from_file[key]
        else:
            options[key] = default
    if "threads" in options and options["threads"] is None:
        options["threads"] = int(os.environ.get("HMMSEQ_THREADS", "1"))
    return RunConfig(args.command, options)


def _ensure_dir(path: str):
    os.makedirs(path, exist_ok=True)


def _write_lines(path: str, lines, meta):
    with open(path, "w") as fh:
        for line in meta:
            fh.write(f"# {line}\n")
        for line in lines:
            fh.write(line + "\n")


def _sampler_config(run: RunConfig, sigma_eps2: float = 0.0) -> SamplerConfig:
    return SamplerConfig(
        iterations=int(run["iters"]),
        burnin=int(run["burnin"]),
        thin=int(run["thin"]),
        seed=int(run["seed"]),
        sigma_eps2=sigma_eps2,
    )


def _load_blocks(run: RunConfig):
    cm = load_counts(run["input"], run["layout"])
    cm = filter_low_counts(cm)
    rho = upper_quartile_effects(cm)
    blocks = split_by_chromosome(cm, rho)
    sigma_eps2 = 0.0
    if run["paired"]:
        sigma_eps2 = estimate_sigma_eps(cm, rho)
        # the Metropolis proposal needs a nonzero prior scale
        sigma_eps2 = max(sigma_eps2, 1e-6)
    return blocks, _sampler_config(run, sigma_eps2)


def _run_blocks(blocks, label: str, cfg: SamplerConfig, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda b: run_chain(b, label, cfg), blocks))
    return [run_chain(block, label, cfg) for block in blocks]


def _cmd_simulate(run: RunConfig) -> int:
    spec = PRESETS[run["preset"]](
        seed=int(run["seed"]), noise=run["noise"], model=run["model"]
    )
    overrides = {}
    for key, field in (
        ("chromosomes", "chromosomes"),
        ("genes", "genes_per_chromosome"),
        ("replicates", "replicates"),
        ("gamma_shape", "gamma_shape"),
        ("gamma_scale", "gamma_scale"),
        ("zeta", "zeta"),
    ):
        value = run.options.get(key)
        if value is not None:
            overrides[field] = value
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    generate = simulate_negbin_dataset if spec.noise == "negbin" else simulate_poisson_dataset
    cm, truth = generate(spec)
    out = run["out_dir"]
    _ensure_dir(out)
    meta = run.meta_lines()
    write_counts(cm, os.path.join(out, "counts.tsv"), header_lines=meta)
    write_layout(
        cm,
        os.path.join(out, "layout.json"),
        meta={"tool": f"hmmseq {__version__}", "seed": int(run["seed"]), "config": run.hash()},
    )
    write_truth(truth, os.path.join(out, "truth.tsv"), header_lines=meta)
    return 0


def _write_diagnostics(path: str, fits: dict, blocks, meta):
    lines = ["chromosome\tmodel\tn_samples\taccept_delta\taccept_beta\taccept_eps\tmean_loglik"]
    for label in sorted(fits):
        for block, samples in zip(blocks, fits[label]):
            rates = samples.accept_rates
            lines.append(
                f"{block.chromosome}\t{label}\t{samples.n_samples}\t"
                f"{rates.get('delta', float('nan'))!r}\t"
                f"{rates.get('beta', float('nan'))!r}\t"
                f"{rates.get('eps', float('nan'))!r}\t"
                f"{float(samples.loglik.mean())!r}"
            )
    _write_lines(path, lines, meta)


def _cmd_fit(run: RunConfig) -> int:
    blocks, cfg = _load_blocks(run)
    out = run["out_dir"]
    threads = int(run["threads"])
    _ensure_dir(os.path.join(out, "chains"))
    meta = run.meta_lines()
    label = run["model"]
    if label == "auto":
        fits = fit_all_models(blocks, cfg, threads=threads)
        report = dic_report(fits, blocks)
        label = report.selected
        _write_lines(os.path.join(out, "dic.tsv"), report.to_lines(), meta)
        chains = fits[label]
        _write_diagnostics(os.path.join(out, "diagnostics.tsv"), fits, blocks, meta)
    else:
        chains = _run_blocks(blocks, label, cfg, threads)
        _write_diagnostics(
            os.path.join(out, "diagnostics.tsv"), {label: chains}, blocks, meta
        )
    for block, samples in zip(blocks, chains):
        samples.save(os.path.join(out, "chains", block.chromosome))
    manifest = {
        "chromosomes": [block.chromosome for block in blocks],
        "model": label,
        "seed": int(run["seed"]),
        "config": run.hash(),
        "version": __version__,
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


def _cmd_detect(run: RunConfig) -> int:
    fit_dir = run["input"]
    with open(os.path.join(fit_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    summaries = []
    for chrom in manifest["chromosomes"]:
        samples = ChainSamples.load(os.path.join(fit_dir, "chains", chrom))
        summaries.append(posterior_de_prob(samples))
    summary = combine_summaries(summaries)
    result = call_de(summary, float(run["q0"]))
    out = run["out_dir"]
    _ensure_dir(out)
    meta = run.meta_lines()
    write_gene_table(summary, result, os.path.join(out, "genes.tsv"), header_lines=meta)
    called = result.called_mask()
    by_rank = result.order[: result.n_called]
    _write_lines(
        os.path.join(out, "calls.txt"),
        [summary.gene_ids[i] for i in by_rank],
        meta + (f"n_called={int(called.sum())}", f"q0={float(run['q0'])!r}"),
    )
    return 0


def _cmd_select(run: RunConfig) -> int:
    blocks, cfg = _load_blocks(run)
    report = dic_report(
        fit_all_models(blocks, cfg, threads=int(run["threads"])), blocks
    )
    out = run["out_dir"]
    _ensure_dir(out)
    _write_lines(os.path.join(out, "dic.tsv"), report.to_lines(), run.meta_lines())
    return 0


def _plot_curve(path: str, x, y, xlabel: str, ylabel: str, diagonal: bool):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.0, 4.0))
    if diagonal:
        ax.plot([0, 1], [0, 1], color="0.6", linewidth=0.8, linestyle="--")
    ax.plot(x, y, color="black", linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": f"hmmseq {__version__}"})
    plt.close(fig)


def _cmd_eval(run: RunConfig) -> int:
    table = read_gene_table(run["input"])
    truth_cols = read_truth(run["truth"])
    de_by_id = dict(zip(truth_cols["gene_id"], truth_cols["de"]))
    missing = [g for g in table["gene_id"] if g not in de_by_id]
    if missing:
        raise EvalError(f"truth file lacks {len(missing)} gene ids, e.g. {missing[0]!r}")
    truth = np.array([de_by_id[g] for g in table["gene_id"]], dtype=bool)

    out = run["out_dir"]
    _ensure_dir(out)
    meta = run.meta_lines()

    curve = roc_curve(table["p_de"], truth)
    lines = [f"auc={float(curve.auc)!r}", "fpr\ttpr"]
    lines.extend(
        f"{float(fp)!r}\t{float(tp)!r}" for fp, tp in zip(curve.fpr, curve.tpr)
    )
    _write_lines(os.path.join(out, "roc.tsv"), lines, meta)
    _plot_curve(
        os.path.join(out, "roc.png"), curve.fpr, curve.tpr,
        "false positive rate", "true positive rate", diagonal=True,
    )

    pairs = fdr_calibration(table["p_de"], truth, FDR_GRID)
    lines = ["nominal\tobserved"]
    lines.extend(f"{float(q)!r}\t{float(o)!r}" for q, o in pairs)
    _write_lines(os.path.join(out, "fdr.tsv"), lines, meta)
    _plot_curve(
        os.path.join(out, "fdr.png"), pairs[:, 0], pairs[:, 1],
        "nominal FDR", "observed FDR", diagonal=True,
    )

    call_files = run.options.get("calls") or []
    if call_files:
        sets = {"detected": {g for g, c in zip(table["gene_id"], table["called"]) if c}}
        for path in call_files:
            with open(path) as fh:
                ids = {ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")}
            sets[os.path.splitext(os.path.basename(path))[0]] = ids
        regions = overlap_counts(sets)
        lines = ["sets\tcount"]
        lines.extend(f"{'&'.join(key)}\t{count}" for key, count in regions.items())
        _write_lines(os.path.join(out, "overlap.tsv"), lines, meta)
    return 0


def _cmd_spatial(run: RunConfig) -> int:
    table = read_gene_table(run["input"])
    order = sorted(
        range(len(table["gene_id"])),
        key=lambda i: (table["chromosome"][i], int(table["position"][i])),
    )
    calls = table["called"][order]
    chroms = [table["chromosome"][i] for i in order]
    result = spatial_geometric_test(calls, chroms, min_gaps=int(run["min_gaps"]))
    out = run["out_dir"]
    _ensure_dir(out)
    lines = [
        f"statistic={result.statistic!r}",
        f"df={result.df}",
        f"p_value={result.p_value!r}",
        f"n_gaps={result.n_gaps}",
        f"p_hat={result.p_hat!r}",
        "cell_lo\tcell_hi\tobserved\texpected",
    ]
    for lo, hi, obs, exp in result.cells:
        hi_txt = "inf" if hi is None else str(hi)
        lines.append(f"{lo}\t{hi_txt}\t{obs!r}\t{exp!r}")
    _write_lines(os.path.join(out, "spatial.tsv"), lines, run.meta_lines())
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmmseq",
        description="Bayesian DE-gene caller for two-treatment RNA-seq counts",
    )
    parser.add_argument("--version", action="version", version=f"hmmseq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, sampler=False, q0=False, model=False):
        p.add_argument("--config", help="JSON file with defaults for this subcommand")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--seed", type=int)
        if sampler:
            p.add_argument("--iters", type=int)
            p.add_argument("--burnin", type=int)
            p.add_argument("--thin", type=int)
            p.add_argument("--threads", type=int)
            p.add_argument("--paired", action="store_true", default=None)
        if q0:
            p.add_argument("--q0", type=float)
        if model:
            p.add_argument("--model", choices=MODEL_CHOICES + ("auto",))

    p = sub.add_parser("simulate", help="generate a benchmark dataset with truth")
    common(p, model=True)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--noise", choices=("poisson", "negbin"))
    p.add_argument("--chromosomes", type=int)
    p.add_argument("--genes", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--gamma-shape", dest="gamma_shape", type=float)
    p.add_argument("--gamma-scale", dest="gamma_scale", type=float)
    p.add_argument("--zeta", type=float)

    p = sub.add_parser("fit", help="run the MCMC sampler per chromosome")
    common(p, sampler=True, model=True)
    p.add_argument("--input")
    p.add_argument("--layout")

    p = sub.add_parser("detect", help="posterior DE table and FDR call list")
    common(p, q0=True)
    p.add_argument("--input", help="directory written by fit")

    p = sub.add_parser("select", help="DIC comparison of FF/FH/HF/HH")
    common(p, sampler=True)
    p.add_argument("--input")
    p.add_argument("--layout")

    p = sub.add_parser("eval", help="score detections against simulation truth")
    common(p)
    p.add_argument("--input", help="gene table from detect")
    p.add_argument("--truth")
    p.add_argument("--calls", nargs="*", help="extra call-list files for overlap")

    p = sub.add_parser("spatial-test", help="geometric gap test of call clustering")
    common(p)
    p.add_argument("--input", help="gene table from detect")
    p.add_argument("--min-gaps", dest="min_gaps", type=int)
    return parser


_DEFAULTS = {
    "simulate": {
        "preset": "desk",
        "noise": "poisson",
        "model": "HH",
        "chromosomes": None,
        "genes": None,
        "replicates": None,
        "gamma_shape": None,
        "gamma_scale": None,
        "zeta": None,
        "seed": 0,
        "out_dir": ".",
    },
    "fit": {
        "input": None,
        "layout": None,
        "model": "HH",
        "paired": False,
        "iters": 100_000,
        "burnin": 50_000,
        "thin": 10,
        "seed": 0,
        "threads": None,
        "out_dir": ".",
    },
    "detect": {"input": None, "q0": 0.05, "seed": 0, "out_dir": "."},
    "select": {
        "input": None,
        "layout": None,
        "paired": False,
        "iters": 100_000,
        "burnin": 50_000,
        "thin": 10,
        "seed": 0,
        "threads": None,
        "out_dir": ".",
    },
    "eval": {"input": None, "truth": None, "calls": None, "seed": 0, "out_dir": "."},
    "spatial-test": {"input": None, "min_gaps": 20, "seed": 0, "out_dir": "."},
}

_HANDLERS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "detect": _cmd_detect,
    "select": _cmd_select,
    "eval": _cmd_eval,
    "spatial-test": _cmd_spatial,
}


def run_command(argv) -> int:
    """Dispatch one subcommand; 0 on success, 1 with a one-line diagnostic
    on any recognized failure."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        run = _resolve(args, _DEFAULTS[args.command])
        for key in ("input", "layout", "truth"):
            if key in _DEFAULTS[args.command] and run.options.get(key) in (None, ""):
                if key == "layout" and args.command not in ("fit", "select"):
                    continue
                raise IngestError(f"--{key} is required for {args.command}")
        return _HANDLERS[args.command](run)
    except KNOWN_ERRORS as exc:
        print(f"hmmseq: {type(exc).__module__}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
