import math

import pytest
from hypothesis import given, strategies as st

from bnfisher.arch import ArchSpec, InitSpec, LayerSpec, cifar_conv, mnist_fc
from bnfisher.eigenbound import (SWEEP_COLUMNS, DegenerateSpectrumError, critical_learning_rate,
                                 gamma_sweep, layer_contribution, predict, spectral_report,
                                 sweep_to_csv)
from bnfisher.meanfield import LayerOrderParams, OrderParamProfile, run_profile
from strategies import any_spec


def _fc_profile(h_tilde_below, delta_tilde, fan_in):
    spec = ArchSpec((LayerSpec("fc", fan_in, 3, activation="linear"),), InitSpec(2.0, 0.5, 0.9), fan_in)
    return OrderParamProfile((LayerOrderParams(h=1.0, h_tilde=h_tilde_below),
                              LayerOrderParams(delta=1.0, delta_tilde=delta_tilde)), spec)


def test_fc_contribution_example():
    prof = _fc_profile(1 / (2 * math.pi), 1.0, 1000)
    assert layer_contribution(prof, 1) == pytest.approx(159.155, abs=1e-3)


@pytest.mark.parametrize("lam,mu,eta", [(100.0, 0.9, 0.038), (200.0, 0.9, 0.019), (159.155, 0.0, 0.012566)])
def test_critical_rate_examples(lam, mu, eta):
    assert critical_learning_rate(lam, mu) == pytest.approx(eta, rel=1e-4)


def test_eta_opt_is_half():
    rep = predict(mnist_fc())
    assert rep.eta_opt == rep.eta_star / 2
    assert rep.momentum == 0.9
    assert rep.lambda_bound == pytest.approx(sum(rep.f_per_layer), rel=1e-15)


def test_single_site_conv_equals_fc():
    conv = ArchSpec((LayerSpec("conv", 12, 5, kernel_sites=1, spatial_sites=1, kernel_size=1),
                     LayerSpec("fc", 5, 2, activation="linear")), InitSpec(2.0, 0.5, 0.9), 12)
    fc = ArchSpec((LayerSpec("fc", 12, 5), LayerSpec("fc", 5, 2, activation="linear")),
                  InitSpec(2.0, 0.5, 0.9), 12)
    try:
        a = predict(conv)
    except ValueError:
        pytest.skip("conv layer geometry needs an image input")
    assert a.lambda_bound == pytest.approx(predict(fc).lambda_bound, rel=1e-12)


def test_doubling_contributions_halves_eta():
    prof = _fc_profile(0.2, 1.0, 50)
    twice = _fc_profile(0.4, 1.0, 50)
    assert spectral_report(twice).eta_star == pytest.approx(spectral_report(prof).eta_star / 2, rel=1e-15)


def test_zero_bound_is_degenerate():
    with pytest.raises(DegenerateSpectrumError):
        spectral_report(_fc_profile(0.0, 1.0, 10))


def test_layer_index_checked():
    with pytest.raises(IndexError):
        layer_contribution(run_profile(mnist_fc()), 0)


@given(any_spec, st.floats(0.0, 0.99))
def test_bound_positive_and_rate_consistent(spec, mu):
    rep = spectral_report(run_profile(spec), mu)
    assert all(f >= 0 for f in rep.f_per_layer)
    assert rep.eta_star * rep.lambda_bound == pytest.approx(2 * (1 + mu), rel=1e-12)


@pytest.mark.parametrize("builder", [mnist_fc, cifar_conv])
def test_bound_grows_with_gamma(builder):
    rows = [r for r in gamma_sweep(builder(1.0, True), [0.2 * k for k in range(1, 21)]) if r.variant == "bn"]
    lam = [r.lambda_bound for r in rows]
    assert all(b > a for a, b in zip(lam, lam[1:]))


def test_sweep_rows_and_csv():
    grid = [0.1 * k for k in range(1, 41)]
    rows = gamma_sweep(mnist_fc(), grid)
    assert len(rows) == 80
    assert [r.variant for r in rows].count("vanilla") == 40
    text = sweep_to_csv(rows)
    lines = text.splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS)
    assert len(lines) == 81
    assert len(gamma_sweep(mnist_fc(), grid, include_vanilla=False, jobs=2)) == 40


def test_sweep_needs_bn_and_grid():
    with pytest.raises(ValueError):
        gamma_sweep(mnist_fc(1.0, False), [1.0])
    with pytest.raises(ValueError):
        gamma_sweep(mnist_fc(), [])


def test_small_gamma_beats_vanilla():
    rows = gamma_sweep(mnist_fc(), [0.5, 1.0])
    van = rows[-1].eta_star
    assert all(r.eta_star > van for r in rows if r.variant == "bn")
