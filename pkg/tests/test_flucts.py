from __future__ import annotations

import json
import math

import numpy as np
import oracle
import pytest

from nathermo.flucts import (
    DrivenSetupError,
    detailed_residuals,
    ensemble_averages,
    entropy_production,
    ft_report,
    integral_exchange_ft,
    integral_work_ft,
    kl_entropy_production,
    log_mean_exp,
)
from nathermo.heisenberg import HeisenbergParams, build_exchange_model
from nathermo.trajectories import EnsembleOptions, enumerate_ensemble

THETAS = [0.0, 0.4, math.pi / 2, 2.2, math.pi]


def test_log_mean_exp_handles_large_exponents():
    w = np.array([0.5, 0.5, 0.0])
    x = np.array([800.0, 800.0, 5000.0])
    assert log_mean_exp(w, x) == pytest.approx(800.0)
    assert log_mean_exp(np.zeros(2), np.zeros(2)) == -math.inf


@pytest.mark.parametrize("theta", THETAS)
def test_exchange_ft_is_one(exchange, theta):
    ens = enumerate_ensemble(exchange(theta))
    assert abs(integral_exchange_ft(ens) - 1) < 1e-10
    assert abs(integral_exchange_ft(ens, "formula") - 1) < 1e-10


def test_exchange_ft_matches_oracle(exchange):
    for theta in (0.4, 2.2):
        model = oracle.heisenberg(theta)
        ens = enumerate_ensemble(exchange(theta))
        assert integral_exchange_ft(ens, "omit") == pytest.approx(
            oracle.exchange_ft_without_epsilon(model), abs=1e-13
        )
        assert oracle.exchange_ft_identity(model) == pytest.approx(1, abs=1e-12)


def test_exchange_ft_without_epsilon_deviates(exchange):
    ens = enumerate_ensemble(exchange(math.pi / 2))
    assert abs(integral_exchange_ft(ens, "omit") - 1) > 1e-3


def test_exchange_ft_commuting_is_heat_ft(exchange):
    ens = enumerate_ensemble(exchange(0.0))
    dlam = ens.setup.delta_affinities
    heat_only = np.sum(ens.p_forward * np.exp(-ens.q @ dlam))
    assert heat_only == pytest.approx(1, abs=1e-10)


def test_exchange_ft_rejects_driven(driven):
    ens = enumerate_ensemble(driven(1.0))
    with pytest.raises(DrivenSetupError):
        integral_exchange_ft(ens)
    with pytest.raises(ValueError):
        integral_exchange_ft(enumerate_ensemble(build_exchange_model(HeisenbergParams())), "x")


@pytest.mark.parametrize("theta", [0.0, 1.0, math.pi])
def test_work_ft_normalization_route(driven, exchange, theta):
    for setup in (driven(theta), exchange(theta)):
        res = integral_work_ft(enumerate_ensemble(setup))
        assert res.excluded_mass == 0
        assert abs(res.normalization - 1) < 1e-10


def test_work_ft_decomposition_matches_oracle(driven):
    for theta in (0.9, 2.8):
        model = oracle.heisenberg(theta, driven=True)
        ens = enumerate_ensemble(driven(theta))
        assert integral_work_ft(ens).decomposition == pytest.approx(
            oracle.work_ft_decomposition(model), rel=1e-9
        )
        mn = enumerate_ensemble(driven(theta), EnsembleOptions(delta_a_basis="mn"))
        assert integral_work_ft(mn).decomposition == pytest.approx(
            oracle.work_ft_decomposition(model, "mn"), rel=1e-9
        )


def test_work_ft_commuting_equal_affinities_is_exact():
    s = build_exchange_model(HeisenbergParams(theta=0.0, beta=0.5, beta_r=0.5))
    assert integral_work_ft(enumerate_ensemble(s)).decomposition == pytest.approx(1, abs=1e-14)


def test_work_ft_large_drive_stays_finite(driven):
    res = integral_work_ft(enumerate_ensemble(driven(math.pi)))
    assert math.isfinite(res.decomposition)


def test_work_ft_omit_epsilon_changes_value(driven):
    ens = enumerate_ensemble(driven(1.2))
    assert integral_work_ft(ens, omit_epsilon=True).decomposition != pytest.approx(
        integral_work_ft(ens).decomposition, rel=1e-6
    )


@pytest.mark.parametrize("theta", THETAS)
def test_exchange_detailed_residuals(exchange, theta):
    max_abs, table = detailed_residuals(enumerate_ensemble(exchange(theta)))
    assert max_abs < 1e-9
    assert table.shape == (64,)


@pytest.mark.parametrize("theta", [0.0, math.pi])
def test_commuting_detailed_residuals(exchange, theta):
    assert detailed_residuals(enumerate_ensemble(exchange(theta)))[0] < 1e-10


def test_work_detailed_residual_table(driven):
    max_abs, table = detailed_residuals(enumerate_ensemble(driven(1.0)), "work")
    assert np.isfinite(max_abs)
    assert np.nanmax(np.abs(table)) == max_abs
    with pytest.raises(ValueError):
        detailed_residuals(enumerate_ensemble(driven(1.0)), "other")


def test_averages_commuting(exchange):
    avg = ensemble_averages(enumerate_ensemble(exchange(0.0)))
    ep = entropy_production(enumerate_ensemble(exchange(0.0)))
    assert abs(avg.E[2]) < 1e-10
    assert avg.Q[2] == pytest.approx(ep.per_charge[2], abs=1e-10)


def test_averages_against_oracle(exchange):
    for theta in (0.4, 2.2):
        ref = oracle.averages(oracle.heisenberg(theta))
        ens = enumerate_ensemble(exchange(theta))
        avg = ensemble_averages(ens)
        assert np.allclose(avg.Q, ref["Q"], atol=1e-13)
        # undriven: eps = da - q recordwise, so E = <da> - Q
        assert np.allclose(avg.E, ref["dA"] - ref["Q"], atol=1e-12)
        assert kl_entropy_production(ens) == pytest.approx(ref["kl"], abs=1e-12)


def test_driven_averages_against_oracle(driven):
    for theta in (0.0, math.pi / 2):
        ref = oracle.averages(oracle.heisenberg(theta, driven=True))
        avg = ensemble_averages(enumerate_ensemble(driven(theta)))
        assert np.allclose(avg.Q, ref["Q"], atol=1e-9)
        # w + eps = da - q on every record
        assert np.allclose(avg.W + avg.E, ref["dA"] - ref["Q"], atol=1e-9)


def test_nonabelian_term_negative_past_half_pi(exchange):
    assert ensemble_averages(enumerate_ensemble(exchange(2.6))).E[2] < 0


def test_averages_without_coupling():
    from test_trajectories import custom_setup

    s = custom_setup(0.3 * np.diag([1, -1]), 0.5 * np.diag([1, -1]), np.zeros((4, 4)),
                     [0.3, 0, 0.2], [0, 0, 0.4])
    avg = ensemble_averages(enumerate_ensemble(s))
    assert np.all(avg.W == 0) and np.all(avg.E == 0) and np.allclose(avg.Q, 0)


def test_endpoint_and_stochastic_coherence_reported(driven):
    avg = ensemble_averages(enumerate_ensemble(driven(1.0)))
    for v in (avg.delta_C, avg.delta_C_endpoint, avg.coherence_gap, avg.athermality_gap):
        assert math.isfinite(v)


def test_entropy_production_equal_affinities_zero():
    s = build_exchange_model(HeisenbergParams(theta=0.0, beta=0.5, beta_r=0.5))
    ep = entropy_production(enumerate_ensemble(s))
    assert abs(ep.sigma) < 1e-15 and abs(ep.kl) < 1e-15


@pytest.mark.parametrize("theta", np.linspace(0, math.pi, 9))
def test_entropy_production_positive_and_kl(exchange, theta):
    ep = entropy_production(enumerate_ensemble(exchange(float(theta))))
    assert ep.sigma >= -1e-12
    assert ep.sigma == pytest.approx(ep.kl, abs=1e-9)
    assert ep.per_charge.sum() == pytest.approx(ep.sigma, abs=1e-14)


def test_driven_entropy_production_uses_endpoint_free_entropy(driven):
    ens = enumerate_ensemble(driven(1.0))
    avg = ensemble_averages(ens)
    ep = entropy_production(ens, avg)
    s = ens.setup
    expected = s.affinities @ (avg.W + avg.E) + s.delta_affinities @ avg.Q - avg.delta_F_neq
    assert ep.sigma == pytest.approx(expected, abs=1e-12)


def test_system_massieu_route_is_exact(driven):
    rep = ft_report(enumerate_ensemble(driven(1.0)))
    assert rep.diagnostics["ft_work_system_massieu"] == pytest.approx(1, abs=1e-10)


def test_report_serialization(exchange, driven):
    rep = ft_report(enumerate_ensemble(exchange(1.0)))
    d = json.loads(rep.to_json())
    for key in (
        "ft_exchange",
        "ft_work",
        "ft_normalization",
        "max_detailed_residual",
        "averages",
        "sigma",
        "excluded_mass",
        "mode_flags",
    ):
        assert key in d
    assert set(d["averages"]) == {"W", "E", "Q", "delta_C", "delta_D", "delta_F_r", "delta_F_neq"}
    assert d["mode_flags"]["mode"] == "exchange"
    assert len(d["averages"]["E"]) == 3
    dr = ft_report(enumerate_ensemble(driven(1.0)))
    assert dr.ft_exchange is None
    assert dr.mode_flags["mode"] == "work"
    json.loads(dr.to_json())


def test_approximate_flag(exchange):
    ex = enumerate_ensemble(exchange(math.pi / 2), EnsembleOptions(singular="exclude"))
    rep = ft_report(ex)
    assert rep.approximate and rep.excluded_mass > 1e-9
    assert not ft_report(enumerate_ensemble(exchange(math.pi / 2))).approximate
