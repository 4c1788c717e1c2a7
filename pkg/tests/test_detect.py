from collections import deque

import numpy as np
import pytest
from scipy.linalg import solve_discrete_lyapunov
from scipy.stats import chi2

from secest.detect import (
    Detect,
    DetectorState,
    SafeFilter,
    SubsetCovarianceTable,
    SubsetFilterBank,
    alarm_rate,
    chi2_detector,
    chi2_statistics,
    complement,
    detect_statistics,
    detect_step,
    learn_eta,
    optimal_innovations,
    precompute_subset_covariances,
    quadratic_forms,
    safe_statistics,
    steady_innovation_cov,
    windowed_sum,
)
from secest.kalman import FilterState, kalman_gain, kf_step, riccati_fixed_point
from secest.process_model import SystemModel, generate_random_system, simulate


@pytest.fixture(scope="module")
def table():
    model = generate_random_system(2, 5, 2, 2, seed=7)
    return model, precompute_subset_covariances(model, horizon=41_000, seed=0)


def steady_full_gain(model, sensors):
    sub = model.subsystem(sensors)
    K = np.zeros((model.q, model.m))
    K[:, sub.rows] = riccati_fixed_point(sub).K_ss
    return K


def anomaly_cov_oracle(model, B):
    """Steady covariance of x_B - x_Bc from the joint error dynamics of the two steady filters."""
    q = model.q
    K1 = steady_full_gain(model, B)
    K2 = steady_full_gain(model, complement(B, model.N))
    I = np.eye(q)
    F = np.zeros((2 * q, 2 * q))
    F[:q, :q] = (I - K1 @ model.C) @ model.A
    F[q:, q:] = (I - K2 @ model.C) @ model.A
    Gw = np.vstack([I - K1 @ model.C, I - K2 @ model.C])
    Gv = np.vstack([K1, K2])
    Sigma = solve_discrete_lyapunov(F, Gw @ model.Q @ Gw.T + Gv @ model.R @ Gv.T)
    D = np.hstack([I, -I])
    return D @ Sigma @ D.T


def test_subset_covariances_match_lyapunov_oracle(table):
    model, tab = table
    assert tab.valid.all() and tab.sample_count == 40_000
    for i, B in enumerate(tab.subsets):
        P = anomaly_cov_oracle(model, B)
        assert np.linalg.norm(tab.P_bar[i] - P) <= 0.05 * np.linalg.norm(P)


def test_table_needs_enough_samples(five_sensor_model):
    with pytest.raises(ValueError):
        precompute_subset_covariances(five_sensor_model, horizon=2_500, burn_in=1_000)


def test_table_cache_round_trip(tmp_path, scalar_model):
    a = precompute_subset_covariances(scalar_model, horizon=3_000, cache_dir=tmp_path)
    b = precompute_subset_covariances(scalar_model, horizon=3_000, cache_dir=tmp_path)
    assert len(list(tmp_path.iterdir())) == 1
    np.testing.assert_array_equal(a.P_bar, b.P_bar)
    np.testing.assert_allclose(a.P_inv, b.P_inv, rtol=1e-12)


def _scalar_table():
    return SubsetCovarianceTable(((0,),), np.ones((1, 1, 1)), np.ones((1, 1, 1)),
                                 np.array([True]), 0, 1)


def test_detect_step_examples():
    tab = _scalar_table()
    st = DetectorState(J=1, eta=3.0, window=deque(maxlen=1))
    assert detect_step(st, tab, np.array([[0.0]])) == (False, None, 0.0)
    assert detect_step(st, tab, np.array([[2.0]])) == (True, (0,), 4.0)
    assert st.alarms == [(2, 4.0, (0,))]
    st = DetectorState(J=3, eta=10.0, window=deque(maxlen=3))
    out = [detect_step(st, tab, np.array([[e]])) for e in (1.0, 2.0, 2.0, 3.0)]
    assert out[0][0] is None and out[1][0] is None
    assert out[2] == (False, None, 9.0) and out[3] == (True, (0,), 17.0)


def test_excluded_subsets_never_win():
    tab = SubsetCovarianceTable(((0,), (1,)), np.ones((2, 1, 1)), np.array([[[1.0]], [[0.0]]]),
                                np.array([True, False]), 0, 1)
    Qf = quadratic_forms(np.array([[0.1], [50.0]]), tab)
    assert Qf[1] == -np.inf and int(np.argmax(Qf)) == 0


def test_windowed_sum():
    W = windowed_sum(np.arange(1.0, 6.0), 2)
    assert np.isnan(W[0])
    np.testing.assert_array_equal(W[1:], [3.0, 5.0, 7.0, 9.0])


def test_streaming_matches_batch(table):
    model, tab = table
    Y = simulate(model, 400, seed=5).observations
    stat, loc = detect_statistics(model, tab, Y, J=10)
    det = Detect(model, tab, J=10, eta=25.0)
    for t, y in enumerate(Y):
        alarm, B, s = det.step(y)
        if t < 9:
            assert alarm is None and np.isnan(stat[t])
        else:
            assert s == pytest.approx(stat[t], rel=1e-12)
            assert alarm == (stat[t] > 25.0)
            if alarm:
                assert B == tab.subsets[loc[t]]


def test_detect_requires_table(five_sensor_model):
    with pytest.raises(ValueError):
        Detect(five_sensor_model, None)


def test_quadratic_form_mean_under_no_attack(table):
    model, tab = table
    Y = simulate(model, 21_000, seed=3).observations
    E = SubsetFilterBank(model, tab.subsets).anomalies(Y)[1000:]
    Qf = quadratic_forms(E, tab)
    # e' P^-1 e has mean q when P is the anomaly covariance
    assert np.all(np.abs(Qf.mean(axis=0) - model.q) < 0.15 * model.q)


def test_chi2_rate_at_quantile():
    Z = np.random.default_rng(0).standard_normal((200_000, 1))
    rate = alarm_rate(chi2_statistics(Z, np.eye(1), 1), 3.841)
    assert abs(rate - 0.05) < 3 * np.sqrt(0.05 * 0.95 / len(Z))


def test_chi2_rate_on_clean_innovations(five_sensor_model):
    Y = simulate(five_sensor_model, 60_000, seed=2).observations
    Z = optimal_innovations(five_sensor_model, Y)[1000:]
    S = steady_innovation_cov(five_sensor_model)
    for J in (1, 5):
        eta = chi2.ppf(0.95, J * five_sensor_model.m)
        assert abs(alarm_rate(chi2_statistics(Z, S, J), eta) - 0.05) < 0.006


def test_optimal_innovations_match_kalman_filter(five_sensor_model):
    Y = simulate(five_sensor_model, 50, seed=1).observations
    st = FilterState(np.zeros(2), np.zeros((2, 2)))
    Z = optimal_innovations(five_sensor_model, Y)
    for t, y in enumerate(Y):
        st, z = kf_step(st, five_sensor_model, y)
        np.testing.assert_allclose(Z[t], z, atol=1e-12)


def test_chi2_detector_boundary_and_errors():
    w = np.array([[1.0], [2.0]])
    assert chi2_detector(w, np.eye(1), 2, 5.0)
    assert not chi2_detector(w, np.eye(1), 2, 5.0 + 1e-9)
    with pytest.raises(ValueError):
        chi2_detector(w, np.eye(1), 3, 1.0)
    with pytest.raises(ValueError):
        chi2_detector(w, np.zeros((1, 1)), 2, 1.0)


def test_alarm_rate_monotone_in_eta(table):
    model, tab = table
    stat, _ = detect_statistics(model, tab, simulate(model, 5_000, seed=9).observations, 10)
    rates = [alarm_rate(stat, eta) for eta in np.linspace(0, 200, 41)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert rates[0] == 1.0 and alarm_rate(stat, np.inf) == 0.0


def test_safe_filter_with_all_sensors_safe_is_kalman(five_sensor_model):
    Y = simulate(five_sensor_model, 100, seed=4).observations
    f = SafeFilter(five_sensor_model, range(5), J=3, eta=0.0)
    st = FilterState(np.zeros(2), np.zeros((2, 2)))
    for y in Y:
        alarm, _, x = f.step(y)
        st, _ = kf_step(st, five_sensor_model, y)
        assert alarm is False
        np.testing.assert_allclose(x, st.x_hat, atol=1e-12)


def test_safe_filter_without_alarms_is_kalman(five_sensor_model):
    Y = simulate(five_sensor_model, 100, seed=4).observations
    f = SafeFilter(five_sensor_model, [3, 4], J=3)
    st = FilterState(np.zeros(2), np.zeros((2, 2)))
    for y in Y:
        _, _, x = f.step(y)
        st, _ = kf_step(st, five_sensor_model, y)
        np.testing.assert_allclose(x, st.x_hat, atol=1e-10)


def test_safe_statistic_is_chi2_under_no_attack(five_sensor_model):
    Y = simulate(five_sensor_model, 40_000, seed=6).observations
    s = safe_statistics(five_sensor_model, [3, 4], Y, J=1)[500:]
    # conditional innovation of the 6 unsafe rows
    assert abs(np.mean(s) - 6.0) < 0.1
    assert abs(alarm_rate(s, chi2.ppf(0.95, 6)) - 0.05) < 0.006


def test_safe_filter_drops_unsafe_rows_on_alarm(five_sensor_model):
    m = five_sensor_model
    f = SafeFilter(m, [3, 4], J=1, eta=0.0)
    y = np.full(10, 100.0)
    alarm, _, x = f.step(y)
    assert alarm is True
    P_pred = m.Q
    rows = m.sensor_rows([3, 4])
    Ks = kalman_gain(P_pred, m.C[rows], m.R[np.ix_(rows, rows)])
    np.testing.assert_allclose(x, Ks @ y[rows], atol=1e-12)


def test_learn_alpha_one_drives_eta_to_zero():
    st = learn_eta(np.ones(20), 1.0, eta0=5.0, a=lambda t: 1.0)
    assert st.trace[:6] == [4.0, 3.0, 2.0, 1.0, 0.0, 0.0] and st.eta == 0.0


def test_learn_tiny_alpha_drifts_up():
    stats = np.random.default_rng(0).chisquare(4, size=1000)
    st = learn_eta(stats, 1e-6, eta0=0.0, a=lambda t: 1.0 / t)
    assert st.trace[0] > 0 and st.eta > st.trace[0]


def test_learn_respects_cap():
    stats = np.full(100, 50.0)
    st = learn_eta(stats, 0.01, eta0=0.0, a=lambda t: 10.0, l=3.0)
    assert max(st.trace) == 3.0


def test_learn_hits_target_rate():
    rng = np.random.default_rng(1)
    stats = rng.chisquare(20, size=100_000)
    for alpha in (0.01, 0.05, 0.1):
        eta = learn_eta(stats, alpha).eta
        assert abs(alarm_rate(rng.chisquare(20, size=200_000), eta) - alpha) < 0.1 * alpha


def test_learn_rejects_bad_alpha():
    with pytest.raises(ValueError):
        learn_eta(np.ones(10), 0.0)


def test_localisation_on_separable_instance():
    # four sensors watch the same scalar state; one is biased
    m = SystemModel(A=[[0.8]], Q=[[0.1]], C=np.ones((4, 1)), R=0.1 * np.eye(4), N=4, k=1, n0=1)
    tab = precompute_subset_covariances(m, horizon=3_000, burn_in=1_000)
    Y = simulate(m, 2_000, seed=1).observations
    Y[:, 2] += 3.0
    stat, loc = detect_statistics(m, tab, Y, 10)
    picked = [tab.subsets[i] for i in loc[100:]]
    assert picked.count((2,)) / len(picked) > 0.99


def test_scalar_subset_covariance_matches_independent_simulation():
    m = SystemModel(A=[[0.7]], Q=[[0.5]], C=[[1.0], [0.6], [1.4]], R=np.diag([0.3, 0.2, 0.5]),
                    N=3, k=1, n0=1)
    tab = precompute_subset_covariances(m, horizon=101_000, seed=0)
    Y = simulate(m, 1_000_000, seed=123).observations
    E = SubsetFilterBank(m, tab.subsets).anomalies(Y)[1000:, :, 0]
    np.testing.assert_allclose(tab.P_bar[:, 0, 0], E.var(axis=0), rtol=0.05)
