"""Service-time estimator: running means, loss accounting, residuals."""

import random

import pytest

from capest.estimator import (
    NoMeasurementError,
    ServiceEstimator,
    lost_packet_service_time,
)


def test_running_mean_equals_arithmetic_mean():
    est = ServiceEstimator(link=(1, 2))
    rng = random.Random(0)
    samples = [rng.uniform(800.0, 2500.0) for _ in range(200)]
    for s in samples:
        est.update_service(s)
    assert est.k == 200
    assert est.s_bar == pytest.approx(sum(samples) / len(samples), rel=1e-12)


def test_incremental_matches_batch():
    # feeding one sample at a time must agree with a single-shot average
    a = ServiceEstimator()
    b = ServiceEstimator()
    samples = [1176.0, 1432.0, 901.5, 2210.0]
    for s in samples:
        a.update_service(s)
    b._sum_s = sum(samples)
    b.k = len(samples)
    assert a.s_bar == pytest.approx(b.s_bar, rel=1e-12)


def test_service_sample_must_be_positive():
    est = ServiceEstimator()
    with pytest.raises(ValueError):
        est.update_service(0.0)
    with pytest.raises(ValueError):
        est.update_service(-10.0)


def test_residual_sign_tracks_load():
    est = ServiceEstimator(link=(1, 2))
    for _ in range(100):
        est.update_service(1000.0)  # service rate 1000 pps
    under = est.residual(400.0)
    over = est.residual(1400.0)
    assert under.service_rate == pytest.approx(1000.0)
    assert under.residual == pytest.approx(600.0)
    assert over.residual == pytest.approx(-400.0)
    assert under.link == (1, 2)


def test_residual_requires_samples():
    with pytest.raises(NoMeasurementError):
        ServiceEstimator(link=(1, 2)).residual(100.0)


def test_reset_clears_all_state():
    est = ServiceEstimator(retransmit_limit=4)
    est.update_service(1000.0)
    est.update_airtime(1024, 11e6)
    est.account_lost_packet(500.0, 1023.0, 20.0, 815.0)
    est.add_queueing_delay(123.0)
    est.reset()
    assert est.k == 0 and est.k_t == 0
    assert est.sent == 0 and est.lost == 0
    assert est.s_bar == 0.0 and est.t_bar == 0.0
    assert est.queueing_delay_us == 0.0
    assert not est.saturated_lossy
    with pytest.raises(NoMeasurementError):
        est.residual(0.0)


def test_airtime_mean():
    est = ServiceEstimator()
    est.update_airtime(1024, 11e6)
    est.update_airtime(512, 11e6)
    t1 = 1024 * 8 / 11e6 * 1e6
    t2 = 512 * 8 / 11e6 * 1e6
    assert est.t_bar == pytest.approx((t1 + t2) / 2)
    with pytest.raises(ValueError):
        est.update_airtime(0, 11e6)


def test_lost_packet_service_time_formula():
    # elapsed MAC time plus half the max window and one success, scaled by the
    # expected repeat count under per-attempt loss
    got = lost_packet_service_time(
        time_in_mac=2000.0, w_m_slots=1023.0, slot_us=20.0, t_s_us=815.0, p_loss=0.5
    )
    assert got == pytest.approx(2000.0 + (1023.0 * 20.0 / 2.0 + 815.0) / 0.5)
    no_loss = lost_packet_service_time(100.0, 31.0, 20.0, 815.0, 0.0)
    assert no_loss == pytest.approx(100.0 + 31.0 * 10.0 + 815.0)
    with pytest.raises(ValueError):
        lost_packet_service_time(0.0, 31.0, 20.0, 815.0, 1.0)
    with pytest.raises(ValueError):
        lost_packet_service_time(0.0, 31.0, 20.0, 815.0, -0.1)


def test_lost_packet_service_time_monotone_in_loss():
    base = dict(time_in_mac=0.0, w_m_slots=1023.0, slot_us=20.0, t_s_us=815.0)
    vals = [lost_packet_service_time(p_loss=p, **base) for p in (0.0, 0.3, 0.6, 0.9)]
    assert vals == sorted(vals)
    assert vals[-1] > 5 * vals[0]


def test_loss_accounting_recovers_attempt_probability():
    # drop ratio d with retransmit limit m implies per-attempt loss d**(1/m)
    est = ServiceEstimator(retransmit_limit=2)
    for _ in range(96):
        est.update_service(1000.0)
    sample = est.account_lost_packet(
        time_in_mac=3000.0, w_m_slots=1023.0, slot_us=20.0, t_s_us=815.0
    )
    # after the drop: 97 sent, 1 lost
    p = (1 / 97) ** 0.5
    assert sample == pytest.approx(3000.0 + (1023.0 * 10.0 + 815.0) / (1 - p))
    assert est.sent == 97
    assert est.lost == 1
    assert est.k == 97  # synthetic sample joined the service mean
    assert est.loss_ratio == pytest.approx(1 / 97)


def test_loss_accounting_requires_finite_retries():
    est = ServiceEstimator(retransmit_limit=None)
    with pytest.raises(ValueError):
        est.account_lost_packet(0.0, 31.0, 20.0, 815.0)


def test_all_drops_saturates_instead_of_degenerating():
    # every packet lost drives d -> 1; the estimator must clamp p_loss short of
    # 1 and flag the window rather than divide by zero
    est = ServiceEstimator(retransmit_limit=4)
    for _ in range(10):
        sample = est.account_lost_packet(100.0, 1023.0, 20.0, 815.0)
        assert sample > 0 and sample < 1e12
    assert est.saturated_lossy
    assert est.loss_ratio == 1.0
    r = est.residual(50.0)
    assert r.service_rate > 0.0


def test_synthetic_samples_lower_service_rate():
    clean = ServiceEstimator(retransmit_limit=7)
    lossy = ServiceEstimator(retransmit_limit=7)
    for _ in range(100):
        clean.update_service(1176.0)
        lossy.update_service(1176.0)
    for _ in range(5):
        lossy.account_lost_packet(2000.0, 1023.0, 20.0, 815.0)
    assert lossy.residual(0.0).service_rate < clean.residual(0.0).service_rate


def test_queueing_delay_accumulates():
    est = ServiceEstimator()
    est.add_queueing_delay(100.0)
    est.add_queueing_delay(250.0)
    assert est.queueing_delay_us == pytest.approx(350.0)
