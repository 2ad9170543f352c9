import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focalize.assoc import (
    UNDERFLOW_FLOOR,
    ClutterModel,
    DetectionModel,
    NoiseModel,
    TdoaScan,
    association_marginals,
    association_sum,
    enumerate_valid,
    estimate_clutter_rate,
    gate,
    likelihood,
    log_association_sum,
    log_scan_likelihood,
    psi,
    r_factor,
    valid_count,
)
from focalize.geometry import Environment, ReceiverState, SourceState, feasible_mask, predict_tdoas

from oracles import brute_association, gauss_pdf

ENV = Environment(65.0, 1508.0)
RX = ReceiverState(20.0)


def random_case(rng, M):
    src = SourceState(rng.uniform(20, 3000), rng.uniform(0, 10))
    rx = ReceiverState(rng.uniform(0, 65))
    g = predict_tdoas(src.range, src.depth, rx.depth, ENV)
    sigma = tuple(rng.uniform(2e-4, 5e-3, size=3))
    d = tuple(rng.uniform(0.05, 0.95, size=3))
    z = []
    for _ in range(M):
        if rng.uniform() < 0.5:
            z.append(abs(g[rng.integers(3)] + rng.normal(0, sigma[0])))
        else:
            z.append(rng.uniform(0, 0.1))
    z = [min(v, 0.0999) for v in z]
    mu = rng.uniform(0.5, 6)
    return src, rx, TdoaScan(1, 0.0, tuple(z)), DetectionModel(d), ClutterModel(mu, 0.1), NoiseModel(sigma)


def test_psi():
    assert psi((0, 0, 0)) == 1
    assert psi((1, 2, 0)) == 1
    assert psi((2, 0, 2)) == 0
    assert psi((3, 3, 3)) == 0


@pytest.mark.parametrize("M", range(0, 7))
def test_enumerate_valid_is_the_psi_filtered_cube(M):
    A = enumerate_valid(3, M)
    ref = [a for a in itertools.product(range(M + 1), repeat=3) if psi(a)]
    assert [tuple(a) for a in A] == ref
    assert len(A) == valid_count(3, M)


def test_valid_count_closed_form():
    # j pairs detected: C(3, j) * M! / (M - j)!
    assert valid_count(3, 0) == 1
    assert valid_count(3, 1) == 4
    assert valid_count(3, 2) == 1 + 6 + 6
    assert valid_count(3, 5) == 1 + 15 + 60 + 60


def test_association_sum_matches_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(150):
        M = int(rng.integers(0, 7))
        src, rx, scan, det, clut, noise = random_case(rng, M)
        feas = feasible_mask(src.depth, rx.depth, ENV)
        d = det.probabilities(feas)
        g = predict_tdoas(src.range, src.depth, rx.depth, ENV)
        ref, ref_marg = brute_association(scan.measurements, g, d, noise.sigma, clut.mean_count, 0.1)
        got = association_sum(scan, src, rx, ENV, det, clut, noise)
        assert got == pytest.approx(ref, rel=1e-12)
        marg = association_marginals(scan, src, rx, ENV, det, clut, noise)
        np.testing.assert_allclose(marg, ref_marg, rtol=1e-12, atol=1e-300)
        np.testing.assert_allclose(marg.sum(axis=1), 1.0, rtol=1e-13)


def test_r_factor_branches():
    src = SourceState(400.0)
    g = predict_tdoas(400.0, 0.0, RX.depth, ENV)
    scan = TdoaScan(1, 0.0, (g[0] + 1e-4, 0.05))
    det, clut, noise = DetectionModel((0.3, 0.2, 0.1)), ClutterModel(2.0, 0.1), NoiseModel(5e-4)
    assert r_factor(1, 0, scan, src, RX, ENV, det, clut, noise) == pytest.approx(0.7)
    expected = 0.3 * gauss_pdf(g[0] + 1e-4, g[0], 5e-4) / (2.0 * 10.0)
    assert r_factor(1, 1, scan, src, RX, ENV, det, clut, noise) == pytest.approx(expected, rel=1e-12)
    expected = 0.1 * gauss_pdf(0.05, g[2], 5e-4) / (2.0 * 10.0)
    assert r_factor(3, 2, scan, src, RX, ENV, det, clut, noise) == pytest.approx(
        max(expected, UNDERFLOW_FLOOR), rel=1e-12
    )
    with pytest.raises(ValueError):
        r_factor(1, 3, scan, src, RX, ENV, det, clut, noise)


def test_r_factor_underflow_floor():
    src = SourceState(400.0)
    scan = TdoaScan(1, 0.0, (0.09,))
    noise = NoiseModel(1e-5)
    val = r_factor(1, 1, scan, src, RX, ENV, DetectionModel(), ClutterModel(), noise)
    assert val == UNDERFLOW_FLOOR


def test_infeasible_pair_contributes_only_miss():
    # receiver at the surface: pair 3 infeasible so d_3 = 0
    rx = ReceiverState(0.0)
    src = SourceState(300.0)
    g = predict_tdoas(300.0, 0.0, 0.0, ENV)
    scan = TdoaScan(1, 0.0, (g[0], g[1]))
    det = DetectionModel((0.5, 0.5, 0.5))
    assert r_factor(3, 0, scan, src, rx, ENV, det, ClutterModel(), NoiseModel()) == 1.0
    assert r_factor(3, 1, scan, src, rx, ENV, det, ClutterModel(), NoiseModel()) == 0.0
    marg = association_marginals(scan, src, rx, ENV, det, ClutterModel(), NoiseModel())
    assert marg[2, 0] == pytest.approx(1.0, rel=1e-15)
    assert np.all(marg[2, 1:] == 0.0)


def test_positionless_detection_ignores_feasibility():
    det = DetectionModel((0.5, 0.5, 0.5), position_dependent=False)
    np.testing.assert_array_equal(det.probabilities(np.array([True, False, True])), [0.5] * 3)


def test_zero_clutter_errors():
    scan = TdoaScan(1, 0.0, (0.01,))
    with pytest.raises(ValueError, match="mean_count is 0"):
        association_sum(scan, SourceState(300.0), RX, ENV, DetectionModel(), ClutterModel(0.0), NoiseModel())
    with pytest.raises(ValueError, match="outside clutter support"):
        association_sum(TdoaScan(1, 0.0, (0.2,)), SourceState(300.0), RX, ENV,
                        DetectionModel(), ClutterModel(), NoiseModel())


def test_empty_scan_is_product_of_misses():
    d = (0.12, 0.08, 0.06)
    s = association_sum(TdoaScan(1, 0.0), SourceState(800.0), RX, ENV,
                        DetectionModel(d), ClutterModel(), NoiseModel())
    assert s == pytest.approx(0.88 * 0.92 * 0.94, rel=1e-14)


def test_model_validation():
    with pytest.raises(ValueError):
        DetectionModel((1.5, 0.1, 0.1))
    with pytest.raises(ValueError):
        DetectionModel((0.1, 0.1))
    with pytest.raises(ValueError):
        ClutterModel(-1.0)
    with pytest.raises(ValueError):
        NoiseModel((1e-4, 0.0, 1e-4))
    with pytest.raises(ValueError):
        TdoaScan(1, 0.0, (-0.001,))
    assert NoiseModel(2e-4).sigma == (2e-4,) * 3


def test_likelihood_is_gaussian_density():
    src = SourceState(250.0)
    g = predict_tdoas(250.0, 0.0, RX.depth, ENV)
    noise = NoiseModel((1e-4, 2e-4, 3e-4))
    for l in (1, 2, 3):
        z = g[l - 1] + 1.5e-4
        assert likelihood(l, z, src, RX, ENV, noise) == pytest.approx(
            gauss_pdf(z, g[l - 1], noise.sigma[l - 1]), rel=1e-12
        )


def _particles(rng, J):
    ranges = rng.uniform(0, 3000, J)
    depths = rng.uniform(0, 5, J)
    return ranges, depths


def test_scan_likelihood_matches_association_sum_up_to_constant():
    rng = np.random.default_rng(11)
    det, clut, noise = DetectionModel((0.4, 0.3, 0.2)), ClutterModel(3.0), NoiseModel(5e-4)
    for M in range(0, 7):
        z = tuple(rng.uniform(0, 0.1, M))
        scan = TdoaScan(1, 0.0, z)
        r, p = _particles(rng, 64)
        tdoas = predict_tdoas(r, p, RX.depth, ENV)
        feas = feasible_mask(p, RX.depth, ENV)
        fast = log_scan_likelihood(tdoas, feas, z, det, clut, noise)
        const = M * math.log(3.0 / 0.1)
        ref = np.array([
            log_association_sum(scan, SourceState(a, b), RX, ENV, det, clut, noise)
            for a, b in zip(r, p)
        ])
        np.testing.assert_allclose(fast, ref + const, rtol=1e-11, atol=1e-9)


def test_scan_likelihood_survives_extreme_separation():
    # every particle is far from the measurements: the scaled contraction
    # underflows and the enumeration fallback must take over
    det, clut, noise = DetectionModel((0.9, 0.9, 0.9)), ClutterModel(1e-200), NoiseModel(1e-6)
    r = np.linspace(200, 400, 5)
    tdoas = predict_tdoas(r, np.zeros(5), RX.depth, ENV)
    feas = feasible_mask(np.zeros(5), RX.depth, ENV)
    z = (0.001, 0.002, 0.003)
    out = log_scan_likelihood(tdoas, feas, z, det, clut, noise)
    assert np.all(np.isfinite(out))
    # with negligible clutter, the best vector detects and assigns everything
    scan = TdoaScan(1, 0.0, z)
    ref = [log_association_sum(scan, SourceState(x), RX, ENV, det, clut, noise) for x in r]
    np.testing.assert_allclose(out, np.array(ref) + 3 * math.log(1e-200 / 0.1), rtol=1e-10)


def test_scan_likelihood_without_clutter():
    g = predict_tdoas(np.array([500.0, 900.0]), np.zeros(2), RX.depth, ENV)
    feas = np.ones((2, 3), bool)
    z = tuple(g[0])
    out = log_scan_likelihood(g, feas, z, DetectionModel((1, 1, 1)), ClutterModel(0.0), NoiseModel(1e-5))
    assert np.isfinite(out[0]) and out[0] > out[1]
    # more measurements than pairs cannot be explained without clutter
    out = log_scan_likelihood(g, feas, z + (0.05,), DetectionModel((1, 1, 1)), ClutterModel(0.0), NoiseModel(1e-5))
    assert np.all(out == -np.inf)


def test_gate_keeps_nearest_in_order():
    z = np.array([0.05, 0.011, 0.09, 0.0102, 0.03])
    pred = np.array([[0.01, 0.03, 0.02]])
    np.testing.assert_array_equal(gate(z, pred, 3), [0.011, 0.0102, 0.03])
    np.testing.assert_array_equal(gate(z, pred, 10), z)


def test_estimate_clutter_rate():
    scans = [TdoaScan(n, 0.0, (0.01,) * k) for n, k in enumerate([3, 5, 4], 1)]
    assert estimate_clutter_rate(scans, DetectionModel((0.5, 0.3, 0.2))) == pytest.approx(3.0)
    assert estimate_clutter_rate(scans[:1], DetectionModel((1, 1, 1))) == 0.01


@settings(max_examples=60, deadline=None)
@given(
    M=st.integers(0, 5),
    seed=st.integers(0, 2**31 - 1),
)
def test_marginals_row_stochastic(M, seed):
    rng = np.random.default_rng(seed)
    src, rx, scan, det, clut, noise = random_case(rng, M)
    marg = association_marginals(scan, src, rx, ENV, det, clut, noise)
    assert marg.shape == (3, M + 1)
    assert np.all(marg >= 0)
    np.testing.assert_allclose(marg.sum(axis=1), 1.0, rtol=1e-12)
    # each measurement is claimed at most once in expectation
    assert np.all(marg[:, 1:].sum(axis=0) <= 1 + 1e-12)
