import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focalize.assoc import ClutterModel, DetectionModel, NoiseModel, TdoaScan
from focalize.filter import (
    FilterConfig,
    FilterDivergence,
    Models,
    MotionModel,
    ParticleFilter,
    ParticleSet,
    Prior,
    fold_range,
    init,
    make_rng,
    mmse_estimate,
    predict,
    resample,
    scan_log_likelihood,
    systematic_indices,
    update,
)
from focalize.geometry import Environment, ReceiverState, SourceState, predict_tdoas

ENV = Environment()
RX = ReceiverState(20.0)


def test_motion_matrices():
    m = MotionModel(3.0, 0.05, 0.0)
    np.testing.assert_array_equal(m.F, [[1, 0, 3], [0, 1, 0], [0, 0, 1]])
    np.testing.assert_array_equal(m.G, [[4.5, 0], [0, 3], [3, 0]])
    x = np.array([[1000.0, 0.0, 3.0]])
    y = m.propagate(x, None)
    np.testing.assert_array_equal(y, [[1009.0, 0.0, 3.0]])


def test_motion_covariance_matches_closed_form():
    m = MotionModel(3.0, 0.05, 0.2)
    rng = make_rng(3)
    x = np.zeros((200_000, 3))
    P = np.zeros((3, 3))
    Q = m.G @ np.diag([0.05, 0.2]) @ m.G.T
    for _ in range(5):
        x = m.propagate(x, rng)
        P = m.F @ P @ m.F.T + Q
    emp = np.cov(x.T)
    for i in range(3):
        assert emp[i, i] == pytest.approx(P[i, i], rel=0.02)
    assert emp[0, 2] == pytest.approx(P[0, 2], rel=0.03)


def test_prior_sample():
    p = Prior((0.0, 5000.0), (0.0, 0.0), 5.0)
    x = p.sample(50_000, make_rng(1))
    assert x[:, 0].min() >= 0 and x[:, 0].max() <= 5000
    assert x[:, 0].mean() == pytest.approx(2500, rel=0.02)
    assert np.all(x[:, 1] == 0)
    assert x[:, 2].std() == pytest.approx(5.0, rel=0.02)
    with pytest.raises(ValueError):
        Prior((10.0, 5.0))


def test_init_uniform_weights():
    ps = init(Prior(), 100, 0)
    assert len(ps) == 100
    np.testing.assert_allclose(ps.weights, 0.01)
    assert ps.effective_size() == pytest.approx(100)
    with pytest.raises(ValueError):
        init(Prior(), 0, 0)
    assert ps[3].weight == pytest.approx(0.01)


def test_fold_range():
    x = np.array([[-5.0, 0.0, -3.0], [5.0, -1.0, 2.0]])
    fold_range(x)
    np.testing.assert_array_equal(x, [[5.0, 0.0, 3.0], [5.0, 1.0, 2.0]])


def test_predict_keeps_weights():
    ps = init(Prior(), 10, 0)
    ps.weights = np.arange(1, 11) / 55
    out = predict(ps, MotionModel(), make_rng(0))
    np.testing.assert_array_equal(out.weights, ps.weights)
    assert np.all(out.states[:, 0] >= 0)


def test_update_is_bayes_rule():
    rng = make_rng(4)
    states = np.column_stack([rng.uniform(100, 2000, 50), np.zeros(50), np.zeros(50)])
    w = rng.uniform(size=50)
    w /= w.sum()
    ps = ParticleSet(states, w)
    scan = TdoaScan(1, 0.0, (0.02, 0.05))
    models = (ENV, DetectionModel((0.5, 0.4, 0.3)), ClutterModel(2.0), NoiseModel(1e-3))
    ll = scan_log_likelihood(states, scan, RX, *models)
    post = update(ps, scan, RX, *models)
    ref = w * np.exp(ll - ll.max())
    np.testing.assert_allclose(post.weights, ref / ref.sum(), rtol=1e-12)
    assert post.time_index == 1
    assert post.ess == pytest.approx(1 / np.sum(post.weights**2))


def test_update_raises_when_nothing_explains_the_scan():
    ps = init(Prior(), 20, 0)
    scan = TdoaScan(4, 9.0, (0.01, 0.02, 0.03, 0.04))  # four measurements, no clutter
    with pytest.raises(FilterDivergence) as exc:
        update(ps, scan, RX, ENV, DetectionModel((1, 1, 1)), ClutterModel(0.0), NoiseModel())
    assert exc.value.time_index == 4


@settings(max_examples=100, deadline=None)
@given(
    w=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=60).filter(lambda v: sum(v) > 1e-6),
    seed=st.integers(0, 2**32 - 1),
)
def test_systematic_counts_are_floor_or_ceiling(w, seed):
    w = np.array(w) / np.sum(w)
    idx = systematic_indices(w, make_rng(seed))
    counts = np.bincount(idx, minlength=len(w))
    expected = len(w) * w
    assert np.all(counts >= np.floor(expected - 1e-9))
    assert np.all(counts <= np.ceil(expected + 1e-9))
    assert counts[w == 0].sum() == 0


def test_resample_threshold_and_jitter():
    J = 1000
    states = np.column_stack([np.arange(J, dtype=float), np.zeros(J), np.ones(J)])
    ps = ParticleSet(states.copy(), np.full(J, 1 / J))
    assert resample(ps, 0.5, make_rng(0)) is ps
    w = np.zeros(J)
    w[7] = 1.0
    out = resample(ParticleSet(states.copy(), w), 0.5, make_rng(0), jitter=0.1, speed_jitter=0.0)
    np.testing.assert_allclose(out.weights, 1 / J)
    assert out.states[:, 0].mean() == pytest.approx(7.0, abs=0.02)
    assert out.states[:, 0].std() == pytest.approx(0.1, rel=0.1)
    assert np.all(out.states[:, 2] == 1.0)


def test_mmse_is_weighted_mean():
    states = np.array([[100.0, 0.0, 1.0], [300.0, 0.0, -1.0]])
    est = mmse_estimate(ParticleSet(states, np.array([0.25, 0.75])))
    assert est == SourceState(250.0, 0.0, -0.5)


def _degenerate_run(seed, n_scans=12, J=2000):
    env = ENV
    motion = MotionModel(3.0, 0.05)
    truth = [np.array([600.0 + 9.0 * n, 0.0, 3.0]) for n in range(n_scans)]
    h = np.linspace(5, 40, n_scans)
    scans = [
        TdoaScan(n + 1, 3.0 * n, tuple(predict_tdoas(x[0], 0.0, hn, env)))
        for n, (x, hn) in enumerate(zip(truth, h))
    ]
    models = Models(env, motion, Prior(), DetectionModel((1, 1, 1)), ClutterModel(0.0), NoiseModel(1e-5))
    pf = ParticleFilter(models, FilterConfig(particles=J), seed)
    recs = pf.run(scans, [ReceiverState(v) for v in h])
    return recs, truth


@pytest.mark.parametrize("seed", range(4))
def test_filter_converges_on_clean_data(seed):
    recs, truth = _degenerate_run(seed)
    err = [abs(r.estimate.range - x[0]) for r, x in zip(recs, truth)]
    assert err[-1] < 5.0


def test_speed_roughening():
    J = 2000
    states = np.column_stack([np.full(J, 100.0), np.zeros(J), np.full(J, 2.0)])
    w = np.zeros(J)
    w[0] = 1.0
    out = resample(ParticleSet(states, w), 0.5, make_rng(1), jitter=0.0, speed_jitter=1.0)
    assert np.all(out.states[:, 0] == 100.0)
    assert out.states[:, 2].mean() == pytest.approx(2.0, abs=0.1)
    assert out.states[:, 2].std() == pytest.approx(1.0, rel=0.1)


def test_filter_reproducible():
    a, _ = _degenerate_run(5, n_scans=5, J=500)
    b, _ = _degenerate_run(5, n_scans=5, J=500)
    c, _ = _degenerate_run(6, n_scans=5, J=500)
    assert [r.estimate for r in a] == [r.estimate for r in b]
    assert [r.estimate for r in a] != [r.estimate for r in c]


def test_substreams_are_independent_of_config():
    # the prior draw depends only on the seed, not on resampling settings
    models = Models()
    a = ParticleFilter(models, FilterConfig(particles=100, ess_threshold=0.1), 9)
    b = ParticleFilter(models, FilterConfig(particles=100, ess_threshold=0.9, jitter=0.0), 9)
    np.testing.assert_array_equal(a.particles.states, b.particles.states)


def test_divergence_reinitialises_and_is_recorded():
    models = Models(ENV, MotionModel(), Prior(), DetectionModel((0.9,) * 3), ClutterModel(0.0), NoiseModel())
    pf = ParticleFilter(models, FilterConfig(particles=50), 0)
    bad = TdoaScan(1, 0.0, (0.01, 0.02, 0.03, 0.04))
    rec = pf.step(bad, RX)
    assert rec.diverged and pf.divergences == [1]
    np.testing.assert_allclose(pf.particles.weights, 1 / 50)
    good = TdoaScan(2, 3.0, ())
    assert not pf.step(good, RX).diverged
    with pytest.raises(ValueError):
        pf.run([good], [])


def test_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(particles=0)
    with pytest.raises(ValueError):
        FilterConfig(ess_threshold=1.5)
    with pytest.raises(ValueError):
        MotionModel(scan_time=0.0)
