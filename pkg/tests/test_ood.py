import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from clfno import ood, taskgen


def test_feature_dimension_and_scale_invariance():
    x = np.random.default_rng(0).standard_normal((3, 7, 8, 8))
    fmap = ood.RffMap(7 * 64, 1.0)
    z = fmap(x)
    assert z.shape == (3, 4096)
    assert np.array_equal(fmap(5 * x), z)
    with pytest.raises(ValueError):
        fmap(np.zeros((1, 7, 8, 8)))
    with pytest.raises(ValueError):
        ood.RffMap(10, 1.0)(x)


def test_features_approximate_gaussian_kernel():
    rng = np.random.default_rng(1)
    d, sigma = 32, 0.8
    fmap = ood.RffMap(d, sigma, 4096, seed=2)
    x, y = rng.standard_normal((200, d)), rng.standard_normal((200, d))
    xn = x / np.linalg.norm(x, axis=1, keepdims=True)
    yn = y / np.linalg.norm(y, axis=1, keepdims=True)
    exact = np.exp(-np.sum((xn - yn) ** 2, axis=1) / (2 * sigma ** 2))
    approx = np.sum(fmap(x) * fmap(y), axis=1)
    assert np.mean(np.abs(approx - exact)) < 0.02


def test_single_direction_data_reconstructed_with_one_mode():
    rng = np.random.default_rng(3)
    base, u = rng.standard_normal(30), rng.standard_normal(30)
    z = base + rng.standard_normal(12)[:, None] * u
    model = ood.kpca_fit(z, 1)
    assert model.k == 1 and np.abs(ood.ood_score(z, model)).max() < 1e-8


def test_full_rank_fit_reconstructs_training_set():
    z = np.random.default_rng(4).standard_normal((9, 50))
    model = ood.kpca_fit(z, 8)
    assert np.abs(ood.ood_score(z, model)).max() < 1e-6
    with pytest.raises(ValueError):
        ood.kpca_fit(z, 9)
    with pytest.raises(ValueError):
        ood.kpca_fit(z[:1])


@pytest.mark.parametrize("n,d", [(20, 64), (80, 16)])
def test_directions_match_dense_eigendecomposition(n, d):
    z = np.random.default_rng(5).standard_normal((n, d)) * np.linspace(3, 0.1, d)
    model = ood.kpca_fit(z, 6)
    zc = z - z.mean(0)
    lam, vec = np.linalg.eigh(zc.T @ zc / n)
    lam, vec = lam[::-1][:6], vec[:, ::-1][:, :6].T
    assert np.allclose(model.eigenvalues, lam, atol=1e-8)
    for got, ref in zip(model.directions, vec):
        assert min(np.abs(got - ref).max(), np.abs(got + ref).max()) < 1e-6


def test_score_examples():
    rng = np.random.default_rng(6)
    model = ood.kpca_fit(rng.standard_normal((10, 8)), 3)
    mean, u1 = model.mean, model.directions[0]
    v = rng.standard_normal(8)
    v -= model.directions.T @ (model.directions @ v)
    v /= np.linalg.norm(v)
    assert ood.ood_score(mean, model) == 0.0
    assert ood.ood_score(mean + 2.5 * u1, model) < 1e-12
    assert ood.ood_score(mean - 1.7 * v, model) == pytest.approx(1.7, abs=1e-12)


def test_route_examples():
    assert ood.route_scores([0.1, 0.5, 0.3], [1.0] * 3, [0, 1, 2]) == [0]
    assert ood.route_scores([2.0, 3.0], [1.0, 1.0], [0, 1]) == [ood.NOVEL]
    assert ood.route_scores([2.0, 3.0], [1.0, 1.0], [0, 1], detect_novel=False) == [0]
    with pytest.raises(ValueError):
        ood.route(np.ones((1, 4)), ood.RouterState(ood.RffMap(4, 1.0)))


def test_calibration_examples():
    scores = np.array([0.2, 0.9, 0.4])
    assert ood.calibrate_threshold(scores, 1.0) == 0.9
    tau = ood.calibrate_threshold(scores)
    assert tau == pytest.approx(1.35) and np.all(scores <= tau)
    with pytest.raises(ValueError):
        ood.calibrate_threshold([0.1])


@given(st.integers(0, 1000))
def test_scores_nonincreasing_in_k(seed):
    z = np.random.default_rng(seed).standard_normal((12, 20))
    prev = None
    for k in range(12):
        s = ood.ood_score(z, ood.kpca_fit(z, k))
        if prev is not None:
            assert np.all(s <= prev + 1e-10)
        prev = s


@pytest.fixture(scope="module")
def router():
    data = taskgen.generate_sequence(taskgen.default_sequence(0))
    fmap = ood.RffMap(int(np.prod(data[0].x_train.shape[1:])), ood.median_bandwidth(data[0].x_train), 4096, 0)
    state = ood.RouterState(fmap)
    for k, d in enumerate(data):
        state.add(ood.fit_detector(d.x_train, fmap, k))
    return data, state


def test_training_inputs_accepted_by_own_detector(router):
    data, state = router
    for k, d in enumerate(data):
        s = state.scores(d.x_train)[:, k]
        assert np.all(s <= state.detectors[k].threshold)


def test_routing_is_scale_invariant_and_deterministic(router):
    data, state = router
    x = np.concatenate([d.x_test for d in data])
    routes = ood.route(x, state)
    assert routes == ood.route(3.7 * x, state) == ood.route(x, state)
    again = ood.RouterState(ood.RffMap(state.fmap.input_dim, state.fmap.sigma, 4096, 0))
    for k, d in enumerate(data):
        again.add(ood.fit_detector(d.x_train, again.fmap, k))
    assert ood.route(x, again) == routes


def test_disjoint_regime_inputs_rejected(router):
    data, state = router
    specs = taskgen.default_sequence(0)
    rejected = np.zeros(len(specs))
    trials = np.zeros(len(specs))
    for trial in range(200):
        j = trial % len(specs)
        probe = taskgen.generate(dataclasses.replace(specs[j], seed=10_000 + trial, n_train=1, n_test=1)).x_train
        s = state.scores(probe)[0]
        for i, det in enumerate(state.detectors):
            if i != j:
                trials[i] += 1
                rejected[i] += s[i] > det.threshold
    assert np.all(rejected / trials >= 0.95)


def test_detector_round_trip(tmp_path, router):
    _, state = router
    det = state.detectors[1]
    ood.save_detector(tmp_path / "d.bin", det, state.fmap)
    back, meta = ood.load_detector(tmp_path / "d.bin")
    assert meta["num_features"] == 4096 and back.k == det.k and back.threshold == det.threshold
    assert np.array_equal(back.directions, det.directions) and np.array_equal(back.mean, det.mean)
    blocks, meta = ood.router_blocks(state)
    rebuilt = ood.router_from_blocks(meta, {name: arr for name, arr, _ in blocks})
    x = np.random.default_rng(0).standard_normal((3, 7, 32, 32))
    assert np.array_equal(rebuilt.scores(x), state.scores(x))
