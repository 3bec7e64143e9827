import math

import numpy as np
import pytest

from imumatch.errors import ConfigError, DegenerateInputError, NumericFailure
from imumatch.estimator import LogisticEstimator, RunningStats
from imumatch.pipeline import PreparedDataset
from imumatch.signals import PreparedSensor, PreparedTrack
from imumatch.training import (
    Adam,
    PairSet,
    TrainConfig,
    build_pairs,
    enumerate_negatives,
    split_by_individual,
    train,
    weighted_bce,
    weighted_bce_grad,
)


def toy_dataset(n_participants=3, n=120, seed=0, tracks_per=1, nonparticipant=True, coupled=True):
    """Each sensor's lin-accel channel follows its wearer's speed exactly."""
    rng = np.random.default_rng(seed)
    tracks, sensors = [], []
    for i in range(n_participants):
        pid = f"P{i}"
        speed = np.cumsum(rng.normal(size=n + 40)) * 0.1
        speed -= speed.mean()
        sensor = rng.normal(size=(7, n + 40))
        if coupled:
            sensor[0] = speed
        sensors.append(PreparedSensor(pid, 10.0, -20, sensor))
        piece = n // tracks_per
        for j in range(tracks_per):
            a = 20 + j * piece
            ch = np.vstack([speed[a : a + piece], rng.normal(size=piece)])
            tracks.append(PreparedTrack(f"T{i}{j}", pid, 10.0, a - 20, ch))
    if nonparticipant:
        tracks.append(PreparedTrack("N0", None, 10.0, 5, rng.normal(size=(2, 60))))
    return PreparedDataset(tracks, sensors)


def as_tuples(pairs: PairSet, label):
    m = pairs.y == label
    return set(zip(pairs.track_idx[m].tolist(), pairs.sensor_idx[m].tolist(),
                   pairs.k_track[m].tolist(), pairs.k_sensor[m].tolist()))


class TestConfig:
    def test_bad_values_name_key(self):
        for kw, key in ((dict(rho_neg=0.5), "rho_neg"), (dict(lr=0), "lr"), (dict(W=0), "W"),
                        (dict(estimator="svm"), "estimator"), (dict(batch_size=2.5), "batch_size")):
            with pytest.raises(ConfigError) as exc:
                TrainConfig(**kw)
            assert exc.value.key == key

    def test_rho_grid_is_one_matrix(self):
        cells = [TrainConfig(W=W, rho_neg=r) for W in (100, 300, 600) for r in (1, 4, 16, 64, 256)]
        assert len({(c.W, c.rho_neg) for c in cells}) == 15


class TestSplit:
    def test_eight_two(self):
        ds = toy_dataset(10, nonparticipant=True)
        split = split_by_individual(ds, 0.8, seed=3)
        assert len(split.train_ids) == 8 and len(split.val_ids) == 2
        assert not set(split.train_ids) & set(split.val_ids)
        tr, va = split
        assert {t.label for t in tr.tracks} == set(split.train_ids)
        assert {s.sensor_id for s in va.sensors} == set(split.val_ids)
        assert all(t.label is not None for t in tr.tracks + va.tracks)

    def test_deterministic(self):
        ds = toy_dataset(10)
        assert split_by_individual(ds, 0.8, 5).val_ids == split_by_individual(ds, 0.8, 5).val_ids

    def test_ratio_one_warns(self):
        split = split_by_individual(toy_dataset(4), 1.0, 0)
        assert split.val_ids == [] and split.warning

    def test_needs_two(self):
        with pytest.raises(DegenerateInputError):
            split_by_individual(toy_dataset(1), 0.8, 0)


class TestPairs:
    def test_positives_aligned(self):
        ds = toy_dataset(3)
        pairs = build_pairs(ds, 20, 5, 4, seed=0)
        assert pairs.admissible()
        for i in np.flatnonzero(pairs.y == 1)[:10]:
            s = pairs.sample(i)
            assert s.window.track_id[1] == s.window.sensor_id[1]
            np.testing.assert_array_equal(s.window.data[0], s.window.data[2])

    @pytest.mark.parametrize("stride", [1, 3, 7])
    def test_negatives_subset_of_enumeration(self, stride):
        ds = toy_dataset(3, n=60, tracks_per=2)
        everything = enumerate_negatives(ds, 15, stride)
        for seed in range(3):
            sampled = as_tuples(build_pairs(ds, 15, stride, 3, seed=seed), 0)
            assert sampled <= everything
        # asking for more than exists returns every admissible coupling exactly once
        full = build_pairs(ds, 15, stride, 1e9, seed=0)
        assert as_tuples(full, 0) == everything
        assert full.n_neg == len(everything)

    def test_single_participant_only_shifts(self):
        ds = toy_dataset(1, n=100, nonparticipant=False)
        pairs = build_pairs(ds, 20, 2, 4, seed=1)
        neg = pairs.y == 0
        assert pairs.n_neg == 4 * pairs.n_pos
        assert np.all(np.abs(pairs.k_track[neg] - pairs.k_sensor[neg]) >= 20)

    def test_rho_one_balanced(self):
        pairs = build_pairs(toy_dataset(4), 30, 1, 1, seed=0)
        assert pairs.n_neg == pairs.n_pos

    def test_mix(self):
        ds = toy_dataset(4)
        pairs = build_pairs(ds, 30, 5, 8, seed=0, neg_mix=1.0)
        neg = pairs.y == 0
        same = np.array([ds.tracks[t].label == ds.sensors[s].sensor_id
                         for t, s in zip(pairs.track_idx[neg], pairs.sensor_idx[neg])])
        assert pairs.available["different_identity"] < 8 * pairs.n_pos
        assert (~same).sum() == pairs.available["different_identity"]

    def test_nonparticipants_excluded(self):
        ds = toy_dataset(3)
        pairs = build_pairs(ds, 20, 5, 16, seed=0)
        assert ds.tracks.index(next(t for t in ds.tracks if t.label is None)) not in set(pairs.track_idx)

    def test_no_positives(self):
        with pytest.raises(DegenerateInputError):
            build_pairs(toy_dataset(2, n=30), 100, 1, 1)

    def test_batch_matches_samples(self):
        ds = toy_dataset(3)
        pairs = build_pairs(ds, 25, 4, 2, seed=2)
        idx = np.arange(0, len(pairs), 7)
        X = pairs.batch(idx)
        for b, i in enumerate(idx):
            np.testing.assert_array_equal(X[b], pairs.sample(i).window.data)

    @pytest.mark.parametrize("seed", range(3))
    def test_no_leak_across_split(self, seed):
        ds = toy_dataset(6, tracks_per=2)
        split = split_by_individual(ds, 0.67, seed)
        tr = build_pairs(split.train, 20, 3, 16, seed)
        va = build_pairs(split.val, 20, 1, 1, seed)
        assert not tr.identities() & va.identities()
        assert va.n_neg == va.n_pos
        assert tr.admissible() and va.admissible()


class TestLoss:
    def test_saturated(self):
        assert weighted_bce([1.0, 0.0], [1, 0], 3.0) < 1e-6

    def test_ln2(self):
        assert weighted_bce([0.5], [1], 1.0) == pytest.approx(math.log(2), abs=1e-15)

    def test_weighting(self):
        assert weighted_bce([0.5], [1], 4.0) == pytest.approx(4 * math.log(2))
        assert weighted_bce([0.5], [0], 4.0) == pytest.approx(math.log(2))

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.05, 0.95, 16)
        y = rng.integers(0, 2, 16)
        g = weighted_bce_grad(p, y, 2.5)
        h = 1e-7
        for i in range(16):
            up, dn = p.copy(), p.copy()
            up[i] += h
            dn[i] -= h
            fd = (weighted_bce(up, y, 2.5) - weighted_bce(dn, y, 2.5)) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-6)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        p, y = rng.uniform(size=64), rng.integers(0, 2, 64)
        perm = rng.permutation(64)
        assert weighted_bce(p, y, 3.0) == pytest.approx(weighted_bce(p[perm], y[perm], 3.0), rel=1e-14)


def test_adam_first_step():
    opt = Adam(3, lr=0.1)
    theta = opt.update(np.zeros(3), np.array([2.0, -0.5, 0.0]))
    np.testing.assert_allclose(theta, [-0.1, 0.1, 0.0], atol=1e-7)


def fit_toy(seed=0, epochs=50, **kw):
    ds = toy_dataset(6, n=200, seed=seed)
    split = split_by_individual(ds, 0.67, seed)
    tr = build_pairs(split.train, 40, 4, 4, seed)
    va = build_pairs(split.val, 40, 2, 1, seed + 1)
    cfg = TrainConfig(W=40, estimator="logistic", lr=0.05, batch_size=64, epochs=epochs, seed=seed, **kw)
    return train(LogisticEstimator(40, RunningStats()), tr, va, cfg), tr, va, cfg


class TestTrain:
    def test_separable_toy(self):
        res, *_ = fit_toy()
        assert res.best_val_loss < 0.1
        assert res.best_epoch <= 50
        assert res.model.stats.frozen
        assert res.best_val_loss == min(v for _, _, v in res.history)

    def test_deterministic(self):
        a, *_ = fit_toy(epochs=5)
        b, *_ = fit_toy(epochs=5)
        assert a.history == b.history
        np.testing.assert_array_equal(a.model.params, b.model.params)

    def test_resume_continues_epochs(self):
        res, tr, va, cfg = fit_toy(epochs=3)
        more = train(res.model, tr, va, cfg, history=res.history, optimizer=res.optimizer)
        epochs = [e for e, _, _ in more.history]
        assert epochs == list(range(1, len(epochs) + 1)) and len(epochs) > 3

    def test_divergence(self):
        ds = toy_dataset(3)
        ds.sensors[0].channels[0, 30:40] = np.nan
        pairs = build_pairs(ds, 20, 2, 2, seed=0)
        with pytest.raises(NumericFailure):
            train(LogisticEstimator(20, RunningStats()), pairs, None,
                  TrainConfig(W=20, estimator="logistic", epochs=2))

    def test_untrainable(self):
        from imumatch.estimator import OracleEstimator

        pairs = build_pairs(toy_dataset(3), 20, 2, 2, seed=0)
        with pytest.raises(ConfigError):
            train(OracleEstimator({}, 20), pairs, None, TrainConfig(W=20))

    def test_without_validation_keeps_last(self):
        ds = toy_dataset(3)
        pairs = build_pairs(ds, 20, 4, 2, seed=0)
        res = train(LogisticEstimator(20, RunningStats()), pairs, None,
                    TrainConfig(W=20, estimator="logistic", epochs=4, lr=0.01))
        assert res.best_epoch == 4 and res.warning
