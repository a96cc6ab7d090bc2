import numpy as np
import pytest

from herdcast.dataset import (HXS_MAGIC, N_SEQ, SUBCLASSES, InsufficientSamplesError, SampleSet, SplitConfig,
                              Standardizer, assemble_split, build_pool, read_hxs, tag_subclass, window_trial,
                              write_hxs)
from herdcast.formats import BadMagicError, TruncatedFileError, UnsupportedVersionError
from herdcast.ingest import Trial


def labeled_trial(labels, trial_id="lt"):
    labels = np.asarray(labels)
    n = len(labels)
    r = np.random.default_rng(n)
    return Trial(trial_id, "expert", 50.0, True, np.arange(n) / 50.0, r.uniform(-1, 1, (n, 2, 2)),
                 r.uniform(-1, 1, (n, 4, 2)), labels=np.stack([labels, labels], axis=1))


def oracle_subclass(window, horizon):
    transitioning = len(set(window)) > 1
    switching = horizon != window[-1]
    return SUBCLASSES[2 * transitioning + switching]


def synthetic_set(counts, seed=0):
    sub = np.repeat(np.arange(4), counts)
    n = len(sub)
    r = np.random.default_rng(seed)
    return SampleSet(r.normal(size=(n, N_SEQ, 48)), r.integers(0, 5, n), sub,
                     np.array([f"tr{i // 50}" for i in range(n)], dtype=object), np.zeros(n), np.arange(n), 16, 2)


def test_tag_subclass_examples():
    assert tag_subclass([1] * 25, 1) == "NT-NS"
    assert tag_subclass([3] * 25, 0) == "NT-S"
    assert tag_subclass([1] * 20 + [2] * 5, 2) == "T-NS"
    assert tag_subclass([1] * 20 + [2] * 5, 4) == "T-S"


def test_tag_subclass_matches_oracle(rng):
    for _ in range(2000):
        w = rng.integers(0, 5, 25) if rng.random() < 0.5 else np.full(25, rng.integers(0, 5))
        h = int(rng.integers(0, 5))
        assert tag_subclass(w, h) == oracle_subclass(w.tolist(), h)


def test_window_count_and_label_offset():
    labels = np.arange(100) % 5
    s = window_trial(labeled_trial(labels), 0, stride=1, horizon=16)
    assert len(s) == 100 - 24 - 16
    s2 = window_trial(labeled_trial(labels), 0, stride=2, horizon=16)
    np.testing.assert_array_equal(s2.y, labels[s2.t_f + 32])


def test_short_trial_has_no_windows():
    assert len(window_trial(labeled_trial(np.ones(25 * 2 + 16, dtype=int)), 0, 2, 16)) == 0


def test_window_rows_follow_stride(expert_trials):
    from herdcast.features import trial_features
    tr = expert_trials[0]
    s = window_trial(tr, 1, stride=4, horizon=8)
    f = trial_features(tr, 1)
    k = len(s) // 2
    np.testing.assert_array_equal(s.X[k], f[s.t_f[k] - 96: s.t_f[k] + 1: 4])
    sub = tag_subclass(tr.labels[s.t_f[k] - 96: s.t_f[k] + 1: 4, 1], tr.labels[s.t_f[k] + 32, 1])
    assert SUBCLASSES[s.subclass[k]] == sub


def test_window_rejects_bad_arguments():
    tr = labeled_trial(np.ones(80, dtype=int))
    with pytest.raises(ValueError):
        window_trial(tr, 0, stride=3)
    unl = Trial("u", "expert", 50.0, True, tr.t, tr.herders, tr.targets)
    with pytest.raises(ValueError):
        window_trial(unl, 0)


def test_balanced_split_quota():
    split = assemble_split(synthetic_set((800, 800, 800, 800)),
                           SplitConfig(n_train=2000, n_test=400, n_test_sets=2, standardize=False))
    all_train = SampleSet.concat([split.train, split.validation])
    np.testing.assert_array_equal(all_train.subclass_counts(), [500] * 4)
    for t in split.tests:
        np.testing.assert_array_equal(t.subclass_counts(), [100] * 4)
    assert len(split.validation) == 200


def test_shortfall_error_names_subclass():
    pool = synthetic_set((500, 500, 500, 90))
    with pytest.raises(InsufficientSamplesError, match="T-S short by 10"):
        assemble_split(pool, SplitConfig(n_train=400, n_test=1, n_test_sets=0, standardize=False))
    # 90 per class is the most T-S can supply
    split = assemble_split(pool, SplitConfig(n_train=360, n_test=1, n_test_sets=0, standardize=False))
    assert len(split.train) + len(split.validation) == 360


def test_representative_keeps_proportions():
    pool = synthetic_set((690, 110, 100, 100))
    split = assemble_split(pool, SplitConfig(n_train=500, n_test=100, n_test_sets=1, balance="representative",
                                             standardize=False))
    tr = SampleSet.concat([split.train, split.validation])
    assert abs(tr.subclass_counts()[0] / len(tr) - 0.69) <= 0.01


def test_splits_disjoint_and_deterministic(expert_trials):
    pool = build_pool(expert_trials, 2, 16)
    cfg = SplitConfig(n_train=400, n_test=100, n_test_sets=3, seed=4)
    a, b = assemble_split(pool, cfg), assemble_split(pool, cfg)
    sets = [a.train, a.validation, *a.tests]
    keys = [set(s.keys()) for s in sets]
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            assert not keys[i] & keys[j]
    assert a.train.X.tobytes() == b.train.X.tobytes()
    assert a.tests[2].keys() == b.tests[2].keys()


def test_standardization_stats_from_train(expert_trials):
    pool = build_pool(expert_trials, 2, 16)
    split = assemble_split(pool, SplitConfig(n_train=400, n_test=100, n_test_sets=1, seed=1))
    flat = split.train.X.reshape(-1, 48)
    varying = split.scale != 1.0
    assert np.all(np.abs(flat.mean(axis=0)[varying]) < 1e-9)
    np.testing.assert_allclose(flat.std(axis=0)[varying], 1.0, atol=1e-9)


def test_standardizer_transformer(rng):
    X = rng.normal(3.0, 2.0, size=(50, 25, 3))
    X[..., 2] = 7.0
    std = Standardizer().fit(X)
    Z = std.transform(X)
    assert std.get_params() == {}
    assert np.all(Z[..., 2] == 7.0)
    np.testing.assert_allclose(std.inverse_transform(Z), X)
    with pytest.raises(ValueError):
        std.transform(np.zeros((2, 25, 4)))


def test_hxs_roundtrip_and_errors(tmp_path, expert_trials):
    s = window_trial(expert_trials[0], 0, 2, 16).take(np.arange(30))
    s.meta = {"expertise": "expert", "seed": 3}
    p = tmp_path / "s.hxs"
    write_hxs(p, s)
    back = read_hxs(p)
    assert back.X.tobytes() == s.X.tobytes()
    np.testing.assert_array_equal(back.y, s.y)
    np.testing.assert_array_equal(back.subclass, s.subclass)
    assert back.keys() == s.keys() and back.meta == s.meta
    assert (back.horizon, back.stride) == (16, 2)
    raw = p.read_bytes()
    assert raw[:4] == HXS_MAGIC
    (tmp_path / "m.hxs").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(BadMagicError):
        read_hxs(tmp_path / "m.hxs")
    (tmp_path / "v.hxs").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(UnsupportedVersionError):
        read_hxs(tmp_path / "v.hxs")
    (tmp_path / "t.hxs").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(TruncatedFileError):
        read_hxs(tmp_path / "t.hxs")
