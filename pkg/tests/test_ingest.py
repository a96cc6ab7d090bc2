import json

import numpy as np
import pytest

from herdcast.ingest import Trial, TrialFormatError, auto_label, read_trials, trial_to_dict, write_trials

HZ = 50.0


def make_trial(n=10, herders=None, targets=None, labels=None, trial_id="t0", expertise="novice"):
    t = np.arange(n) / HZ
    if herders is None:
        herders = np.tile([[1.0, 1.0], [-1.0, -1.0]], (n, 1, 1))
    if targets is None:
        targets = np.tile([[0.5, 0.0], [0.0, 0.5], [-0.5, 0.0], [0.0, -0.5]], (n, 1, 1))
    return Trial(trial_id, expertise, HZ, True, t, herders, targets, labels=labels)


def test_roundtrip(tmp_path, expert_trials):
    path = tmp_path / "trials.jsonl"
    write_trials(expert_trials, path)
    back = read_trials(path)
    assert back == expert_trials
    for a, b in zip(back, expert_trials):
        assert a.herders.tobytes() == b.herders.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()


def test_roundtrip_without_optional_fields(tmp_path):
    tr = make_trial()
    write_trials([tr], tmp_path / "x.jsonl")
    (back,) = read_trials(tmp_path / "x.jsonl")
    assert back == tr and back.labels is None and back.herder_vel is None


def test_novice_file_count(tmp_path):
    trials = [make_trial(trial_id=f"n{i}") for i in range(40)]
    write_trials(trials, tmp_path / "nov.jsonl")
    back = read_trials(tmp_path / "nov.jsonl")
    assert len(back) == 40 and {t.expertise for t in back} == {"novice"}
    assert [t.trial_id for t in back] == [f"n{i}" for i in range(40)]


def test_missing_target_position_names_trial_and_line(tmp_path):
    good = trial_to_dict(make_trial(trial_id="ok"))
    bad = trial_to_dict(make_trial(trial_id="broken"))
    del bad["frames"][3]["targets"][2]
    (tmp_path / "bad.jsonl").write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(TrialFormatError, match=r"line 2.*broken"):
        read_trials(tmp_path / "bad.jsonl")


def test_non_monotone_timestamps_name_trial(tmp_path):
    d = trial_to_dict(make_trial(trial_id="backwards"))
    d["frames"][4]["t"], d["frames"][5]["t"] = d["frames"][5]["t"], d["frames"][4]["t"]
    (tmp_path / "b.jsonl").write_text(json.dumps(d) + "\n")
    with pytest.raises(TrialFormatError, match="backwards"):
        read_trials(tmp_path / "b.jsonl")


def test_malformed_json_names_line(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps(trial_to_dict(make_trial())) + "\n{oops\n")
    with pytest.raises(TrialFormatError, match="line 2"):
        read_trials(tmp_path / "m.jsonl")


def test_labels_out_of_range_rejected():
    tr = make_trial(labels=np.full((10, 2), 7))
    with pytest.raises(TrialFormatError):
        tr.validate()


def _approach(target_xy, start, end, n=5):
    # herder 0 moving in a straight line; herder 1 parked far away
    h = np.zeros((n, 2, 2))
    h[:, 0] = np.linspace(start, end, n)
    h[:, 1] = [1.4, 1.4]
    return h


def test_auto_label_closing_target():
    targets = np.tile([[1.0, 1.0], [0.0, 0.0], [-1.0, 1.0], [1.0, -1.0]], (5, 1, 1))
    h = _approach(None, [-0.11, 0.0], [-0.09, 0.0])
    lab = auto_label(make_trial(5, h, targets)).labels
    assert lab[2, 0] == 2  # 0.10 m from target 2 and closing
    assert np.all(lab[:, 1] == 0)


def test_auto_label_nothing_near_is_zero():
    lab = auto_label(make_trial(5)).labels
    assert np.all(lab == 0)


def test_auto_label_nearest_qualifying_target():
    n = 5
    targets = np.tile([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [-1.0, -1.0]], (n, 1, 1))
    # target 1 approached from 0.12 m to 0.10 m, target 3 from 0.09 m to 0.07 m
    targets[:, 0] = np.stack([np.linspace(0.12, 0.10, n), np.zeros(n)], axis=1)
    targets[:, 2] = np.stack([np.zeros(n), np.linspace(-0.09, -0.07, n)], axis=1)
    h = np.zeros((n, 2, 2))
    h[:, 1] = [1.4, -1.4]
    lab = auto_label(make_trial(n, h, targets)).labels
    assert lab[2, 0] == 3  # 0.11 m vs 0.08 m: the nearer one wins


def test_auto_label_needs_three_frames():
    with pytest.raises(TrialFormatError):
        auto_label(make_trial(2))


def test_auto_label_range(expert_trials):
    for tr in expert_trials:
        lab = auto_label(tr).labels
        assert lab.min() >= 0 and lab.max() <= 4
