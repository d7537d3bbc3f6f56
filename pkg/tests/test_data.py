import numpy as np
import pytest
import torch

from protoreplay.data import build_stream, content_hash, digits_stream, gaussian_mixture_stream, task_label_sets
from protoreplay.errors import ConfigError


def test_label_set_splits():
    assert task_label_sets(range(1, 7), 3) == [[1, 2], [3, 4], [5, 6]]
    assert task_label_sets(range(1, 11), 6, "half_then_equal") == [[1, 2, 3, 4, 5], [6], [7], [8], [9], [10]]
    with pytest.raises(ConfigError):
        task_label_sets(range(1, 5), 3, classes_per_task=2)


def test_gaussian_stream_layout_and_determinism():
    s = gaussian_mixture_stream(n_tasks=3, classes_per_task=2, train_per_class=30, test_per_class=10, seed=4)
    assert s.T == 3 and s.sample_shape == (2,) and s.n_classes == 6
    for t, ((xt, yt), ys) in enumerate(zip(s.test, s.label_sets)):
        assert set(yt.tolist()) == set(ys) and len(yt) == 20
        assert set(s.train[t].y.tolist()) == set(ys) and len(s.train[t]) == 60
    again = gaussian_mixture_stream(n_tasks=3, classes_per_task=2, train_per_class=30, test_per_class=10, seed=4)
    assert torch.equal(s.train[1].x, again.train[1].x)
    other = gaussian_mixture_stream(n_tasks=3, classes_per_task=2, train_per_class=30, test_per_class=10, seed=5)
    assert not torch.equal(s.train[1].x, other.train[1].x)


def test_repeat_scenario_uses_disjoint_chunks():
    s = gaussian_mixture_stream(task_classes=[[1, 2], [2, 3]], scenario="CIR", train_per_class=40)
    a = s.train[0].x[s.train[0].y == 2]
    b = s.train[1].x[s.train[1].y == 2]
    assert len(a) == len(b) == 20
    assert not (a[:, None, :] == b[None, :, :]).all(-1).any()
    with pytest.raises(ConfigError):
        gaussian_mixture_stream(task_classes=[[1, 2], [2, 3]], scenario="CI")


def test_digits_stream():
    s = digits_stream(seed=0)
    assert s.T == 5 and s.sample_shape == (1, 8, 8) and s.n_classes == 10
    x = torch.cat([d.x for d in s.train])
    assert float(x.min()) >= -1 and float(x.max()) <= 1
    n_test = sum(len(y) for _, y in s.test)
    assert n_test == pytest.approx(0.2 * 1797, abs=10)


def test_build_stream_rejects_unknown_dataset():
    with pytest.raises(ConfigError):
        build_stream({"name": "imagenet"}, 0)
    assert build_stream({"name": "gaussian_mixture", "n_tasks": 2, "train_per_class": None}, 0).T == 2


def test_access_log_flags_stale_reads():
    s = gaussian_mixture_stream(n_tasks=2, train_per_class=5, test_per_class=5)
    s.log.current_task = 2
    s.train[1].read("classifier")
    assert s.log.stale_reads() == []
    s.train[0].read("classifier")
    assert s.log.stale_reads() == [(2, 1, "classifier")]


def test_content_hash_matches_git_blob_hash():
    # `printf 'hello\n' | git hash-object --stdin`
    assert content_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
    assert content_hash({"b": 1, "a": 2}) == content_hash({"a": 2, "b": 1})
