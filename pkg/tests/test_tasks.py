"""Synthetic dataset generation, episode sampling, dataset file round-trip."""

import numpy as np
import pytest

from metarobust import tasks


def test_synth_deterministic():
    a = tasks.synth_dataset(6, 10, dims=(8, 8, 1), noise_level=10.0, seed=3)
    b = tasks.synth_dataset(6, 10, dims=(8, 8, 1), noise_level=10.0, seed=3)
    assert np.array_equal(a.data, b.data)


def test_synth_zero_noise_collapses_classes():
    src = tasks.synth_dataset(4, 7, dims=(8, 8, 1), noise_level=0.0, seed=1)
    for k in range(4):
        assert np.array_equal(src.data[k, 0], src.data[k, 1])
        assert np.array_equal(src.data[k, 0], src.data[k, -1])


def test_synth_pixel_range_and_quantization():
    src = tasks.synth_dataset(10, 20, dims=(16, 16, 1), noise_level=40.0, seed=2)
    assert src.data.min() >= 0.0 and src.data.max() <= 255.0
    assert np.all(src.data == np.round(src.data))


def test_synth_base_patterns_decorrelated():
    src = tasks.synth_dataset(20, 30, dims=(16, 16, 1), noise_level=15.0, seed=5)
    b = tasks.base_patterns(src).reshape(20, -1)
    b = b - b.mean(axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    corr = b @ b.T
    off = np.abs(corr[~np.eye(20, dtype=bool)])
    assert off.max() < 0.5


def test_class_split_disjoint():
    src = tasks.synth_dataset(28, 12, dims=(8, 8, 1), seed=0)
    train, test = tasks.class_split(src, 20)
    assert train.classes == 20 and test.classes == 8
    assert set(train.class_ids).isdisjoint(test.class_ids)
    with pytest.raises(ValueError):
        tasks.class_split(src, 28)


def test_episode_shapes_and_local_labels():
    src = tasks.synth_dataset(10, 25, dims=(8, 8, 1), seed=1)
    ep = tasks.sample_episode(src, way=5, shot=1, query_per_class=15, seed=4)
    assert ep.support[0].shape == (5, 64)
    assert ep.query[0].shape == (75, 64)
    assert set(ep.support[1]) == set(range(5))
    assert set(ep.query[1]) == set(range(5))
    assert ep.class_map.shape == (5,)
    assert ep.unlabeled is None


def test_episode_deterministic_under_seed():
    src = tasks.synth_dataset(10, 25, dims=(8, 8, 1), seed=1)
    a = tasks.sample_episode(src, 5, 1, 15, with_unlabeled=True, seed=9)
    b = tasks.sample_episode(src, 5, 1, 15, with_unlabeled=True, seed=9)
    assert np.array_equal(a.support[0], b.support[0])
    assert np.array_equal(a.query[0], b.query[0])
    assert np.array_equal(a.unlabeled, b.unlabeled)
    assert np.array_equal(a.class_map, b.class_map)


def test_support_query_disjoint_many_seeds():
    # row-level disjointness: no support sample reappears in the query set
    src = tasks.synth_dataset(8, 6, dims=(4, 4, 1), noise_level=30.0, seed=2)
    for seed in range(10_000):
        ep = tasks.sample_episode(src, way=3, shot=2, query_per_class=2, seed=seed)
        s = {r.tobytes() for r in ep.support[0]}
        q = {r.tobytes() for r in ep.query[0]}
        assert not (s & q), f"seed {seed} leaked support into query"


def test_unlabeled_pool_size_matches_query():
    src = tasks.synth_dataset(10, 25, dims=(8, 8, 1), seed=3)
    ep = tasks.sample_episode(src, 5, 1, 15, with_unlabeled=True, seed=0)
    assert ep.unlabeled.shape == ep.query[0].shape


def test_episode_insufficient_samples():
    src = tasks.synth_dataset(4, 5, dims=(4, 4, 1), seed=0)
    with pytest.raises(ValueError):
        tasks.sample_episode(src, way=5, shot=1, query_per_class=2, seed=0)
    with pytest.raises(ValueError):
        tasks.sample_episode(src, way=3, shot=2, query_per_class=4, seed=0)


def test_file_round_trip(tmp_path):
    src = tasks.synth_dataset(5, 8, dims=(6, 6, 1), noise_level=20.0, seed=7)
    path = tmp_path / "data.mrds"
    tasks.write_file_dataset(src, path)
    back = tasks.load_file_dataset(path)
    assert back.classes == 5 and back.samples_per_class == 8
    assert back.image_dims == (6, 6, 1)
    assert np.array_equal(back.data, src.data)  # pixels are integral, so lossless


def test_file_truncation_reports_byte_counts(tmp_path):
    src = tasks.synth_dataset(3, 4, dims=(4, 4, 1), seed=0)
    path = tmp_path / "data.mrds"
    tasks.write_file_dataset(src, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-10])
    with pytest.raises(ValueError) as ei:
        tasks.load_file_dataset(path)
    msg = str(ei.value)
    assert str(3 * 4 * 4 * 4 * 1) in msg and str(3 * 4 * 4 * 4 * 1 - 10) in msg


def test_file_zero_classes_rejected(tmp_path):
    path = tmp_path / "zero.mrds"
    header = b"MRDS" + np.array([1, 0, 4, 4, 4, 1], dtype="<u4").tobytes()
    path.write_bytes(header)
    with pytest.raises(ValueError):
        tasks.load_file_dataset(path)


def test_file_bad_magic(tmp_path):
    path = tmp_path / "bad.mrds"
    path.write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNKJUNKJUNK")
    with pytest.raises(ValueError):
        tasks.load_file_dataset(path)
