from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcba import nn
from fcba.data import (
    Dataset,
    SynthParams,
    dirichlet_partition,
    largest_remainder,
    load_idx,
    make_batches,
    partition_stats,
    synth_dataset,
    write_idx,
)
from fcba.errors import (
    BadMagicError,
    ConfigurationError,
    CountMismatchError,
    EmptyDatasetError,
    IngestionError,
    TruncatedFileError,
)


def _balanced(classes=10, per_class=100):
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(np.zeros((len(labels), 2, 2, 1), np.float32), labels, classes)


# ---------------------------------------------------------------------- IDX


def test_idx_roundtrip_and_scaling(tmp_path):
    pixels = np.array([[[0, 255], [255, 0]], [[255, 255], [0, 0]]], dtype=np.uint8)
    write_idx(tmp_path / "img", tmp_path / "lbl", pixels, [3, 7])
    ds = load_idx(tmp_path / "img", tmp_path / "lbl")
    assert ds.images.shape == (2, 2, 2, 1)
    assert set(np.unique(ds.images)) == {0.0, 1.0}
    assert ds.labels.tolist() == [3, 7]
    assert ds.class_count == 8


def test_idx_gzip(tmp_path):
    write_idx(tmp_path / "img", tmp_path / "lbl", np.full((1, 3, 3), 51, np.uint8), [1])
    for name in ("img", "lbl"):
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    ds = load_idx(tmp_path / "img.gz", tmp_path / "lbl.gz", class_count=10)
    np.testing.assert_allclose(ds.images, 0.2)


def test_idx_bad_magic_names_file(tmp_path):
    write_idx(tmp_path / "img", tmp_path / "lbl", np.zeros((2, 2, 2), np.uint8), [0, 1])
    raw = bytearray((tmp_path / "lbl").read_bytes())
    raw[3] = 0x03
    (tmp_path / "lbl").write_bytes(bytes(raw))
    with pytest.raises(BadMagicError) as info:
        load_idx(tmp_path / "img", tmp_path / "lbl")
    assert "lbl" in str(info.value)


def test_idx_truncated(tmp_path):
    write_idx(tmp_path / "img", tmp_path / "lbl", np.zeros((2, 4, 4), np.uint8), [0, 1])
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "img").write_bytes(raw[:-5])
    with pytest.raises(TruncatedFileError):
        load_idx(tmp_path / "img", tmp_path / "lbl")
    (tmp_path / "img").write_bytes(raw[:6])
    with pytest.raises(TruncatedFileError):
        load_idx(tmp_path / "img", tmp_path / "lbl")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "img", tmp_path / "lbl", np.zeros((3, 2, 2), np.uint8), [0, 1])
    with pytest.raises(CountMismatchError):
        load_idx(tmp_path / "img", tmp_path / "lbl")


def test_idx_missing_file(tmp_path):
    with pytest.raises(IngestionError):
        load_idx(tmp_path / "nope", tmp_path / "nope2")


def test_ingestion_errors_are_distinct():
    kinds = {BadMagicError, TruncatedFileError, CountMismatchError}
    assert len(kinds) == 3
    assert all(issubclass(k, IngestionError) for k in kinds)


def test_idx_header_layout(tmp_path):
    write_idx(tmp_path / "img", tmp_path / "lbl", np.zeros((2, 5, 4), np.uint8), [0, 1])
    head = struct.unpack(">4I", (tmp_path / "img").read_bytes()[:16])
    assert head == (0x803, 2, 5, 4)


# ---------------------------------------------------------------- synthetic


def test_synth_is_deterministic_and_in_range():
    a = synth_dataset(10, 20, seed=3)
    b = synth_dataset(10, 20, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert a.class_histogram().tolist() == [20] * 10
    c = synth_dataset(10, 20, seed=4)
    assert a.images.tobytes() != c.images.tobytes()


def test_synth_splits_share_classes_not_samples():
    tr = synth_dataset(4, 10, dims=(12, 12, 1), seed=0, split="train")
    te = synth_dataset(4, 10, dims=(12, 12, 1), seed=0, split="test")
    assert tr.images.tobytes() != te.images.tobytes()
    mean_tr = np.stack([tr.images[tr.labels == c].mean(0) for c in range(4)])
    mean_te = np.stack([te.images[te.labels == c].mean(0) for c in range(4)])
    dist = ((mean_tr[:, None] - mean_te[None]) ** 2).sum(axis=(2, 3, 4))
    assert np.array_equal(dist.argmin(1), np.arange(4))


def test_synth_empty_raises():
    with pytest.raises(EmptyDatasetError):
        synth_dataset(10, 0)
    with pytest.raises(ConfigurationError):
        synth_dataset(1, 5)


def test_logistic_reaches_99_percent_on_two_class_synth():
    params = SynthParams(noise=0.05)
    ds = synth_dataset(2, 200, seed=1, params=params)
    arch = nn.logistic_arch((28, 28, 1), 2)
    w = nn.init_params(arch, np.random.default_rng(0))
    batches = [b for e in range(20) for b in make_batches(np.arange(len(ds)), 32, seed=0, epoch=e)][:200]
    for b in batches:
        _, g = nn.loss_and_grad(arch, w, ds.images[b], ds.labels[b])
        w = nn.sgd_step(w, g, 0.5)
    assert len(batches) == 200
    acc = (nn.predict(arch, w, ds.images) == ds.labels).mean()
    assert acc >= 0.99


def test_dataset_validation():
    with pytest.raises(ConfigurationError):
        Dataset(np.zeros((2, 2, 2, 1), np.float32), np.array([0, 3]), 3)
    with pytest.raises(EmptyDatasetError):
        Dataset(np.zeros((0, 2, 2, 1), np.float32), np.zeros(0, np.int64), 3)


# ---------------------------------------------------------------- partition


def _assert_set_partition(part, n):
    allidx = np.concatenate(part.client_indices)
    assert len(allidx) == n
    assert np.array_equal(np.sort(allidx), np.arange(n))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.floats(0.05, 100.0), st.integers(0, 10_000))
def test_partition_is_disjoint_cover(n_clients, alpha, seed):
    ds = _balanced(5, 30)
    part = dirichlet_partition(ds, n_clients, alpha, seed)
    assert part.n_clients == n_clients
    _assert_set_partition(part, len(ds))
    again = dirichlet_partition(ds, n_clients, alpha, seed)
    assert all(np.array_equal(a, b) for a, b in zip(part.client_indices, again.client_indices))


def test_single_client_gets_everything():
    ds = _balanced()
    part = dirichlet_partition(ds, 1, 0.5, 0)
    assert np.array_equal(part.client_indices[0], np.arange(len(ds)))
    stats = partition_stats(ds, part)
    assert stats.histograms == [ds.class_histogram().tolist()]


def test_partition_rejects_bad_alpha():
    with pytest.raises(ConfigurationError):
        dirichlet_partition(_balanced(), 10, 0.0, 0)
    with pytest.raises(ConfigurationError):
        dirichlet_partition(_balanced(), 0, 0.5, 0)


def test_large_alpha_is_near_iid():
    ds = _balanced(10, 1000)
    for seed in range(5):
        stats = partition_stats(ds, dirichlet_partition(ds, 100, 1000.0, seed))
        for hist in stats.histograms:
            hist = np.asarray(hist, dtype=float)
            share = hist / hist.sum()
            assert np.all(np.abs(share - 0.1) <= 0.03)


def test_smaller_alpha_is_more_imbalanced():
    ds = _balanced(10, 500)
    var = {}
    for alpha in (0.1, 0.5, 10.0):
        var[alpha] = np.mean([np.var(dirichlet_partition(ds, 100, alpha, s).sizes()) for s in range(5)])
    assert var[0.1] > var[0.5] > var[10.0]
    for seed in range(3):
        s1 = dirichlet_partition(ds, 100, 0.1, seed).sizes()
        s5 = dirichlet_partition(ds, 100, 0.5, seed).sizes()
        assert s1.max() / max(s1.min(), 1) > s5.max() / max(s5.min(), 1)


def test_alpha_01_has_tiny_and_huge_clients_at_mnist_scale():
    ds = _balanced(10, 5000)
    stats = partition_stats(ds, dirichlet_partition(ds, 100, 0.1, 0))
    assert stats.clients_below(100) > 0
    assert stats.clients_above(1000) > 0
    assert sum(stats.sizes) == len(ds)


def test_partition_stats_two_halves():
    ds = _balanced(2, 10)
    from fcba.data import Partition
    part = Partition((np.arange(0, 20, 2), np.arange(1, 20, 2)), 1.0, 0)
    stats = partition_stats(ds, part)
    assert stats.sizes == [10, 10]
    assert stats.to_dict()["total"] == 20


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=30), st.integers(0, 500))
def test_largest_remainder_sums_exactly(weights, total):
    w = np.asarray(weights)
    if w.sum() == 0:
        w = np.ones_like(w)
    p = w / w.sum()
    counts = largest_remainder(p, total)
    assert counts.sum() == total
    assert np.all(np.abs(counts - p * total) < 1 + 1e-9)


# ------------------------------------------------------------------ batches


def test_make_batches_sizes_and_determinism():
    b = make_batches(np.arange(10), 4, seed=0, epoch=0)
    assert [len(x) for x in b] == [4, 4, 2]
    again = make_batches(np.arange(10), 4, seed=0, epoch=0)
    assert all(np.array_equal(x, y) for x, y in zip(b, again))
    assert sorted(np.concatenate(b).tolist()) == list(range(10))
    with pytest.raises(ConfigurationError):
        make_batches(np.arange(3), 0, 0, 0)


def test_make_batches_epochs_differ():
    orders = {tuple(np.concatenate(make_batches(np.arange(20), 8, 5, e))) for e in range(10)}
    assert len(orders) == 10
