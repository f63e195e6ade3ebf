"""Synthetic data generation, batching, and PGM round-trips."""

import numpy as np
import pytest

from m2dan.data import (
    CLASS_NAMES,
    Benchmark,
    DomainSpec,
    default_benchmark,
    epoch_batches,
    export_dataset,
    gen_synthetic_domain,
    load_dataset_dir,
    make_benchmark,
    narrow_count,
    read_pgm,
    resize_image,
    write_pgm,
)
from m2dan.errors import (
    EmptyClassDir,
    IndivisibleBatch,
    InvalidSpec,
    MalformedPgm,
    MissingSource,
)


def clean_spec(n_train=8, n_test=4, narrow_frac=0.5, **kw):
    return DomainSpec("source", n_train, n_test, narrow_frac, **kw)


# ---------------------------------------------------------------- rendering


def test_clean_wedge_has_foreground_apex_and_background():
    ds = gen_synthetic_domain(clean_spec(), 64, seed=0)
    img = ds.train[0].image[0]
    assert img.shape == (64, 64)
    assert img.max() > 0.5  # rays are bright
    assert np.mean(img < 0.2) > 0.5  # mostly background
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_generation_deterministic():
    a = gen_synthetic_domain(clean_spec(), 32, seed=9)
    b = gen_synthetic_domain(clean_spec(), 32, seed=9)
    for sa, sb in zip(a.train + a.test, b.train + b.test):
        assert np.array_equal(sa.image, sb.image)
    c = gen_synthetic_domain(clean_spec(), 32, seed=10)
    assert not np.array_equal(a.train[0].image, c.train[0].image)


def test_images_are_quantized_to_255_grid():
    spec = clean_spec(noise_std=0.08, salt_pepper_frac=0.05, blur_radius=1)
    ds = gen_synthetic_domain(spec, 32, seed=3)
    for s in ds.train:
        scaled = s.image * 255.0
        assert np.allclose(scaled, np.round(scaled), atol=1e-9)


def test_class_counts_follow_narrow_frac_exactly():
    assert narrow_count(0.118, 526) == 62
    spec = DomainSpec("source", 526, 2, 0.118)
    ds = gen_synthetic_domain(spec, 16, seed=0)
    n_narrow = sum(1 for s in ds.train if s.class_label is not None and s.class_label[0] == 1)
    assert n_narrow == 62
    assert len(ds.train) - n_narrow == 464


def test_unlabeled_target_train_hides_class_labels():
    ds = gen_synthetic_domain(clean_spec(), 16, seed=1, domain_index=1, num_domains=3,
                              labeled_train=False)
    assert all(s.class_label is None for s in ds.train)
    assert all(s.class_label is not None for s in ds.test)  # test always labeled
    assert all(s.domain_label.tolist() == [0, 1, 0] for s in ds.train)


def test_domain_spec_validation():
    with pytest.raises(InvalidSpec):
        DomainSpec("x", 4, 4, 0.0)
    with pytest.raises(InvalidSpec):
        DomainSpec("x", 4, 4, 0.5, contrast=0.0)
    with pytest.raises(InvalidSpec):
        DomainSpec("x", 4, 4, 0.5, resolution_scale=1.5)
    with pytest.raises(InvalidSpec):
        DomainSpec("x", 4, 4, 0.5, salt_pepper_frac=1.0)


def test_shift_pipeline_changes_images():
    base = gen_synthetic_domain(clean_spec(), 32, seed=5).train[0].image
    for kw in (dict(contrast=0.5), dict(blur_radius=2), dict(resolution_scale=0.5),
               dict(noise_std=0.1), dict(salt_pepper_frac=0.2)):
        shifted = gen_synthetic_domain(clean_spec(**kw), 32, seed=5).train[0].image
        assert not np.array_equal(base, shifted), kw
        assert shifted.min() >= 0.0 and shifted.max() <= 1.0


# ---------------------------------------------------------------- benchmark


def test_default_benchmark_counts():
    bench = default_benchmark(seed=0)
    assert bench.names == ["source", "target1", "target2"]
    assert bench.num_domains == 3
    sizes = [(len(d.train), len(d.test)) for d in bench.domains]
    assert sizes == [(1505, 367), (88, 88), (304, 304)]

    def narrow_of(samples):
        return sum(1 for s in samples if s.class_label is not None and s.class_label[0] == 1)

    assert narrow_of(bench.domains[0].train) == 501
    assert narrow_of(bench.domains[0].test) == 132
    assert narrow_of(bench.domains[1].test) == 11
    assert narrow_of(bench.domains[2].test) == 70
    # target train splits are unlabeled
    assert all(s.class_label is None for s in bench.domains[1].train)
    assert all(s.class_label is None for s in bench.domains[2].train)


def test_benchmark_scales_with_fraction():
    bench = make_benchmark(seed=0, scale_fraction=1.0 / 60.0, image_size=16)
    sizes = [(len(d.train), len(d.test)) for d in bench.domains]
    assert sizes == [(150, 37), (9, 9), (30, 30)]  # round() halves to even: 150.5 -> 150
    assert bench.domains[0].train[0].image.shape == (1, 16, 16)


def test_benchmark_deterministic_in_seed():
    a = make_benchmark(seed=4, scale_fraction=0.01, image_size=16)
    b = make_benchmark(seed=4, scale_fraction=0.01, image_size=16)
    for da, db in zip(a.domains, b.domains):
        for sa, sb in zip(da.train + da.test, db.train + db.test):
            assert np.array_equal(sa.image, sb.image)


# ---------------------------------------------------------------- batching


def test_epoch_batches_equal_domain_mix():
    bench = make_benchmark(seed=1, scale_fraction=0.02, image_size=16)
    batches = list(epoch_batches(bench, batch_size=12, seed=7, epoch=0))
    largest = max(len(d.train) for d in bench.domains)
    assert len(batches) == largest // 4
    for b in batches:
        assert b.images.shape == (12, 1, 16, 16)
        assert b.domain_labels.sum(axis=0).tolist() == [4.0, 4.0, 4.0]
        assert b.source_rows.tolist() == [0, 1, 2, 3]
        assert b.class_labels.shape == (4, 2)
        assert np.all(b.class_labels.sum(axis=1) == 1.0)


def test_epoch_batches_deterministic_and_reshuffled():
    bench = make_benchmark(seed=1, scale_fraction=0.02, image_size=16)
    a = [b.images.data for b in epoch_batches(bench, 12, seed=7, epoch=0)]
    b = [b.images.data for b in epoch_batches(bench, 12, seed=7, epoch=0)]
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    c = [b.images.data for b in epoch_batches(bench, 12, seed=7, epoch=1)]
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_epoch_batches_source_only_subset():
    bench = make_benchmark(seed=1, scale_fraction=0.02, image_size=16)
    batches = list(epoch_batches(bench, 12, seed=7, epoch=0, domains=(0,)))
    assert len(batches) == len(bench.domains[0].train) // 12
    for b in batches:
        assert len(b.source_rows) == 12
        assert np.all(b.domain_labels[:, 0] == 1.0)


def test_indivisible_batch_rejected():
    bench = make_benchmark(seed=1, scale_fraction=0.02, image_size=16)
    with pytest.raises(IndivisibleBatch):
        list(epoch_batches(bench, batch_size=10, seed=0, epoch=0))


# ---------------------------------------------------------------- PGM


def test_pgm_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = np.round(rng.uniform(size=(24, 16)) * 255.0) / 255.0
    p = tmp_path / "x.pgm"
    write_pgm(p, img)
    back = read_pgm(p)
    assert np.array_equal(back, img)


def test_pgm_rejects_ascii_and_garbage(tmp_path):
    p2 = tmp_path / "a.pgm"
    p2.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
    with pytest.raises(MalformedPgm):
        read_pgm(p2)
    bad = tmp_path / "b.pgm"
    bad.write_bytes(b"hello")
    with pytest.raises(MalformedPgm):
        read_pgm(bad)
    short = tmp_path / "c.pgm"
    short.write_bytes(b"P5\n4 4\n255\nxy")
    with pytest.raises(MalformedPgm):
        read_pgm(short)
    deep = tmp_path / "d.pgm"
    deep.write_bytes(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(MalformedPgm):
        read_pgm(deep)


def test_export_then_load_round_trip(tmp_path):
    bench = make_benchmark(seed=2, scale_fraction=0.01, image_size=64)
    export_dataset(bench, tmp_path)
    loaded = load_dataset_dir(tmp_path, half="none", image_size=64)
    assert loaded.names == bench.names
    for da, db in zip(bench.domains, loaded.domains):
        assert len(da.train) == len(db.train) and len(da.test) == len(db.test)
        for sa, sb in zip(da.train, db.train):
            assert np.array_equal(sa.image, sb.image)
            if sa.class_label is None:
                assert sb.class_label is None
            else:
                assert np.array_equal(sa.class_label, sb.class_label)
        for sa, sb in zip(da.test, db.test):
            assert np.array_equal(sa.image, sb.image)


def test_load_requires_source(tmp_path):
    bench = make_benchmark(seed=2, scale_fraction=0.01, image_size=16)
    export_dataset(bench, tmp_path)
    (tmp_path / "source").rename(tmp_path / "zdomain")
    with pytest.raises(MissingSource):
        load_dataset_dir(tmp_path, image_size=16)


def test_load_rejects_empty_class_dir(tmp_path):
    bench = make_benchmark(seed=2, scale_fraction=0.01, image_size=16)
    export_dataset(bench, tmp_path)
    for f in (tmp_path / "source" / "test" / "narrow").glob("*.pgm"):
        f.unlink()
    with pytest.raises(EmptyClassDir):
        load_dataset_dir(tmp_path, image_size=16)


def test_half_crops(tmp_path):
    img = np.zeros((64, 128))
    img[:, :64] = 1.0  # left half bright
    img = np.round(img * 255.0) / 255.0
    for domain in ("source",):
        for split in ("train", "test"):
            for cls in CLASS_NAMES:
                d = tmp_path / domain / split / cls
                d.mkdir(parents=True)
                write_pgm(d / "img_00000.pgm", img)
    whole = load_dataset_dir(tmp_path, half="none", image_size=64)
    assert whole.domains[0].train[0].image.shape == (1, 64, 64)
    left = load_dataset_dir(tmp_path, half="left", image_size=64)
    assert np.all(left.domains[0].train[0].image == 1.0)
    right = load_dataset_dir(tmp_path, half="right", image_size=64)
    assert np.all(right.domains[0].train[0].image == 0.0)
    both = load_dataset_dir(tmp_path, half="both", image_size=64)
    assert len(both.domains[0].train) == 2 * len(whole.domains[0].train)
    with pytest.raises(InvalidSpec):
        load_dataset_dir(tmp_path, half="top")


def test_resize_identity_and_halving():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(64, 64))
    assert resize_image(img, 64, 64) is img or np.array_equal(resize_image(img, 64, 64), img)
    down = resize_image(img, 32, 32)
    assert down.shape == (32, 32)
    assert np.isclose(down[0, 0], img[:2, :2].mean())
    up = resize_image(np.array([[0.0, 1.0]]), 1, 4)
    assert up.tolist() == [[0.0, 0.0, 1.0, 1.0]]
