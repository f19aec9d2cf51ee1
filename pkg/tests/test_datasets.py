import threading

import numpy as np
import pytest
import torch

from components.datasets import (
    augment_random_resized_crop,
    build_dataset,
    generate_synthetic_shapes,
    iter_batches,
    load_cifar_binary,
    prefetch,
    sample_crop_box,
    write_manifest,
)
from models.data_models import ImageSample
from utils.config import DataConfig
from utils.errors import MalformedRecordError


def test_synthetic_is_deterministic():
    a = generate_synthetic_shapes(7, 2, 32)
    b = generate_synthetic_shapes(7, 2, 32)
    for x, y in zip(a, b):
        assert np.array_equal(x.pixels, y.pixels)
        assert x.labels == y.labels


def test_synthetic_label_coverage():
    samples = generate_synthetic_shapes(7, 1000, 32)
    assert {s.labels["count"] for s in samples} == set(range(1, 7))
    assert {s.labels["class"] for s in samples} == set(range(4))
    assert {s.labels["dist"] for s in samples} == set(range(4))


def test_synthetic_pixels_are_valid():
    for sample in generate_synthetic_shapes(3, 20, 16):
        assert sample.pixels.shape == (16, 16, 3)
        assert sample.pixels.min() >= 0.0 and sample.pixels.max() <= 1.0
        assert set(sample.labels) == {"class", "count", "dist"}


def test_synthetic_preconditions():
    with pytest.raises(ValueError):
        generate_synthetic_shapes(7, 0, 32)
    with pytest.raises(ValueError):
        generate_synthetic_shapes(7, 10, 8)


def _cifar_record(label_bytes, labels, fill=0):
    record = np.full(label_bytes + 3072, fill, dtype=np.uint8)
    record[:label_bytes] = labels
    return record


def test_load_cifar10_records(tmp_path):
    red = _cifar_record(1, [3])
    red[1:1 + 1024] = 255
    path = tmp_path / "data_batch_1.bin"
    np.concatenate([_cifar_record(1, [0]), red]).tofile(path)

    samples = load_cifar_binary(path)
    assert len(samples) == 2
    assert samples[0].pixels.shape == (32, 32, 3)
    assert np.all(samples[0].pixels == 0.0)
    assert samples[0].labels == {"class": 0}
    assert samples[1].labels == {"class": 3}
    assert np.all(samples[1].pixels[..., 0] == 1.0)
    assert np.all(samples[1].pixels[..., 1:] == 0.0)


def test_load_cifar100_coarse_and_fine(tmp_path):
    path = tmp_path / "train.bin"
    _cifar_record(2, [4, 71]).tofile(path)
    (sample,) = load_cifar_binary(path, label_bytes=2)
    assert sample.labels == {"coarse": 4, "class": 71}


def test_malformed_cifar_file(tmp_path):
    path = tmp_path / "short.bin"
    path.write_bytes(b"\x00")
    with pytest.raises(MalformedRecordError):
        load_cifar_binary(path)


def test_missing_cifar_file(tmp_path):
    with pytest.raises(OSError):
        load_cifar_binary(tmp_path / "absent.bin")


def test_build_dataset_dispatches():
    samples = build_dataset(DataConfig(seed=1, count=5, image_size=16))
    assert len(samples) == 5


def test_full_crop_is_identity(rng):
    sample = generate_synthetic_shapes(5, 1, 32)[0]
    out = augment_random_resized_crop(sample, rng, 1.0, 1.0, 32, aspect=(1.0, 1.0))
    assert np.array_equal(out.pixels, sample.pixels)
    assert out.labels == sample.labels


@pytest.mark.parametrize("out_size", [16, 32, 48])
def test_crop_output_size(rng, out_size):
    sample = generate_synthetic_shapes(5, 1, 32)[0]
    for _ in range(10):
        out = augment_random_resized_crop(sample, rng, 0.2, 1.0, out_size, hflip=True)
        assert out.pixels.shape == (out_size, out_size, 3)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0


def test_crop_box_area_range(rng):
    for _ in range(200):
        top, left, h, w = sample_crop_box(rng, 64, 64, 0.3, 0.6)
        assert 0 <= top and top + h <= 64
        assert 0 <= left and left + w <= 64
        # rounding of the side lengths widens the area range slightly
        assert 0.25 * 64 * 64 <= h * w <= 0.66 * 64 * 64


def test_crop_rejects_bad_scale(rng):
    with pytest.raises(ValueError):
        sample_crop_box(rng, 32, 32, 0.8, 0.2)


def test_iter_batches_is_reproducible():
    samples = generate_synthetic_shapes(2, 20, 16)
    config = DataConfig(count=20, image_size=16)
    first = list(iter_batches(samples, 8, seed=0, epoch=1, config=config))
    second = list(iter_batches(samples, 8, seed=0, epoch=1, config=config))
    assert [b.shape[0] for b in first] == [8, 8, 4]
    for a, b in zip(first, second):
        assert torch.equal(a, b)
    other_epoch = list(iter_batches(samples, 8, seed=0, epoch=2, config=config))
    assert not torch.equal(first[0], other_epoch[0])


def test_prefetch_preserves_batches():
    samples = generate_synthetic_shapes(2, 20, 16)
    config = DataConfig(count=20, image_size=16)
    direct = list(iter_batches(samples, 6, seed=4, epoch=0, config=config))
    threaded = list(prefetch(iter_batches(samples, 6, seed=4, epoch=0, config=config), depth=2))
    assert len(direct) == len(threaded)
    for a, b in zip(direct, threaded):
        assert torch.equal(a, b)


def test_prefetch_surfaces_producer_errors():
    def broken():
        yield torch.zeros(1)
        raise KeyError("boom")

    with pytest.raises(RuntimeError, match="boom"):
        list(prefetch(broken(), depth=1))


def test_prefetch_producer_exits_when_consumer_stops():
    def endless():
        while True:
            yield torch.zeros(1)

    before = threading.active_count()
    batches = prefetch(endless(), depth=1)
    next(batches)
    assert threading.active_count() == before + 1
    batches.close()
    assert threading.active_count() == before


def test_manifest(tmp_path):
    path = write_manifest(tmp_path / "manifest.txt", DataConfig(seed=7, count=2000, image_size=32))
    assert path.read_text().splitlines() == ["seed=7", "count=2000", "size=32", "tasks=class,count,dist"]


def test_image_sample_size():
    assert ImageSample(pixels=np.zeros((16, 16, 3))).size == 16
