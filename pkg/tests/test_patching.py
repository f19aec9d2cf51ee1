import numpy as np
import pytest
import torch

from components.patching import (
    patchify,
    patchify_batch,
    positional_table,
    sample_mask,
    sample_mask_batch,
    unpatchify,
    unpatchify_batch,
)
from models.data_models import PatchSequence
from utils.errors import DegenerateRatioError, NonDivisibleSizeError, OddDimError


@pytest.mark.parametrize("size, patch, n, d", [(224, 16, 196, 768), (32, 4, 64, 48)])
def test_patch_counts(size, patch, n, d):
    seq = patchify(np.zeros((size, size, 3)), patch)
    assert seq.n_patches == n
    assert seq.patch_dim == d


def test_non_divisible_size():
    with pytest.raises(NonDivisibleSizeError):
        patchify(np.zeros((30, 30, 3)), 4)


def test_flattening_order_is_row_column_channel():
    image = np.arange(4 * 4 * 3, dtype=np.float64).reshape(4, 4, 3)
    seq = patchify(image, 2)
    # patch 1 is the top-right block; its first pixel is image[0, 2]
    assert seq.grid == (2, 2)
    assert np.array_equal(seq.patches[1, :3], image[0, 2])
    assert np.array_equal(seq.patches[1, 3:6], image[0, 3])
    assert np.array_equal(seq.patches[1, 6:9], image[1, 2])
    assert np.array_equal(seq.patches[2, :3], image[2, 0])


def test_round_trip_is_exact(rng):
    image = rng.random((12, 12, 3))
    assert np.array_equal(unpatchify(patchify(image, 4)), image)


def test_unpatchify_edge_cases():
    zeros = PatchSequence(patches=np.zeros((4, 12)), grid=(2, 2), patch_size=2)
    assert np.array_equal(unpatchify(zeros), np.zeros((4, 4, 3)))
    single = np.arange(12, dtype=np.float64)
    image = unpatchify(PatchSequence(patches=single[None], grid=(1, 1), patch_size=2))
    assert np.array_equal(image, single.reshape(2, 2, 3))


def test_batched_versions_match(rng):
    images = rng.random((3, 8, 8, 3))
    batched = patchify_batch(torch.from_numpy(images), 4)
    for i in range(3):
        assert np.array_equal(batched[i].numpy(), patchify(images[i], 4).patches)
    back = unpatchify_batch(batched, (2, 2), 4)
    assert torch.equal(back, torch.from_numpy(images))


def test_mask_sizes_at_imagenet_scale(rng):
    plan = sample_mask(196, 0.75, rng)
    assert len(plan.masked) == 147
    assert len(plan.visible) == 49


def test_mask_partition(rng):
    for _ in range(50):
        plan = sample_mask(4, 0.5, rng)
        assert len(plan.masked) == 2
        assert sorted(np.concatenate([plan.visible, plan.masked]).tolist()) == [0, 1, 2, 3]
        assert np.all(np.diff(plan.visible) > 0) and np.all(np.diff(plan.masked) > 0)


@pytest.mark.parametrize("n, ratio", [(4, 0.999), (4, 0.05), (1, 0.5), (8, 0.0), (8, 1.0)])
def test_degenerate_ratio(rng, n, ratio):
    with pytest.raises(DegenerateRatioError):
        sample_mask(n, ratio, rng)


def test_mask_uniformity():
    rng = np.random.default_rng(0)
    hits = np.zeros(8)
    trials = 10_000
    for _ in range(trials):
        hits[sample_mask(8, 0.5, rng).masked] += 1
    assert np.all(np.abs(hits / trials - 0.5) < 0.02)


def test_mask_batch_is_independent_per_image(rng):
    batch = sample_mask_batch(16, 64, 0.75, rng)
    assert tuple(batch.masked.shape) == (16, 48)
    assert tuple(batch.visible.shape) == (16, 16)
    assert len({tuple(row.tolist()) for row in batch.masked}) > 1


def test_positional_table_properties():
    table = positional_table((8, 8), 64).table
    assert table.shape == (65, 64)
    assert np.all(table[0] == 0.0)
    assert np.all(np.abs(table) <= 1.0)
    rows = {tuple(np.round(r, 12)) for r in table[1:]}
    assert len(rows) == 64


def test_positional_table_width_not_multiple_of_four():
    table = positional_table((2, 2), 6).table
    assert table.shape == (5, 6)
    assert len({tuple(np.round(r, 12)) for r in table[1:]}) == 4


def test_positional_table_odd_dim():
    with pytest.raises(OddDimError):
        positional_table((4, 4), 7)
