import numpy as np
import pytest
import torch

from components.objective import loss_cls, loss_latent, loss_pixel, total_loss
from components.patching import sample_mask
from models.data_models import MaskBatch, MaskPlan
from utils.errors import EmptyMaskError, MissingTermError, ShapeMismatchError


def _plan(masked, n):
    masked = np.array(sorted(masked), dtype=np.int64)
    visible = np.array([i for i in range(n) if i not in set(masked.tolist())], dtype=np.int64)
    return MaskPlan(visible=visible, masked=masked, ratio=len(masked) / n)


def test_pixel_oracle_single_patch():
    x = torch.zeros(3, 2, dtype=torch.float64)
    xhat = x.clone()
    xhat[0] = torch.tensor([1.0, 1.0])
    xhat[2] = torch.tensor([9.0, -9.0])  # visible, ignored
    assert abs(float(loss_pixel(xhat, x, _plan([0], 3))) - 1.0) < 1e-12


def test_pixel_oracle_two_patches():
    x = torch.zeros(3, 2, dtype=torch.float64)
    xhat = x.clone()
    xhat[0] = torch.tensor([1.0, 0.0])
    xhat[1] = torch.tensor([0.0, 1.0])
    assert abs(float(loss_pixel(xhat, x, _plan([0, 1], 3))) - 0.5) < 1e-12


def test_pixel_zero_on_masked_agreement(rng):
    x = torch.from_numpy(rng.random((6, 4)))
    plan = _plan([1, 4], 6)
    xhat = torch.from_numpy(rng.random((6, 4)))
    xhat[torch.as_tensor(plan.masked)] = x[torch.as_tensor(plan.masked)]
    assert float(loss_pixel(xhat, x, plan)) == 0.0


def test_latent_oracle():
    t = torch.zeros(3, 2, dtype=torch.float64)
    that = t.clone()
    that[1] = torch.tensor([3.0, 4.0])
    that[0] = torch.tensor([100.0, 100.0])  # [CLS] row, excluded
    assert abs(float(loss_latent(that, t, _plan([0], 2))) - 12.5) < 1e-12
    assert float(loss_latent(t.clone(), t, _plan([0], 2))) == 0.0


def test_cls_oracle():
    t0 = torch.zeros(4, dtype=torch.float64)
    assert abs(float(loss_cls(torch.ones(4, dtype=torch.float64), t0)) - 1.0) < 1e-12


def test_total_oracle():
    terms = [torch.tensor(v, dtype=torch.float64) for v in (1.0, 2.0, 0.5)]
    breakdown = total_loss("pilamim", *terms)
    assert abs(float(breakdown.total) - 3.5) < 1e-12


@pytest.mark.parametrize(
    "mode, expected, present",
    [
        ("pilamim", 3.5, ("l_pixel", "l_latent", "l_cls")),
        ("pixel_only", 1.0, ("l_pixel",)),
        ("latent_only", 2.5, ("l_latent", "l_cls")),
        ("pilamim_no_cls", 3.0, ("l_pixel", "l_latent")),
    ],
)
def test_total_per_mode(mode, expected, present):
    terms = [torch.tensor(v, dtype=torch.float64) for v in (1.0, 2.0, 0.5)]
    breakdown = total_loss(mode, *terms).item()
    assert breakdown.total == pytest.approx(expected, abs=1e-12)
    for name, value in breakdown.as_dict().items():
        if name == "total":
            continue
        assert (value is not None) == (name in present)


def test_latent_only_without_cls():
    breakdown = total_loss("latent_only", l_latent=torch.tensor(2.0), latent_only_cls=False)
    assert float(breakdown.total) == 2.0
    assert breakdown.l_cls is None


def test_missing_term():
    with pytest.raises(MissingTermError):
        total_loss("pilamim", l_pixel=torch.tensor(1.0), l_latent=torch.tensor(1.0))
    with pytest.raises(MissingTermError):
        total_loss("pixel_only", l_latent=torch.tensor(1.0))


def test_empty_mask():
    plan = MaskPlan(visible=np.arange(3), masked=np.array([], dtype=np.int64), ratio=0.0)
    with pytest.raises(EmptyMaskError):
        loss_pixel(torch.zeros(3, 2), torch.zeros(3, 2), plan)
    with pytest.raises(EmptyMaskError):
        loss_latent(torch.zeros(4, 2), torch.zeros(4, 2), plan)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        loss_pixel(torch.zeros(3, 2), torch.zeros(3, 3), _plan([0], 3))
    with pytest.raises(ShapeMismatchError):
        loss_cls(torch.zeros(3), torch.zeros(4))


def test_visible_targets_never_matter():
    rng = np.random.default_rng(99)
    n, d_x, d_t = 8, 6, 5
    for _ in range(100):
        plan = sample_mask(n, 0.5, rng)
        visible = torch.as_tensor(plan.visible)
        x = torch.from_numpy(rng.normal(size=(n, d_x)))
        xhat = torch.from_numpy(rng.normal(size=(n, d_x)))
        t = torch.from_numpy(rng.normal(size=(n + 1, d_t)))
        that = torch.from_numpy(rng.normal(size=(n + 1, d_t)))

        x_perturbed = x.clone()
        x_perturbed[visible] += torch.from_numpy(rng.normal(size=(len(visible), d_x)))
        assert float(loss_pixel(xhat, x, plan)) == float(loss_pixel(xhat, x_perturbed, plan))

        t_perturbed = t.clone()
        t_perturbed[visible + 1] += torch.from_numpy(rng.normal(size=(len(visible), d_t)))
        t_perturbed[0] += 1.0
        that_perturbed = that.clone()
        that_perturbed[visible + 1] -= 3.0
        assert float(loss_latent(that, t, plan)) == float(loss_latent(that_perturbed, t_perturbed, plan))


def test_batched_average_matches_per_sample(rng):
    plans = [sample_mask(4, 0.5, rng) for _ in range(3)]
    xhat = torch.from_numpy(rng.random((3, 4, 12)))
    x = torch.from_numpy(rng.random((3, 4, 12)))
    batched = loss_pixel(xhat, x, MaskBatch.stack(plans))
    single = sum(loss_pixel(xhat[i], x[i], plans[i]) for i in range(3)) / 3
    assert torch.allclose(batched, single, atol=1e-12)
