"""
Pretraining pipeline: schedules, EMA target updates, checkpoints and the
epoch loop that writes per-epoch metrics.
"""
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from components.checkpoint import FORMAT_VERSION, read_tensor_file, write_tensor_file
from components.datasets import build_dataset, iter_batches, prefetch, stack_pixels, write_manifest
from components.objective import loss_cls, loss_latent, loss_pixel, total_loss
from components.patching import patchify, patchify_batch, sample_mask_batch, unpatchify
from components.vit import PiLaMIM, build_model
from models.data_models import ImageSample, LossBreakdown, MaskLike, MaskPlan, PatchSequence
from utils.config import ModelConfig, RunConfig, TrainConfig, save_resolved
from utils.errors import ConfigMismatchError, CorruptCheckpointError, NonFiniteLossError, ShapeMismatchError
from utils.logging_utils import logger
from utils.settings import Settings

METRICS_COLUMNS = ["epoch", "l_pixel", "l_latent", "l_cls", "total", "lr", "lambda"]
METRICS_NAME = "metrics.csv"
FINAL_CHECKPOINT_NAME = "checkpoint_final.bin"

ParamSource = Union[torch.nn.Module, Mapping[str, torch.Tensor]]


# --------------------------------------------------------------------------- #
# Schedules
# --------------------------------------------------------------------------- #
def lambda_schedule(step: int, total_steps: int, lambda_start: float, lambda_end: float) -> float:
    """EMA momentum, linear from lambda_start at step 0 to lambda_end at total_steps"""
    if total_steps <= 0:
        return lambda_end
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lambda_start + (lambda_end - lambda_start) * step / total_steps


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float, batch_size: int) -> float:
    """
    Linear warmup to ``base_lr * batch_size / 256`` then half-cosine decay to 0.

    The cosine spans the ``total_steps - warmup_steps`` steps after warmup.
    """
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"need 0 <= warmup_steps < total_steps, got {warmup_steps}, {total_steps}")
    peak = base_lr * batch_size / 256
    if step < warmup_steps:
        return peak * step / warmup_steps
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


# --------------------------------------------------------------------------- #
# EMA
# --------------------------------------------------------------------------- #
def _named_params(source: ParamSource) -> Dict[str, torch.Tensor]:
    if isinstance(source, torch.nn.Module):
        return dict(source.named_parameters())
    return dict(source)


@torch.no_grad()
def ema_update(target: ParamSource, context: ParamSource, momentum: float) -> ParamSource:
    """
    In-place ``target = momentum * target + (1 - momentum) * context``.

    Args:
        target: Target-encoder module or name -> tensor mapping (mutated)
        context: Context-encoder module or mapping with matching names/shapes
        momentum: lambda in [0, 1]

    Returns:
        The updated target
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {momentum}")
    target_params, context_params = _named_params(target), _named_params(context)
    if target_params.keys() != context_params.keys():
        raise ShapeMismatchError("target and context parameter names differ")
    for name, p_t in target_params.items():
        p_c = context_params[name]
        if p_t.shape != p_c.shape:
            raise ShapeMismatchError(f"{name}: target {tuple(p_t.shape)} vs context {tuple(p_c.shape)}")
        p_t.mul_(momentum).add_(p_c.detach(), alpha=1.0 - momentum)
    return target


# --------------------------------------------------------------------------- #
# Training state
# --------------------------------------------------------------------------- #
@dataclass
class TrainState:
    """Everything that changes during pretraining"""

    model: PiLaMIM
    optimizer: torch.optim.Optimizer
    model_config: ModelConfig
    train_config: TrainConfig
    total_steps: int
    steps_per_epoch: int
    rng: np.random.Generator
    step: int = 0
    history: List[Dict[str, Optional[float]]] = field(default_factory=list)

    @property
    def warmup_steps(self) -> int:
        return self.train_config.warmup_epochs * self.steps_per_epoch

    @property
    def epoch(self) -> int:
        return self.step // self.steps_per_epoch

    def current_lr(self) -> float:
        cfg = self.train_config
        return lr_schedule(min(self.step, self.total_steps), self.total_steps, self.warmup_steps,
                           cfg.base_lr, cfg.batch_size)

    def current_lambda(self) -> float:
        cfg = self.train_config
        return lambda_schedule(min(self.step, self.total_steps), self.total_steps,
                               cfg.lambda_start, cfg.lambda_end)


def build_optimizer(model: PiLaMIM, config: TrainConfig) -> torch.optim.Optimizer:
    """AdamW over every trainable parameter; the target encoder is never included"""
    return torch.optim.AdamW(model.decay_groups(config.weight_decay), lr=0.0, betas=config.betas)


def create_state(model_config: ModelConfig, train_config: TrainConfig, n_samples: int,
                 dtype: torch.dtype = torch.float32) -> TrainState:
    """Fresh state: model, optimizer and RNG derived from ``train_config.seed``"""
    steps_per_epoch = max(1, math.ceil(n_samples / train_config.batch_size))
    rng = np.random.default_rng(train_config.seed)
    model = build_model(model_config, seed=rng, dtype=dtype)
    return TrainState(
        model=model,
        optimizer=build_optimizer(model, train_config),
        model_config=model_config,
        train_config=train_config,
        total_steps=steps_per_epoch * train_config.epochs,
        steps_per_epoch=steps_per_epoch,
        rng=rng,
    )


# --------------------------------------------------------------------------- #
# One step
# --------------------------------------------------------------------------- #
def forward_losses(model: PiLaMIM, patches: torch.Tensor, plan: MaskLike) -> LossBreakdown:
    """Masked forward pass and the loss terms the model's mode uses"""
    config = model.config
    out = model(patches, plan)
    l_pixel = l_latent = l_cls = None
    if "xhat" in out:
        l_pixel = loss_pixel(out["xhat"], patches, plan)
    if "that" in out:
        l_latent = loss_latent(out["that"], out["targets"], plan)
        if config.uses_cls_loss:
            l_cls = loss_cls(out["that"][:, 0], out["targets"][:, 0])
    return total_loss(config.mode, l_pixel, l_latent, l_cls, latent_only_cls=config.latent_only_cls)


def _as_images(batch: Union[Sequence[ImageSample], torch.Tensor]) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        return batch
    if len(batch) == 0:
        raise ValueError("train_step needs a non-empty batch")
    return stack_pixels(batch)


def train_step(state: TrainState, batch: Union[Sequence[ImageSample], torch.Tensor]) -> Tuple[TrainState, LossBreakdown]:
    """
    One optimizer step followed by one EMA update of the target encoder.

    Args:
        state: Mutable training state (updated in place and returned)
        batch: ImageSamples or a (B, H, W, C) tensor in [0, 1]

    Returns:
        (state, LossBreakdown of floats)
    """
    images = _as_images(batch)
    if images.shape[0] == 0:
        raise ValueError("train_step needs a non-empty batch")
    model, config = state.model, state.model_config
    dtype = next(model.parameters()).dtype
    patches = patchify_batch(images.to(dtype), config.patch_size)
    plan = sample_mask_batch(patches.shape[0], config.n_patches, config.mask_ratio, state.rng)

    lr = state.current_lr()
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    model.train()
    state.optimizer.zero_grad(set_to_none=True)
    breakdown = forward_losses(model, patches, plan)
    if not torch.isfinite(breakdown.total):
        terms = breakdown.as_dict()
        logger.error(f"Non-finite loss at step {state.step}: {terms}")
        raise NonFiniteLossError(state.step, terms)
    breakdown.total.backward()
    state.optimizer.step()

    if model.target_encoder is not None:
        ema_update(model.target_encoder, model.encoder, state.current_lambda())
    state.step += 1
    return state, breakdown.item()


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #
def _optimizer_tensors(state: TrainState) -> Dict[str, torch.Tensor]:
    names = {id(p): n for n, p in state.model.named_parameters()}
    tensors = {}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            for key, value in state.optimizer.state.get(p, {}).items():
                tensor = value if isinstance(value, torch.Tensor) else torch.tensor(value)
                tensors[f"optim/{names[id(p)]}/{key}"] = tensor
    return tensors


def save_checkpoint(state: TrainState, path) -> Path:
    """Write model, target, optimizer moments, step, RNG state and loss history"""
    tensors = {f"model/{k}": v for k, v in state.model.state_dict().items()}
    tensors.update(_optimizer_tensors(state))
    meta = {
        "version": FORMAT_VERSION,
        "model_config": asdict(state.model_config),
        "train_config": asdict(state.train_config),
        "step": state.step,
        "total_steps": state.total_steps,
        "steps_per_epoch": state.steps_per_epoch,
        "rng": state.rng.bit_generator.state,
        "history": state.history,
    }
    return write_tensor_file(path, tensors, meta)


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> TrainState:
    """
    Restore a TrainState written by ``save_checkpoint``.

    Args:
        path: Checkpoint file
        expected: When given, the stored model config must equal it

    Returns:
        TrainState whose forward passes match the saved model bitwise
    """
    header, tensors = read_tensor_file(path)
    try:
        model_config = ModelConfig(**header["model_config"])
        train_config = TrainConfig(**header["train_config"])
    except (KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: bad config block ({exc})")
    if expected is not None and asdict(expected) != asdict(model_config):
        raise ConfigMismatchError(
            f"{path}: checkpoint holds a {model_config.mode} model, "
            f"requested {expected.mode} (or different geometry)"
        )

    model_tensors = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    if not model_tensors:
        raise CorruptCheckpointError(f"{path}: no model tensors")
    dtype = next(iter(model_tensors.values())).dtype
    # leaves the caller's torch RNG stream untouched
    with torch.random.fork_rng(devices=[]):
        model = PiLaMIM(model_config).to(dtype)
    try:
        model.load_state_dict(model_tensors, strict=True)
    except RuntimeError as exc:
        raise CorruptCheckpointError(f"{path}: tensors do not match the stored config ({exc})")

    optimizer = build_optimizer(model, train_config)
    params = dict(model.named_parameters())
    for key, value in tensors.items():
        if not key.startswith("optim/"):
            continue
        name, _, slot = key[len("optim/"):].rpartition("/")
        if name not in params:
            raise CorruptCheckpointError(f"{path}: optimizer state for unknown parameter {name!r}")
        optimizer.state[params[name]][slot] = value

    try:
        step, total_steps = int(header["step"]), int(header["total_steps"])
        steps_per_epoch = int(header["steps_per_epoch"])
        rng = np.random.default_rng()
        rng.bit_generator.state = header["rng"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: bad training-state block ({exc!r})")
    logger.info(f"Loaded checkpoint {path} at step {step}")
    return TrainState(
        model=model,
        optimizer=optimizer,
        model_config=model_config,
        train_config=train_config,
        total_steps=total_steps,
        steps_per_epoch=steps_per_epoch,
        rng=rng,
        step=step,
        history=header.get("history", []),
    )


def load_model(path) -> PiLaMIM:
    """Frozen model for evaluation"""
    model = load_checkpoint(path).model
    model.eval()
    return model


# --------------------------------------------------------------------------- #
# Reconstruction preview
# --------------------------------------------------------------------------- #
@torch.no_grad()
def reconstruct(model: PiLaMIM, image: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Pixel-decoder output with the visible patches pasted back in"""
    config = model.config
    seq = patchify(image, config.patch_size)
    dtype = next(model.parameters()).dtype
    patches = torch.from_numpy(seq.patches).to(dtype).unsqueeze(0)
    model.eval()
    xhat = model(patches, plan)["xhat"][0].cpu().numpy()
    merged = seq.patches.astype(np.float64).copy()
    merged[plan.masked] = xhat[plan.masked]
    return unpatchify(PatchSequence(patches=merged, grid=seq.grid, patch_size=seq.patch_size))


# --------------------------------------------------------------------------- #
# Pretraining driver
# --------------------------------------------------------------------------- #
class PretrainPipeline:
    """Main pretraining loop orchestrating data, model, schedules and outputs"""

    def __init__(self, config: RunConfig, out_dir):
        self.config = config
        self.out_dir = Path(out_dir)
        self.settings = Settings()
        self.samples = build_dataset(config.data)
        self.state = create_state(config.model, config.train, len(self.samples))
        self.metrics_path = self.out_dir / METRICS_NAME

    def _batches(self, epoch: int):
        batches = iter_batches(
            self.samples, self.config.train.batch_size, self.config.train.seed, epoch,
            config=self.config.data, out_size=self.config.model.image_size,
        )
        if self.settings.prefetch:
            return prefetch(batches, self.config.train.prefetch_depth)
        return batches

    def _run_epoch(self, epoch: int) -> Dict[str, Optional[float]]:
        sums: Dict[str, float] = {}
        weight = 0
        lr = lam = 0.0
        for images in tqdm(self._batches(epoch), total=self.state.steps_per_epoch,
                           desc=f"epoch {epoch + 1}", leave=False):
            lr, lam = self.state.current_lr(), self.state.current_lambda()
            _, breakdown = train_step(self.state, images)
            n = images.shape[0]
            weight += n
            for key, value in breakdown.as_dict().items():
                if value is not None:
                    sums[key] = sums.get(key, 0.0) + value * n
        row: Dict[str, Optional[float]] = {"epoch": epoch + 1}
        for key in ("l_pixel", "l_latent", "l_cls", "total"):
            row[key] = sums[key] / weight if key in sums else None
        row["lr"], row["lambda"] = lr, lam
        return row

    def _write_metrics(self):
        frame = pd.DataFrame(self.state.history, columns=METRICS_COLUMNS)
        frame["epoch"] = frame["epoch"].astype(int)
        frame.to_csv(self.metrics_path, index=False, na_rep="")

    def run(self) -> Tuple[TrainState, Path]:
        """
        Train for the configured number of epochs.

        Returns:
            (final TrainState, path of the metrics CSV)
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        torch.set_num_threads(self.settings.threads)
        save_resolved(self.config, self.out_dir)
        if self.config.data.source == "synthetic":
            write_manifest(self.out_dir / "dataset_manifest.txt", self.config.data)

        train_cfg = self.config.train
        logger.info(
            f"Pretraining {self.config.model.mode} for {train_cfg.epochs} epochs "
            f"({self.state.total_steps} steps, {len(self.samples)} images)"
        )
        for epoch in range(train_cfg.epochs):
            row = self._run_epoch(epoch)
            self.state.history.append(row)
            self._write_metrics()
            logger.info(
                f"Epoch {epoch + 1}/{train_cfg.epochs} total={row['total']:.6f} "
                f"lr={row['lr']:.3e} lambda={row['lambda']:.6f}"
            )
            if train_cfg.checkpoint_every and (epoch + 1) % train_cfg.checkpoint_every == 0:
                save_checkpoint(self.state, self.out_dir / f"checkpoint_epoch{epoch + 1:04d}.bin")

        save_checkpoint(self.state, self.out_dir / FINAL_CHECKPOINT_NAME)
        return self.state, self.metrics_path


def pretrain(config: RunConfig, out_dir) -> Tuple[TrainState, Path]:
    """Run a full pretraining job and return the final state and metrics path"""
    return PretrainPipeline(config, out_dir).run()
