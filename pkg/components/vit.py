"""
Vision-transformer forward passes: context/target encoders and the pixel and
latent decoders.
"""
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn
from timm.models.vision_transformer import Block

from components.patching import positional_table
from models.data_models import EncoderOutput, MaskBatch, MaskLike, MaskPlan, TargetLatents
from utils.config import ModelConfig
from utils.errors import ShapeMismatchError
from utils.logging_utils import logger

INIT_STD = 0.02


def _as_batch(plan: MaskLike, device=None) -> MaskBatch:
    if isinstance(plan, MaskPlan):
        return MaskBatch.stack([plan], device=device)
    return plan


def _fixed_table(grid, dim: int) -> torch.Tensor:
    return torch.from_numpy(positional_table(grid, dim).table).float().unsqueeze(0)


def _blocks(dim: int, heads: int, depth: int, mlp_ratio: float) -> nn.ModuleList:
    return nn.ModuleList(
        [
            Block(dim=dim, num_heads=heads, mlp_ratio=mlp_ratio, qkv_bias=True, norm_layer=nn.LayerNorm)
            for _ in range(depth)
        ]
    )


class ViTEncoder(nn.Module):
    """Patch projection + [CLS] + pre-norm blocks + final layer norm"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.patch_dim = config.patch_dim
        self.n_patches = config.n_patches
        self.patch_embed = nn.Linear(config.patch_dim, config.enc_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.enc_dim))
        self.blocks = _blocks(config.enc_dim, config.enc_heads, config.enc_depth, config.mlp_ratio)
        self.norm = nn.LayerNorm(config.enc_dim)
        self.register_buffer("pos_embed", _fixed_table(config.grid, config.enc_dim), persistent=False)

    def forward(self, patches: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """
        Encode patches sitting at grid positions ``ids``.

        Args:
            patches: (B, L, D_x) rows ordered like ``ids``
            ids: (B, L) 0-based patch indices

        Returns:
            (B, 1+L, enc_dim) tokens, index 0 = [CLS]
        """
        if patches.ndim != 3 or patches.shape[-1] != self.patch_dim:
            raise ShapeMismatchError(
                f"expected (B, L, {self.patch_dim}) patches, got {tuple(patches.shape)}"
            )
        if patches.shape[1] == 0:
            raise ShapeMismatchError("encoder needs at least one visible patch")
        if ids.shape != patches.shape[:2]:
            raise ShapeMismatchError(
                f"patch indices {tuple(ids.shape)} do not match patches {tuple(patches.shape[:2])}"
            )
        pos = self.pos_embed[0, 1:].to(patches.dtype)
        x = self.patch_embed(patches) + pos[ids]
        cls = (self.cls_token + self.pos_embed[:, :1].to(patches.dtype)).expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class MaskedDecoder(nn.Module):
    """Re-inserts a learnable mask token at hidden positions and decodes every position"""

    def __init__(self, config: ModelConfig, out_dim: int, keep_cls: bool):
        super().__init__()
        self.n_patches = config.n_patches
        self.enc_dim = config.enc_dim
        self.keep_cls = keep_cls
        self.embed = nn.Linear(config.enc_dim, config.dec_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, config.dec_dim))
        self.blocks = _blocks(config.dec_dim, config.dec_heads, config.dec_depth, config.mlp_ratio)
        self.norm = nn.LayerNorm(config.dec_dim)
        self.head = nn.Linear(config.dec_dim, out_dim)
        self.register_buffer("pos_embed", _fixed_table(config.grid, config.dec_dim), persistent=False)

    def forward(self, tokens: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        if tokens.ndim != 3 or tokens.shape[-1] != self.enc_dim:
            raise ShapeMismatchError(f"expected (B, 1+|V|, {self.enc_dim}) tokens, got {tuple(tokens.shape)}")
        if tokens.shape[1] != 1 + visible.shape[1] or tokens.shape[0] != visible.shape[0]:
            raise ShapeMismatchError(
                f"token count {tokens.shape[1]} does not equal 1 + |V| = {1 + visible.shape[1]}"
            )
        x = self.embed(tokens)
        batch, dim = x.shape[0], x.shape[-1]
        full = self.mask_token.to(x.dtype).expand(batch, self.n_patches, dim)
        full = full.scatter(1, visible.unsqueeze(-1).expand(-1, -1, dim), x[:, 1:])
        x = torch.cat([x[:, :1], full], dim=1) + self.pos_embed.to(x.dtype)
        for block in self.blocks:
            x = block(x)
        x = self.head(self.norm(x))
        return x if self.keep_cls else x[:, 1:]


class PiLaMIM(nn.Module):
    """
    Context encoder, EMA target encoder and mode-dependent pixel/latent decoders.

    ``pixel_only`` builds neither a latent decoder nor a target encoder;
    ``latent_only`` builds no pixel decoder.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = ViTEncoder(config)
        self.target_encoder: Optional[ViTEncoder] = None
        self.pixel_decoder: Optional[MaskedDecoder] = None
        self.latent_decoder: Optional[MaskedDecoder] = None
        if config.uses_pixel_decoder:
            self.pixel_decoder = MaskedDecoder(config, out_dim=config.patch_dim, keep_cls=False)
        if config.uses_latent_decoder:
            self.latent_decoder = MaskedDecoder(config, out_dim=config.enc_dim, keep_cls=True)
            self.target_encoder = ViTEncoder(config)
            self.target_encoder.requires_grad_(False)

    def initialize_weights(self):
        """Truncated-normal weights and tokens, zero biases, unit norms"""
        self.apply(self._init_weights)
        nn.init.trunc_normal_(self.encoder.cls_token, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        for decoder in (self.pixel_decoder, self.latent_decoder):
            if decoder is not None:
                nn.init.trunc_normal_(decoder.mask_token, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        if self.target_encoder is not None:
            self.target_encoder.load_state_dict(self.encoder.state_dict())

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    # ------------------------------------------------------------------ #
    # Forward passes
    # ------------------------------------------------------------------ #
    def context_encode(self, visible: torch.Tensor, plan: MaskLike) -> EncoderOutput:
        """Encode only the visible patches; rows of ``visible`` follow ``plan.visible``"""
        plan = _as_batch(plan, visible.device)
        if visible.ndim == 2:
            visible = visible.unsqueeze(0)
        return EncoderOutput(tokens=self.encoder(visible, plan.visible))

    def target_encode(self, all_patches: torch.Tensor) -> TargetLatents:
        """Run the target encoder on the full sequence without tracking gradients"""
        if self.target_encoder is None:
            raise ShapeMismatchError(f"mode {self.config.mode!r} has no target encoder")
        if all_patches.ndim == 2:
            all_patches = all_patches.unsqueeze(0)
        if all_patches.shape[1] != self.config.n_patches:
            raise ShapeMismatchError(
                f"target encoder needs all {self.config.n_patches} patches, got {all_patches.shape[1]}"
            )
        ids = torch.arange(all_patches.shape[1], device=all_patches.device).expand(all_patches.shape[0], -1)
        with torch.no_grad():
            tokens = self.target_encoder(all_patches, ids)
        return TargetLatents(tokens=tokens.detach())

    def decode_pixel(self, z: EncoderOutput, plan: MaskLike) -> torch.Tensor:
        """Predict all N patches' pixels, (B, N, D_x)"""
        if self.pixel_decoder is None:
            raise ShapeMismatchError(f"mode {self.config.mode!r} has no pixel decoder")
        plan = _as_batch(plan, z.tokens.device)
        return self.pixel_decoder(z.tokens, plan.visible)

    def decode_latent(self, z: EncoderOutput, plan: MaskLike) -> torch.Tensor:
        """Predict target latents for [CLS] and all N patches, (B, 1+N, enc_dim)"""
        if self.latent_decoder is None:
            raise ShapeMismatchError(f"mode {self.config.mode!r} has no latent decoder")
        plan = _as_batch(plan, z.tokens.device)
        return self.latent_decoder(z.tokens, plan.visible)

    def forward(self, patches: torch.Tensor, plan: MaskLike) -> Dict[str, torch.Tensor]:
        """
        Full masked forward pass on (B, N, D_x) patches.

        Returns:
            Dict with ``xhat``, ``that`` and ``targets`` for the decoders the
            mode owns
        """
        plan = _as_batch(plan, patches.device)
        visible = torch.gather(patches, 1, plan.visible.unsqueeze(-1).expand(-1, -1, patches.shape[-1]))
        z = self.context_encode(visible, plan)
        out: Dict[str, torch.Tensor] = {}
        if self.pixel_decoder is not None:
            out["xhat"] = self.decode_pixel(z, plan)
        if self.latent_decoder is not None:
            out["that"] = self.decode_latent(z, plan)
            out["targets"] = self.target_encode(patches).tokens
        return out

    def decay_groups(self, weight_decay: float):
        """Optimizer groups: biases, norms, [CLS] and mask tokens get no decay"""
        decay, no_decay = [], []
        for name, param in self.named_parameters():
            if not param.requires_grad:
                continue
            if param.ndim < 2 or name.endswith("cls_token") or name.endswith("mask_token"):
                no_decay.append(param)
            else:
                decay.append(param)
        return [
            {"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ]


def build_model(config: ModelConfig, seed: Union[int, np.random.Generator] = 0,
                dtype: torch.dtype = torch.float32) -> PiLaMIM:
    """
    Build and initialize a model deterministically.

    Args:
        config: Model geometry and mode
        seed: Integer seed or numpy generator supplying one
        dtype: Parameter dtype (float64 for gradient checks)

    Returns:
        PiLaMIM with the target encoder initialized as a copy of the context encoder
    """
    config.validate()
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2 ** 31))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = PiLaMIM(config)
        model.initialize_weights()
    model = model.to(dtype)
    n_params = sum(p.numel() for p in model.parameters() if p.requires_grad)
    logger.info(f"Built {config.mode} model with {n_params} trainable parameters")
    return model
