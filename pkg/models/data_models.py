"""
Data models shared across the PiLaMIM components.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch


@dataclass
class ImageSample:
    """Square RGB image in [0, 1] plus one integer label per task"""

    pixels: np.ndarray
    labels: Dict[str, int] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class PatchSequence:
    """Image flattened into N patch rows, ordered row-major over the grid"""

    patches: np.ndarray
    grid: Tuple[int, int]
    patch_size: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[1]


@dataclass
class MaskPlan:
    """Disjoint sorted index sets of visible and masked patches (0-based)"""

    visible: np.ndarray
    masked: np.ndarray
    ratio: float

    @property
    def n_patches(self) -> int:
        return len(self.visible) + len(self.masked)


@dataclass
class MaskBatch:
    """Per-image mask plans stacked into (B, |V|) and (B, |M|) index tensors"""

    visible: torch.Tensor
    masked: torch.Tensor
    ratio: float

    @classmethod
    def stack(cls, plans: Sequence[MaskPlan], device=None) -> "MaskBatch":
        visible = torch.as_tensor(np.stack([p.visible for p in plans]), dtype=torch.long, device=device)
        masked = torch.as_tensor(np.stack([p.masked for p in plans]), dtype=torch.long, device=device)
        return cls(visible=visible, masked=masked, ratio=plans[0].ratio)

    @classmethod
    def full(cls, batch_size: int, n_patches: int, device=None) -> "MaskBatch":
        """Plan with every patch visible, used for feature extraction"""
        visible = torch.arange(n_patches, device=device).expand(batch_size, n_patches)
        masked = torch.empty(batch_size, 0, dtype=torch.long, device=device)
        return cls(visible=visible, masked=masked, ratio=0.0)

    @property
    def batch_size(self) -> int:
        return self.visible.shape[0]

    @property
    def n_patches(self) -> int:
        return self.visible.shape[1] + self.masked.shape[1]


MaskLike = Union[MaskPlan, MaskBatch]


@dataclass
class PositionalTable:
    """Fixed (N+1) x dim position codes; row 0 belongs to [CLS] and is zero"""

    table: np.ndarray
    grid: Tuple[int, int]

    @property
    def dim(self) -> int:
        return self.table.shape[1]


@dataclass
class EncoderOutput:
    """Context-encoder tokens, index 0 = [CLS]; shape (B, 1+|V|, enc_dim)"""

    tokens: torch.Tensor

    @property
    def cls(self) -> torch.Tensor:
        return self.tokens[:, 0]

    @property
    def patch_tokens(self) -> torch.Tensor:
        return self.tokens[:, 1:]


@dataclass
class TargetLatents:
    """Target-encoder tokens T, index 0 = [CLS]; shape (B, 1+N, enc_dim), detached"""

    tokens: torch.Tensor


@dataclass
class LossBreakdown:
    """Loss terms of one step; terms a mode does not use stay None"""

    l_pixel: Optional[Union[torch.Tensor, float]] = None
    l_latent: Optional[Union[torch.Tensor, float]] = None
    l_cls: Optional[Union[torch.Tensor, float]] = None
    total: Optional[Union[torch.Tensor, float]] = None

    def item(self) -> "LossBreakdown":
        """Detached copy with plain floats"""

        def _f(value):
            return None if value is None else float(value)

        return LossBreakdown(_f(self.l_pixel), _f(self.l_latent), _f(self.l_cls), _f(self.total))

    def as_dict(self) -> Dict[str, Optional[float]]:
        plain = self.item()
        return {
            "l_pixel": plain.l_pixel,
            "l_latent": plain.l_latent,
            "l_cls": plain.l_cls,
            "total": plain.total,
        }


@dataclass
class EmbeddingMatrix:
    """Frozen-encoder features for n samples with per-task label columns"""

    rows: np.ndarray
    feature_kind: str
    source: str = ""
    labels: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class ProbeResult:
    """Outcome of one linear probe; accuracy is measured on held-out samples"""

    task: str
    accuracy: float
    epochs: int
    best_epoch: int
    train_accuracy: float = 0.0
    history: List[float] = field(default_factory=list)
