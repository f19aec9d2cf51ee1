"""
Embedding clients that turn images into frozen-encoder feature vectors.
"""
from typing import List, Sequence, Union

import numpy as np
import torch

from components.patching import patchify_batch
from components.vit import PiLaMIM
from models.data_models import ImageSample, MaskBatch
from utils.errors import ConfigMismatchError

ImageBatch = Union[Sequence[ImageSample], np.ndarray]


class EmbeddingClient:
    """Base class for embedding clients"""

    def __init__(self, model: PiLaMIM, batch_size: int = 256):
        self.model = model
        self.batch_size = batch_size

    def _pool(self, tokens: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError("Subclasses must implement _pool")

    def _to_array(self, images: ImageBatch) -> np.ndarray:
        if isinstance(images, np.ndarray):
            return images if images.ndim == 4 else images[None]
        return np.stack([s.pixels for s in images])

    @torch.no_grad()
    def encode(self, images: ImageBatch) -> np.ndarray:
        """
        Encode images to feature rows with every patch visible.

        Args:
            images: ImageSamples or a (B, H, W, C) array

        Returns:
            (B, enc_dim) float64 array
        """
        array = self._to_array(images)
        config = self.model.config
        if array.shape[1] != config.image_size or array.shape[2] != config.image_size:
            raise ConfigMismatchError(
                f"encoder expects {config.image_size}px images, got {array.shape[1]}x{array.shape[2]}"
            )
        dtype = next(self.model.parameters()).dtype
        self.model.eval()
        rows: List[np.ndarray] = []
        for start in range(0, len(array), self.batch_size):
            chunk = torch.from_numpy(np.ascontiguousarray(array[start:start + self.batch_size])).to(dtype)
            patches = patchify_batch(chunk, config.patch_size)
            plan = MaskBatch.full(patches.shape[0], config.n_patches)
            tokens = self.model.context_encode(patches, plan).tokens
            rows.append(self._pool(tokens).double().cpu().numpy())
        return np.concatenate(rows, axis=0)

    @property
    def embedding_dim(self) -> int:
        """Get the embedding dimension"""
        return self.model.config.enc_dim


class ClsTokenClient(EmbeddingClient):
    """[CLS] token of the last encoder layer"""

    def _pool(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens[:, 0]


class MeanPoolClient(EmbeddingClient):
    """Average of the last layer's patch tokens"""

    def _pool(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens[:, 1:].mean(dim=1)


def get_embedding_client(feature_kind: str, model: PiLaMIM, batch_size: int = 256) -> EmbeddingClient:
    """
    Factory function to get the appropriate embedding client

    Args:
        feature_kind: 'cls' or 'mean_pool'
        model: Trained model whose context encoder is used
        batch_size: Images per forward pass

    Returns:
        An embedding client instance
    """
    if feature_kind == "cls":
        return ClsTokenClient(model, batch_size)
    elif feature_kind == "mean_pool":
        return MeanPoolClient(model, batch_size)
    else:
        raise ValueError(f"Unknown feature kind: {feature_kind}")
