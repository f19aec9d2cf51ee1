"""
Dataset ingestion: synthetic shapes, CIFAR binary batches and augmentation.
"""
import queue
import threading
import traceback
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from models.data_models import ImageSample
from utils.config import DataConfig
from utils.errors import MalformedRecordError
from utils.logging_utils import logger

SHAPE_TYPES = ("circle", "square", "triangle", "cross")
MAX_SHAPES = 6
DIST_BINS = 4
CIFAR_PIXELS = 3 * 32 * 32
ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
_PUT_TIMEOUT_S = 0.1


# --------------------------------------------------------------------------- #
# Synthetic shapes
# --------------------------------------------------------------------------- #
def _shape_mask(kind: int, xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = np.abs(xx - cx), np.abs(yy - cy)
    if kind == 0:
        return dx ** 2 + dy ** 2 <= r ** 2
    if kind == 1:
        return (dx <= 0.85 * r) & (dy <= 0.85 * r)
    if kind == 2:
        # apex on top, base width 2r at the bottom
        return (yy >= cy - r) & (yy <= cy + r) & (dx <= 0.5 * (yy - (cy - r)))
    arm = 0.3 * r
    return ((dx <= arm) & (dy <= r)) | ((dy <= arm) & (dx <= r))


def _background(rng: np.random.Generator, size: int, xx: np.ndarray, yy: np.ndarray) -> np.ndarray:
    base = rng.uniform(0.15, 0.6, size=3)
    freq = rng.uniform(0.15, 0.6)
    angle = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    stripes = 0.08 * np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    noise = rng.normal(0.0, 0.03, size=(size, size, 3))
    return base[None, None, :] + stripes[..., None] + noise


def generate_synthetic_shapes(seed: int, count: int, image_size: int) -> List[ImageSample]:
    """
    Generate colored shapes on textured backgrounds.

    Each image holds 1-6 shapes. More than half of them share one type, which
    becomes the ``class`` label. ``count`` is the number of shapes and
    ``dist`` bins the size of the largest shape into four equal ranges.

    Args:
        seed: RNG seed; equal seeds give bit-identical samples
        count: Number of images (>= 1)
        image_size: Side length in pixels (>= 16)

    Returns:
        List of ImageSample with tasks ``class``, ``count`` and ``dist``
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if image_size < 16:
        raise ValueError(f"image_size must be >= 16, got {image_size}")

    rng = np.random.default_rng(seed)
    r_min, r_max = max(2.0, 0.08 * image_size), 0.22 * image_size
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64) + 0.5

    samples = []
    for _ in range(count):
        image = _background(rng, image_size, xx, yy)
        n_shapes = int(rng.integers(1, MAX_SHAPES + 1))
        dominant = int(rng.integers(len(SHAPE_TYPES)))
        n_dominant = n_shapes // 2 + 1
        others = [t for t in range(len(SHAPE_TYPES)) if t != dominant]
        kinds = [dominant] * n_dominant + [int(rng.choice(others)) for _ in range(n_shapes - n_dominant)]
        kinds = [kinds[i] for i in rng.permutation(n_shapes)]

        radii = rng.uniform(r_min, r_max, size=n_shapes)
        for kind, r in zip(kinds, radii):
            cx, cy = rng.uniform(r, image_size - r, size=2)
            color = rng.uniform(0.0, 1.0, size=3)
            color[rng.integers(3)] = rng.uniform(0.85, 1.0)
            image[_shape_mask(kind, xx, yy, cx, cy, r)] = color

        dist = int(min(DIST_BINS - 1, (radii.max() - r_min) / (r_max - r_min) * DIST_BINS))
        samples.append(
            ImageSample(
                pixels=np.clip(image, 0.0, 1.0).astype(np.float32),
                labels={"class": dominant, "count": n_shapes, "dist": dist},
            )
        )

    logger.info(f"Generated {count} synthetic images ({image_size}px, seed={seed})")
    return samples


def write_manifest(path, config: DataConfig) -> Path:
    """Write the plain-text header describing a synthetic dataset"""
    path = Path(path)
    lines = [
        f"seed={config.seed}",
        f"count={config.count}",
        f"size={config.image_size}",
        f"tasks={','.join(config.tasks)}",
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


# --------------------------------------------------------------------------- #
# CIFAR binary batches
# --------------------------------------------------------------------------- #
def load_cifar_binary(path, label_bytes: int = 1) -> List[ImageSample]:
    """
    Load a CIFAR-10/100 binary batch file.

    Records are ``label_bytes`` label bytes followed by 3072 channel-major
    pixel bytes (1024 red, 1024 green, 1024 blue). CIFAR-100 files carry a
    coarse then a fine label; they are exposed as tasks ``coarse`` and
    ``class``.

    Args:
        path: Path to a ``data_batch_*.bin`` / ``train.bin`` style file
        label_bytes: 1 for CIFAR-10, 2 for CIFAR-100

    Returns:
        List of 32x32x3 ImageSample scaled to [0, 1]
    """
    if label_bytes not in (1, 2):
        raise ValueError(f"label_bytes must be 1 or 2, got {label_bytes}")
    raw = np.fromfile(path, dtype=np.uint8)
    record = label_bytes + CIFAR_PIXELS
    if raw.size == 0 or raw.size % record:
        raise MalformedRecordError(
            f"{path}: length {raw.size} is not a positive multiple of the {record}-byte record"
        )

    records = raw.reshape(-1, record)
    pixels = records[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    pixels = pixels.astype(np.float32) / np.float32(255.0)

    if label_bytes == 1:
        label_columns = {"class": records[:, 0]}
    else:
        label_columns = {"coarse": records[:, 0], "class": records[:, 1]}

    samples = [
        ImageSample(pixels=pixels[i], labels={k: int(v[i]) for k, v in label_columns.items()})
        for i in range(len(records))
    ]
    logger.info(f"Loaded {len(samples)} CIFAR records from {path}")
    return samples


def build_dataset(config: DataConfig) -> List[ImageSample]:
    """Materialize the dataset described by a DataConfig"""
    if config.source == "synthetic":
        return generate_synthetic_shapes(config.seed, config.count, config.image_size)
    if config.source == "cifar-binary":
        return load_cifar_binary(config.path, config.label_bytes)
    raise ValueError(f"Unknown dataset source: {config.source}")


# --------------------------------------------------------------------------- #
# Augmentation
# --------------------------------------------------------------------------- #
def sample_crop_box(
    rng: np.random.Generator,
    height: int,
    width: int,
    scale_lo: float,
    scale_hi: float,
    aspect: Tuple[float, float] = ASPECT_RANGE,
    attempts: int = 10,
) -> Tuple[int, int, int, int]:
    """Draw (top, left, h, w) with area fraction in [scale_lo, scale_hi]"""
    if not 0.0 < scale_lo <= scale_hi <= 1.0:
        raise ValueError(f"need 0 < scale_lo <= scale_hi <= 1, got ({scale_lo}, {scale_hi})")
    area = height * width
    for _ in range(attempts):
        target_area = area * rng.uniform(scale_lo, scale_hi)
        ratio = rng.uniform(aspect[0], aspect[1])
        w = int(round(np.sqrt(target_area * ratio)))
        h = int(round(np.sqrt(target_area / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fall back to the whole image
    return 0, 0, height, width


def augment_random_resized_crop(
    sample: ImageSample,
    rng: np.random.Generator,
    scale_lo: float,
    scale_hi: float,
    out_size: int,
    hflip: bool = False,
    aspect: Tuple[float, float] = ASPECT_RANGE,
) -> ImageSample:
    """Random-resized crop with bilinear resize; labels pass through unchanged"""
    height, width = sample.pixels.shape[:2]
    top, left, h, w = sample_crop_box(rng, height, width, scale_lo, scale_hi, aspect)

    image = torch.from_numpy(np.ascontiguousarray(sample.pixels)).permute(2, 0, 1)
    if (h, w) == (out_size, out_size):
        image = image[:, top:top + h, left:left + w]
    else:
        image = TF.resized_crop(
            image, top, left, h, w, [out_size, out_size],
            interpolation=InterpolationMode.BILINEAR, antialias=False,
        )
    if hflip and rng.random() < 0.5:
        image = TF.hflip(image)

    pixels = image.permute(1, 2, 0).clamp(0.0, 1.0).numpy().astype(np.float32)
    return ImageSample(pixels=pixels, labels=dict(sample.labels))


# --------------------------------------------------------------------------- #
# Batching
# --------------------------------------------------------------------------- #
def stack_pixels(samples: Sequence[ImageSample]) -> torch.Tensor:
    """Stack samples into a (B, H, W, C) float tensor"""
    return torch.from_numpy(np.stack([s.pixels for s in samples]))


def iter_batches(
    samples: Sequence[ImageSample],
    batch_size: int,
    seed: int,
    epoch: int,
    config: Optional[DataConfig] = None,
    out_size: Optional[int] = None,
) -> Iterator[torch.Tensor]:
    """
    Yield shuffled, optionally augmented (B, H, W, C) batches for one epoch.

    The order depends only on (seed, epoch) and every batch draws its
    augmentation randomness from (seed, epoch, batch index), so batch
    contents do not depend on which thread produces them.
    """
    order = np.random.default_rng([seed, epoch]).permutation(len(samples))
    for b, start in enumerate(range(0, len(samples), batch_size)):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        if config is not None and config.augment:
            rng = np.random.default_rng([seed, epoch, b])
            size = out_size or config.image_size
            chunk = [
                augment_random_resized_crop(
                    s, rng, config.crop_scale_lo, config.crop_scale_hi, size, hflip=config.hflip
                )
                for s in chunk
            ]
        yield stack_pixels(chunk)


def prefetch(iterator: Iterable[torch.Tensor], depth: int) -> Iterator[torch.Tensor]:
    """
    Produce batches on a background thread through a bounded queue.

    Args:
        iterator: Batch iterator consumed by the producer thread
        depth: Maximum number of batches buffered ahead

    Returns:
        Iterator yielding the same batches in the same order
    """
    if depth <= 0:
        raise ValueError("prefetch depth must be > 0")

    work_queue: "queue.Queue[object]" = queue.Queue(maxsize=depth)
    stop = threading.Event()
    sentinel = object()

    def _put(item) -> bool:
        while not stop.is_set():
            try:
                work_queue.put(item, timeout=_PUT_TIMEOUT_S)
                return True
            except queue.Full:
                continue
        return False

    def _worker() -> None:
        try:
            for item in iterator:
                if not _put(item):
                    return
        except Exception as exc:
            stack = traceback.format_exc()
            _put(RuntimeError(f"batch producer failed: {exc}\n{stack}"))
        finally:
            _put(sentinel)

    thread = threading.Thread(target=_worker, daemon=True)
    thread.start()

    try:
        while True:
            payload = work_queue.get()
            if payload is sentinel:
                break
            if isinstance(payload, Exception):
                raise payload
            yield payload
    finally:
        # consumer may stop early (closed generator, failed step)
        stop.set()
        thread.join()
