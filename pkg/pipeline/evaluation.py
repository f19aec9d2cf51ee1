"""
Frozen-encoder evaluation: feature extraction, linear probing, RankMe,
embedding export and the ablation report.
"""
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.model_selection import train_test_split

from components.lars import LARS
from components.vit import PiLaMIM
from models.data_models import EmbeddingMatrix, ImageSample, ProbeResult
from pipeline.trainer import load_model, lr_schedule
from utils.config import ProbeConfig
from utils.embedding_client import get_embedding_client
from utils.errors import DegenerateEmbeddingError, ShapeMismatchError, SingleClassError
from utils.logging_utils import logger

RANKME_EPSILON = 1e-7
TASK_LEVELS = {"class": "high", "coarse": "high", "count": "low", "dist": "low"}
REPORT_COLUMNS = ["checkpoint", "mode", "task", "metric", "value"]
CLS_ABLATION_LABELS = {"pilamim": "w [CLS]", "pilamim_no_cls": "w/o [CLS]"}


# --------------------------------------------------------------------------- #
# Features
# --------------------------------------------------------------------------- #
def extract_features(
    checkpoint: Union[str, Path, PiLaMIM],
    samples: Sequence[ImageSample],
    feature_kind: str = "cls",
    batch_size: int = 256,
) -> EmbeddingMatrix:
    """
    Encode every sample with all patches visible.

    Args:
        checkpoint: Checkpoint path or an in-memory model
        samples: Images whose size matches the checkpoint config
        feature_kind: ``cls`` (token 0) or ``mean_pool`` (mean of patch tokens)
        batch_size: Images per forward pass

    Returns:
        EmbeddingMatrix with one row and one label per task for each sample
    """
    if isinstance(checkpoint, PiLaMIM):
        model, source = checkpoint, "<memory>"
    else:
        model, source = load_model(checkpoint), str(checkpoint)
    client = get_embedding_client(feature_kind, model, batch_size)
    rows = client.encode(samples) if len(samples) else np.zeros((0, client.embedding_dim))
    tasks = sorted({task for s in samples for task in s.labels})
    labels = {task: np.array([s.labels.get(task, -1) for s in samples]) for task in tasks}
    logger.info(f"Extracted {rows.shape[0]}x{rows.shape[1]} {feature_kind} features from {source}")
    return EmbeddingMatrix(rows=rows, feature_kind=feature_kind, source=source, labels=labels)


# --------------------------------------------------------------------------- #
# Linear probe
# --------------------------------------------------------------------------- #
def _accuracy(head: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    head.eval()
    with torch.no_grad():
        return float((head(x).argmax(dim=1) == y).double().mean())


def linear_probe(
    features: Union[EmbeddingMatrix, np.ndarray],
    labels: np.ndarray,
    config: Optional[ProbeConfig] = None,
    task: str = "class",
) -> ProbeResult:
    """
    Train batch-norm + linear head on frozen features.

    The samples are split into a stratified training part and a held-out
    part; the reported accuracy is the best held-out accuracy over epochs.

    Args:
        features: (n, d) features
        labels: (n,) integer labels
        config: Probe recipe (optimizer, lr, epochs, warmup, split)
        task: Task name recorded in the result

    Returns:
        ProbeResult
    """
    config = config or ProbeConfig()
    x = features.rows if isinstance(features, EmbeddingMatrix) else np.asarray(features)
    y = np.asarray(labels)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ShapeMismatchError(f"features {x.shape} and labels {y.shape} do not line up")

    classes, y_idx = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise SingleClassError(f"task {task!r} has a single class")
    _, counts = np.unique(y_idx, return_counts=True)
    n_test = math.ceil(config.test_fraction * len(y_idx))
    can_stratify = counts.min() >= 2 and len(classes) <= min(n_test, len(y_idx) - n_test)
    stratify = y_idx if can_stratify else None
    x_train, x_test, y_train, y_test = train_test_split(
        x, y_idx, test_size=config.test_fraction, random_state=config.seed, stratify=stratify
    )
    if len(np.unique(y_train)) < 2:
        raise SingleClassError(f"task {task!r} training split has a single class")

    x_train_t = torch.as_tensor(x_train, dtype=torch.float32)
    x_test_t = torch.as_tensor(x_test, dtype=torch.float32)
    y_train_t = torch.as_tensor(y_train, dtype=torch.long)
    y_test_t = torch.as_tensor(y_test, dtype=torch.long)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        head = nn.Sequential(nn.BatchNorm1d(x.shape[1], affine=True), nn.Linear(x.shape[1], len(classes)))
        nn.init.trunc_normal_(head[1].weight, std=0.01)
        nn.init.zeros_(head[1].bias)

        if config.optimizer == "lars":
            optimizer = LARS(head.parameters(), weight_decay=config.weight_decay, momentum=config.momentum)
        else:
            optimizer = torch.optim.SGD(head.parameters(), lr=0.0, momentum=config.momentum,
                                        weight_decay=config.weight_decay)

        batch_size = min(config.batch_size, len(x_train_t))
        steps_per_epoch = math.ceil(len(x_train_t) / batch_size)
        total_steps = steps_per_epoch * config.epochs
        warmup_steps = config.warmup_epochs * steps_per_epoch
        generator = torch.Generator().manual_seed(config.seed)

        history: List[float] = []
        best, best_epoch, step = -1.0, 0, 0
        for epoch in range(config.epochs):
            head.train()
            order = torch.randperm(len(x_train_t), generator=generator)
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                if len(idx) < 2:
                    # batch norm cannot normalize a single row
                    continue
                lr = lr_schedule(step, total_steps, warmup_steps, config.base_lr, config.batch_size)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                loss = F.cross_entropy(head(x_train_t[idx]), y_train_t[idx])
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                step += 1
            accuracy = _accuracy(head, x_test_t, y_test_t)
            history.append(accuracy)
            if accuracy > best:
                best, best_epoch = accuracy, epoch
        train_accuracy = _accuracy(head, x_train_t, y_train_t)

    logger.info(f"Probe {task}: best held-out accuracy {best:.4f} at epoch {best_epoch + 1}")
    return ProbeResult(task=task, accuracy=best, epochs=config.epochs, best_epoch=best_epoch,
                       train_accuracy=train_accuracy, history=history)


# --------------------------------------------------------------------------- #
# RankMe
# --------------------------------------------------------------------------- #
def rankme(
    embeddings: Union[EmbeddingMatrix, np.ndarray, torch.Tensor],
    epsilon: float = RANKME_EPSILON,
    center: bool = True,
) -> float:
    """
    Effective rank: exp of the entropy of the normalized singular values.

    ``p_k = sigma_k / sum_j sigma_j + epsilon`` and the score is
    ``exp(-sum_k p_k log p_k)``, computed in float64.

    Args:
        embeddings: (n, d) matrix, n >= 2
        epsilon: Smoothing added to every p_k
        center: Subtract the column means first

    Returns:
        Score in roughly [1, min(n, d)]
    """
    rows = embeddings.rows if isinstance(embeddings, EmbeddingMatrix) else embeddings
    z = torch.as_tensor(np.asarray(rows) if not isinstance(rows, torch.Tensor) else rows).double()
    if z.ndim != 2 or z.shape[0] < 2:
        raise DegenerateEmbeddingError(f"RankMe needs an (n >= 2, d) matrix, got {tuple(z.shape)}")
    if center:
        z = z - z.mean(dim=0, keepdim=True)
    s = torch.linalg.svdvals(z)
    total = s.sum()
    if not total > 0:
        raise DegenerateEmbeddingError("embedding matrix is identically zero")
    p = s / total + epsilon
    return float(torch.exp(-(p * torch.log(p)).sum()))


# --------------------------------------------------------------------------- #
# Export
# --------------------------------------------------------------------------- #
def export_embeddings(matrix: EmbeddingMatrix, path) -> Path:
    """
    Write ``id,label_<task>...,f0..f{d-1}`` CSV with shortest round-trip floats.

    Returns:
        Path of the written file
    """
    if matrix.rows.ndim != 2 or matrix.n == 0:
        raise DegenerateEmbeddingError("cannot export an empty embedding matrix")
    columns: Dict[str, np.ndarray] = {"id": np.arange(matrix.n)}
    for task in sorted(matrix.labels):
        columns[f"label_{task}"] = np.asarray(matrix.labels[task])
    rows = np.asarray(matrix.rows, dtype=np.float64)
    for j in range(matrix.dim):
        columns[f"f{j}"] = rows[:, j]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(columns).to_csv(path, index=False)
    logger.info(f"Exported {matrix.n} embeddings to {path}")
    return path


def load_embeddings(path, feature_kind: str = "cls") -> EmbeddingMatrix:
    """Read a CSV written by ``export_embeddings``"""
    frame = pd.read_csv(path, float_precision="round_trip")
    feature_cols = [c for c in frame.columns if c.startswith("f") and c[1:].isdigit()]
    feature_cols.sort(key=lambda c: int(c[1:]))
    labels = {c[len("label_"):]: frame[c].to_numpy() for c in frame.columns if c.startswith("label_")}
    return EmbeddingMatrix(rows=frame[feature_cols].to_numpy(dtype=np.float64),
                           feature_kind=feature_kind, source=str(path), labels=labels)


# --------------------------------------------------------------------------- #
# Ablation report
# --------------------------------------------------------------------------- #
def _checkpoint_entry(item: Union[str, Path, Tuple[str, PiLaMIM]]) -> Tuple[str, PiLaMIM]:
    if isinstance(item, tuple):
        return item
    path = Path(item)
    # run directories name their final checkpoint identically
    name = path.parent.name if path.stem == "checkpoint_final" and path.parent.name else path.stem
    return name, load_model(path)


def ablation_report(
    checkpoints: Sequence[Union[str, Path, Tuple[str, PiLaMIM]]],
    samples: Sequence[ImageSample],
    tasks: Sequence[str],
    config: Optional[ProbeConfig] = None,
    out_dir=None,
) -> pd.DataFrame:
    """
    Probe every (checkpoint, task) pair and score every checkpoint with RankMe.

    Args:
        checkpoints: Paths or (name, model) pairs, at least two
        samples: Evaluation images carrying every task label
        tasks: Task names to probe
        config: Probe recipe
        out_dir: When given, ``report.csv`` and ``report.txt`` are written there

    Returns:
        Long-format frame with columns checkpoint, mode, task, metric, value
    """
    if len(checkpoints) < 2:
        raise ValueError("ablation_report needs at least two checkpoints")
    config = config or ProbeConfig()
    records = []
    seen: Dict[str, int] = {}
    for item in checkpoints:
        name, model = _checkpoint_entry(item)
        seen[name] = seen.get(name, 0) + 1
        if seen[name] > 1:
            name = f"{name}#{seen[name]}"
        mode = model.config.mode
        matrix = extract_features(model, samples, config.feature_kind)
        for task in tasks:
            if task not in matrix.labels:
                raise ValueError(f"samples carry no labels for task {task!r}")
            result = linear_probe(matrix, matrix.labels[task], config, task=task)
            records.append({"checkpoint": name, "mode": mode, "task": task,
                            "metric": "accuracy", "value": result.accuracy})
        records.append({"checkpoint": name, "mode": mode, "task": "",
                        "metric": "rankme", "value": rankme(matrix, config.rankme_epsilon)})
        logger.info(f"Report row finished for {name} ({mode})")

    report = pd.DataFrame.from_records(records, columns=REPORT_COLUMNS)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.to_csv(out_dir / "report.csv", index=False)
        (out_dir / "report.txt").write_text(format_report(report, tasks) + "\n")
        logger.info(f"Report written to {out_dir}")
    return report


def format_report(report: pd.DataFrame, tasks: Sequence[str]) -> str:
    """
    Aligned text table grouped into high-level and low-level tasks.

    Checkpoints trained with and without the [CLS] loss are labelled so the
    two-row [CLS] ablation can be read off directly.
    """
    high = [t for t in tasks if TASK_LEVELS.get(t, "high") == "high"]
    low = [t for t in tasks if TASK_LEVELS.get(t) == "low"]
    accuracy = report[report["metric"] == "accuracy"].pivot(index="checkpoint", columns="task", values="value")
    scores = report[report["metric"] == "rankme"].set_index("checkpoint")["value"]
    modes = report.drop_duplicates("checkpoint").set_index("checkpoint")["mode"]

    header = ["checkpoint", "mode", "variant"] + [f"high:{t}" for t in high] + [f"low:{t}" for t in low] + ["rankme"]
    lines = []
    for name in modes.index:
        mode = modes[name]
        cells = [name, mode, CLS_ABLATION_LABELS.get(mode, "")]
        cells += [f"{accuracy.loc[name, t]:.4f}" for t in high + low]
        cells.append(f"{scores[name]:.2f}")
        lines.append(cells)
    widths = [max(len(row[i]) for row in [header] + lines) for i in range(len(header))]
    render = lambda row: "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
    rule = "  ".join("-" * w for w in widths)
    return "\n".join([render(header), rule] + [render(row) for row in lines])
