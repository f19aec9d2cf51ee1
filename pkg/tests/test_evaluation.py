import numpy as np
import pandas as pd
import pytest
import torch

from components.datasets import generate_synthetic_shapes
from components.lars import LARS
from components.vit import build_model
from conftest import MODES
from models.data_models import EmbeddingMatrix
from pipeline.evaluation import (
    ablation_report,
    export_embeddings,
    extract_features,
    format_report,
    linear_probe,
    load_embeddings,
    rankme,
)
from pipeline.trainer import create_state, save_checkpoint
from utils.config import ModelConfig, ProbeConfig, TrainConfig
from utils.errors import (
    ConfigMismatchError,
    DegenerateEmbeddingError,
    ShapeMismatchError,
    SingleClassError,
)


def _small_model(mode="pilamim", seed=0):
    config = ModelConfig(image_size=16, patch_size=4, enc_depth=1, enc_dim=32, enc_heads=2,
                         dec_depth=1, dec_dim=16, dec_heads=2, mode=mode)
    return build_model(config, seed=seed)


# --------------------------------------------------------------------------- #
# RankMe
# --------------------------------------------------------------------------- #
def test_rankme_rank_one():
    rng = np.random.default_rng(0)
    rows = np.outer(rng.normal(size=500), rng.normal(size=32))
    assert rankme(rows) <= 1.001


def test_rankme_identity_without_centering():
    d = 16
    score = rankme(np.eye(d), center=False)
    assert score == pytest.approx(d, rel=1e-4)


def test_rankme_gaussian():
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(10_000, 64))
    assert rankme(rows) >= 0.9 * 64


def test_rankme_invariances():
    rng = np.random.default_rng(2)
    rows = rng.normal(size=(300, 24)) * np.linspace(0.1, 3.0, 24)
    q, _ = np.linalg.qr(rng.normal(size=(24, 24)))
    base = rankme(rows)
    assert abs(rankme(rows @ q) - base) < 1e-6
    assert abs(rankme(rows[rng.permutation(300)]) - base) < 1e-6
    assert 1.0 <= base <= 24 + 1e-3


def test_rankme_degenerate():
    with pytest.raises(DegenerateEmbeddingError):
        rankme(np.zeros((10, 4)))
    with pytest.raises(DegenerateEmbeddingError):
        rankme(np.ones((1, 4)))
    # constant rows are zero after centering
    with pytest.raises(DegenerateEmbeddingError):
        rankme(np.ones((10, 4)))


# --------------------------------------------------------------------------- #
# Linear probe
# --------------------------------------------------------------------------- #
def test_probe_separable_classes():
    rng = np.random.default_rng(3)
    labels = np.repeat([0, 1], 200)
    features = rng.normal(size=(400, 8))
    features[:, 0] += np.where(labels == 1, 6.0, -6.0)
    result = linear_probe(features, labels, ProbeConfig(epochs=20, warmup_epochs=2, batch_size=64), task="class")
    assert result.train_accuracy == 1.0
    assert result.accuracy == 1.0
    assert len(result.history) == 20
    assert result.task == "class"


def test_lars_scales_matrix_steps_by_trust_ratio():
    weight = torch.nn.Parameter(torch.ones(2, 2, dtype=torch.float64))
    bias = torch.nn.Parameter(torch.ones(2, dtype=torch.float64))
    optimizer = LARS([weight, bias], lr=1.0, momentum=0.0)
    weight.grad = torch.ones(2, 2, dtype=torch.float64)
    bias.grad = torch.ones(2, dtype=torch.float64)
    optimizer.step()
    # ||w|| = ||g|| = 2, so the matrix step is 0.001 * g
    assert torch.allclose(weight, torch.full((2, 2), 0.999, dtype=torch.float64), atol=1e-15)
    assert torch.allclose(bias, torch.zeros(2, dtype=torch.float64))


def test_probe_with_lars():
    rng = np.random.default_rng(4)
    labels = np.repeat([0, 1, 2], 100)
    features = rng.normal(size=(300, 6)) + np.eye(3, 6)[labels] * 5.0
    config = ProbeConfig(optimizer="lars", base_lr=3.0, epochs=5, warmup_epochs=1, batch_size=64)
    result = linear_probe(features, labels, config)
    assert 0.0 <= result.accuracy <= 1.0
    assert len(result.history) == 5
    assert result.accuracy == max(result.history)


def test_probe_shuffled_labels_is_chance():
    rng = np.random.default_rng(5)
    features = rng.normal(size=(5000, 16))
    labels = rng.integers(0, 4, size=5000)
    config = ProbeConfig(epochs=3, warmup_epochs=1, batch_size=256, test_fraction=0.5)
    result = linear_probe(features, labels, config)
    # best-over-epochs on a large held-out half stays near 1/k
    assert abs(result.accuracy - 0.25) <= 0.05


def test_probe_errors():
    with pytest.raises(SingleClassError):
        linear_probe(np.zeros((20, 3)), np.zeros(20, dtype=int))
    with pytest.raises(ShapeMismatchError):
        linear_probe(np.zeros((20, 3)), np.zeros(19, dtype=int))


def test_probe_leaves_encoder_untouched():
    model = _small_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    samples = generate_synthetic_shapes(1, 60, 16)
    matrix = extract_features(model, samples)
    linear_probe(matrix, matrix.labels["class"], ProbeConfig(epochs=2, warmup_epochs=1, batch_size=16))
    for name, value in model.state_dict().items():
        assert torch.equal(before[name], value), name


# --------------------------------------------------------------------------- #
# Features and export
# --------------------------------------------------------------------------- #
def test_extract_features_shapes_and_labels():
    model = _small_model()
    samples = generate_synthetic_shapes(2, 10, 16)
    matrix = extract_features(model, samples, "cls")
    assert (matrix.n, matrix.dim) == (10, 32)
    assert set(matrix.labels) == {"class", "count", "dist"}
    assert matrix.labels["count"].tolist() == [s.labels["count"] for s in samples]


def test_identical_images_give_identical_rows():
    model = _small_model()
    sample = generate_synthetic_shapes(2, 1, 16)[0]
    matrix = extract_features(model, [sample, sample], "mean_pool")
    assert np.array_equal(matrix.rows[0], matrix.rows[1])


def test_feature_kinds_differ():
    model = _small_model()
    samples = generate_synthetic_shapes(2, 5, 16)
    cls = extract_features(model, samples, "cls").rows
    mean = extract_features(model, samples, "mean_pool").rows
    assert not np.array_equal(cls, mean)


def test_extract_features_from_checkpoint(tmp_path):
    config = ModelConfig(image_size=16, patch_size=4, enc_depth=1, enc_dim=16, enc_heads=2,
                         dec_depth=1, dec_dim=16, dec_heads=2, mode="latent_only")
    state = create_state(config, TrainConfig(epochs=2, warmup_epochs=1), 8)
    path = save_checkpoint(state, tmp_path / "c.bin")
    samples = generate_synthetic_shapes(2, 4, 16)
    from_path = extract_features(path, samples)
    in_memory = extract_features(state.model, samples)
    assert np.array_equal(from_path.rows, in_memory.rows)
    assert from_path.source == str(path)


def test_extract_features_of_no_samples():
    matrix = extract_features(_small_model(), [], "mean_pool")
    assert matrix.rows.shape == (0, 32)
    assert matrix.labels == {}


def test_extract_features_size_mismatch():
    with pytest.raises(ConfigMismatchError):
        extract_features(_small_model(), generate_synthetic_shapes(2, 2, 32))


def test_export_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    matrix = EmbeddingMatrix(
        rows=rng.normal(size=(7, 5)) * 1e3,
        feature_kind="cls",
        labels={"class": np.arange(7) % 3, "count": np.arange(7) % 6 + 1},
    )
    path = export_embeddings(matrix, tmp_path / "emb.csv")
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 8
    assert lines[0] == "id,label_class,label_count,f0,f1,f2,f3,f4"
    loaded = load_embeddings(path)
    assert np.array_equal(loaded.rows, matrix.rows)
    assert np.array_equal(loaded.labels["count"], matrix.labels["count"])


def test_export_empty_matrix(tmp_path):
    with pytest.raises(DegenerateEmbeddingError):
        export_embeddings(EmbeddingMatrix(rows=np.zeros((0, 4)), feature_kind="cls"), tmp_path / "e.csv")


# --------------------------------------------------------------------------- #
# Report
# --------------------------------------------------------------------------- #
def test_ablation_report_arity(tmp_path):
    samples = generate_synthetic_shapes(9, 80, 16)
    checkpoints = [(mode, _small_model(mode, seed=i)) for i, mode in enumerate(MODES)]
    config = ProbeConfig(epochs=2, warmup_epochs=1, batch_size=32)
    report = ablation_report(checkpoints, samples, ["class", "count", "dist"], config, out_dir=tmp_path)
    assert list(report.columns) == ["checkpoint", "mode", "task", "metric", "value"]
    assert (report["metric"] == "accuracy").sum() == 12
    assert (report["metric"] == "rankme").sum() == 4
    assert (tmp_path / "report.csv").exists()
    text = (tmp_path / "report.txt").read_text()
    assert "w [CLS]" in text and "w/o [CLS]" in text
    assert "high:class" in text and "low:count" in text and "low:dist" in text
    assert pd.read_csv(tmp_path / "report.csv").shape == report.shape


def test_ablation_report_identical_checkpoints():
    samples = generate_synthetic_shapes(9, 60, 16)
    model = _small_model("pilamim", seed=1)
    config = ProbeConfig(epochs=2, warmup_epochs=1, batch_size=32)
    report = ablation_report([("a", model), ("b", model)], samples, ["class"], config)
    values_a = report[report["checkpoint"] == "a"]["value"].tolist()
    values_b = report[report["checkpoint"] == "b"]["value"].tolist()
    assert values_a == values_b
    assert len(format_report(report, ["class"]).splitlines()) == 4


def test_ablation_report_needs_two_checkpoints():
    with pytest.raises(ValueError):
        ablation_report([("a", _small_model())], generate_synthetic_shapes(9, 10, 16), ["class"])
