#!/usr/bin/env python3
"""
Tests for ingestion, LR synthesis, the synthetic generator and splits
"""

import json
from pathlib import Path

import numpy as np
import pytest
import torch

from src.config import SplitSpec
from src.data import (
    CLASS_NAMES, GENERATOR_VERSION, LabeledSample, apply_speckle, downsample, export_dataset,
    generate_synthetic, label_histogram, load_dataset, make_pairs, relabel_images, render_template,
    split, stack_images, stack_labels, upsample_bicubic, validation_split,
)
from src.exceptions import ConfigurationError, DomainError, IngestionError, ShapeError, SplitError


FIXTURE_ROOT = Path(__file__).parent / "fixtures" / "ships"


def cubic(x: float, a: float = -0.5) -> float:
    x = abs(x)
    if x < 1.0:
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    if x < 2.0:
        return (((x - 5.0) * x + 8.0) * x - 4.0) * a
    return 0.0


def reduction_matrix(size: int, factor: int = 2) -> np.ndarray:
    """Antialiased bicubic weights: the kernel is stretched by the reduction factor"""
    out_size = size // factor
    support = 2.0 * factor
    weights = np.zeros((out_size, size))
    for i in range(out_size):
        center = factor * (i + 0.5)
        lo = max(int(center - support + 0.5), 0)
        hi = min(int(center + support + 0.5), size)
        row = np.array([cubic((j + lo - center + 0.5) / factor) for j in range(hi - lo)])
        weights[i, lo:hi] = row / row.sum()
    return weights


def labeled(labels, size=2):
    return [LabeledSample(image=torch.zeros(size, size), label=int(l), source=f"s{i:04d}") for i, l in enumerate(labels)]


def test_downsample_shapes():
    """Test 64x64 to 32x32 on single images and batches"""
    assert downsample(torch.rand(64, 64)).shape == (32, 32)
    assert downsample(torch.rand(3, 1, 64, 64)).shape == (3, 1, 32, 32)


def test_downsample_preserves_constants():
    """Test a flat image keeps its value"""
    out = downsample(torch.full((64, 64), 0.37, dtype=torch.float64))
    assert torch.allclose(out, torch.full((32, 32), 0.37, dtype=torch.float64), atol=1e-6)


def test_downsample_matches_reference_resampler():
    """Test a Nyquist checkerboard against a separable bicubic oracle"""
    size = 16
    board = np.indices((size, size)).sum(axis=0) % 2
    board = board.astype(np.float64)
    weights = reduction_matrix(size)
    expected = np.clip(weights @ board @ weights.T, 0.0, 1.0)

    out = downsample(torch.from_numpy(board)).numpy()
    assert np.allclose(out, expected, rtol=0, atol=1e-6)
    assert np.allclose(out[2:-2, 2:-2], 0.5, atol=1e-6)


def test_downsample_errors():
    """Test factor and divisibility checks"""
    with pytest.raises(ShapeError):
        downsample(torch.rand(63, 64))
    with pytest.raises(ConfigurationError):
        downsample(torch.rand(64, 64), factor=4)
    with pytest.raises(ShapeError):
        downsample(torch.rand(1, 64, 64))


def test_upsample_bicubic_shape():
    """Test the LR baseline doubles the size"""
    assert upsample_bicubic(torch.rand(32, 32)).shape == (64, 64)
    assert upsample_bicubic(torch.rand(2, 1, 32, 32)).shape == (2, 1, 64, 64)


def test_generate_synthetic_counts():
    """Test per-label counts and value range"""
    samples = generate_synthetic(n_per_class=10, seed=0)
    assert len(samples) == 60
    assert label_histogram(samples) == {label: 10 for label in range(6)}
    for sample in samples:
        assert sample.image.shape == (64, 64)
        assert float(sample.image.min()) >= 0.0 and float(sample.image.max()) <= 1.0


def test_generate_synthetic_is_deterministic():
    """Test same seed gives bit-identical images"""
    first = generate_synthetic(n_per_class=3, seed=42)
    second = generate_synthetic(n_per_class=3, seed=42)
    other = generate_synthetic(n_per_class=3, seed=43)
    assert all(torch.equal(a.image, b.image) for a, b in zip(first, second))
    assert [s.source for s in first] == [s.source for s in second]
    assert not all(torch.equal(a.image, b.image) for a, b in zip(first, other))


def test_generate_synthetic_errors():
    """Test invalid generator parameters"""
    with pytest.raises(DomainError):
        generate_synthetic(n_per_class=0, seed=0)
    with pytest.raises(DomainError):
        generate_synthetic(n_per_class=2, seed=0, speckle_looks=0)


def test_templates_are_separable_by_nearest_centroid():
    """Test noise-free class templates are told apart by their centroids"""
    scales = (0.95, 1.0, 1.05)
    templates = {label: [render_template(label, scale=s) for s in scales] for label in range(6)}
    centroids = {label: np.mean(t, axis=0) for label, t in templates.items()}

    for label, group in templates.items():
        for template in group:
            distances = {c: float(np.sum((template - centroid) ** 2)) for c, centroid in centroids.items()}
            assert min(distances, key=distances.get) == label


def test_template_has_a_ship():
    """Test every class template contains bright ship pixels"""
    for label in range(6):
        template = render_template(label)
        assert template.max() > 0.3
        assert np.median(template) == pytest.approx(0.06)


def test_speckle_mean_recovers_template():
    """Test the average of 500 speckled draws approaches the clean scene"""
    template = render_template(1, angle=0.3)
    rng = np.random.default_rng(0)
    mean = np.mean([apply_speckle(template, 4, rng) for _ in range(500)], axis=0)
    assert np.abs(mean - template).sum() / template.sum() < 0.05


def test_export_and_load_round_trip(tmp_path):
    """Test exported PNGs load back with folder labels"""
    samples = generate_synthetic(n_per_class=2, seed=1)
    manifest_path = export_dataset(samples, tmp_path / "ships", manifest={"seed": 1})

    manifest = json.loads(manifest_path.read_text())
    assert manifest["generator_version"] == GENERATOR_VERSION
    assert manifest["seed"] == 1
    assert manifest["total"] == 12
    assert manifest["counts"] == {name: 2 for name in CLASS_NAMES}
    assert sorted(p.name for p in (tmp_path / "ships" / "Tug").iterdir()) == ["Tug_0000.png", "Tug_0001.png"]

    loaded = load_dataset(tmp_path / "ships")
    assert len(loaded) == 12
    assert label_histogram(loaded) == {label: 2 for label in range(6)}
    assert [s.source for s in loaded] == sorted(s.source for s in loaded)
    for sample in loaded:
        assert sample.class_name in sample.source

    by_name = {s.source.split("/")[-1]: s for s in loaded}
    original = samples[0].image
    assert torch.allclose(by_name["Cargo_0000.png"].image, original, atol=0.5 / 255 + 1e-6)


def test_load_checked_in_fixture_tree():
    """Test the fixture tree loads with a pinned count, histogram and order"""
    loaded = load_dataset(FIXTURE_ROOT)
    assert len(loaded) == 11
    assert label_histogram(loaded) == {0: 3, 1: 2, 2: 2, 3: 1, 4: 2, 5: 1}
    assert [s.class_name for s in loaded] == [
        "Cargo", "Cargo", "Cargo", "Dredging", "Dredging", "Fishing", "Fishing",
        "Passenger", "Tanker", "Tanker", "Tug",
    ]
    assert all(not s.source.endswith(".txt") for s in loaded)
    for sample, gray in zip(loaded, range(20, 240, 20)):
        assert sample.image.shape == (64, 64)
        assert float(sample.image.mean()) * 255 == pytest.approx(gray, abs=1.0)


def test_load_dataset_resizes(tmp_path):
    """Test images of another size are fitted to 64x64"""
    from PIL import Image

    for name in CLASS_NAMES:
        (tmp_path / name).mkdir()
        Image.fromarray(np.full((80, 100), 128, dtype=np.uint8), mode="L").save(tmp_path / name / "a.png")

    loaded = load_dataset(tmp_path)
    assert all(s.image.shape == (64, 64) for s in loaded)
    assert torch.allclose(loaded[0].image, torch.full((64, 64), 128 / 255), atol=1.5 / 255)


def test_load_dataset_missing_classes(tmp_path):
    """Test missing class folders are listed"""
    (tmp_path / "Cargo").mkdir()
    with pytest.raises(IngestionError) as excinfo:
        load_dataset(tmp_path)
    assert "Tanker" in str(excinfo.value) and "Tug" in str(excinfo.value)


def test_load_dataset_unreadable_file(tmp_path):
    """Test a corrupt image names its path"""
    export_dataset(generate_synthetic(n_per_class=1, seed=0), tmp_path)
    (tmp_path / "Fishing" / "broken.png").write_bytes(b"not an image")
    with pytest.raises(IngestionError) as excinfo:
        load_dataset(tmp_path)
    assert "broken.png" in str(excinfo.value)


def test_empty_class_warns_then_split_fails(tmp_path):
    """Test an empty class folder loads with a warning and cannot be stratified"""
    samples = [s for s in generate_synthetic(n_per_class=2, seed=0) if s.class_name != "Tug"]
    export_dataset(samples, tmp_path)

    warnings = []
    loaded = load_dataset(tmp_path, warnings=warnings)
    assert len(loaded) == 10
    assert len(warnings) == 1 and "Tug" in warnings[0]

    with pytest.raises(SplitError):
        split(loaded, SplitSpec())


def test_split_examples():
    """Test split sizes and per-class counts"""
    samples = labeled([label for label in range(6) for _ in range(10)])
    train, test = split(samples, SplitSpec(train_fraction=0.8, seed=0))
    assert len(train) == 48 and len(test) == 12
    assert label_histogram(train) == {label: 8 for label in range(6)}
    assert label_histogram(test) == {label: 2 for label in range(6)}

    pairs = labeled([label for label in range(6) for _ in range(2)])
    train, test = split(pairs, SplitSpec(train_fraction=0.5, seed=0))
    assert label_histogram(train) == label_histogram(test) == {label: 1 for label in range(6)}


def test_split_is_deterministic_and_disjoint():
    """Test same seed gives the same membership and splits partition the input"""
    samples = labeled([label for label in range(6) for _ in range(7)])
    first = split(samples, SplitSpec(seed=3))
    second = split(samples, SplitSpec(seed=3))
    assert [s.source for s in first[0]] == [s.source for s in second[0]]

    train_ids = {s.source for s in first[0]}
    test_ids = {s.source for s in first[1]}
    assert not train_ids & test_ids
    assert train_ids | test_ids == {s.source for s in samples}


def test_validation_split_partitions_train():
    """Test the selection slice is a stratified, seeded part of the train split only"""
    samples = labeled([label for label in range(6) for _ in range(10)])
    spec = SplitSpec(seed=0)
    train, test = split(samples, spec)
    fit, val = validation_split(train, spec)
    assert len(fit) == 42 and len(val) == 6
    assert label_histogram(val) == {label: 1 for label in range(6)}

    fit_ids, val_ids = {s.source for s in fit}, {s.source for s in val}
    assert not fit_ids & val_ids
    assert fit_ids | val_ids == {s.source for s in train}
    assert not val_ids & {s.source for s in test}
    assert [s.source for s in validation_split(train, spec)[1]] == [s.source for s in val]


def test_split_stratification_bounds():
    """Test per-class train counts stay within one sample of the fraction"""
    rng = np.random.default_rng(5)
    for fraction in (0.5, 0.7, 0.8):
        for trial in range(20):
            counts = rng.integers(2, 20, size=6)
            labels = [label for label in range(6) for _ in range(int(counts[label]))]
            rng.shuffle(labels)
            train, test = split(labeled(labels), SplitSpec(train_fraction=fraction, seed=trial))
            histogram = label_histogram(train)
            for label in range(6):
                assert abs(histogram[label] - fraction * counts[label]) <= 1.0
                assert 1 <= histogram[label] < counts[label]


def test_unstratified_split():
    """Test plain random split sizes"""
    samples = labeled([0] * 9 + [1])
    train, test = split(samples, SplitSpec(train_fraction=0.7, stratified=False))
    assert len(train) == 7 and len(test) == 3


def test_make_pairs():
    """Test pairs carry the exact downsampled LR"""
    samples = generate_synthetic(n_per_class=2, seed=0)
    pairs = make_pairs(samples)
    assert len(pairs) == 12
    for sample, pair in zip(samples, pairs):
        assert pair.label == sample.label
        assert pair.hr.shape == (64, 64) and pair.lr.shape == (32, 32)
        assert torch.equal(pair.lr, downsample(pair.hr, 2))


def test_stacking_and_relabeling():
    """Test batch helpers and lineage tags"""
    pairs = make_pairs(generate_synthetic(n_per_class=1, seed=0))
    lr = stack_images(pairs, "lr")
    assert lr.shape == (6, 1, 32, 32)
    assert stack_labels(pairs).tolist() == list(range(6))

    relabeled = relabel_images(upsample_bicubic(lr), stack_labels(pairs).tolist(), lineage="LR")
    assert all(s.lineage == "LR" and s.image.shape == (64, 64) for s in relabeled)
    with pytest.raises(DomainError):
        stack_images([], "lr")


def test_labeled_sample_validation():
    """Test label range and rank checks"""
    with pytest.raises(DomainError):
        LabeledSample(image=torch.zeros(4, 4), label=6)
    with pytest.raises(ShapeError):
        LabeledSample(image=torch.zeros(1, 4, 4), label=0)
    assert LabeledSample(image=torch.zeros(4, 4), label=5).class_name == "Tug"
    assert len(CLASS_NAMES) == 6


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
