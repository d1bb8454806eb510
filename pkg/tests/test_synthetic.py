import numpy as np
import pytest

from slidegraph.slides import blue_ratio, extract_patches, segment_tissue
from slidegraph.synthetic import (
    CorpusSpec,
    SyntheticSlideSpec,
    corpus_slide_specs,
    corpus_split,
    generate_synthetic_slide,
)
from slidegraph.validation import ContractError


def test_same_spec_same_seed_is_bitwise_identical():
    spec = SyntheticSlideSpec(class_id=1, seed=1234)
    a, la = generate_synthetic_slide(spec)
    b, lb = generate_synthetic_slide(spec)
    assert la == lb == 1
    np.testing.assert_array_equal(a, b)


def test_different_seeds_differ():
    a, _ = generate_synthetic_slide(SyntheticSlideSpec(class_id=1, seed=1))
    b, _ = generate_synthetic_slide(SyntheticSlideSpec(class_id=1, seed=2))
    assert not np.array_equal(a, b)


def test_zero_area_slide_rejected():
    with pytest.raises(ContractError):
        generate_synthetic_slide(SyntheticSlideSpec(class_id=0, width=0, height=10))


def test_higher_class_has_higher_blue_ratio_at_three_sigma():
    # Generate-and-measure check: 100 slides per class at defaults.
    n = 100
    means = {}
    for cls in (0, 2):
        values = []
        for i in range(n):
            img, _ = generate_synthetic_slide(
                SyntheticSlideSpec(class_id=cls, seed=10_000 * cls + i)
            )
            values.append(blue_ratio(img)[1])
        means[cls] = (np.mean(values), np.std(values, ddof=1))
    diff = means[2][0] - means[0][0]
    sigma = np.sqrt(means[0][1] ** 2 / n + means[2][1] ** 2 / n)
    assert diff > 3.0 * sigma


def test_stained_density_monotone_in_class():
    coverage = []
    for cls in (0, 1, 2):
        fractions = []
        for i in range(30):
            img, _ = generate_synthetic_slide(
                SyntheticSlideSpec(class_id=cls, seed=777 + i)
            )
            fractions.append(segment_tissue(img).mean())
        coverage.append(np.mean(fractions))
    assert coverage[0] < coverage[1] < coverage[2]


def test_every_corpus_slide_yields_patches():
    corpus = CorpusSpec(n_slides=30, seed=42)
    for spec in corpus_slide_specs(corpus):
        img, _ = generate_synthetic_slide(spec)
        mask = segment_tissue(img)
        patches = extract_patches(img, mask, patch_size=32, min_tissue_fraction=0.35)
        assert len(patches) >= 1


def test_corpus_split_is_stratified_and_deterministic():
    corpus = CorpusSpec(n_slides=150, n_classes=3, val_fraction=0.2, seed=7)
    specs = corpus_slide_specs(corpus)
    tags = corpus_split(corpus)
    assert tags == corpus_split(corpus)
    for cls in range(3):
        members = [t for s, t in zip(specs, tags) if s.class_id == cls]
        assert members.count("val") == 10
        assert members.count("train") == 40


def test_corpus_specs_have_distinct_seeds():
    corpus = CorpusSpec(n_slides=50, seed=3)
    seeds = [s.seed for s in corpus_slide_specs(corpus)]
    assert len(set(seeds)) == len(seeds)
