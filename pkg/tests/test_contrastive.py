import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import FD_TOLERANCE, numeric_gradient, relative_error

import slidegraph.autodiff as ad
from slidegraph.autodiff import Tape, Tensor
from slidegraph.contrastive import (
    AugmentationParams,
    ContrastivePatchEncoder,
    EncoderConfig,
    FeatureQueue,
    IDENTITY_AUGMENTATION,
    PretrainConfig,
    augment,
    extract_features,
    info_nce,
    momentum_update,
    pretrain,
)
from slidegraph.synthetic import SyntheticSlideSpec, generate_synthetic_slide
from slidegraph.slides import extract_patches, segment_tissue
from slidegraph.validation import ContractError

# Regenerated from the committed augmentation path: 8x8 ramp input,
# PCG64 seed 11, default parameters (hflip + vflip + contrast + blur fire).
_GOLDEN_INPUT = (np.arange(192, dtype=np.uint8).reshape(8, 8, 3) * 7 % 251).astype(np.uint8)
_GOLDEN_SEED = 11
_GOLDEN_OUTPUT = np.array([
    42, 49, 57, 21, 28, 35, 7, 14, 21, 228, 235, 242, 214, 221, 228, 192,
    199, 206, 170, 178, 185, 157, 164, 164, 131, 138, 145, 110, 117, 124,
    88, 95, 103, 74, 81, 88, 52, 59, 67, 30, 38, 45, 16, 23, 23, 230, 237,
    7, 214, 222, 229, 193, 201, 208, 172, 179, 186, 157, 157, 164, 136,
    143, 150, 114, 121, 128, 92, 100, 107, 79, 86, 86, 56, 63, 70, 34, 42,
    49, 20, 20, 27, 234, 10, 13, 219, 219, 226, 197, 205, 212, 176, 183,
    190, 162, 162, 169, 139, 146, 154, 118, 125, 133, 96, 103, 111, 82, 82,
    89, 60, 67, 75, 39, 46, 53, 24, 24, 31, 238, 8, 10, 223, 230, 237, 202,
    209, 216, 180, 187, 194, 158, 165, 173, 144, 151, 158, 122, 129, 137,
    101, 108, 115, 87, 87, 94, 64, 71, 79, 43, 50, 57, 21, 28, 35, 11, 14,
    21, 220, 227, 235, 206, 213, 220, 184, 191, 198, 163, 170, 177, 145,
    152, 159, 124, 131, 138, 102, 109, 116, 80, 87, 95, 66, 73, 80, 44, 51,
    59, 22, 30, 37, 1, 8, 16,
], dtype=np.uint8).reshape(8, 8, 3)


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _filled_queue(vectors):
    queue = FeatureQueue(capacity=max(len(vectors), 1), dim=len(vectors[0]))
    queue.push(np.stack([_unit(v) for v in vectors]))
    return queue


def _tissue_patches(n, patch_size=16, seed=0):
    patches = []
    cls = 0
    while len(patches) < n:
        img, _ = generate_synthetic_slide(
            SyntheticSlideSpec(class_id=cls % 3, width=96, height=96, seed=seed + cls)
        )
        mask = segment_tissue(img)
        patches.extend(extract_patches(img, mask, patch_size, 0.1))
        cls += 1
    return patches[:n]


_TEST_ENCODER = dict(hidden=(64, 32), tap_small=16, tap_large=32, projection=16)


# --- augmentation ------------------------------------------------------------


def test_augment_identity_when_randomness_disabled():
    rng = np.random.default_rng(0)
    img = (np.arange(300) % 256).astype(np.uint8).reshape(10, 10, 3)
    out = augment(img, IDENTITY_AUGMENTATION, rng)
    np.testing.assert_array_equal(out, img)


def test_augment_horizontal_flip_is_involution():
    params = AugmentationParams(p_hflip=1.0, p_vflip=0.0, contrast=(1.0, 1.0),
                                p_blur=0.0, blur_sigma=(0.0, 0.0))
    img = (np.arange(300) % 256).astype(np.uint8).reshape(10, 10, 3)
    once = augment(img, params, np.random.default_rng(1))
    twice = augment(once, params, np.random.default_rng(2))
    assert not np.array_equal(once, img)
    np.testing.assert_array_equal(twice, img)


def test_augment_matches_golden_fixture():
    out = augment(_GOLDEN_INPUT, AugmentationParams(),
                  np.random.Generator(np.random.PCG64(_GOLDEN_SEED)))
    np.testing.assert_array_equal(out, _GOLDEN_OUTPUT)


def test_augment_preserves_shape_and_dtype():
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, size=(17, 9, 3), dtype=np.uint8)
    out = augment(img, AugmentationParams(), rng)
    assert out.shape == img.shape and out.dtype == np.uint8


def test_augmentation_params_validated():
    with pytest.raises(ContractError):
        AugmentationParams(p_hflip=1.5)
    with pytest.raises(ContractError):
        AugmentationParams(contrast=(1.2, 0.8))
    with pytest.raises(ContractError):
        AugmentationParams(blur_sigma=(-0.1, 1.0))


# --- InfoNCE ------------------------------------------------------------------


def test_info_nce_symmetric_single_negative_is_ln2():
    q = _unit([1.0, 0.0, 0.0, 0.0])
    k_pos = _unit([0.5, 0.5, 0.5, 0.5])
    negative = _unit([0.5, 0.5, 0.5, 0.5])  # same similarity as the positive
    queue = _filled_queue([negative])
    for tau in (0.05, 0.2, 1.0, 7.0):
        loss = float(info_nce(q, k_pos, queue, tau).data)
        assert abs(loss - math.log(2.0)) < 1e-12


@pytest.mark.parametrize("k_neg", [1, 8, 64])
def test_info_nce_equal_similarities_is_ln_k_plus_one(k_neg):
    dim = 8
    q = _unit(np.ones(dim))
    k_pos = _unit(np.ones(dim))
    queue = _filled_queue([np.ones(dim)] * k_neg)
    loss = float(info_nce(q, k_pos, queue, 0.2).data)
    assert abs(loss - math.log(k_neg + 1.0)) < 1e-9


def test_info_nce_orthogonal_negatives_reference_value():
    dim = 16
    q = np.zeros(dim)
    q[0] = 1.0
    k_pos = q.copy()
    negatives = []
    for i in range(8):
        v = np.zeros(dim)
        v[i + 1] = 1.0
        negatives.append(v)
    queue = _filled_queue(negatives)
    loss = float(info_nce(q, k_pos, queue, 0.2).data)
    expected = -math.log(math.exp(5.0) / (math.exp(5.0) + 8.0))
    assert abs(loss - expected) < 1e-12
    assert abs(loss - 0.052500962056) < 1e-9


def test_info_nce_nonnegative_and_decreasing_in_positive_similarity():
    rng = np.random.default_rng(3)
    dim = 12
    negatives = [rng.normal(size=dim) for _ in range(16)]
    queue = _filled_queue(negatives)
    previous = None
    for target in np.linspace(-0.9, 0.9, 13):
        # Build q with controlled similarity to a fixed unit positive key.
        k_pos = np.zeros(dim)
        k_pos[0] = 1.0
        q = np.zeros(dim)
        q[0] = target
        q[1] = math.sqrt(1.0 - target**2)
        loss = float(info_nce(q, k_pos, queue, 0.2).data)
        assert loss >= 0.0
        if previous is not None:
            assert loss < previous
        previous = loss


def test_info_nce_empty_queue_is_zero_loss_zero_gradient():
    queue = FeatureQueue(capacity=4, dim=3)
    q = Tensor(_unit([1.0, 2.0, 2.0]), requires_grad=True, name="q")
    with Tape() as tape:
        loss = info_nce(q, _unit([0.0, 1.0, 0.0]), queue, 0.2)
    assert float(loss.data) == 0.0
    np.testing.assert_array_equal(tape.backward(loss)[q].data, np.zeros(3))


def test_info_nce_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    dim = 10
    queue = _filled_queue([rng.normal(size=dim) for _ in range(12)])
    k_pos = _unit(rng.normal(size=dim))
    q0 = _unit(rng.normal(size=dim))

    def build(tensors):
        return info_nce(tensors[0], k_pos, queue, 0.2)

    t = Tensor(q0, requires_grad=True)
    with Tape() as tape:
        loss = build([t])
    analytic = tape.backward(loss)[t].data
    numeric = numeric_gradient(build, [q0], 0)
    assert relative_error(analytic, numeric) < FD_TOLERANCE


def test_info_nce_rejects_nonpositive_temperature():
    queue = _filled_queue([[1.0, 0.0]])
    with pytest.raises(ContractError):
        info_nce(_unit([1.0, 0.0]), _unit([1.0, 0.0]), queue, 0.0)


# --- momentum update -------------------------------------------------------------


def _named(value):
    return {"w": Tensor(np.array(value, dtype=float), requires_grad=True, name="w")}


def test_momentum_update_endpoints_and_average():
    for m, expected in ((1.0, 3.0), (0.0, 2.0), (0.5, 2.5)):
        theta_q = _named([2.0, 2.0])
        theta_k = _named([3.0, 3.0])
        momentum_update(theta_q, theta_k, m)
        np.testing.assert_allclose(theta_k["w"].data, expected)


def test_momentum_update_shape_mismatch():
    theta_q = _named([1.0, 2.0])
    theta_k = _named([1.0, 2.0, 3.0])
    with pytest.raises(ContractError):
        momentum_update(theta_q, theta_k, 0.9)


# --- queue ------------------------------------------------------------------------


def test_queue_keeps_insertion_order():
    queue = FeatureQueue(capacity=4, dim=2)
    keys = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    queue.push(keys)
    assert len(queue) == 3
    np.testing.assert_array_equal(queue.negatives(), keys)


def test_queue_evicts_oldest():
    queue = FeatureQueue(capacity=4, dim=2)
    queue.push(np.array([[1.0, 0.0]] * 4))
    queue.push(np.array([[0.0, 1.0]]))
    negs = queue.negatives()
    assert len(queue) == 4
    np.testing.assert_array_equal(negs[-1], [0.0, 1.0])
    np.testing.assert_array_equal(negs[0], [1.0, 0.0])


def test_queue_bulk_push_keeps_last_capacity():
    queue = FeatureQueue(capacity=4, dim=2)
    angles = np.linspace(0, 1.2, 6)
    keys = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    queue.push(keys)
    np.testing.assert_array_equal(queue.negatives(), keys[2:])


def test_queue_rejects_unnormalized_keys():
    queue = FeatureQueue(capacity=4, dim=2)
    with pytest.raises(ContractError):
        queue.push(np.array([[0.5, 0.5]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6),
       st.lists(st.integers(1, 5), min_size=1, max_size=12))
def test_queue_matches_reference_fifo_simulation(capacity, batch_sizes):
    queue = FeatureQueue(capacity=capacity, dim=2)
    reference = []
    counter = 0
    for size in batch_sizes:
        batch = []
        for _ in range(size):
            angle = 0.1 * counter
            counter += 1
            batch.append([math.cos(angle), math.sin(angle)])
        queue.push(np.array(batch))
        reference.extend(batch)
        reference = reference[-capacity:]
    np.testing.assert_allclose(queue.negatives(), np.array(reference))


# --- pretraining --------------------------------------------------------------------


def test_pretrain_loss_decreases_majority_of_seeds():
    patches = _tissue_patches(64)
    config = EncoderConfig.for_patch(16, **_TEST_ENCODER)
    hyper = PretrainConfig(epochs=2, batch_size=32, lr=1e-3, queue_capacity=64)
    wins = 0
    for seed in (7, 8, 9, 10, 11):
        result = pretrain(patches, config, hyper=hyper, seed=seed)
        if result.epoch_losses[-1] < result.epoch_losses[0]:
            wins += 1
    assert wins >= 3


def test_pretrain_is_bitwise_deterministic():
    patches = _tissue_patches(24)
    config = EncoderConfig.for_patch(16, **_TEST_ENCODER)
    hyper = PretrainConfig(epochs=2, batch_size=8, queue_capacity=24)
    a = pretrain(patches, config, hyper=hyper, seed=7)
    b = pretrain(patches, config, hyper=hyper, seed=7)
    assert a.epoch_losses == b.epoch_losses
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
        np.testing.assert_array_equal(
            a.momentum_params[name].data, b.momentum_params[name].data
        )


def test_pretrain_momentum_branch_is_pure_ema_of_query_trajectory():
    patches = _tissue_patches(16)
    config = EncoderConfig.for_patch(16, **_TEST_ENCODER)
    hyper = PretrainConfig(epochs=2, batch_size=8, momentum=0.95, queue_capacity=16)
    snapshots = []

    def callback(step, params, momentum_params):
        snapshots.append({n: t.data.copy() for n, t in params.items()})

    result = pretrain(patches, config, hyper=hyper, seed=3, step_callback=callback)
    ema = {n: v.copy() for n, v in snapshots[0].items()}  # theta_k starts at theta_q
    for snap in snapshots[1:]:
        for name in ema:
            ema[name] = hyper.momentum * ema[name] + (1 - hyper.momentum) * snap[name]
    for name in ema:
        diff = np.abs(ema[name] - result.momentum_params[name].data).max()
        assert diff < 1e-10


def test_pretrain_clamps_oversized_batch_with_warning():
    patches = _tissue_patches(6)
    config = EncoderConfig.for_patch(16, **_TEST_ENCODER)
    with pytest.warns(UserWarning, match="clamping"):
        result = pretrain(
            patches, config,
            hyper=PretrainConfig(epochs=1, batch_size=50, queue_capacity=8), seed=0,
        )
    assert result.steps == 1


def test_pretrain_default_temperature_is_point_two():
    assert PretrainConfig().temperature == 0.2


def test_pretrain_requires_two_patches():
    with pytest.raises(ContractError):
        pretrain(_tissue_patches(1), EncoderConfig.for_patch(16, **_TEST_ENCODER))


# --- feature extraction ---------------------------------------------------------------


def test_extract_features_tap_shapes_and_determinism():
    rng = np.random.default_rng(2)
    config = EncoderConfig.for_patch(16, **_TEST_ENCODER)
    from slidegraph.contrastive import init_encoder

    params = init_encoder(config, rng)
    patch = _tissue_patches(1)[0]
    small = extract_features(params, patch, config, "small")
    large = extract_features(params, patch, config, "large")
    assert small.shape == (16,) and large.shape == (32,)
    np.testing.assert_array_equal(small, extract_features(params, patch, config, "small"))
    with pytest.raises(ContractError):
        extract_features(params, patch, config, "medium")


def test_encoder_config_defaults_match_contract():
    config = EncoderConfig.for_patch(32)
    assert config.tap_dim("small") == 64 and config.tap_dim("large") == 256
    with pytest.raises(ContractError):
        EncoderConfig(input_dim=10, hidden=(32,), tap_large=64)  # tap must name a layer


def test_estimator_fit_transform_and_checkpoint(tmp_path):
    patches = _tissue_patches(20)
    encoder = ContrastivePatchEncoder(
        patch_size=16, hidden=(64, 32), tap_small=16, tap_large=32, projection=16,
        epochs=1, batch_size=8, queue_capacity=16, random_state=5,
    )
    encoder.fit(patches)
    features = encoder.transform(patches)
    assert features.shape == (20, 32)  # default tap is "large"
    small = encoder.extract(patches, "small")
    assert small.shape == (20, 16)

    path = tmp_path / "encoder.ckpt"
    encoder.save(path, config_hash="cafe")
    loaded = ContrastivePatchEncoder.from_checkpoint(path)
    np.testing.assert_array_equal(loaded.transform(patches), features)

    params = encoder.get_params()
    assert params["tap"] == "large" and params["epochs"] == 1
