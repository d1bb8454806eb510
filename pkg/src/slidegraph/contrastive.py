"""Contrastive pretraining of the patch encoder.

The encoder is an MLP over flattened patches. Two augmented views feed a
query encoder and a momentum (EMA) encoder; the InfoNCE loss contrasts the
positive key against a FIFO queue of past keys. Keys and queries are
L2-normalized, so similarities are cosines and the logits stay bounded.

Features for the downstream graph are tapped at two depths of the trunk:
``"large"`` (the last hidden layer) and ``"small"`` (the embedding layer
feeding the projection head). Extraction returns raw activations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from ._container import read_container, write_container
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import AdamState, CosineSchedule, adam_step, cosine_lr
from .slides import Patch
from .validation import ContractError, check_is_fitted, require

TAPS = ("small", "large")


# --- augmentation ---------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationParams:
    """Stochastic view generation: flips, contrast jitter, Gaussian blur."""

    p_hflip: float = 0.5
    p_vflip: float = 0.5
    contrast: tuple[float, float] = (0.8, 1.2)
    p_blur: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.1)

    def __post_init__(self):
        for name in ("p_hflip", "p_vflip", "p_blur"):
            p = getattr(self, name)
            require(0.0 <= p <= 1.0, f"{name} must be a probability")
        require(self.contrast[0] <= self.contrast[1], "contrast range must be ordered")
        require(self.blur_sigma[0] >= 0.0, "blur sigma must be non-negative")
        require(self.blur_sigma[0] <= self.blur_sigma[1], "sigma range must be ordered")


IDENTITY_AUGMENTATION = AugmentationParams(
    p_hflip=0.0, p_vflip=0.0, contrast=(1.0, 1.0), p_blur=0.0, blur_sigma=(0.0, 0.0)
)


def augment(image, params: AugmentationParams, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of a patch.

    Applied in fixed order: optional horizontal flip, optional vertical
    flip, contrast scaling about the per-image mean (clamped to [0, 255]),
    optional Gaussian blur with reflect padding. Exactly five random draws
    happen per call regardless of which steps fire, so a shared generator
    stays aligned.
    """
    pixels = image.pixels if isinstance(image, Patch) else image
    out = np.asarray(pixels, dtype=np.float64)
    u_hflip = rng.random()
    u_vflip = rng.random()
    factor = rng.uniform(params.contrast[0], params.contrast[1])
    u_blur = rng.random()
    sigma = rng.uniform(params.blur_sigma[0], params.blur_sigma[1])
    if u_hflip < params.p_hflip:
        out = out[:, ::-1, :]
    if u_vflip < params.p_vflip:
        out = out[::-1, :, :]
    if factor != 1.0:
        mean = out.mean()
        out = mean + factor * (out - mean)
    if u_blur < params.p_blur and sigma > 0.0:
        out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0.0), mode="reflect")
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# --- feature queue ---------------------------------------------------------------


class FeatureQueue:
    """FIFO dictionary of L2-normalized keys serving as negatives."""

    def __init__(self, capacity: int, dim: int):
        require(capacity >= 1, "queue capacity must be positive")
        require(dim >= 1, "key dimension must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._keys: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._keys)

    def push(self, keys) -> None:
        """Append keys in batch order, evicting the oldest past capacity."""
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        require(keys.shape[1] == self.dim, "key dimension mismatch")
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError("queue keys must be unit-normalized")
        for row in keys:
            self._keys.append(row.copy())
        if len(self._keys) > self.capacity:
            self._keys = self._keys[-self.capacity :]

    def negatives(self) -> np.ndarray:
        """Stored keys, oldest first, as a (len, dim) array."""
        if not self._keys:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.stack(self._keys)


# --- loss -------------------------------------------------------------------------


def info_nce(q, k_pos, queue: FeatureQueue, temperature: float) -> Tensor:
    """Contrastive loss of queries against their positive keys plus the
    queue's negatives, with log-sum-exp stabilization.

    ``q`` may be a single vector or a (B, d) batch (the batch returns the
    mean loss). Only ``q`` carries gradient; keys are constants. With an
    empty queue the loss is exactly zero with zero gradient.
    """
    require(temperature > 0.0, "temperature must be positive")
    q_t = q if isinstance(q, Tensor) else Tensor(q)
    single = q_t.data.ndim == 1
    q2 = ad.reshape(q_t, (1, q_t.data.shape[0])) if single else q_t
    k = np.atleast_2d(np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos,
                                 dtype=np.float64))
    require(q2.data.shape == k.shape, "query and positive key shapes must match")
    pos = ad.reshape(ad.reduce_sum(ad.multiply(q2, Tensor(k)), axis=1),
                     (q2.data.shape[0], 1))
    negatives = queue.negatives()
    if negatives.shape[0] == 0:
        # Sole positive: -log(e^s / e^s) == 0, with exactly zero gradient.
        return ad.scale(ad.reduce_mean(pos), 0.0)
    sims = ad.matmul(q2, Tensor(negatives.T))
    logits = ad.scale(ad.concat_cols([pos, sims]), 1.0 / float(temperature))
    losses = ad.softmax_cross_entropy(logits, np.zeros(q2.data.shape[0], dtype=np.int64))
    return ad.reduce_mean(losses)


def momentum_update(theta_q: dict[str, Tensor], theta_k: dict[str, Tensor],
                    momentum: float) -> None:
    """EMA update theta_k <- m * theta_k + (1 - m) * theta_q, in place."""
    require(0.0 <= momentum <= 1.0, "momentum must lie in [0, 1]")
    require(set(theta_q) == set(theta_k), "parameter sets must match")
    for name, src in theta_q.items():
        dst = theta_k[name]
        if dst.data.shape != src.data.shape:
            raise ContractError(f"shape mismatch for parameter {name!r}")
        dst.data *= momentum
        dst.data += (1.0 - momentum) * src.data


# --- encoder ----------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    """MLP trunk over flattened P x P x 3 patches with two tap points.

    The trunk is hidden layers followed by an embedding layer of width
    ``tap_small``; ``tap_large`` must equal the last hidden width so both
    taps name actual layers. The projection head only serves the
    contrastive loss.
    """

    input_dim: int
    hidden: tuple[int, ...] = (512, 256)
    tap_small: int = 64
    tap_large: int = 256
    projection: int = 64

    def __post_init__(self):
        require(self.input_dim >= 1, "input_dim must be positive")
        require(len(self.hidden) >= 1, "need at least one hidden layer")
        require(all(wd >= 1 for wd in self.hidden), "hidden widths must be positive")
        require(self.tap_small >= 1 and self.projection >= 1, "widths must be positive")
        require(
            self.tap_large == self.hidden[-1],
            "tap_large must equal the last hidden width",
        )

    @classmethod
    def for_patch(cls, patch_size: int, **kwargs) -> "EncoderConfig":
        return cls(input_dim=patch_size * patch_size * 3, **kwargs)

    def tap_dim(self, tap: str) -> int:
        if tap == "small":
            return self.tap_small
        if tap == "large":
            return self.tap_large
        raise ContractError(f"unknown tap {tap!r}; expected 'small' or 'large'")


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """He-initialized trunk + projection parameters."""
    widths = [config.input_dim, *config.hidden, config.tap_small]
    params: dict[str, Tensor] = {}
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        params[f"trunk{i}.w"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)),
            requires_grad=True, name=f"trunk{i}.w",
        )
        params[f"trunk{i}.b"] = Tensor(
            np.zeros(fan_out), requires_grad=True, name=f"trunk{i}.b"
        )
    params["proj.w"] = Tensor(
        rng.normal(0.0, np.sqrt(2.0 / config.tap_small),
                   size=(config.tap_small, config.projection)),
        requires_grad=True, name="proj.w",
    )
    params["proj.b"] = Tensor(np.zeros(config.projection), requires_grad=True,
                              name="proj.b")
    return params


def _clone_params(params: dict[str, Tensor], requires_grad: bool) -> dict[str, Tensor]:
    return {
        name: Tensor(t.data.copy(), requires_grad=requires_grad, name=name)
        for name, t in params.items()
    }


def patches_to_inputs(patches) -> np.ndarray:
    """Flatten patches to a (n, P*P*3) float matrix scaled to [0, 1]."""
    rows = [
        (p.pixels if isinstance(p, Patch) else np.asarray(p)).astype(np.float64).ravel()
        / 255.0
        for p in patches
    ]
    return np.stack(rows)


def trunk_forward(params: dict[str, Tensor], x, config: EncoderConfig) -> dict[str, Tensor]:
    """Run the trunk; returns {"large": ..., "small": ...} activations."""
    n_layers = len(config.hidden) + 1
    h = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(x))
    taps: dict[str, Tensor] = {}
    for i in range(n_layers):
        h = ad.relu(ad.add_bias(ad.matmul(h, params[f"trunk{i}.w"]),
                                params[f"trunk{i}.b"]))
        if i == n_layers - 2:
            taps["large"] = h
    taps["small"] = h
    return taps


def project_and_normalize(params: dict[str, Tensor], small: Tensor) -> Tensor:
    z = ad.add_bias(ad.matmul(small, params["proj.w"]), params["proj.b"])
    return ad.normalize_rows(z)


def extract_features(params: dict[str, Tensor], patch, config: EncoderConfig,
                     tap: str = "large") -> np.ndarray:
    """Deterministic forward pass of a non-augmented patch up to ``tap``;
    raw activations, no normalization."""
    require(tap in TAPS, f"unknown tap {tap!r}; expected 'small' or 'large'")
    x = patches_to_inputs([patch])
    return trunk_forward(params, x, config)[tap].data[0].copy()


# --- pretraining -------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    """Desk-scale defaults; the original regime (75 epochs, batch 256,
    lr 3e-3) remains reachable through these knobs."""

    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-6
    temperature: float = 0.2
    momentum: float = 0.99
    queue_capacity: int = 4096
    lr_floor: float = 0.0

    def __post_init__(self):
        require(self.epochs >= 1, "epochs must be positive")
        require(self.batch_size >= 1, "batch size must be positive")
        require(self.temperature > 0.0, "temperature must be positive")
        require(0.0 <= self.momentum <= 1.0, "momentum must lie in [0, 1]")
        require(self.queue_capacity >= 1, "queue capacity must be positive")


@dataclass
class PretrainResult:
    params: dict[str, Tensor]            # query encoder
    momentum_params: dict[str, Tensor]   # EMA encoder
    config: EncoderConfig
    epoch_losses: list[float]
    steps: int


def pretrain(patches, encoder_config: EncoderConfig,
             augmentation: AugmentationParams | None = None,
             hyper: PretrainConfig | None = None,
             seed: int = 0,
             step_callback=None) -> PretrainResult:
    """Contrastive pretraining loop.

    Each batch draws two augmented views per patch; the query view flows
    through the trainable encoder + projection, the key view through the
    momentum encoder (no gradient). After every Adam step (cosine schedule)
    the momentum encoder is EMA-updated and the batch keys are enqueued.
    Fully deterministic for a given seed.

    The queue is prefilled with keys of the un-augmented patches from the
    freshly initialized momentum encoder, so the first batches already
    contrast against a full dictionary and per-epoch losses are comparable
    from epoch one.

    ``step_callback(step, params, momentum_params)``, when given, fires
    once with step 0 right after initialization and then after every
    optimizer + momentum update.
    """
    require(len(patches) >= 2, "pretraining needs at least 2 patches")
    augmentation = augmentation if augmentation is not None else AugmentationParams()
    hyper = hyper if hyper is not None else PretrainConfig()
    batch_size = hyper.batch_size
    if batch_size > len(patches):
        warnings.warn(
            f"batch size {batch_size} exceeds patch count {len(patches)}; clamping",
            stacklevel=2,
        )
        batch_size = len(patches)

    init_seed, loop_seed = np.random.SeedSequence(seed).spawn(2)
    rng_init = np.random.Generator(np.random.PCG64(init_seed))
    rng = np.random.Generator(np.random.PCG64(loop_seed))

    params = init_encoder(encoder_config, rng_init)
    momentum_params = _clone_params(params, requires_grad=False)
    queue = FeatureQueue(
        capacity=min(hyper.queue_capacity, len(patches)), dim=encoder_config.projection
    )
    prefill = trunk_forward(momentum_params, patches_to_inputs(patches), encoder_config)
    queue.push(project_and_normalize(momentum_params, prefill["small"]).data)
    optimizer = AdamState(weight_decay=hyper.weight_decay)
    n_batches = (len(patches) + batch_size - 1) // batch_size
    schedule = CosineSchedule(
        initial_lr=hyper.lr, total_steps=hyper.epochs * n_batches,
        floor_lr=hyper.lr_floor,
    )

    step = 0
    if step_callback is not None:
        step_callback(0, params, momentum_params)
    epoch_losses: list[float] = []
    for _ in range(hyper.epochs):
        order = rng.permutation(len(patches))
        batch_losses: list[float] = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            views_q = [augment(patches[i], augmentation, rng) for i in idx]
            views_k = [augment(patches[i], augmentation, rng) for i in idx]
            xq = patches_to_inputs(views_q)
            xk = patches_to_inputs(views_k)

            # Keys: momentum branch, no tape, no gradient.
            k_taps = trunk_forward(momentum_params, xk, encoder_config)
            keys = project_and_normalize(momentum_params, k_taps["small"]).data

            with Tape() as tape:
                q_taps = trunk_forward(params, Tensor(xq), encoder_config)
                q = project_and_normalize(params, q_taps["small"])
                loss = info_nce(q, keys, queue, hyper.temperature)
            grads = tape.backward(loss)
            named = {t.name: g for t, g in grads.items()}
            adam_step(params, named, optimizer, cosine_lr(step, schedule))
            momentum_update(params, momentum_params, hyper.momentum)
            queue.push(keys)
            step += 1
            batch_losses.append(float(loss.data))
            if step_callback is not None:
                step_callback(step, params, momentum_params)
        epoch_losses.append(float(np.mean(batch_losses)))
    return PretrainResult(
        params=params, momentum_params=momentum_params,
        config=encoder_config, epoch_losses=epoch_losses, steps=step,
    )


# --- feature store ------------------------------------------------------------------


def save_features(path, slide_id: str, tap: str, grid, centroids, features,
                  config_hash: str = "") -> None:
    """Per-slide feature store: grid indices, centroids and the feature
    payload, with a header naming the tap and its dimension."""
    features = np.asarray(features, dtype=np.float64)
    write_container(
        path,
        "features",
        {
            "slide_id": slide_id,
            "tap": tap,
            "dim": int(features.shape[1]),
            "count": int(features.shape[0]),
            "config_hash": config_hash,
        },
        {
            "grid": np.asarray(grid, dtype=np.int64),
            "centroids": np.asarray(centroids, dtype=np.float64),
            "features": features,
        },
    )


def load_features(path):
    """Returns (meta, grid, centroids, features)."""
    _, meta, arrays = read_container(path, expect_kind="features")
    return meta, arrays["grid"], arrays["centroids"], arrays["features"]


# --- estimator --------------------------------------------------------------------


class ContrastivePatchEncoder(BaseEstimator, TransformerMixin):
    """Patch-feature transformer trained with momentum-queue contrastive
    learning.

    ``fit`` expects a list of patches (``Patch`` objects or raw P x P x 3
    uint8 arrays); ``transform`` maps patches to feature rows at the tap
    selected at construction. Use ``extract`` for an explicit tap.
    """

    def __init__(self, patch_size=32, hidden=(512, 256), tap_small=64,
                 tap_large=256, projection=64, tap="large", epochs=20,
                 batch_size=32, lr=1e-3, weight_decay=1e-6, temperature=0.2,
                 momentum=0.99, queue_capacity=4096,
                 augmentation=None, random_state=0):
        self.patch_size = patch_size
        self.hidden = hidden
        self.tap_small = tap_small
        self.tap_large = tap_large
        self.projection = projection
        self.tap = tap
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.temperature = temperature
        self.momentum = momentum
        self.queue_capacity = queue_capacity
        self.augmentation = augmentation
        self.random_state = random_state

    def _encoder_config(self) -> EncoderConfig:
        return EncoderConfig.for_patch(
            self.patch_size, hidden=tuple(self.hidden),
            tap_small=self.tap_small, tap_large=self.tap_large,
            projection=self.projection,
        )

    def fit(self, X, y=None):
        hyper = PretrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, temperature=self.temperature,
            momentum=self.momentum, queue_capacity=self.queue_capacity,
        )
        result = pretrain(
            X, self._encoder_config(),
            augmentation=self.augmentation, hyper=hyper,
            seed=self.random_state,
        )
        self.params_ = result.params
        self.config_ = result.config
        self.epoch_losses_ = result.epoch_losses
        return self

    def extract(self, X, tap: str) -> np.ndarray:
        check_is_fitted(self, "params_")
        require(tap in TAPS, f"unknown tap {tap!r}; expected 'small' or 'large'")
        if len(X) == 0:
            return np.zeros((0, self.config_.tap_dim(tap)))
        inputs = patches_to_inputs(X)
        return trunk_forward(self.params_, inputs, self.config_)[tap].data.copy()

    def transform(self, X) -> np.ndarray:
        return self.extract(X, self.tap)

    def save(self, path, config_hash: str = "") -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(
            path, self.params_,
            meta={
                "model": "contrastive_encoder",
                "encoder": {
                    "input_dim": self.config_.input_dim,
                    "hidden": list(self.config_.hidden),
                    "tap_small": self.config_.tap_small,
                    "tap_large": self.config_.tap_large,
                    "projection": self.config_.projection,
                },
                "config_hash": config_hash,
            },
        )

    @classmethod
    def from_checkpoint(cls, path) -> "ContrastivePatchEncoder":
        params, meta, _ = load_checkpoint(path)
        enc = meta["encoder"]
        config = EncoderConfig(
            input_dim=enc["input_dim"], hidden=tuple(enc["hidden"]),
            tap_small=enc["tap_small"], tap_large=enc["tap_large"],
            projection=enc["projection"],
        )
        instance = cls(
            hidden=tuple(enc["hidden"]), tap_small=enc["tap_small"],
            tap_large=enc["tap_large"], projection=enc["projection"],
        )
        instance.params_ = params
        instance.config_ = config
        instance.epoch_losses_ = []
        return instance
