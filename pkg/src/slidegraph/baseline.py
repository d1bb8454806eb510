"""Tile-bag comparison baseline: blue-ratio tile selection, square mosaic
concatenation, and a small MLP classifier over per-cell color statistics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import AdamState, CosineSchedule, adam_step, cosine_lr
from .slides import Patch, blue_ratio
from .validation import ContractError, check_is_fitted, require

DEFAULT_BAG_SIZE = 36  # 6 x 6 mosaic

# Pad tiles are pure white: blue ratio ~16.7, i.e. ranked as background.
_PAD_VALUE = 255


@dataclass(frozen=True)
class TileBag:
    """Exactly ``bag_size`` tiles in descending mean blue-ratio order,
    white-padded when the slide has fewer."""

    tiles: tuple
    slide_id: str = ""
    label: int | None = None

    @property
    def size(self) -> int:
        return len(self.tiles)


def select_tiles(patches: list[Patch], bag_size: int = DEFAULT_BAG_SIZE,
                 patch_size: int | None = None, slide_id: str = "",
                 label: int | None = None) -> TileBag:
    """Rank patches by mean blue ratio (descending, ties broken by grid
    position) and keep the top ``bag_size``, padding with white tiles when
    the slide has fewer."""
    require(bag_size >= 1, "bag size must be positive")
    if patches:
        patch_size = patches[0].pixels.shape[0]
    elif patch_size is None:
        raise ContractError("patch_size is required when the patch list is empty")
    else:
        warnings.warn(f"slide {slide_id or '?'} has no patches; bagging white tiles",
                      stacklevel=2)
    ranked = sorted(
        patches,
        key=lambda p: (-blue_ratio(p.pixels)[1], p.grid_row, p.grid_col),
    )[:bag_size]
    tiles = [p.pixels for p in ranked]
    while len(tiles) < bag_size:
        tiles.append(np.full((patch_size, patch_size, 3), _PAD_VALUE, dtype=np.uint8))
    return TileBag(tiles=tuple(tiles), slide_id=slide_id, label=label)


def concat_bag(bag: TileBag) -> np.ndarray:
    """Row-major square mosaic of the bag; tile 0 lands in the top-left cell."""
    side = math.isqrt(bag.size)
    if side * side != bag.size:
        raise ContractError(f"bag size {bag.size} is not a perfect square")
    p = bag.tiles[0].shape[0]
    mosaic = np.zeros((side * p, side * p, 3), dtype=np.uint8)
    for i, tile in enumerate(bag.tiles):
        r, c = divmod(i, side)
        mosaic[r * p : (r + 1) * p, c * p : (c + 1) * p] = tile
    return mosaic


def bag_features(bag: TileBag) -> np.ndarray:
    """Per-cell summary: mean R, G, B (scaled to [0, 1]) and mean blue
    ratio (scaled by 255), flattened tile by tile."""
    rows = []
    for tile in bag.tiles:
        means = tile.astype(np.float64).reshape(-1, 3).mean(axis=0) / 255.0
        br = blue_ratio(tile)[1] / 255.0
        rows.append(np.concatenate([means, [br]]))
    return np.concatenate(rows)


def _bag_matrix(bags) -> np.ndarray:
    return np.stack([bag_features(b) for b in bags])


class TileBagClassifier(BaseEstimator, ClassifierMixin):
    """MLP over concatenated-bag statistics, trained bag-by-bag with Adam
    and a cosine schedule; the graph pipeline's point of comparison."""

    def __init__(self, hidden=(64,), n_classes=None, epochs=30, lr=1e-3,
                 weight_decay=1e-6, random_state=0):
        self.hidden = hidden
        self.n_classes = n_classes
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _init_params(self, input_dim: int, n_classes: int, rng) -> dict[str, Tensor]:
        widths = [input_dim, *self.hidden, n_classes]
        params: dict[str, Tensor] = {}
        for i in range(len(widths) - 1):
            params[f"fc{i}.w"] = Tensor(
                rng.normal(0.0, np.sqrt(2.0 / widths[i]), size=(widths[i], widths[i + 1])),
                requires_grad=True, name=f"fc{i}.w",
            )
            params[f"fc{i}.b"] = Tensor(np.zeros(widths[i + 1]), requires_grad=True,
                                        name=f"fc{i}.b")
        return params

    def _logits(self, params, x_row: np.ndarray, n_classes: int) -> Tensor:
        z = Tensor(x_row[None, :])
        n_layers = len(self.hidden) + 1
        for i in range(n_layers):
            z = ad.add_bias(ad.matmul(z, params[f"fc{i}.w"]), params[f"fc{i}.b"])
            if i < n_layers - 1:
                z = ad.relu(z)
        return ad.reshape(z, (n_classes,))

    def fit(self, X, y=None):
        require(len(X) >= 1, "training set must be nonempty")
        labels = [b.label for b in X] if y is None else [int(v) for v in y]
        require(all(v is not None for v in labels), "every training bag needs a label")
        labels = [int(v) for v in labels]
        n_classes = self.n_classes or max(labels) + 1
        for v in labels:
            if not 0 <= v < n_classes:
                raise ContractError(f"label {v} out of range for {n_classes} classes")
        features = _bag_matrix(X)
        self.input_shift_ = features.mean(axis=0)
        self.input_scale_ = np.maximum(features.std(axis=0), 1e-8)
        features = (features - self.input_shift_) / self.input_scale_

        init_seed, loop_seed = np.random.SeedSequence(self.random_state).spawn(2)
        params = self._init_params(
            features.shape[1], n_classes, np.random.Generator(np.random.PCG64(init_seed))
        )
        rng = np.random.Generator(np.random.PCG64(loop_seed))
        optimizer = AdamState(weight_decay=self.weight_decay)
        schedule = CosineSchedule(initial_lr=self.lr,
                                  total_steps=self.epochs * len(X))
        step = 0
        history = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            losses = []
            current_lr = cosine_lr(step, schedule)
            for i in order:
                with Tape() as tape:
                    logits = self._logits(params, features[i], n_classes)
                    loss = ad.softmax_cross_entropy(logits, labels[i])
                grads = tape.backward(loss)
                named = {t.name: g for t, g in grads.items()}
                current_lr = cosine_lr(step, schedule)
                adam_step(params, named, optimizer, current_lr)
                step += 1
                losses.append(float(loss.data))
            history.append((epoch, float(np.mean(losses)), current_lr))
        self.params_ = params
        self.n_classes_ = n_classes
        self.input_dim_ = features.shape[1]
        self.history_ = history
        self.classes_ = np.arange(n_classes)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        features = (_bag_matrix(X) - self.input_shift_) / self.input_scale_
        out = np.zeros((len(X), self.n_classes_))
        for i in range(len(X)):
            logits = self._logits(self.params_, features[i], self.n_classes_).data
            z = logits - logits.max()
            e = np.exp(z)
            out[i] = e / e.sum()
        return out

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def save(self, path, config_hash: str = "") -> None:
        check_is_fitted(self, "params_")
        tensors = dict(self.params_)
        tensors["input_stats.shift"] = Tensor(self.input_shift_)
        tensors["input_stats.scale"] = Tensor(self.input_scale_)
        save_checkpoint(
            path, tensors,
            meta={
                "model": "tile_bag",
                "arch": {
                    "hidden": list(self.hidden),
                    "n_classes": self.n_classes_,
                    "input_dim": self.input_dim_,
                },
                "config_hash": config_hash,
            },
        )

    @classmethod
    def from_checkpoint(cls, path) -> "TileBagClassifier":
        params, meta, _ = load_checkpoint(path)
        arch = meta["arch"]
        instance = cls(hidden=tuple(arch["hidden"]), n_classes=arch["n_classes"])
        instance.input_shift_ = params.pop("input_stats.shift").data
        instance.input_scale_ = params.pop("input_stats.scale").data
        instance.params_ = params
        instance.n_classes_ = arch["n_classes"]
        instance.input_dim_ = arch["input_dim"]
        instance.history_ = []
        instance.classes_ = np.arange(arch["n_classes"])
        return instance
