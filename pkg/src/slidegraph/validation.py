"""Input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition."""


class NotFittedError(ContractError):
    """Raised when predict/transform is called before fit."""


def require(condition: bool, message: str) -> None:
    if not condition:
        raise ContractError(message)


def check_is_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit() first"
        )


def as_image(image) -> np.ndarray:
    """Validate an (H, W, 3) uint8 raster and return it as an ndarray."""
    arr = np.asarray(image)
    require(arr.ndim == 3 and arr.shape[2] == 3, "image must have shape (H, W, 3)")
    require(arr.dtype == np.uint8, "image samples must be 8-bit unsigned")
    require(arr.shape[0] > 0 and arr.shape[1] > 0, "image must be nonempty")
    return arr


def as_labels(values, n_classes: int, name: str = "labels") -> np.ndarray:
    arr = np.asarray(values)
    require(arr.ndim == 1 and arr.size > 0, f"{name} must be a nonempty 1-D sequence")
    require(
        np.issubdtype(arr.dtype, np.integer) or np.all(arr == arr.astype(np.int64)),
        f"{name} must be integers",
    )
    arr = arr.astype(np.int64)
    require(
        bool(np.all((arr >= 0) & (arr < n_classes))),
        f"{name} must lie in [0, {n_classes})",
    )
    return arr
