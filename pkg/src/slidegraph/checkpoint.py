"""Model checkpoints: named parameter tensors plus optimizer state.

Checkpoints are ``kind="checkpoint"`` container files (see ``_container``).
Parameters are stored under their names; Adam moments, when present, under
``optim.m/<name>`` and ``optim.v/<name>`` with the scalar state in the
header. Extra header fields (architecture, config hash, ...) go through
``meta`` untouched.
"""

from __future__ import annotations

import numpy as np

from ._container import read_container, write_container
from .autodiff import Tensor
from .optim import AdamState


def save_checkpoint(path, params: dict[str, Tensor], meta: dict | None = None,
                    optimizer: AdamState | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in params.items():
        arrays[name] = np.asarray(tensor.data, dtype=np.float64)
    header = dict(meta or {})
    header["params"] = sorted(params)
    if optimizer is not None:
        header["optim"] = {
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "step": optimizer.step,
        }
        for name, m in optimizer.m.items():
            arrays[f"optim.m/{name}"] = m
            arrays[f"optim.v/{name}"] = optimizer.v[name]
    write_container(path, "checkpoint", header, arrays)


def load_checkpoint(path):
    """Return ``(params, meta, optimizer_or_None)``; params are trainable."""
    _, meta, arrays = read_container(path, expect_kind="checkpoint")
    params = {
        name: Tensor(arrays[name], requires_grad=True, name=name)
        for name in meta["params"]
    }
    optimizer = None
    if "optim" in meta:
        o = meta["optim"]
        optimizer = AdamState(
            beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
            weight_decay=o["weight_decay"], step=o["step"],
        )
        for name in meta["params"]:
            key = f"optim.m/{name}"
            if key in arrays:
                optimizer.m[name] = arrays[key]
                optimizer.v[name] = arrays[f"optim.v/{name}"]
    meta = {k: v for k, v in meta.items() if k not in ("params", "optim")}
    return params, meta, optimizer
