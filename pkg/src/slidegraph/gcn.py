"""Graph classifier: stacked message-passing layers, global average pooling
and an MLP head, trained slide-by-slide with cross-entropy.

Two layer kinds are available per position:

* ``"gcn"`` — symmetric degree-normalized aggregation,
  ``H' = relu(A_norm @ H @ W)`` with self-loops by default;
* ``"basic"`` — separate self/neighbor weights plus bias,
  ``H' = relu(A @ H @ W_neigh + H @ W_self + b)`` on the raw adjacency.

Models carry per-feature input statistics fitted on the training split;
encoder activations are unnormalized and arrive at magnitudes that would
otherwise saturate the first layer. Standardization is a per-feature affine
map, so it preserves the permutation and node-duplication invariances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .graphs import WSIGraph
from .optim import AdamState, CosineSchedule, adam_step, cosine_lr
from .validation import ContractError, check_is_fitted, require

LAYER_KINDS = ("gcn", "basic")

_STAT_NAMES = ("input_stats.shift", "input_stats.scale")


def gcn_layer(h, a_norm, w) -> Tensor:
    """relu(A_norm @ H @ W) with a degree-normalized dense adjacency."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    a = a_norm if isinstance(a_norm, Tensor) else Tensor(a_norm)
    w = w if isinstance(w, Tensor) else Tensor(w)
    require(h.data.ndim == 2 and w.data.ndim == 2, "H and W must be 2-D")
    require(a.data.shape == (h.data.shape[0],) * 2, "adjacency must be n x n")
    require(h.data.shape[1] == w.data.shape[0], "H columns must match W rows")
    return ad.relu(ad.matmul(a, ad.matmul(h, w)))


def basic_gnn_layer(h, a_raw, w_self, w_neigh, b) -> Tensor:
    """relu(A @ H @ W_neigh + H @ W_self + b) on the raw 0/1 adjacency."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    a = a_raw if isinstance(a_raw, Tensor) else Tensor(a_raw)
    w_self = w_self if isinstance(w_self, Tensor) else Tensor(w_self)
    w_neigh = w_neigh if isinstance(w_neigh, Tensor) else Tensor(w_neigh)
    b = b if isinstance(b, Tensor) else Tensor(b)
    require(a.data.shape == (h.data.shape[0],) * 2, "adjacency must be n x n")
    require(w_self.data.shape == w_neigh.data.shape, "W_self/W_neigh shapes differ")
    require(h.data.shape[1] == w_self.data.shape[0], "H columns must match W rows")
    neighbor = ad.matmul(a, ad.matmul(h, w_neigh))
    own = ad.matmul(h, w_self)
    return ad.relu(ad.add_bias(ad.add(neighbor, own), b))


class GCNConfig:
    """Architecture: message-passing widths/kinds, head widths, class count."""

    def __init__(self, input_dim: int, n_classes: int, layers=(128, 128),
                 layer_kinds=None, head=(64,), self_loops: bool = True):
        require(input_dim >= 1, "input_dim must be positive")
        require(n_classes >= 2, "need at least two classes")
        layers = tuple(int(w) for w in layers)
        require(len(layers) >= 1 and all(w >= 1 for w in layers),
                "layer widths must be positive")
        if layer_kinds is None:
            layer_kinds = ("gcn",) * len(layers)
        layer_kinds = tuple(layer_kinds)
        require(len(layer_kinds) == len(layers), "one kind per layer required")
        require(all(kind in LAYER_KINDS for kind in layer_kinds),
                f"layer kinds must be one of {LAYER_KINDS}")
        head = tuple(int(w) for w in head)
        require(all(w >= 1 for w in head), "head widths must be positive")
        self.input_dim = int(input_dim)
        self.n_classes = int(n_classes)
        self.layers = layers
        self.layer_kinds = layer_kinds
        self.head = head
        self.self_loops = bool(self_loops)

    def to_meta(self) -> dict:
        return {
            "input_dim": self.input_dim, "n_classes": self.n_classes,
            "layers": list(self.layers), "layer_kinds": list(self.layer_kinds),
            "head": list(self.head), "self_loops": self.self_loops,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "GCNConfig":
        return cls(
            input_dim=meta["input_dim"], n_classes=meta["n_classes"],
            layers=meta["layers"], layer_kinds=meta["layer_kinds"],
            head=meta["head"], self_loops=meta["self_loops"],
        )


@dataclass
class GCNModel:
    """Trained classifier: parameters, architecture and the per-feature
    input statistics (shift, scale) fitted on the training split."""

    params: dict[str, Tensor]
    config: GCNConfig
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None


def init_gcn(config: GCNConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def dense(name, fan_in, fan_out):
        params[name] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)),
            requires_grad=True, name=name,
        )

    d = config.input_dim
    for i, (width, kind) in enumerate(zip(config.layers, config.layer_kinds)):
        if kind == "gcn":
            dense(f"layer{i}.w", d, width)
        else:
            dense(f"layer{i}.w_self", d, width)
            dense(f"layer{i}.w_neigh", d, width)
            params[f"layer{i}.b"] = Tensor(np.zeros(width), requires_grad=True,
                                           name=f"layer{i}.b")
        d = width
    for j, width in enumerate(config.head):
        dense(f"head{j}.w", d, width)
        params[f"head{j}.b"] = Tensor(np.zeros(width), requires_grad=True,
                                      name=f"head{j}.b")
        d = width
    dense("out.w", d, config.n_classes)
    params["out.b"] = Tensor(np.zeros(config.n_classes), requires_grad=True,
                             name="out.b")
    return params


def feature_stats(graphs) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and (clamped) standard deviation over all nodes."""
    stacked = np.vstack([g.features for g in graphs])
    return stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-8)


def _model_inputs(model: GCNModel, graph: WSIGraph) -> np.ndarray:
    if model.input_shift is None:
        return graph.features
    return (graph.features - model.input_shift) / model.input_scale


def graph_logits(model: GCNModel, graph: WSIGraph) -> Tensor:
    """Stacked layers -> mean over nodes -> MLP head -> class logits."""
    config, params = model.config, model.params
    require(graph.dim == config.input_dim,
            f"graph feature dim {graph.dim} != model input dim {config.input_dim}")
    h: Tensor = Tensor(_model_inputs(model, graph))
    for i, kind in enumerate(config.layer_kinds):
        if kind == "gcn":
            a = Tensor(graph.normalized_adjacency(self_loops=config.self_loops))
            h = gcn_layer(h, a, params[f"layer{i}.w"])
        else:
            a = Tensor(graph.raw_adjacency())
            h = basic_gnn_layer(h, a, params[f"layer{i}.w_self"],
                                params[f"layer{i}.w_neigh"], params[f"layer{i}.b"])
    pooled = ad.reshape(ad.reduce_mean(h, axis=0), (1, h.data.shape[1]))
    z = pooled
    for j in range(len(config.head)):
        z = ad.relu(ad.add_bias(ad.matmul(z, params[f"head{j}.w"]),
                                params[f"head{j}.b"]))
    logits = ad.add_bias(ad.matmul(z, params["out.w"]), params["out.b"])
    return ad.reshape(logits, (config.n_classes,))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def predict_proba_graph(model: GCNModel, graph: WSIGraph) -> np.ndarray:
    """Class probability vector for one slide graph."""
    return _softmax(graph_logits(model, graph).data)


def train_gcn(graphs: list[WSIGraph], labels, config: GCNConfig,
              epochs: int = 30, lr: float = 1e-4, weight_decay: float = 1e-6,
              seed: int = 0, standardize: bool = True,
              log=None) -> tuple[GCNModel, list[tuple]]:
    """Per-slide (batch size 1) cross-entropy training with Adam and a
    cosine schedule over all steps; deterministic for a given seed.

    Returns the model and a per-epoch history of (epoch, mean loss, last
    lr). ``log``, when given, receives each history record.
    """
    require(len(graphs) >= 1, "training split must be nonempty")
    labels = [int(y) for y in labels]
    require(len(labels) == len(graphs), "one label per graph required")
    for y in labels:
        if not 0 <= y < config.n_classes:
            raise ContractError(f"label {y} out of range for {config.n_classes} classes")

    init_seed, loop_seed = np.random.SeedSequence(seed).spawn(2)
    params = init_gcn(config, np.random.Generator(np.random.PCG64(init_seed)))
    model = GCNModel(params=params, config=config)
    if standardize:
        model.input_shift, model.input_scale = feature_stats(graphs)
    rng = np.random.Generator(np.random.PCG64(loop_seed))
    optimizer = AdamState(weight_decay=weight_decay)
    schedule = CosineSchedule(initial_lr=lr, total_steps=epochs * len(graphs))

    step = 0
    history: list[tuple] = []
    for epoch in range(epochs):
        order = rng.permutation(len(graphs))
        losses = []
        current_lr = cosine_lr(step, schedule)
        for i in order:
            with Tape() as tape:
                logits = graph_logits(model, graphs[i])
                loss = ad.softmax_cross_entropy(logits, labels[i])
            grads = tape.backward(loss)
            named = {t.name: g for t, g in grads.items()}
            current_lr = cosine_lr(step, schedule)
            adam_step(params, named, optimizer, current_lr)
            step += 1
            losses.append(float(loss.data))
        record = (epoch, float(np.mean(losses)), current_lr)
        history.append(record)
        if log is not None:
            log(record)
    return model, history


def ensemble_probabilities(models: list[GCNModel], graphs_by_model) -> np.ndarray:
    """Mean of the member models' probability vectors, slide by slide.

    ``graphs_by_model`` holds one aligned graph list per model (e.g.
    small-tap and large-tap variants of the same slides). Returns an
    (n_slides, n_classes) array whose argmax is the ensemble prediction.
    """
    require(len(models) >= 1, "ensemble needs at least one model")
    require(len(graphs_by_model) == len(models), "one graph list per model required")
    n_classes = models[0].config.n_classes
    for m in models:
        if m.config.n_classes != n_classes:
            raise ContractError(
                "ensemble members disagree on class count: "
                f"{m.config.n_classes} vs {n_classes}"
            )
    counts = {len(graphs) for graphs in graphs_by_model}
    require(len(counts) == 1, "graph lists must align across models")
    n_slides = counts.pop()
    probs = np.zeros((n_slides, n_classes))
    for model, graphs in zip(models, graphs_by_model):
        for row, graph in enumerate(graphs):
            probs[row] += predict_proba_graph(model, graph)
    return probs / len(models)


class GraphGradeClassifier(BaseEstimator, ClassifierMixin):
    """Slide-graph classifier with the sklearn fit/predict surface.

    ``X`` is a list of ``WSIGraph`` objects. Labels come from ``y`` or, when
    ``y`` is omitted, from each graph's own ``label`` field. Input features
    are standardized with training-split statistics unless ``standardize``
    is disabled.
    """

    def __init__(self, layers=(128, 128), layer_kinds=None, head=(64,),
                 n_classes=None, self_loops=True, epochs=30, lr=1e-4,
                 weight_decay=1e-6, standardize=True, random_state=0):
        self.layers = layers
        self.layer_kinds = layer_kinds
        self.head = head
        self.n_classes = n_classes
        self.self_loops = self_loops
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, X, y=None):
        require(len(X) >= 1, "training split must be nonempty")
        labels = [g.label for g in X] if y is None else [int(v) for v in y]
        n_classes = self.n_classes or max(labels) + 1
        config = GCNConfig(
            input_dim=X[0].dim, n_classes=n_classes, layers=self.layers,
            layer_kinds=self.layer_kinds, head=self.head,
            self_loops=self.self_loops,
        )
        self.model_, self.history_ = train_gcn(
            X, labels, config, epochs=self.epochs, lr=self.lr,
            weight_decay=self.weight_decay, seed=self.random_state,
            standardize=self.standardize,
        )
        self.config_ = config
        self.classes_ = np.arange(n_classes)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        if not len(X):
            return np.zeros((0, self.config_.n_classes))
        return np.stack([predict_proba_graph(self.model_, g) for g in X])

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def save(self, path, config_hash: str = "") -> None:
        check_is_fitted(self, "model_")
        tensors = dict(self.model_.params)
        meta = {"model": "gcn", "arch": self.config_.to_meta(),
                "config_hash": config_hash}
        if self.model_.input_shift is not None:
            tensors[_STAT_NAMES[0]] = Tensor(self.model_.input_shift)
            tensors[_STAT_NAMES[1]] = Tensor(self.model_.input_scale)
        save_checkpoint(path, tensors, meta=meta)

    @classmethod
    def from_checkpoint(cls, path) -> "GraphGradeClassifier":
        params, meta, _ = load_checkpoint(path)
        config = GCNConfig.from_meta(meta["arch"])
        shift = params.pop(_STAT_NAMES[0], None)
        scale = params.pop(_STAT_NAMES[1], None)
        instance = cls(
            layers=config.layers, layer_kinds=config.layer_kinds,
            head=config.head, n_classes=config.n_classes,
            self_loops=config.self_loops,
            standardize=shift is not None,
        )
        instance.model_ = GCNModel(
            params=params, config=config,
            input_shift=None if shift is None else shift.data,
            input_scale=None if scale is None else scale.data,
        )
        instance.config_ = config
        instance.classes_ = np.arange(config.n_classes)
        instance.history_ = []
        return instance
