"""MLP models, losses and the AdamW training loop with early stopping."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

REGRESSION = "regression"
CLASSIFICATION = "classification"

# (loss node, input node, parameter nodes) -> objective node
PenaltyHook = Callable[[ad.Node, ad.Node, Sequence[ad.Node]], ad.Node]


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a ReLU MLP.

    ``n_layers`` hidden layers of width ``layer_size``; ``n_layers=0`` gives a
    plain linear model ``in_dim -> out_dim``.
    """

    in_dim: int
    out_dim: int
    n_layers: int = 1
    layer_size: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1 or self.layer_size < 1:
            raise ValueError(f"MLP dimensions must be positive: {self}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if not 0.0 <= self.dropout <= 0.5:
            raise ValueError(f"dropout must lie in [0, 0.5], got {self.dropout}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.layer_size] * self.n_layers + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    patience: int = 20
    batch_size: int = 512
    lr: float = 1e-3
    weight_decay: float = 0.0
    lr_decay_epochs: tuple[int, ...] = (40, 80)
    lr_decay_factor: float = 0.1
    seed: int = 0


class Mlp:
    """Parameters of an MLP plus numpy and graph forward passes.

    Weights follow the ``out x in`` convention, so column ``j`` of the first
    weight matrix holds every connection leaving input feature ``j``.
    """

    def __init__(self, spec: MlpSpec, params: list[np.ndarray]):
        self.spec = spec
        self.params = params

    @property
    def weights(self) -> list[np.ndarray]:
        return self.params[0::2]

    @property
    def first_layer(self) -> np.ndarray:
        return self.params[0]

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params))

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [p.copy() for p in self.params])

    def forward_graph(self, x: ad.Node, params: Sequence[ad.Node], dropout_rng=None) -> ad.Node:
        """Graph forward pass; dropout is active only when an rng is given."""
        h = x
        n_hidden = self.spec.n_layers
        for i in range(n_hidden + 1):
            w, b = params[2 * i], params[2 * i + 1]
            h = ad.matmul(h, ad.transpose(w)) + b
            if i < n_hidden:
                h = ad.relu(h)
                if dropout_rng is not None and self.spec.dropout > 0:
                    keep = 1.0 - self.spec.dropout
                    mask = (dropout_rng.random(h.shape) < keep) / keep
                    h = ad.dropout_apply(h, mask)
        return h

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.spec.in_dim:
            raise ValueError(f"expected {self.spec.in_dim} features, got array of shape {X.shape}")
        h = X
        n_hidden = self.spec.n_layers
        for i in range(n_hidden + 1):
            h = h @ self.params[2 * i].T + self.params[2 * i + 1]
            if i < n_hidden:
                h = np.maximum(h, 0.0)
        return h


def build_mlp(spec: MlpSpec, seed: int | np.random.SeedSequence = 0) -> Mlp:
    """Initialize with fan-in scaled uniform weights, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        params.append(rng.uniform(-bound, bound, size=(1, fan_out)))
    return Mlp(spec, params)


def _onehot(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError("class targets must be a 1-D array of indices")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ValueError(f"class index out of range for {n_classes} outputs")
    if not np.all(y == np.round(y)):
        raise ValueError("class targets must be integers")
    out = np.zeros((y.size, n_classes))
    out[np.arange(y.size), y.astype(np.intp)] = 1.0
    return out


def loss(outputs: ad.Node, targets: np.ndarray, task: str, reduction: str = "mean") -> ad.Node:
    """Mean squared error (regression) or softmax cross-entropy (classification)."""
    targets = np.asarray(targets)
    n = outputs.shape[0]
    if targets.shape[0] != n:
        raise ValueError(f"{n} outputs but {targets.shape[0]} targets")
    if task == REGRESSION:
        if outputs.shape[1] != 1:
            raise ValueError("regression expects a single output column")
        per_sample = ad.square(outputs - ad.const(targets.reshape(-1, 1)))
    elif task == CLASSIFICATION:
        onehot = _onehot(targets, outputs.shape[1])
        # max shift is detached
        shift = ad.const(outputs.value.max(axis=1, keepdims=True))
        z = outputs - shift
        lse = ad.log(ad.sum(ad.exp(z), axis=1, keepdims=True))
        picked = ad.sum(z * ad.const(onehot), axis=1, keepdims=True)
        per_sample = lse - picked
    else:
        raise ValueError(f"unknown task {task!r}")
    if reduction == "mean":
        return ad.mean(per_sample)
    if reduction == "sum":
        return ad.sum(per_sample)
    raise ValueError(f"unknown reduction {reduction!r}")


def evaluate_outputs(outputs: np.ndarray, y: np.ndarray, task: str) -> float:
    """Accuracy for classification, RMSE for regression."""
    y = np.asarray(y)
    if outputs.shape[0] != y.shape[0]:
        raise ValueError(f"{outputs.shape[0]} predictions but {y.shape[0]} targets")
    if task == CLASSIFICATION:
        return float(np.mean(np.argmax(outputs, axis=1) == y))
    return float(np.sqrt(np.mean((outputs[:, 0] - y) ** 2)))


def predict(model, X: np.ndarray) -> np.ndarray:
    mlp = model.mlp if isinstance(model, TrainedModel) else model
    return mlp.predict(X)


def evaluate(model, X: np.ndarray, y: np.ndarray, task: str) -> float:
    return evaluate_outputs(predict(model, X), y, task)


@dataclass
class AdamW:
    """Decoupled weight decay Adam: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""

    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= self.lr * (update + self.weight_decay * p)


@dataclass
class TrainedModel:
    mlp: Mlp
    task: str
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def spec(self) -> MlpSpec:
        return self.mlp.spec


def _improved(metric: float, best: Optional[float], task: str) -> bool:
    if best is None:
        return True
    return metric > best if task == CLASSIFICATION else metric < best


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule; ``epoch`` is 0-based, decay applies from each milestone on."""
    n_decays = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr * cfg.lr_decay_factor**n_decays


def fit(
    model: Mlp,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    task: str,
    cfg: TrainConfig = TrainConfig(),
    penalty: Optional[PenaltyHook] = None,
) -> TrainedModel:
    """Train ``model`` (a copy is trained) and restore the best-validation epoch.

    ``penalty`` receives the mean batch loss, the batch input node and the
    parameter nodes and returns the scalar objective actually minimized.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    n = X_train.shape[0]
    if n == 0 or X_val.shape[0] == 0:
        raise ValueError("train and validation splits must be non-empty")

    mlp = model.copy()
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)

    history: list[dict] = []
    best_metric = None
    best_params = [p.copy() for p in mlp.params]
    best_epoch = 0
    stale = 0
    for epoch in range(cfg.max_epochs):
        opt.lr = lr_at_epoch(cfg, epoch)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x_node = ad.var(X_train[idx]) if penalty is not None else ad.const(X_train[idx])
            p_nodes = [ad.var(p) for p in mlp.params]
            out = mlp.forward_graph(x_node, p_nodes, dropout_rng=dropout_rng)
            batch_loss = loss(out, y_train[idx], task)
            objective = penalty(batch_loss, x_node, p_nodes) if penalty is not None else batch_loss
            value = float(objective.value)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite training objective at epoch {epoch + 1}, batch {b}")
            grads = [g.value for g in ad.grad(objective, p_nodes)]
            opt.step(mlp.params, grads)
            total += float(batch_loss.value) * idx.size

        metric = evaluate_outputs(mlp.predict(X_val), y_val, task)
        history.append({"epoch": epoch + 1, "train_loss": total / n, "val_metric": metric, "lr": opt.lr})
        if _improved(metric, best_metric, task):
            best_metric, best_epoch, stale = metric, epoch + 1, 0
            best_params = [p.copy() for p in mlp.params]
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.debug("early stop at epoch %d (best %d)", epoch + 1, best_epoch)
                break

    mlp.params = best_params
    return TrainedModel(mlp=mlp, task=task, history=history, best_epoch=best_epoch)


def save_model(model: TrainedModel, path: str | Path) -> None:
    """Write parameters and metadata to a ``.npz`` checkpoint."""
    arrays = {f"param_{i}": p for i, p in enumerate(model.mlp.params)}
    meta = {"spec": asdict(model.spec), "task": model.task, "best_epoch": model.best_epoch, "history": model.history}
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_model(path: str | Path) -> TrainedModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        n_params = sum(1 for k in data.files if k.startswith("param_"))
        params = [data[f"param_{i}"].copy() for i in range(n_params)]
    spec = MlpSpec(**meta["spec"])
    return TrainedModel(Mlp(spec, params), meta["task"], meta["history"], meta["best_epoch"])
