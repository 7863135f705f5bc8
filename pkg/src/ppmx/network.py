"""Fully connected binary classifier trained with ADADELTA.

Rectifier hidden layers, one sigmoid output unit, inverted dropout on the
input and hidden activations, uniform-adaptive initialisation and early
stopping on validation AUROC. Everything is plain numpy in float64.
"""

from __future__ import annotations

import copy
import logging
import threading
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .metrics import roc_and_auroc

__all__ = [
    "NetworkConfig",
    "TrainingConfig",
    "Network",
    "TrainedNetwork",
    "AdadeltaState",
    "init_network",
    "forward",
    "backward",
    "loss",
    "adadelta_step",
    "train",
    "predict_scores",
    "latent_codes",
    "sigmoid",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NetworkConfig:
    hidden_layer_sizes: tuple[int, ...] = (64, 32)
    input_dropout_ratio: float = 0.1
    hidden_dropout_ratio: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layer_sizes", tuple(int(h) for h in self.hidden_layer_sizes))
        if not self.hidden_layer_sizes or min(self.hidden_layer_sizes) < 1:
            raise ValueError("hidden layer sizes must be >= 1")
        for r in (self.input_dropout_ratio, self.hidden_dropout_ratio):
            if not 0.0 <= r < 1.0:
                raise ValueError("dropout ratios must lie in [0, 1)")


@dataclass(frozen=True)
class TrainingConfig:
    rho: float = 0.99
    epsilon: float = 1e-8
    minibatch_size: int = 32
    max_epochs: int = 200
    stopping_tolerance: float = 0.01
    stopping_rounds: int = 10
    parallel: bool = False
    n_threads: int = 4

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.stopping_rounds < 1:
            raise ValueError("stopping_rounds must be >= 1")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")


@dataclass
class Network:
    """Weights ``W[l]`` of shape (fan_in, fan_out) and biases ``b[l]``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "Network":
        return Network([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def init_network(input_dim: int, config: NetworkConfig | None = None,
                 rng: np.random.Generator | None = None) -> Network:
    """Uniform-adaptive initialisation: ``U(-r, r)`` with ``r = sqrt(6 / (fan_in + fan_out))``."""
    config = config or NetworkConfig()
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    sizes = [input_dim, *config.hidden_layer_sizes, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        r = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-r, r, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(weights, biases)


def forward(net: Network, x, mode: str = "infer", rng: np.random.Generator | None = None,
            input_dropout: float = 0.0, hidden_dropout: float = 0.0):
    """Forward pass for one vector or a batch.

    Returns ``(activations, score)``: ``activations[0]`` is the (possibly
    masked) input, ``activations[l]`` the rectified output of hidden layer
    ``l``, and the last entry is the output logit. In ``train`` mode inverted
    dropout masks are drawn from ``rng``; ``infer`` mode applies no masks.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != net.input_dim:
        raise ValueError(f"input has dimension {X.shape[1]}, network expects {net.input_dim}")
    train_mode = mode == "train"
    if train_mode and rng is None:
        raise ValueError("train mode needs a dropout rng")

    def drop(a, ratio):
        if not train_mode or ratio <= 0.0:
            return a
        mask = rng.random(a.shape) >= ratio
        return a * mask / (1.0 - ratio)

    acts = [drop(X, input_dropout)]
    n_hidden = len(net.weights) - 1
    for l in range(n_hidden):
        h = np.maximum(acts[-1] @ net.weights[l] + net.biases[l], 0.0)
        acts.append(drop(h, hidden_dropout))
    logit = (acts[-1] @ net.weights[-1] + net.biases[-1])[:, 0]
    acts.append(logit)
    score = sigmoid(logit)
    if single:
        return [a[0] for a in acts], float(score[0])
    return acts, score


def loss(net: Network, X, y) -> float:
    """Mean binary cross-entropy, computed from logits for stability."""
    acts, _ = forward(net, X)
    z = acts[-1]
    y = np.asarray(y, dtype=float)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def backward(net: Network, acts: Sequence[np.ndarray], y,
             hidden_dropout: float = 0.0) -> list[np.ndarray]:
    """Gradients of the mean cross-entropy w.r.t. ``net.params`` (same order).

    ``acts`` must come from :func:`forward` on a batch. Dropped units are zero
    in the stored activations; pass the ``hidden_dropout`` ratio used in that
    forward pass so the inverted-dropout rescaling is differentiated too.
    """
    keep_scale = 1.0 / (1.0 - hidden_dropout)
    y = np.asarray(y, dtype=float)
    n = len(y)
    delta = ((sigmoid(acts[-1]) - y) / n)[:, None]
    grads_w, grads_b = [None] * len(net.weights), [None] * len(net.weights)
    for l in range(len(net.weights) - 1, -1, -1):
        a_in = acts[l]
        grads_w[l] = a_in.T @ delta
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            # masked units are zero in a_in, which also zeroes their gradient
            delta = (delta @ net.weights[l].T) * (a_in > 0) * keep_scale
    return [g for pair in zip(grads_w, grads_b) for g in pair]


@dataclass
class AdadeltaState:
    rho: float
    epsilon: float
    sq_grad: list[np.ndarray]
    sq_delta: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], rho: float = 0.99, epsilon: float = 1e-8):
        return cls(rho, epsilon, [np.zeros_like(p) for p in params],
                   [np.zeros_like(p) for p in params])


def adadelta_step(state: AdadeltaState, params: Sequence[np.ndarray],
                  grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Apply one ADADELTA update in place and return the parameter deltas."""
    rho, eps = state.rho, state.epsilon
    deltas = []
    for p, g, eg, ed in zip(params, grads, state.sq_grad, state.sq_delta):
        eg *= rho
        eg += (1.0 - rho) * g * g
        dx = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1.0 - rho) * dx * dx
        p += dx
        deltas.append(dx)
    return deltas


@dataclass
class TrainedNetwork:
    network: Network
    net_config: NetworkConfig
    train_config: TrainingConfig
    history: list[float] = field(default_factory=list)
    epoch_selected: int = 0

    @property
    def input_dim(self) -> int:
        return self.network.input_dim

    def to_dict(self) -> dict:
        return {
            "net_config": asdict(self.net_config),
            "train_config": asdict(self.train_config),
            "history": [float(h) for h in self.history],
            "epoch_selected": self.epoch_selected,
            "layers": [{"shape": list(w.shape),
                        "weights": [float(v) for v in w.ravel()],
                        "biases": [float(v) for v in b]}
                       for w, b in zip(self.network.weights, self.network.biases)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedNetwork":
        nc = dict(d["net_config"])
        nc["hidden_layer_sizes"] = tuple(nc["hidden_layer_sizes"])
        weights = [np.array(layer["weights"], dtype=float).reshape(layer["shape"]) for layer in d["layers"]]
        biases = [np.array(layer["biases"], dtype=float) for layer in d["layers"]]
        return cls(Network(weights, biases), NetworkConfig(**nc), TrainingConfig(**d["train_config"]),
                   list(d["history"]), d["epoch_selected"])


def _as_xy(data):
    if hasattr(data, "X"):
        return data.X, data.y
    X, y = data
    return np.asarray(X, dtype=float), np.asarray(y)


def _minibatch_update(net, state, X, y, rows, rng, nc):
    acts, _ = forward(net, X[rows], "train", rng, nc.input_dropout_ratio, nc.hidden_dropout_ratio)
    grads = backward(net, acts, y[rows], nc.hidden_dropout_ratio)
    adadelta_step(state, net.params, grads)


def _epoch_sequential(net, state, X, y, rng, nc, tc):
    order = rng.permutation(len(X))
    for start in range(0, len(X), tc.minibatch_size):
        _minibatch_update(net, state, X, y, order[start:start + tc.minibatch_size], rng, nc)


def _epoch_lock_free(net, state, X, y, rng, nc, tc):
    # Hogwild-style: threads update the shared arrays without locking
    order = rng.permutation(len(X))
    batches = [order[s:s + tc.minibatch_size] for s in range(0, len(X), tc.minibatch_size)]
    seeds = rng.integers(0, 2**63 - 1, size=tc.n_threads)

    def worker(k):
        local_rng = np.random.default_rng(int(seeds[k]))
        for rows in batches[k::tc.n_threads]:
            _minibatch_update(net, state, X, y, rows, local_rng, nc)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(tc.n_threads)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()


def train(train_data, validation_data, net_config: NetworkConfig | None = None,
          train_config: TrainingConfig | None = None) -> TrainedNetwork:
    """Minibatch backpropagation with ADADELTA and AUROC early stopping.

    An epoch counts as an improvement only if its validation AUROC exceeds
    the reference by ``stopping_tolerance * |reference|``; training stops
    after ``stopping_rounds`` consecutive epochs without one. The returned
    weights are those of the epoch with the highest validation AUROC.
    """
    nc = net_config or NetworkConfig()
    tc = train_config or TrainingConfig()
    X, y = _as_xy(train_data)
    Xv, yv = _as_xy(validation_data)
    if len(Xv) == 0:
        raise ValueError("validation set is empty")
    if len(np.unique(y)) < 2:
        raise ValueError("degenerate labels: training data has a single class")
    if Xv.shape[1] != X.shape[1]:
        raise ValueError("training and validation dimensions differ")

    init_seq, loop_seq = np.random.SeedSequence(nc.seed).spawn(2)
    net = init_network(X.shape[1], nc, np.random.default_rng(init_seq))
    result = TrainedNetwork(net.copy(), nc, tc)
    if tc.max_epochs <= 0:
        return result
    state = AdadeltaState.zeros_like(net.params, tc.rho, tc.epsilon)
    rng = np.random.default_rng(loop_seq)
    run_epoch = _epoch_lock_free if tc.parallel else _epoch_sequential
    validation_has_both = len(np.unique(yv)) == 2

    best_auc, reference, stale = -np.inf, None, 0
    for epoch in range(1, tc.max_epochs + 1):
        run_epoch(net, state, X, y, rng, nc, tc)
        scores = forward(net, Xv)[1]
        auc = roc_and_auroc(scores, yv).auroc if validation_has_both else float("nan")
        result.history.append(auc)
        # without a usable metric (single-class validation) keep the latest epoch
        if np.isnan(auc) or auc > best_auc:
            best_auc = auc
            result.network = net.copy()
            result.epoch_selected = epoch
        if reference is None or auc > reference + tc.stopping_tolerance * abs(reference):
            reference, stale = auc, 0
        else:
            stale += 1
        log.debug("epoch %d validation AUROC %.4f", epoch, auc)
        if stale >= tc.stopping_rounds:
            break
    return result


def _network(net) -> Network:
    return net.network if isinstance(net, TrainedNetwork) else net


def predict_scores(net, data) -> np.ndarray:
    """Inference-mode scores P(positive class) for every row."""
    X = data.X if hasattr(data, "X") else np.atleast_2d(np.asarray(data, dtype=float))
    return forward(_network(net), X)[1]


def latent_codes(net, data) -> np.ndarray:
    """Last-hidden-layer activations (inference mode), one row per instance."""
    X = data.X if hasattr(data, "X") else np.atleast_2d(np.asarray(data, dtype=float))
    acts, _ = forward(_network(net), X)
    return acts[-2]


def clone(trained: TrainedNetwork) -> TrainedNetwork:
    return copy.deepcopy(trained)
