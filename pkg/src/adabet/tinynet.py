"""A small dense network with explicit forward/backward, used to exercise
the selection pipeline end to end without any framework dependency.

Everything runs in float64 with seeded numpy RNGs, so equal seeds give
bit-identical parameter trajectories.  The optimizer is SGD with momentum
and decoupled weight decay (decay applied directly to the weights, never
folded into the gradient, and never applied to biases) under a cosine
learning-rate schedule.
"""

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import read_npy, tensor_from_array, write_npy
from .jsonutil import dumps_canonical

ACTIVATIONS = ("relu", "identity")
SYNTHETIC_KINDS = ("blobs", "moons", "circles")


@dataclass
class DenseLayer:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str

    @property
    def param_count(self):
        return self.w.size + self.b.size


@dataclass
class DenseNet:
    layers: list
    seed: int = 0

    @classmethod
    def build(cls, dims, activations=None, seed=0):
        """He-initialized dense net; dims = [in, hidden..., out].

        activations defaults to relu everywhere except an identity output.
        """
        if len(dims) < 2:
            raise DataError("need at least an input and an output dimension")
        if any(d < 1 for d in dims):
            raise DataError("all layer widths must be >= 1")
        n_layers = len(dims) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["identity"]
        if len(activations) != n_layers:
            raise DataError(
                "got %d activations for %d layers" % (len(activations), n_layers)
            )
        for a in activations:
            if a not in ACTIVATIONS:
                raise DataError("unknown activation %r" % (a,))
        rng = np.random.default_rng(seed)
        layers = []
        for k in range(n_layers):
            w = rng.standard_normal((dims[k + 1], dims[k])) * math.sqrt(2.0 / dims[k])
            b = np.zeros(dims[k + 1])
            layers.append(DenseLayer(w, b, activations[k]))
        return cls(layers, seed)

    @property
    def dims(self):
        return [self.layers[0].w.shape[1]] + [l.w.shape[0] for l in self.layers]

    def copy(self):
        return DenseNet(
            [DenseLayer(l.w.copy(), l.b.copy(), l.activation) for l in self.layers],
            self.seed,
        )

    def param_counts(self):
        return [l.param_count for l in self.layers]


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def make_synthetic(kind, n, noise, seed):
    """Deterministic 2-D two-class toy datasets with a 70/30 split.

    blobs: two Gaussian masses at (-2,-2) and (2,2).
    moons: two interleaved half-circles.
    circles: two concentric rings (radius 1 and 2), whose point sets carry a
      genuine loop each.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DataError("unknown dataset kind %r" % (kind,))
    if n < 4:
        raise DataError("need n >= 4 (two points per class), got %d" % n)
    if noise < 0.0:
        raise DataError("noise must be >= 0, got %r" % (noise,))
    rng = np.random.default_rng(seed)
    m0 = n // 2
    m1 = n - m0
    if kind == "blobs":
        x0 = np.array([-2.0, -2.0]) + noise * rng.standard_normal((m0, 2))
        x1 = np.array([2.0, 2.0]) + noise * rng.standard_normal((m1, 2))
    elif kind == "moons":
        t0 = np.linspace(0.0, math.pi, m0)
        t1 = np.linspace(0.0, math.pi, m1)
        x0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        x1 = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
        x0 = x0 + noise * rng.standard_normal(x0.shape)
        x1 = x1 + noise * rng.standard_normal(x1.shape)
    else:  # circles
        t0 = np.arange(m0) * (2.0 * math.pi / m0)
        t1 = np.arange(m1) * (2.0 * math.pi / m1)
        x0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
        x1 = 2.0 * np.stack([np.cos(t1), np.sin(t1)], axis=1)
        x0 = x0 + noise * rng.standard_normal(x0.shape)
        x1 = x1 + noise * rng.standard_normal(x1.shape)
    x = np.concatenate([x0, x1], axis=0)
    y = np.concatenate([np.zeros(m0, dtype=np.int64), np.ones(m1, dtype=np.int64)])
    perm = rng.permutation(n)
    x, y = x[perm], y[perm]
    n_train = int(round(0.7 * n))
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:])


def relabel(data):
    """Swap the two class labels; the geometry stays put."""
    return Dataset(data.x_train, 1 - data.y_train, data.x_test, 1 - data.y_test)


def _check_inputs(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("input batch must be 2-D (rows = samples)")
    if x.shape[0] < 1:
        raise DataError("input batch is empty")
    if x.shape[1] != net.layers[0].w.shape[1]:
        raise DataError(
            "input has %d features, net expects %d" % (x.shape[1], net.layers[0].w.shape[1])
        )
    return x


def forward_capture(net, x):
    """Run the net and keep every layer's post-nonlinearity output.

    Returns (logits, activations); activations[i] belongs to layer i, and
    the last entry is the logits themselves.
    """
    x = _check_inputs(net, x)
    acts = []
    a = x
    for layer in net.layers:
        z = a @ layer.w.T + layer.b
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        acts.append(a)
    return acts[-1], acts


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels, plus
    the gradient with respect to the logits."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise DataError("labels must be 1-D and match the batch size")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DataError("label out of range for %d classes" % logits.shape[1])
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    loss = float(-np.log(probs[np.arange(n), labels]).mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def backward(net, x, labels, frozen=None):
    """Loss and parameter gradients for one batch.

    frozen is an optional per-layer boolean mask; frozen layers still pass
    the signal through but get None instead of gradients.
    """
    x = _check_inputs(net, x)
    if frozen is None:
        frozen = [False] * len(net.layers)
    if len(frozen) != len(net.layers):
        raise DataError("frozen mask must have one entry per layer")
    _, acts = forward_capture(net, x)
    loss, delta = softmax_cross_entropy(acts[-1], labels)
    grads = [None] * len(net.layers)
    for l in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[l]
        prev = acts[l - 1] if l > 0 else x
        if not frozen[l]:
            grads[l] = (delta.T @ prev, delta.sum(axis=0))
        if l > 0:
            delta = delta @ layer.w
            if net.layers[l - 1].activation == "relu":
                delta = delta * (acts[l - 1] > 0.0)
    return loss, grads


def activation_gradients(net, x, labels):
    """Loss and gradients of the batch loss wrt each layer's captured output.

    Entry l matches forward_capture's acts[l] in shape; the gradient is taken
    at the post-activation value, so rescaling an output rescales its entry.
    """
    x = _check_inputs(net, x)
    _, acts = forward_capture(net, x)
    loss, delta = softmax_cross_entropy(acts[-1], labels)
    grads = [None] * len(net.layers)
    grads[-1] = delta
    for l in range(len(net.layers) - 1, 0, -1):
        da = delta @ net.layers[l].w
        grads[l - 1] = da
        delta = da * (acts[l - 1] > 0.0) if net.layers[l - 1].activation == "relu" else da
    return loss, grads


def accuracy(net, x, labels):
    logits, _ = forward_capture(net, x)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    frozen: tuple | None = None  # per-layer mask; None means train everything

    def __post_init__(self):
        if self.lr0 <= 0.0:
            raise DataError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise DataError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise DataError("weight_decay must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("epochs and batch_size must be >= 1")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    test_acc: float
    wall_clock: float


@dataclass(frozen=True)
class TrainReport:
    """Per-epoch trajectory plus the trainable parameter count.

    Wall-clock timings are carried for human inspection but left out of the
    serialized form, which must be identical across equal-seed runs.
    """

    epochs: tuple
    trainable_params: int

    def to_jsonl(self):
        lines = []
        for e in self.epochs:
            lines.append(dumps_canonical({
                "epoch": e.epoch,
                "train_loss": float(e.train_loss),
                "test_acc": float(e.test_acc),
                "trainable_params": self.trainable_params,
            }))
        return "\n".join(lines) + "\n"


def cosine_lr(lr0, step, total_steps):
    """Cosine decay from lr0 toward zero across the whole run."""
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def train(net, data, config):
    """SGD with momentum and decoupled weight decay, in place.

    Decay multiplies the pre-step weights by (1 - lr_t * weight_decay) each
    step, independent of the gradient, and never touches biases.  Frozen
    layers are never read for updates: no gradients, no momentum state, no
    decay, bit-identical before and after.
    """
    frozen = list(config.frozen) if config.frozen is not None else [False] * len(net.layers)
    if len(frozen) != len(net.layers):
        raise DataError("frozen mask must have one entry per layer")
    x_train = np.asarray(data.x_train, dtype=np.float64)
    y_train = np.asarray(data.y_train)
    n = x_train.shape[0]
    if n < 1:
        raise DataError("training set is empty")
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    momentum_w = {l: np.zeros_like(net.layers[l].w)
                  for l in range(len(net.layers)) if not frozen[l]}
    momentum_b = {l: np.zeros_like(net.layers[l].b)
                  for l in range(len(net.layers)) if not frozen[l]}
    rng = np.random.default_rng(config.seed)
    step = 0
    stats = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            batch = perm[s * config.batch_size:(s + 1) * config.batch_size]
            loss, grads = backward(net, x_train[batch], y_train[batch], frozen)
            losses.append(loss)
            lr = cosine_lr(config.lr0, step, total_steps)
            for l, layer in enumerate(net.layers):
                if frozen[l]:
                    continue
                gw, gb = grads[l]
                momentum_w[l] = config.momentum * momentum_w[l] + gw
                momentum_b[l] = config.momentum * momentum_b[l] + gb
                decay = lr * config.weight_decay * layer.w
                layer.w -= lr * momentum_w[l]
                layer.w -= decay
                layer.b -= lr * momentum_b[l]
            step += 1
        acc = accuracy(net, data.x_test, data.y_test)
        stats.append(EpochStats(epoch, float(np.mean(losses)), acc,
                                time.perf_counter() - t0))
    trainable = sum(net.layers[l].param_count for l in range(len(net.layers))
                    if not frozen[l])
    return TrainReport(tuple(stats), trainable)


def train_selective(net, data, selected, config):
    """Train only the selected layer indices (everything else frozen).

    selected may be a manifest (its selected field is used) or an iterable
    of layer indices.  An empty selection performs no training at all.
    """
    indices = getattr(selected, "selected", selected)
    indices = sorted(set(int(i) for i in indices))
    for i in indices:
        if not 0 <= i < len(net.layers):
            raise DataError("selected layer index %d out of range" % i)
    chosen = set(indices)
    frozen = tuple(l not in chosen for l in range(len(net.layers)))
    if all(frozen):
        return TrainReport(tuple(), 0)
    return train(net, data, TrainConfig(
        lr0=config.lr0, momentum=config.momentum, weight_decay=config.weight_decay,
        epochs=config.epochs, batch_size=config.batch_size, seed=config.seed,
        frozen=frozen,
    ))


def save_checkpoint(net, directory):
    """One NPY file per parameter tensor plus a JSON topology record."""
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    topo = {
        "dims": net.dims,
        "activations": [l.activation for l in net.layers],
        "seed": net.seed,
    }
    (path / "net.json").write_text(dumps_canonical(topo) + "\n")
    for k, layer in enumerate(net.layers):
        (path / ("layer%04d_w.npy" % k)).write_bytes(write_npy(tensor_from_array(layer.w)))
        (path / ("layer%04d_b.npy" % k)).write_bytes(write_npy(tensor_from_array(layer.b)))


def load_checkpoint(directory):
    path = Path(directory)
    topo_file = path / "net.json"
    if not topo_file.is_file():
        raise DataError("missing net.json in checkpoint %s" % directory)
    try:
        topo = json.loads(topo_file.read_text())
        dims = [int(d) for d in topo["dims"]]
        activations = list(topo["activations"])
        seed = int(topo["seed"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError("malformed net.json: %s" % exc) from exc
    layers = []
    for k in range(len(dims) - 1):
        wf = path / ("layer%04d_w.npy" % k)
        bf = path / ("layer%04d_b.npy" % k)
        if not wf.is_file() or not bf.is_file():
            raise DataError("checkpoint layer %d is missing its parameter files" % k)
        wt = read_npy(wf.read_bytes())
        bt = read_npy(bf.read_bytes())
        if wt.shape != (dims[k + 1], dims[k]) or bt.shape != (dims[k + 1],):
            raise DataError("checkpoint layer %d shape mismatch against net.json" % k)
        if activations[k] not in ACTIVATIONS:
            raise DataError("unknown activation %r in checkpoint" % (activations[k],))
        layers.append(DenseLayer(wt.data.reshape(wt.shape),
                                 bt.data.reshape(bt.shape), activations[k]))
    return DenseNet(layers, seed)
