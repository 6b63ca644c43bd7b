"""PointNet-lite victim: shared per-point MLP, max-pool over points, MLP head.

Forward and backward are written out in numpy so that input gradients are
exact. Two conventions pin down the backward pass: ReLU'(0) = 0, and a
max-pool tie goes to the lowest point index.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import weights
from .errors import FormatError, NonFiniteLoss, ShapeMismatch
from .geometry import PointCloud

log = logging.getLogger(__name__)

LOSSES = ("cross_entropy", "negated_cross_entropy")


@dataclass
class TrainConfig:
    """Victim training settings.

    Each epoch sees a fresh random subset of `points_per_cloud` points per
    cloud (None: all points). `data_init` standardizes every layer's
    pre-activations on a sample of the training set before the first step.
    """

    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    optimizer: str = "adam"  # or "momentum"
    momentum: float = 0.9
    seed: int = 0
    points_per_cloud: int | None = 256
    data_init: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def data_dependent_init(model, X, logit_scale=0.1):
    """Rescale each layer so its pre-activations on X have zero mean, unit std.

    Without this the max-pooled features of normalized shapes are nearly
    identical and the head starts with almost no signal. The final layer is
    further shrunk by `logit_scale` so initial logits stay small.
    """
    def standardize(W, b, a, axes, scale=1.0):
        mu = a.mean(axis=axes)
        sd = a.std(axis=axes) + 1e-8
        return W / sd * scale, (b - mu) / sd * scale

    point_layers, head_layers = [], []
    h = X
    for W, b in model.point_layers:
        W, b = standardize(W, b, h @ W + b, (0, 1))
        point_layers.append((W, b))
        h = np.maximum(h @ W + b, 0.0)
    g = h.max(axis=1)
    last = len(model.head_layers) - 1
    for i, (W, b) in enumerate(model.head_layers):
        W, b = standardize(W, b, g @ W + b, 0, logit_scale if i == last else 1.0)
        head_layers.append((W, b))
        g = np.maximum(g @ W + b, 0.0)
    return VictimModel(point_layers, head_layers)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class VictimModel:
    def __init__(self, point_layers, head_layers):
        self.point_layers = [(np.asarray(W, float), np.asarray(b, float)) for W, b in point_layers]
        self.head_layers = [(np.asarray(W, float), np.asarray(b, float)) for W, b in head_layers]

    @classmethod
    def init(cls, num_classes, point_widths=(3, 32, 64, 128), head_widths=(128, 64), seed=0):
        if point_widths[-1] != head_widths[0]:
            raise ShapeMismatch("pooled feature width must equal the first head width")
        rng = np.random.default_rng(seed)

        def he(sizes):
            return [
                (rng.standard_normal((a, b)) * np.sqrt(2.0 / a), np.zeros(b))
                for a, b in zip(sizes[:-1], sizes[1:])
            ]

        return cls(he(point_widths), he((*head_widths, num_classes)))

    @property
    def num_classes(self):
        return self.head_layers[-1][0].shape[1]

    @property
    def layers(self):
        return self.point_layers + self.head_layers

    def copy(self):
        return VictimModel(
            [(W.copy(), b.copy()) for W, b in self.point_layers],
            [(W.copy(), b.copy()) for W, b in self.head_layers],
        )

    def _check_input(self, X):
        if self.point_layers[0][0].shape[0] != 3:
            raise ShapeMismatch(f"model input width is {self.point_layers[0][0].shape[0]}, expected 3")
        if X.shape[-1] != 3:
            raise ShapeMismatch(f"points must be 3-vectors, got trailing dim {X.shape[-1]}")

    # -- core passes on a batch X of shape (B, n, 3) ------------------------

    def _forward(self, X):
        self._check_input(X)
        cache = {"point": [], "head": []}
        h = X
        for W, b in self.point_layers:
            a = h @ W + b
            cache["point"].append((h, a))
            h = np.maximum(a, 0.0)
        arg = h.argmax(axis=1)  # (B, C): first maximal point index per channel
        g = np.take_along_axis(h, arg[:, None, :], axis=1)[:, 0, :]
        cache["pool"] = (h.shape, arg)
        last = len(self.head_layers) - 1
        for i, (W, b) in enumerate(self.head_layers):
            a = g @ W + b
            cache["head"].append((g, a))
            g = a if i == last else np.maximum(a, 0.0)
        return g, cache

    def _backward(self, dlogits, cache, want_params=True):
        head_grads, point_grads = [], []
        g = dlogits
        last = len(self.head_layers) - 1
        for i in reversed(range(len(self.head_layers))):
            W, _ = self.head_layers[i]
            inp, a = cache["head"][i]
            if i != last:
                g = g * (a > 0)
            if want_params:
                head_grads.append((inp.T @ g, g.sum(axis=0)))
            g = g @ W.T
        shape, arg = cache["pool"]
        gh = np.zeros(shape)
        B, _, C = shape
        np.add.at(gh, (np.repeat(np.arange(B), C), arg.ravel(), np.tile(np.arange(C), B)), g.ravel())
        g = gh
        for i in reversed(range(len(self.point_layers))):
            W, _ = self.point_layers[i]
            inp, a = cache["point"][i]
            g = g * (a > 0)
            if want_params:
                point_grads.append(
                    (np.einsum("bni,bnj->ij", inp, g), g.sum(axis=(0, 1)))
                )
            g = g @ W.T
        return g, point_grads[::-1], head_grads[::-1]

    # -- public API ----------------------------------------------------------

    def logits(self, points):
        X = _points(points)
        out, _ = self._forward(X[None])
        return out[0]

    def logits_batch(self, X):
        return self._forward(np.asarray(X, dtype=np.float64))[0]

    def predict(self, points):
        return int(np.argmax(self.logits(points)))

    def input_gradient(self, points, y, loss="cross_entropy"):
        """Exact d loss / d points, shape (n, 3)."""
        return self.logits_and_input_gradient(points, y, loss)[1]

    def logits_and_input_gradient(self, points, y, loss="cross_entropy"):
        """(logits, d loss / d points) from a single forward pass."""
        if loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if not 0 <= y < self.num_classes:
            raise ValueError(f"label {y} out of range for {self.num_classes} classes")
        X = _points(points)[None]
        z, cache = self._forward(X)
        dz = np.exp(_log_softmax(z))
        dz[0, y] -= 1.0
        if loss == "negated_cross_entropy":
            dz = -dz
        gx, _, _ = self._backward(dz, cache, want_params=False)
        return z[0], gx[0]

    def loss_and_grads(self, X, y):
        """Mean cross-entropy over a batch and its parameter gradients (per layer (dW, db))."""
        z, cache = self._forward(X)
        logp = _log_softmax(z)
        rows = np.arange(len(y))
        loss = -float(logp[rows, y].mean())
        dz = np.exp(logp)
        dz[rows, y] -= 1.0
        dz /= len(y)
        _, pg, hg = self._backward(dz, cache)
        correct = int((z.argmax(axis=1) == y).sum())
        return loss, pg + hg, correct

    def set_layers(self, layers):
        k = len(self.point_layers)
        self.point_layers = layers[:k]
        self.head_layers = layers[k:]

    # -- persistence ---------------------------------------------------------

    def widths(self):
        point = [self.point_layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.point_layers]
        head = [self.head_layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.head_layers]
        return point, head

    def save(self, path, meta=None):
        point, head = self.widths()
        info = {"point_widths": point, "head_widths": head, "num_classes": self.num_classes}
        info.update(meta or {})
        weights.save(path, self.named_arrays(), role="victim", meta=info)

    def named_arrays(self):
        out = []
        for prefix, layers in (("point", self.point_layers), ("head", self.head_layers)):
            for i, (W, b) in enumerate(layers):
                out += [(f"{prefix}{i}.W", W), (f"{prefix}{i}.b", b)]
        return out

    @classmethod
    def load(cls, path):
        header, arrays = weights.load(path, role="victim")
        return cls.from_header(header, arrays)

    @classmethod
    def from_header(cls, header, arrays):
        meta = header["meta"]
        try:
            point = [(arrays[f"point{i}.W"], arrays[f"point{i}.b"]) for i in range(len(meta["point_widths"]) - 1)]
            head = [(arrays[f"head{i}.W"], arrays[f"head{i}.b"]) for i in range(len(meta["head_widths"]) - 1)]
        except KeyError as exc:
            raise FormatError(f"missing array {exc}") from None
        model = cls(point, head)
        pw, hw = model.widths()
        if pw != meta["point_widths"] or hw != meta["head_widths"] or model.num_classes != meta["num_classes"]:
            raise FormatError("layer shapes disagree with header")
        return model


def _points(points):
    if isinstance(points, PointCloud):
        return points.points
    return np.asarray(points, dtype=np.float64)


def forward(model, cloud):
    return model.logits(cloud)


def input_gradient(model, cloud, loss, y):
    return model.input_gradient(cloud, y, loss)


def accuracy(model, clouds, batch_size=32):
    if not clouds:
        return float("nan")
    correct = 0
    for start in range(0, len(clouds), batch_size):
        chunk = clouds[start : start + batch_size]
        z = model.logits_batch(np.stack([c.points for c in chunk]))
        correct += int((z.argmax(axis=1) == np.array([c.label for c in chunk])).sum())
    return correct / len(clouds)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


def train(model, dataset, cfg=None):
    """Train a copy of `model` on labelled clouds (all with the same point count).

    Returns (trained_model, history) where history holds per-epoch mean loss
    and train accuracy.
    """
    cfg = cfg or TrainConfig()
    labels = np.array([c.label for c in dataset])
    if len(dataset) == 0 or any(c.label is None for c in dataset):
        raise ValueError("every training cloud needs a label")
    if len(np.unique(labels)) < 2:
        raise ValueError("training needs at least two classes")
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError("labels out of range for the model")
    X = np.stack([c.points for c in dataset])
    rng = np.random.default_rng(cfg.seed)
    model = model.copy()
    if cfg.data_init:
        sample = rng.permutation(len(X))[: min(len(X), 100)]
        model = data_dependent_init(model, X[sample])
    n_pts = X.shape[1] if cfg.points_per_cloud is None else min(cfg.points_per_cloud, X.shape[1])
    layers = model.layers
    state1 = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
    state2 = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
    history = TrainHistory()
    t = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        if n_pts < X.shape[1]:
            keep = np.argsort(rng.random((len(X), X.shape[1])), axis=1)[:, :n_pts]
            Xe = np.take_along_axis(X, keep[:, :, None], axis=1)
        else:
            Xe = X
        total, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            # overflow is caught by the finiteness checks below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads, n_ok = model.loss_and_grads(Xe[batch], labels[batch])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"training loss became {loss} in epoch {epoch}")
            total += loss * len(batch)
            correct += n_ok
            t += 1
            new_layers = []
            for i, (param, grad) in enumerate(zip(layers, grads)):
                upd = []
                for k in range(2):
                    if cfg.optimizer == "adam":
                        m = 0.9 * state1[i][k] + 0.1 * grad[k]
                        v = 0.999 * state2[i][k] + 0.001 * grad[k] ** 2
                        step = cfg.lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
                    else:
                        m = cfg.momentum * state1[i][k] + grad[k]
                        v = state2[i][k]
                        step = cfg.lr * m
                    upd.append((m, v, param[k] - step))
                state1[i] = (upd[0][0], upd[1][0])
                state2[i] = (upd[0][1], upd[1][1])
                new_layers.append((upd[0][2], upd[1][2]))
            layers = new_layers
            if not all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in layers):
                raise NonFiniteLoss(f"weights became non-finite in epoch {epoch}")
        model.set_layers(layers)
        history.loss.append(total / len(X))
        history.accuracy.append(correct / len(X))
        log.info("epoch %d loss %.4f acc %.4f", epoch, history.loss[-1], history.accuracy[-1])
    return model, history
