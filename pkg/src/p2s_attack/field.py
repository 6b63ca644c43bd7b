"""Point-to-surface field: the score (gradient of log-density) of a shape's points.

Two backends share one interface. The ``kde`` backend is the closed-form score
of an isotropic Gaussian KDE over the clean cloud. The ``learned`` backend is a
small per-shape MLP fitted by denoising score matching against the KDE score.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import weights
from .errors import NonFiniteLoss, ZeroField
from .geometry import NeighborIndex, PointCloud

# beyond this distance from the reference cloud the field is not trustworthy
RELIABLE_RADIUS = 0.5


def default_bandwidth(points, k=8, factor=2.0):
    """`factor` times the mean distance to the k nearest other points."""
    points = np.asarray(points, dtype=np.float64)
    k = min(k, len(points) - 1)
    if k < 1:
        return 1.0
    _, d = NeighborIndex(points).query(points, k + 1)
    return float(factor * d[:, 1:].mean())


def _as_queries(q):
    q = np.asarray(q, dtype=np.float64)
    return q.reshape(-1, 3), q.ndim == 1


@dataclass(frozen=True)
class ScoreNetSpec:
    """Per-shape score network: q -> [q, sin(qB), cos(qB)] -> MLP -> 3.

    B is a fixed (3, fourier_features) Gaussian matrix with std
    `fourier_scale`, drawn from the training seed; without it a plain
    coordinate MLP cannot follow the field across thin parts (torus tube).
    """

    hidden: tuple = (64, 64, 64)
    activation: str = "tanh"
    fourier_features: int = 32
    fourier_scale: float = 2.0

    def layer_sizes(self):
        return (3 + 2 * self.fourier_features, *self.hidden, 3)


class P2SField:
    """Queryable vector field F(q) = grad_q log Q(q)."""

    def __init__(self, backend, reference, bandwidth, net=None):
        if backend not in ("kde", "learned"):
            raise ValueError(f"unknown backend {backend!r}")
        if not bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        self.backend = backend
        self.reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
        self.bandwidth = float(bandwidth)
        self.net = net
        if backend == "learned" and net is None:
            raise ValueError("learned backend needs a network")

    @classmethod
    def kde(cls, cloud, bandwidth=None):
        points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
        if bandwidth is None:
            bandwidth = default_bandwidth(points)
        return cls("kde", points, bandwidth)

    def _sq_dists(self, q):
        # |q|^2 + |p|^2 - 2 q.p through one matrix product; clipped against rounding below 0
        ref = self.reference
        d2 = np.sum(q * q, axis=1)[:, None] + np.sum(ref * ref, axis=1)[None, :] - 2.0 * (q @ ref.T)
        return np.maximum(d2, 0.0)

    def log_density(self, q):
        q, single = _as_queries(q)
        h2 = self.bandwidth**2
        val = logsumexp(-self._sq_dists(q) / (2 * h2), axis=1)
        val = val - np.log(len(self.reference)) - 1.5 * np.log(2 * np.pi * h2)
        return float(val[0]) if single else val

    def kde_score(self, q):
        q, single = _as_queries(q)
        h2 = self.bandwidth**2
        logits = -self._sq_dists(q) / (2 * h2)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        out = (w @ self.reference - q) / h2
        return out[0] if single else out

    def evaluate(self, q):
        if self.backend == "kde":
            return self.kde_score(q)
        q, single = _as_queries(q)
        # the net predicts the score in units of 1/bandwidth
        out = self.net.forward(q) / self.bandwidth
        return out[0] if single else out

    __call__ = evaluate

    def reliable(self, q):
        """True where q lies within RELIABLE_RADIUS of the reference cloud."""
        q, single = _as_queries(q)
        d, _ = NeighborIndex(self.reference).tree.query(q, k=1)
        ok = d <= RELIABLE_RADIUS
        return bool(ok[0]) if single else ok

    def save(self, path):
        if self.backend != "learned":
            raise ValueError("only learned fields have weights to save")
        meta = {
            "backend": "learned",
            "bandwidth": self.bandwidth,
            "hidden": list(self.net.spec.hidden),
            "activation": self.net.spec.activation,
            "fourier_features": self.net.spec.fourier_features,
            "fourier_scale": self.net.spec.fourier_scale,
        }
        arrays = [("reference", self.reference)] + self.net.named_arrays()
        weights.save(path, arrays, role="field", meta=meta)

    @classmethod
    def load(cls, path):
        header, arrays = weights.load(path, role="field")
        meta = header["meta"]
        spec = ScoreNetSpec(
            tuple(meta["hidden"]), meta["activation"], meta["fourier_features"], meta["fourier_scale"]
        )
        net = ScoreNet.from_arrays(spec, arrays)
        return cls("learned", arrays["reference"], meta["bandwidth"], net=net)


def kde_log_density(field, q):
    return field.log_density(q)


def evaluate(field, q):
    return field.evaluate(q)


def field_step_decreases_distance(field, proxy, q, eps):
    """Does one normalized field step of length eps bring q closer to the surface?"""
    q = np.asarray(q, dtype=np.float64)
    f = field.evaluate(q)
    norm = np.linalg.norm(f)
    if norm < 1e-12:
        raise ZeroField(f"field vanishes at {q.tolist()}")
    return proxy.distance(q + eps * f / norm) < proxy.distance(q)


# --- learned backend --------------------------------------------------------

# (activation, derivative given pre-activation a and output y)
_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, y: 1.0 - y * y),
    "softplus": (lambda a: np.logaddexp(0.0, a), lambda a, y: 0.5 * (1.0 + np.tanh(0.5 * a))),
}


class ScoreNet:
    """Fourier-feature MLP R^3 -> R^3 with hand-written backprop."""

    def __init__(self, spec, frequencies, params):
        self.spec = spec
        self.frequencies = np.asarray(frequencies, dtype=np.float64).reshape(3, spec.fourier_features)
        self.params = params  # list of (W, b)
        self._act, self._dact = _ACTIVATIONS[spec.activation]

    @classmethod
    def init(cls, spec, rng):
        freqs = spec.fourier_scale * rng.standard_normal((3, spec.fourier_features))
        sizes = spec.layer_sizes()
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params.append((rng.uniform(-limit, limit, (fan_in, fan_out)), np.zeros(fan_out)))
        return cls(spec, freqs, params)

    @classmethod
    def from_arrays(cls, spec, arrays):
        n_layers = len(spec.layer_sizes()) - 1
        return cls(spec, arrays["B"], [(arrays[f"W{i}"], arrays[f"b{i}"]) for i in range(n_layers)])

    def named_arrays(self):
        out = [("B", self.frequencies)]
        for i, (W, b) in enumerate(self.params):
            out += [(f"W{i}", W), (f"b{i}", b)]
        return out

    def encode(self, x):
        proj = x @ self.frequencies
        return np.concatenate([x, np.sin(proj), np.cos(proj)], axis=1)

    def forward(self, x, cache=None, encoded=False):
        h = x if encoded else self.encode(x)
        last = len(self.params) - 1
        for i, (W, b) in enumerate(self.params):
            a = h @ W + b
            out = a if i == last else self._act(a)
            if cache is not None:
                cache.append((h, a, out))
            h = out
        return h

    def loss_and_grads(self, features, target):
        """MSE loss and parameter gradients; `features` are already encoded."""
        cache = []
        out = self.forward(features, cache, encoded=True)
        resid = out - target
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        g = 2.0 * resid / len(features)
        grads = [None] * len(self.params)
        for i in reversed(range(len(self.params))):
            W, _ = self.params[i]
            inp, a, y = cache[i]
            if i != len(self.params) - 1:
                g = g * self._dact(a, y)
            grads[i] = (inp.T @ g, g.sum(axis=0))
            g = g @ W.T
        return loss, grads


def train_score_net(
    cloud, spec=None, noise=None, steps=2000, seed=0, batch_size=256, lr=3e-3, bandwidth=None, pool_size=16384
):
    """Fit a per-shape score network by denoising score matching.

    Noisy inputs x = p_i + noise * xi (xi standard normal) are drawn once into
    a pool of `pool_size`; the target at each is the KDE score, scaled by the
    bandwidth so the regression is O(1). Minibatch Adam with cosine-decayed
    learning rate. Deterministic for a fixed seed.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(points) < 64:
        raise ValueError("need at least 64 points to fit a score network")
    spec = spec or ScoreNetSpec()
    kde = P2SField.kde(points, bandwidth)
    h = kde.bandwidth
    noise = h if noise is None else float(noise)
    if not noise > 0:
        raise ValueError("noise scale must be positive")

    rng = np.random.default_rng(seed)
    net = ScoreNet.init(spec, rng)
    idx = rng.integers(0, len(points), pool_size)
    x_pool = points[idx] + noise * rng.standard_normal((pool_size, 3))
    y_pool = h * kde.kde_score(x_pool)
    f_pool = net.encode(x_pool)

    m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.params]
    v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.params]
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    for step in range(steps):
        j = rng.integers(0, pool_size, batch_size)
        loss, grads = net.loss_and_grads(f_pool[j], y_pool[j])
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"score-net loss became {loss} at step {step}")
        rate = lr * 0.5 * (1 + np.cos(np.pi * step / steps))
        c1, c2 = 1 - beta1 ** (step + 1), 1 - beta2 ** (step + 1)
        new_params = []
        for i, (param, grad) in enumerate(zip(net.params, grads)):
            updated = []
            for k in range(2):
                m_k = beta1 * m[i][k] + (1 - beta1) * grad[k]
                v_k = beta2 * v[i][k] + (1 - beta2) * grad[k] ** 2
                updated.append((m_k, v_k, param[k] - rate * (m_k / c1) / (np.sqrt(v_k / c2) + adam_eps)))
            m[i] = (updated[0][0], updated[1][0])
            v[i] = (updated[0][1], updated[1][1])
            new_params.append((updated[0][2], updated[1][2]))
        net.params = new_params
        if not all(np.all(np.isfinite(W)) for W, _ in new_params):
            raise NonFiniteLoss(f"score-net weights became non-finite at step {step}")
    return P2SField("learned", points, h, net=net)


def build_field(cloud, backend="kde", seed=0, steps=2000):
    """Field for one clean cloud: closed-form KDE or a freshly fitted score net."""
    if backend == "kde":
        return P2SField.kde(cloud)
    if backend == "learned":
        return train_score_net(cloud, steps=steps, seed=seed)
    raise ValueError(f"unknown field backend {backend!r}")
