"""Iterative IFGM / PGD attacks and their field-guided variants.

Each iteration takes three steps: a per-point gradient direction, an optional
tilt of that direction toward the shape surface (weighted by how far the
point has already drifted), and a fixed-size move followed by projection
onto the attack budget.
"""

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .geometry import PointCloud

METHODS = ("ifgm", "pgd")
MAGNITUDE_RULES = ("uniform", "gradient")
_ZERO = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters of one attack run.

    `budget` is the per-coordinate bound for PGD and the Frobenius bound on
    the whole displacement for IFGM. `field_sign` selects the field-guided
    variant: +1 toward the surface, -1 away from it, 0 unguided.
    """

    method: str = "ifgm"
    theta: float = 0.5
    field_sign: int = 0
    alpha: float = 0.01
    max_iters: int = 500
    budget: float = 1.0
    seed: int = 0
    stop_on_success: bool = True
    magnitude: str = "uniform"
    renormalize: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.field_sign not in (-1, 0, 1):
            raise ValueError("field_sign must be -1, 0 or +1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.theta >= 0:
            raise ValueError("theta must be >= 0")
        if not self.budget > 0:
            raise ValueError("budget must be positive")
        if self.magnitude not in MAGNITUDE_RULES:
            raise ValueError(f"magnitude must be one of {MAGNITUDE_RULES}")

    @property
    def guided(self):
        return self.field_sign != 0

    @property
    def name(self):
        suffix = {1: "+p2s", -1: "-p2s", 0: ""}[self.field_sign]
        return self.method + suffix

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown AttackConfig keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class AdversarialState:
    clean: np.ndarray
    adv: np.ndarray
    t: int = 0

    def displacement(self):
        return self.adv - self.clean

    def displacement_norms(self):
        d = self.displacement()
        return np.sqrt(np.sum(d * d, axis=1))


@dataclass
class AttackOutcome:
    cloud_id: str | None
    label: int
    clean_pred: int
    adv_points: np.ndarray
    adv_pred: int
    success: bool
    iterations: int
    skipped: bool = False  # clean cloud already misclassified
    metrics: dict = field(default_factory=dict)
    displacement: dict = field(default_factory=dict)  # per-point norm summary

    def record(self):
        """JSON-lines summary (no point coordinates)."""
        return {
            "cloud_id": self.cloud_id,
            "label": self.label,
            "clean_pred": self.clean_pred,
            "adv_pred": self.adv_pred,
            "success": self.success,
            "skipped": self.skipped,
            "iterations": self.iterations,
            "metrics": self.metrics,
            "displacement": self.displacement,
        }


def _row_normalize(v):
    norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    out = np.zeros_like(v)
    nz = norms[:, 0] > _ZERO
    out[nz] = v[nz] / norms[nz]
    return out, nz


def initial_direction(model, state, y):
    """Unit rows along the cross-entropy gradient (the direction that raises
    the loss of the true class); rows with zero gradient stay zero.

    Returns (directions, active) where `active` flags the nonzero rows.
    """
    grad = model.input_gradient(state.adv, y, "cross_entropy")
    return _row_normalize(grad)


def adjust_direction(direction, state, field, theta, sign, active=None, renormalize=True):
    """Tilt each active row by sign * theta * |p'_i - p_i| * F(p'_i)/|F(p'_i)|, then renormalize.

    Rows outside `active` (default: rows with nonzero direction) are left as
    they are, so points the classifier gradient ignores are not moved.
    """
    if sign == 0 or theta == 0 or field is None:
        return direction
    if active is None:
        active = np.any(direction != 0, axis=1)
    coef = sign * theta * state.displacement_norms()
    rows = active & (coef != 0)
    if not rows.any():
        return direction
    f = field.evaluate(state.adv[rows])
    fnorm = np.sqrt(np.sum(f * f, axis=1, keepdims=True))
    ok = fnorm[:, 0] >= _ZERO
    fhat = np.zeros_like(f)
    fhat[ok] = f[ok] / fnorm[ok]
    out = direction.copy()
    tilted = direction[rows] + coef[rows, None] * fhat
    if renormalize:
        tilted, _ = _row_normalize(tilted)
    # a row whose field vanished keeps its exact direction
    out[rows] = np.where(ok[:, None], tilted, direction[rows])
    return out


def project(clean, adv, method, budget):
    delta = adv - clean
    if method == "pgd":
        return clean + np.clip(delta, -budget, budget)
    total = np.sqrt(np.sum(delta * delta))
    if total > budget:
        return clean + delta * (budget / total)
    return adv


def magnitude_step(state, direction, alpha, budget, method, sizes=None):
    """Move each point by its step size along its direction, then project onto the budget."""
    step = alpha if sizes is None else sizes[:, None]
    adv = state.adv + step * direction
    adv = project(state.clean, adv, method, budget)
    return AdversarialState(state.clean, adv, state.t + 1)


def _step_sizes(cfg, grad_rows):
    if cfg.magnitude == "uniform":
        return None
    norms = np.sqrt(np.sum(grad_rows * grad_rows, axis=1))
    top = norms.max()
    return cfg.alpha * norms / top if top > 0 else np.zeros_like(norms)


def random_start(clean, cfg):
    rng = np.random.default_rng(cfg.seed)
    adv = clean + rng.uniform(-cfg.alpha, cfg.alpha, clean.shape)
    return project(clean, adv, cfg.method, cfg.budget)


def run_attack(model, cloud, field=None, cfg=None, trace=None):
    """Untargeted attack on one labelled cloud.

    If `trace` is a list, the adversarial points after every iteration
    (including the random start) are appended to it.
    """
    cfg = cfg or AttackConfig()
    if cfg.guided and field is None:
        raise ValueError("field-guided attack needs a field")
    clean = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    y = int(cloud.label)
    clean_pred = model.predict(clean)
    cloud_id = getattr(cloud, "id", None)
    if clean_pred != y:
        return AttackOutcome(cloud_id, y, clean_pred, clean.copy(), clean_pred, True, 0, skipped=True)

    state = AdversarialState(clean, random_start(clean, cfg), 0)
    if trace is not None:
        trace.append(state.adv.copy())
    while True:
        # one forward pass gives both the current prediction and the next gradient
        logits, grad = model.logits_and_input_gradient(state.adv, y, "cross_entropy")
        pred = int(np.argmax(logits))
        if state.t >= cfg.max_iters or (cfg.stop_on_success and pred != y):
            break
        direction, active = _row_normalize(grad)
        if cfg.guided:
            direction = adjust_direction(direction, state, field, cfg.theta, cfg.field_sign, active, cfg.renormalize)
        state = magnitude_step(state, direction, cfg.alpha, cfg.budget, cfg.method, _step_sizes(cfg, grad))
        if trace is not None:
            trace.append(state.adv.copy())
    norms = state.displacement_norms()
    summary = {"max": float(norms.max()), "mean": float(norms.mean()), "moved": int(np.sum(norms > 0))}
    return AttackOutcome(cloud_id, y, clean_pred, state.adv, pred, pred != y, state.t, displacement=summary)


def _field_job(args):
    from .field import build_field

    cloud, backend, seed, steps = args
    return build_field(cloud, backend, seed, steps)


def _attack_job(args):
    model, cloud, cfg, field, emd_mode = args
    from .metrics import compute_metrics

    outcome = run_attack(model, cloud, field if cfg.guided else None, cfg)
    if outcome.success and not outcome.skipped:
        outcome.metrics = compute_metrics(cloud.points, outcome.adv_points, emd_mode)
    return outcome


def _map(fn, jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def build_fields(clouds, backend="kde", seed=0, steps=2000, threads=1):
    """One field per cloud, seeded from the cloud's position in the list."""
    return _map(_field_job, [(c, backend, seed * 100003 + i, steps) for i, c in enumerate(clouds)], threads)


def attack_clouds(model, clouds, cfg, backend="kde", field_steps=2000, threads=1, emd_mode="approx", fields=None):
    """Attack every cloud; metrics are attached to successful outcomes.

    Per-cloud work is independent and seeded from the cloud's position, so
    the result list (in input order) does not depend on `threads`. Fields
    built once with `build_fields` can be passed in and shared by variants.
    """
    if fields is None:
        fields = build_fields(clouds, backend, cfg.seed, field_steps, threads) if cfg.guided else [None] * len(clouds)
    jobs = [(model, c, cfg, f, emd_mode) for c, f in zip(clouds, fields)]
    return _map(_attack_job, jobs, threads)
