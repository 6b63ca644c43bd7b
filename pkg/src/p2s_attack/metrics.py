"""Imperceptibility metrics and attack success rate.

All values are stored raw. Display scaling (CD x1e4, HD x1e2, Curv and EMD
x1e2) happens only in the report writer.

CD uses squared nearest-neighbour distances, HD unsquared ones. GR and Curv
are surrogates chosen here: GR is the mean relative spread of each point's
k-NN distances, Curv the mean absolute change in local surface variation
against the nearest clean point.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .assignment import auction, hungarian
from .errors import SizeMismatch
from .geometry import NeighborIndex, curvatures

METRIC_NAMES = ("cd", "hd", "l2", "gr", "curv", "emd")
EXACT_EMD_MAX_POINTS = 256


def _arr(P):
    return P.points if hasattr(P, "points") else P


def _nn_dists(src, dst):
    """For each point of src, distance to its nearest point in dst."""
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def chamfer(P, Q):
    P, Q = np.asarray(_arr(P), float), np.asarray(_arr(Q), float)
    return 0.5 * (np.mean(_nn_dists(P, Q) ** 2) + np.mean(_nn_dists(Q, P) ** 2))


def hausdorff(P, Q):
    P, Q = np.asarray(_arr(P), float), np.asarray(_arr(Q), float)
    return float(max(_nn_dists(P, Q).max(), _nn_dists(Q, P).max()))


def l2_norm(P, Q):
    P, Q = np.asarray(_arr(P), float), np.asarray(_arr(Q), float)
    if P.shape != Q.shape:
        raise SizeMismatch(f"l2 needs corresponding clouds, got {P.shape} vs {Q.shape}")
    return float(np.sqrt(np.sum((Q - P) ** 2)))


def pairwise_distances(P, Q):
    return cdist(P, Q)


def emd(P, Q, mode="approx", delta=0.01, return_delta=False):
    """Mean matched distance under an optimal one-to-one matching.

    mode="exact" solves the assignment exactly (n <= 256); mode="approx"
    runs the auction and is certified within a factor (1 + delta). With
    return_delta the certified ratio bound actually reached is returned too.
    """
    P, Q = np.asarray(_arr(P), float), np.asarray(_arr(Q), float)
    if P.shape != Q.shape:
        raise SizeMismatch(f"EMD needs equal-size clouds, got {len(P)} vs {len(Q)}")
    cost = pairwise_distances(P, Q)
    if mode == "exact":
        if len(P) > EXACT_EMD_MAX_POINTS:
            raise ValueError(f"exact EMD is limited to {EXACT_EMD_MAX_POINTS} points; use mode='approx'")
        col = hungarian(cost)
        achieved = 0.0
    elif mode == "approx":
        col, achieved = auction(cost, delta)
    else:
        raise ValueError(f"unknown EMD mode {mode!r}")
    value = float(cost[np.arange(len(P)), col].mean())
    return (value, achieved) if return_delta else value


def curv_metric(P, Q, k=16):
    """Mean |curvature of adv point i - curvature of its nearest clean point|."""
    P, Q = np.asarray(_arr(P), float), np.asarray(_arr(Q), float)
    clean_index = NeighborIndex(P)
    c_clean = curvatures(P, k, clean_index)
    c_adv = curvatures(Q, k)
    nearest, _ = clean_index.query(Q, 1)
    return float(np.mean(np.abs(c_adv - c_clean[nearest[:, 0]])))


def local_irregularity(Q, k=12):
    """Per-point std / mean of distances to the k nearest other points."""
    Q = np.asarray(_arr(Q), float)
    _, d = NeighborIndex(Q).query(Q, k + 1)
    d = d[:, 1:]
    mean = d.mean(axis=1)
    return np.divide(d.std(axis=1), mean, out=np.zeros_like(mean), where=mean > 0)


def gr_metric(Q, k=12):
    return float(local_irregularity(Q, k).mean())


def compute_metrics(clean, adv, emd_mode="approx", curv_k=16, gr_k=12):
    P, Q = np.asarray(_arr(clean), float), np.asarray(_arr(adv), float)
    return {
        "cd": float(chamfer(P, Q)),
        "hd": hausdorff(P, Q),
        "l2": l2_norm(P, Q),
        "gr": gr_metric(Q, gr_k),
        "curv": curv_metric(P, Q, curv_k),
        "emd": emd(P, Q, emd_mode),
    }


@dataclass
class MetricsReport:
    asr: float
    attacked: int
    succeeded: int
    cd: float | None = None
    hd: float | None = None
    l2: float | None = None
    gr: float | None = None
    curv: float | None = None
    emd: float | None = None

    def to_dict(self):
        return asdict(self)


def aggregate(outcomes, clean_set=None, emd_mode="approx"):
    """ASR over attacked clouds; each metric averaged over successful attacks.

    Outcomes flagged `skipped` (clean cloud already misclassified) are left
    out entirely. Missing per-outcome metrics are computed from `clean_set`,
    a mapping cloud id -> clean points. With no successes the metric fields
    are None.
    """
    attacked = [o for o in outcomes if not o.skipped]
    won = [o for o in attacked if o.success]
    rows = []
    for o in won:
        if not o.metrics:
            if clean_set is None:
                raise ValueError(f"outcome {o.cloud_id!r} has no metrics and no clean cloud was given")
            o.metrics = compute_metrics(clean_set[o.cloud_id], o.adv_points, emd_mode)
        rows.append([o.metrics[name] for name in METRIC_NAMES])
    asr = len(won) / len(attacked) if attacked else 0.0
    report = MetricsReport(asr=asr, attacked=len(attacked), succeeded=len(won))
    if rows:
        means = np.mean(np.array(rows, dtype=np.float64), axis=0)
        for name, value in zip(METRIC_NAMES, means):
            setattr(report, name, float(value))
    return report
