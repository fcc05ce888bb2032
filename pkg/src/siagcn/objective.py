"""Target rendering, the training loss and PCK evaluation."""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

PCK_DELTAS = (0.01, 0.02, 0.03, 0.04, 0.05, 0.06)


def render_gaussian(center, shape, sigma):
    """Unnormalized Gaussian bump with peak 1 at ``center = (x, y)``.

    Centres may lie off the grid; the map then holds the truncated tail.
    """
    return render_maps(np.asarray(center, dtype=np.float64)[None], shape, sigma)[0]


def render_maps(keypoints, shape, sigma):
    """Render one Gaussian per keypoint; ``keypoints[..., :] = (x, y)``."""
    if not sigma > 0:
        raise ConfigError(f"Gaussian sigma must be positive, got {sigma}")
    kp = np.asarray(keypoints, dtype=np.float64)
    h, w = shape
    ys = np.arange(h, dtype=np.float64)
    xs = np.arange(w, dtype=np.float64)
    dx2 = (xs - kp[..., 0, None]) ** 2
    dy2 = (ys - kp[..., 1, None]) ** 2
    return np.exp(-(dy2[..., :, None] + dx2[..., None, :]) / (2.0 * sigma**2))


@dataclass(frozen=True)
class LossConfig:
    """Balancing weight schedule for the preliminary-stage term.

    ``alpha_schedule`` holds ``(epoch, value)`` steps; the weight at a given
    (0-based) epoch is the value of the last step at or before it.
    """

    alpha_schedule: tuple = ((0, 1.0), (12, 0.1))
    stages: int = 1

    def __post_init__(self):
        sched = tuple((int(e), float(a)) for e, a in self.alpha_schedule)
        if not sched or sched[0][0] != 0:
            raise ConfigError("alpha schedule must start at epoch 0")
        if any(b[0] <= a[0] for a, b in zip(sched, sched[1:])):
            raise ConfigError("alpha schedule epochs must be strictly increasing")
        if any(a < 0 for _, a in sched):
            raise ConfigError("alpha must be non-negative")
        object.__setattr__(self, "alpha_schedule", sched)

    def alpha(self, epoch):
        value = self.alpha_schedule[0][1]
        for e, a in self.alpha_schedule:
            if e <= epoch:
                value = a
        return value


def stage_loss(S, Y_star):
    """Sum of squared errors of every preliminary stage against the targets.

    ``S`` has a stage axis right before the node axis: ``(T, K, h, w)`` or
    ``(N, T, K, h, w)``.
    """
    if S is None:
        return 0.0
    S = np.asarray(S, dtype=np.float64)
    Y_star = np.asarray(Y_star, dtype=np.float64)
    if S.ndim != Y_star.ndim + 1 or S.shape[:-4] + S.shape[-3:] != Y_star.shape:
        raise ShapeError(f"stage maps {S.shape} do not match targets {Y_star.shape}")
    return float(((S - np.expand_dims(Y_star, -4)) ** 2).sum())


def total_loss(S, Y_bar, Y_star, cfg, epoch):
    """``alpha(epoch) * L1 + L2`` and its gradient with respect to ``Y_bar``.

    ``S`` comes from a non-learnable source here, so the first term is
    reported but carries no gradient. Leading batch axes are summed over.
    """
    Y_bar = np.asarray(Y_bar, dtype=np.float64)
    Y_star = np.asarray(Y_star, dtype=np.float64)
    if Y_bar.shape != Y_star.shape:
        raise ShapeError(f"output maps {Y_bar.shape} do not match targets {Y_star.shape}")
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    diff = Y_bar - Y_star
    l2 = float((diff**2).sum())
    return cfg.alpha(epoch) * stage_loss(S, Y_star) + l2, 2.0 * diff


def _check_coords(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 2:
        raise ShapeError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt


def pck(pred, gt, delta, s):
    """Fraction of keypoints within ``delta * s`` of the ground truth.

    The boundary counts as correct; a relative slack of 1e-12 absorbs
    rounding in ``delta * s``.
    """
    if not (delta > 0 and s > 0):
        raise ConfigError("delta and s must be positive")
    pred, gt = _check_coords(pred, gt)
    dist = np.hypot(*(pred - gt).T)
    return float(np.mean(dist <= delta * s * (1 + 1e-12)))


def mpck(pred_set, gt_set, deltas=PCK_DELTAS, s=32.0):
    """Dataset PCK per threshold and their unweighted mean.

    Returns ``(mpck, {delta: pck})``. Per-threshold values average the
    per-sample PCK over the dataset.
    """
    pred_set, gt_set = _check_coords(pred_set, gt_set)
    if pred_set.ndim != 3 or pred_set.shape[0] == 0:
        raise ContractError("mPCK needs a non-empty (N, K, 2) prediction set")
    if len(deltas) == 0:
        raise ConfigError("need at least one threshold")
    dist = np.hypot(pred_set[..., 0] - gt_set[..., 0], pred_set[..., 1] - gt_set[..., 1])
    table = {}
    for d in deltas:
        if not d > 0:
            raise ConfigError("thresholds must be positive")
        table[float(d)] = float(np.mean(np.mean(dist <= d * s * (1 + 1e-12), axis=1)))
    return float(np.mean(list(table.values()))), table


def format_report(systems, deltas, header=()):
    """Text table: one row per threshold plus an mPCK row, one column per system.

    ``systems`` maps a system name to ``(mpck, table)`` as returned by
    :func:`mpck`. Values are percentages with two decimals.
    """
    names = list(systems)
    lines = [f"# {h}" for h in header]
    lines.append("delta".ljust(8) + "".join(n.rjust(12) for n in names))
    for d in deltas:
        lines.append(f"{d:<8.2f}" + "".join(f"{100 * systems[n][1][float(d)]:12.2f}" for n in names))
    lines.append("mPCK".ljust(8) + "".join(f"{100 * systems[n][0]:12.2f}" for n in names))
    return "\n".join(lines) + "\n"


def report_json(systems, deltas, meta=None):
    doc = {
        "format": "siagcn-pck-report",
        "version": 1,
        "deltas": [float(d) for d in deltas],
        "meta": meta or {},
        "systems": {
            n: {"mpck": m, "pck": [t[float(d)] for d in deltas]} for n, (m, t) in systems.items()
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
