"""Saliency evaluation: mean absolute error, maximum F-measure over a
threshold sweep, and the structure measure.

Conventions, fixed here and mirrored by the test oracles:
- thresholds are the ``thresholds`` evenly spaced values k/T in [0, 1), and a
  pixel is foreground when pred is STRICTLY greater than the threshold (so an
  all-zero prediction has zero recall at every threshold);
- any 0/0 ratio in precision, recall, or F collapses to 0;
- structure measure: region statistics use population (N-normalized)
  variance; quadrant weights are each quadrant's share of the foreground;
  degenerate ground truth scores 1 - mean(pred) when empty and the
  object-similarity of the prediction when full; final value clamped to [0, 1].
"""

import csv
import json
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ConfigError, ContractError, ShapeError


@dataclass
class MetricsConfig:
    beta_sq: float = 0.3
    alpha: float = 0.5
    thresholds: int = 256

    def __post_init__(self):
        if self.beta_sq <= 0:
            raise ConfigError(f"beta_sq must be positive, got {self.beta_sq}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.thresholds < 2:
            raise ConfigError(f"thresholds must be >= 2, got {self.thresholds}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown metrics config keys: {unknown}")
        return cls(**d)


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    if pred.min() < 0.0 or pred.max() > 1.0:
        raise ContractError(f"prediction values outside [0, 1]: [{pred.min()}, {pred.max()}]")
    if not np.all((gt == 0.0) | (gt == 1.0)):
        raise ContractError("ground truth must be binary")
    return pred, gt


def mae(pred, gt):
    """Mean absolute difference between the saliency map and the mask."""
    pred, gt = _check_pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def max_f_measure(pred, gt, cfg=None):
    """(max F over thresholds, per-threshold precision, per-threshold recall)."""
    cfg = cfg or MetricsConfig()
    pred, gt = _check_pair(pred, gt)
    pred = pred.reshape(-1)
    gt = gt.reshape(-1)
    n_fg = gt.sum()
    ts = np.arange(cfg.thresholds) / cfg.thresholds
    binary = pred[None, :] > ts[:, None]
    tp = (binary & (gt == 1.0)[None, :]).sum(axis=1).astype(np.float64)
    pp = binary.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pp > 0, tp / pp, 0.0)
        recall = np.where(n_fg > 0, tp / max(n_fg, 1.0), 0.0)
        num = (1.0 + cfg.beta_sq) * precision * recall
        den = cfg.beta_sq * precision + recall
        f = np.where(den > 0, num / den, 0.0)
    return float(f.max()), precision, recall


def _object_similarity(x):
    m = x.mean()
    s = x.std()  # population
    return 2.0 * m / (m * m + 1.0 + 2.0 * s)


def _region_similarity(x, y):
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()  # population
    cov = ((x - mx) * (y - my)).mean()
    num = 4.0 * mx * my * cov
    den = (mx * mx + my * my) * (vx + vy)
    if num == 0.0:
        return 1.0 if den == 0.0 else 0.0
    return num / den


def s_measure(pred, gt, cfg=None):
    """Structure measure: object term + region term, balanced by alpha."""
    cfg = cfg or MetricsConfig()
    pred, gt = _check_pair(pred, gt)
    mu = gt.mean()
    if mu == 0.0:
        return float(np.clip(1.0 - pred.mean(), 0.0, 1.0))
    if mu == 1.0:
        return float(np.clip(_object_similarity(pred), 0.0, 1.0))

    s_obj = mu * _object_similarity(pred[gt == 1.0]) + (1.0 - mu) * _object_similarity(
        1.0 - pred[gt == 0.0]
    )

    rows, cols = np.nonzero(gt)
    cy = int(np.floor(rows.mean() + 0.5))
    cx = int(np.floor(cols.mean() + 0.5))
    total_fg = gt.sum()
    s_reg = 0.0
    for rs, cs in (
        (slice(0, cy + 1), slice(0, cx + 1)),
        (slice(0, cy + 1), slice(cx + 1, None)),
        (slice(cy + 1, None), slice(0, cx + 1)),
        (slice(cy + 1, None), slice(cx + 1, None)),
    ):
        gq = gt[rs, cs]
        if gq.size == 0:
            continue
        weight = gq.sum() / total_fg
        if weight == 0.0:
            continue
        s_reg += weight * _region_similarity(pred[rs, cs], gq)

    s = cfg.alpha * s_obj + (1.0 - cfg.alpha) * s_reg
    return float(np.clip(s, 0.0, 1.0))


# ---------------------------------------------------------------------------
# dataset-level evaluation


@dataclass
class MetricsReport:
    per_sequence: dict  # name -> {"s_measure", "max_f", "mae", "frames"}
    aggregate: dict  # {"s_measure", "max_f", "mae", "sequences"}
    precision: dict = field(default_factory=dict)  # name -> mean curve
    recall: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sequence", "s_measure", "max_f", "mae"])
            for name in sorted(self.per_sequence):
                row = self.per_sequence[name]
                w.writerow([name, f"{row['s_measure']:.6f}", f"{row['max_f']:.6f}", f"{row['mae']:.6f}"])

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(
                {"aggregate": self.aggregate, "per_sequence": self.per_sequence},
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")


def evaluate_sequences(sequences, cfg=None):
    """sequences: iterable of (name, [(pred, gt), ...]).

    Per-frame metrics are averaged within each sequence, then sequence means
    are averaged with equal weight; the result is independent of input order.
    """
    cfg = cfg or MetricsConfig()
    per_sequence = {}
    precision, recall = {}, {}
    for name, frames in sequences:
        if not frames:
            raise ContractError(f"sequence {name!r} has no frames")
        if name in per_sequence:
            raise ContractError(f"duplicate sequence name {name!r}")
        vals = {"mae": [], "max_f": [], "s_measure": []}
        curves_p, curves_r = [], []
        for pred, gt in frames:
            vals["mae"].append(mae(pred, gt))
            f, p, r = max_f_measure(pred, gt, cfg)
            vals["max_f"].append(f)
            curves_p.append(p)
            curves_r.append(r)
            vals["s_measure"].append(s_measure(pred, gt, cfg))
        per_sequence[name] = {k: float(np.mean(v)) for k, v in vals.items()}
        per_sequence[name]["frames"] = len(frames)
        precision[name] = np.mean(curves_p, axis=0)
        recall[name] = np.mean(curves_r, axis=0)
    if not per_sequence:
        raise ContractError("no sequences to evaluate")
    names = sorted(per_sequence)
    aggregate = {
        k: float(np.mean([per_sequence[n][k] for n in names])) for k in ("s_measure", "max_f", "mae")
    }
    aggregate["sequences"] = len(names)
    return MetricsReport(per_sequence=per_sequence, aggregate=aggregate, precision=precision, recall=recall)
