"""Saliency evaluation: PR/F curves over 257 thresholds, adaptive-threshold

F, maximum F, weighted F, and MAE, aggregated over image datasets.

Thresholding convention everywhere: a pixel is salient at level t iff its
8-bit quantized value (round-half-up of 255*s) is >= t, for t = 0..256.
t=0 marks everything salient, t=256 nothing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import UsageError
from .pngio import read_binary_mask, read_grayscale

log = logging.getLogger(__name__)

N_THRESHOLDS = 257
DEFAULT_BETA_SQ = 0.3


@dataclass
class EvalPair:
    """One prediction/ground-truth pair, both (H, W)."""

    prediction: np.ndarray
    ground_truth: np.ndarray
    name: str = ""

    @staticmethod
    def from_arrays(prediction, ground_truth, name: str = "") -> "EvalPair":
        pred = np.asarray(prediction, dtype=np.float64)
        gt = np.asarray(ground_truth)
        if pred.ndim != 2:
            raise UsageError(f"predictions are 2-D maps, got shape {pred.shape}")
        if pred.shape != gt.shape:
            raise UsageError(
                f"prediction/mask shape mismatch: {pred.shape} vs {gt.shape}")
        if pred.size and (pred.min() < 0.0 or pred.max() > 1.0):
            raise UsageError("prediction values must lie in [0, 1]")
        if gt.dtype != bool:
            levels = np.unique(gt)
            if not np.all(np.isin(levels, (0, 1))):
                raise UsageError("ground truth must be binary")
            gt = gt.astype(bool)
        return EvalPair(prediction=pred, ground_truth=gt, name=name)


@dataclass
class Curve:
    """Dataset-mean precision/recall/F at each of the 257 thresholds."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f_measure: np.ndarray


@dataclass
class MetricsReport:
    avg_f: float
    weighted_f: float
    max_f: float
    mae: float
    pr_curve: Curve
    f_curve: Curve
    n_images: int


def quantize(s: np.ndarray) -> np.ndarray:
    """8-bit levels of a [0,1] map, rounding halves up."""
    return np.floor(255.0 * np.asarray(s, dtype=np.float64) + 0.5).astype(np.int64)


def f_measure(precision, recall, beta_sq: float = DEFAULT_BETA_SQ):
    """F combination of precision and recall; 0 wherever both are 0."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    den = beta_sq * p + r
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(den > 0.0, (1.0 + beta_sq) * p * r / den, 0.0)
    if f.ndim == 0:
        return float(f)
    return f


def _require_pairs(pairs) -> list:
    pairs = list(pairs)
    if not pairs:
        raise UsageError("metric requires at least one prediction/mask pair")
    return pairs


def _counts_from_level(hist: np.ndarray) -> np.ndarray:
    # counts[t] = number of pixels with quantized level >= t, t = 0..256
    return np.concatenate([np.cumsum(hist[::-1])[::-1], [0]])


def pr_curve(pairs) -> Curve:
    """Mean per-image precision and recall at every threshold, then F.

    Images where a threshold selects no pixels contribute precision 1 there;
    an all-background ground truth contributes recall 1 everywhere.
    """
    pairs = _require_pairs(pairs)
    precision_sum = np.zeros(N_THRESHOLDS)
    recall_sum = np.zeros(N_THRESHOLDS)
    for pair in pairs:
        q = quantize(pair.prediction)
        gt = pair.ground_truth
        hist_all = np.bincount(q.ravel(), minlength=256)
        hist_fg = np.bincount(q[gt], minlength=256)
        predicted = _counts_from_level(hist_all)
        true_pos = _counts_from_level(hist_fg)
        with np.errstate(divide="ignore", invalid="ignore"):
            precision_sum += np.where(predicted > 0, true_pos / predicted, 1.0)
        n_fg = int(gt.sum())
        recall_sum += true_pos / n_fg if n_fg else np.ones(N_THRESHOLDS)
    n = len(pairs)
    precision = precision_sum / n
    recall = recall_sum / n
    return Curve(thresholds=np.arange(N_THRESHOLDS, dtype=np.int64),
                 precision=precision, recall=recall,
                 f_measure=f_measure(precision, recall))


def avg_f(pairs) -> float:
    """Mean over images of F at the adaptive threshold min(2*mean(S), 1)."""
    pairs = _require_pairs(pairs)
    scores = []
    for pair in pairs:
        s = pair.prediction
        gt = pair.ground_truth
        tau = min(2.0 * float(s.mean()), 1.0)
        pred = s > tau
        tp = int((pred & gt).sum())
        n_pred = int(pred.sum())
        n_gt = int(gt.sum())
        precision = tp / n_pred if n_pred else 1.0
        recall = tp / n_gt if n_gt else 1.0
        scores.append(f_measure(precision, recall))
    return sum(scores) / len(scores)


def max_f(curve: Curve) -> float:
    return float(curve.f_measure.max())


def mae(pairs) -> float:
    """Mean over images of the mean absolute pixel difference."""
    pairs = _require_pairs(pairs)
    vals = [float(np.abs(p.prediction - p.ground_truth.astype(np.float64)).mean())
            for p in pairs]
    return sum(vals) / len(vals)


# 7x7 Gaussian used to smooth the propagated error field.
def _gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    half = size // 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1]
    k = np.exp(-(yy ** 2 + xx ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


_SMOOTHING_KERNEL = _gaussian_kernel()
_DECAY_ALPHA = np.log(0.5) / 5.0


def _nearest_foreground(gt: np.ndarray):
    """Distance to, and coordinates of, each pixel's nearest foreground pixel.

    Ties go to the smallest (row, col). Works in row chunks so the pixel x
    foreground distance table stays small.
    """
    h, w = gt.shape
    fy, fx = np.nonzero(gt)
    dist = np.empty((h, w))
    near_y = np.empty((h, w), dtype=np.int64)
    near_x = np.empty((h, w), dtype=np.int64)
    xs = np.arange(w, dtype=np.int64)
    chunk = max(1, int(1_500_000 // max(1, w * fy.size)))
    for y0 in range(0, h, chunk):
        ys = np.arange(y0, min(y0 + chunk, h), dtype=np.int64)
        d2 = ((ys[:, None, None] - fy[None, None, :]) ** 2
              + (xs[None, :, None] - fx[None, None, :]) ** 2)
        best = np.argmin(d2, axis=2)
        dist[ys] = np.sqrt(np.take_along_axis(d2, best[..., None], axis=2)[..., 0])
        near_y[ys] = fy[best]
        near_x[ys] = fx[best]
    return dist, near_y, near_x


def _weighted_f_single(pred: np.ndarray, gt: np.ndarray) -> "float | None":
    """Weighted F of one image; None when the ground truth is all background.

    Background pixels take on the error of their nearest foreground pixel,
    the field is smoothed with a 7x7 sigma-5 Gaussian, foreground pixels
    keep the smaller of raw and smoothed error, and background errors decay
    with distance; weighted TP/FP then give precision/recall combined with
    beta_sq = 1.
    """
    if not gt.any():
        return None
    eps = float(np.spacing(1))
    gt_f = gt.astype(np.float64)
    err = np.abs(pred - gt_f)
    dist, near_y, near_x = _nearest_foreground(gt)
    bg = ~gt
    propagated = err.copy()
    propagated[bg] = err[near_y[bg], near_x[bg]]
    smoothed = ndimage.convolve(propagated, _SMOOTHING_KERNEL,
                                mode="constant", cval=0.0)
    combined = np.where(gt & (smoothed < err), smoothed, err)
    weight = np.where(bg, 2.0 - np.exp(_DECAY_ALPHA * dist), 1.0)
    weighted = combined * weight
    n_fg = int(gt.sum())
    fg_err = float(weighted[gt].sum())
    bg_err = float(weighted[bg].sum())
    tp_w = n_fg - fg_err
    recall = 1.0 - fg_err / n_fg
    precision = tp_w / (tp_w + bg_err + eps)
    return 2.0 * recall * precision / (recall + precision + eps)


def weighted_f(pairs) -> float:
    """Mean weighted F over images; all-background masks are skipped."""
    pairs = _require_pairs(pairs)
    scores = []
    for pair in pairs:
        score = _weighted_f_single(pair.prediction, pair.ground_truth)
        if score is None:
            log.warning("weighted F: skipping %s (ground truth has no "
                        "foreground)", pair.name or "unnamed pair")
            continue
        scores.append(score)
    if not scores:
        raise UsageError("weighted F: every ground truth was all background")
    return sum(scores) / len(scores)


def evaluate_pairs(pairs) -> MetricsReport:
    """All metrics over a dataset.

    Predictions are quantized to 8-bit levels up front, so evaluating maps
    straight from memory equals evaluating the PNGs written from them.
    """
    pairs = _require_pairs(pairs)
    pairs = [EvalPair(prediction=quantize(p.prediction) / 255.0,
                      ground_truth=p.ground_truth, name=p.name)
             for p in pairs]
    curve = pr_curve(pairs)
    return MetricsReport(avg_f=avg_f(pairs),
                         weighted_f=weighted_f(pairs),
                         max_f=max_f(curve),
                         mae=mae(pairs),
                         pr_curve=curve,
                         f_curve=curve,
                         n_images=len(pairs))


# ---------------------------------------------------------------------------
# serialization


def curve_csv_lines(curve: Curve) -> list[str]:
    lines = ["threshold,precision,recall,f_measure"]
    for t, p, r, f in zip(curve.thresholds, curve.precision,
                          curve.recall, curve.f_measure):
        lines.append(f"{int(t)},{float(p)!r},{float(r)!r},{float(f)!r}")
    return lines


def write_curve_csv(curve: Curve, path) -> None:
    Path(path).write_text("\n".join(curve_csv_lines(curve)) + "\n")


def format_report(report: MetricsReport) -> str:
    lines = [f"n_images={report.n_images}",
             f"avg_f={report.avg_f!r}",
             f"weighted_f={report.weighted_f!r}",
             f"max_f={report.max_f!r}",
             f"mae={report.mae!r}"]
    return "\n".join(lines) + "\n"


def load_eval_pairs(pred_dir, gt_dir) -> list[EvalPair]:
    """Pair up PNGs from two directories by filename stem.

    Unmatched files are skipped with a warning; no matches at all is a
    usage error.
    """
    pred_dir = Path(pred_dir)
    gt_dir = Path(gt_dir)
    preds = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {p.stem: p for p in sorted(gt_dir.glob("*.png"))}
    for stem in sorted(set(preds) ^ set(gts)):
        log.warning("eval: no %s counterpart for %s",
                    "mask" if stem in preds else "prediction", stem)
    common = sorted(set(preds) & set(gts))
    if not common:
        raise UsageError(
            f"no prediction/mask pairs between {pred_dir} and {gt_dir}")
    return [EvalPair.from_arrays(read_grayscale(preds[stem]),
                                 read_binary_mask(gts[stem]), name=stem)
            for stem in common]
