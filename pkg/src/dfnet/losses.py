"""Training losses: the sharpening loss (batch-level F-measure term plus a

weighted MAE term) and a plain cross-entropy baseline.

The F-measure term averages soft precision and recall over the mini-batch
BEFORE combining them, so one fused tape node covers the whole batch; its
gradient is computed analytically in closed form rather than by composing
elementary ops. ``M`` below is always the current batch size (a smaller
final batch contributes with its own M).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError
from .tensor import Tensor, record_custom


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.75      # weight of the MAE term
    beta_sq: float = 0.3   # precision emphasis in the F term
    eps: float = 1e-7      # regularizer in every ratio

    def validate(self) -> None:
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.beta_sq <= 0:
            raise ConfigError(f"beta_sq must be > 0, got {self.beta_sq}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")


@dataclass
class BatchLossReport:
    """One batch's sharpening loss and its components.

    ``loss`` is the differentiable scalar tensor; the floats are the same
    values for logging. l_s equals l_f + lam*l_mae by the identical
    arithmetic path, not merely within tolerance.
    """

    loss: Tensor
    l_s: float
    l_f: float
    l_mae: float
    mean_precision: float
    mean_recall: float


def _as_batch(s, g) -> tuple[np.ndarray, np.ndarray]:
    sd = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)
    gd = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    if sd.shape != gd.shape:
        raise UsageError(f"prediction/target shape mismatch: {sd.shape} vs {gd.shape}")
    if sd.ndim != 4:
        raise UsageError(f"losses take [M,C,H,W] batches, got shape {sd.shape}")
    if sd.shape[0] < 1:
        raise UsageError("empty batch")
    return sd, gd


def precision_term(s, g, eps: float = 1e-7) -> float:
    """Soft precision of one image: sum(s*g) / (sum(s) + eps)."""
    sd = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)
    gd = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    if sd.shape != gd.shape:
        raise UsageError(f"prediction/target shape mismatch: {sd.shape} vs {gd.shape}")
    return float((sd * gd).sum() / (sd.sum() + eps))


def recall_term(s, g, eps: float = 1e-7) -> float:
    """Soft recall of one image: sum(s*g) / (sum(g) + eps)."""
    sd = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)
    gd = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
    if sd.shape != gd.shape:
        raise UsageError(f"prediction/target shape mismatch: {sd.shape} vs {gd.shape}")
    return float((sd * gd).sum() / (gd.sum() + eps))


def _batch_parts(sd: np.ndarray, gd: np.ndarray, cfg: LossConfig):
    """Per-image soft P/R plus the batch F and MAE terms, one arithmetic path."""
    axes = (1, 2, 3)
    sg = (sd * gd).sum(axis=axes)
    ss = sd.sum(axis=axes)
    gg = gd.sum(axis=axes)
    p = sg / (ss + cfg.eps)
    r = sg / (gg + cfg.eps)
    p_bar = p.mean()
    r_bar = r.mean()
    denom = cfg.beta_sq * p_bar + r_bar + cfg.eps
    l_f = 1.0 - (1.0 + cfg.beta_sq) * p_bar * r_bar / denom
    l_mae = np.abs(sd - gd).mean(axis=axes).mean()
    return p_bar, r_bar, denom, l_f, l_mae, ss, gg, p


def f_measure_loss(s, g, cfg: LossConfig = LossConfig()) -> float:
    """Batch F-measure loss: 1 - F(mean precision, mean recall)."""
    cfg.validate()
    sd, gd = _as_batch(s, g)
    _, _, _, l_f, _, _, _, _ = _batch_parts(sd, gd, cfg)
    return float(l_f)


def mae_loss(s, g) -> float:
    """Mean over images of the per-image mean absolute error."""
    sd, gd = _as_batch(s, g)
    return float(np.abs(sd - gd).mean(axis=(1, 2, 3)).mean())


def sharpening_loss(s: Tensor, g, cfg: LossConfig = LossConfig()) -> BatchLossReport:
    """Full training loss L_S = L_F + lam * L_MAE over one batch.

    Returns a report whose ``loss`` tensor participates in backward; the
    gradient with respect to ``s`` is analytic:

        dL_F/ds_mi = [dL_F/dP * (g_mi - P_m)/(sum_m s + eps)
                      + dL_F/dR * g_mi/(sum_m g + eps)] / M
        dL_MAE/ds_mi = sign(s_mi - g_mi) / (M * N)

    with dL_F/dP = -(1+b)R(R+eps)/D^2 and dL_F/dR = -(1+b)P(bP+eps)/D^2,
    D the F denominator, all at the batch means. sign(0) is taken as 0, so
    the gradient is finite everywhere.
    """
    cfg.validate()
    sd, gd = _as_batch(s, g)
    m = sd.shape[0]
    n = sd[0].size
    p_bar, r_bar, denom, l_f, l_mae, ss, gg, _ = _batch_parts(sd, gd, cfg)
    l_s = l_f + cfg.lam * l_mae

    def vjp(gout):
        scale = gout.reshape(())
        one_b = 1.0 + cfg.beta_sq
        d_lf_dp = -one_b * r_bar * (r_bar + cfg.eps) / (denom * denom)
        d_lf_dr = -one_b * p_bar * (cfg.beta_sq * p_bar + cfg.eps) / (denom * denom)
        p_m = ((sd * gd).sum(axis=(1, 2, 3)) / (ss + cfg.eps))[:, None, None, None]
        ss_b = ss[:, None, None, None]
        gg_b = gg[:, None, None, None]
        grad_f = (d_lf_dp * (gd - p_m) / (ss_b + cfg.eps)
                  + d_lf_dr * gd / (gg_b + cfg.eps)) / m
        grad_mae = cfg.lam * np.sign(sd - gd) / (m * n)
        return scale * (grad_f + grad_mae)

    loss = record_custom("sharpening_loss",
                         np.asarray(l_s, dtype=sd.dtype).reshape(1, 1, 1, 1),
                         [(s, vjp)] if isinstance(s, Tensor) else [])
    return BatchLossReport(loss=loss, l_s=float(l_s), l_f=float(l_f),
                           l_mae=float(l_mae), mean_precision=float(p_bar),
                           mean_recall=float(r_bar))


def cross_entropy_loss(s: Tensor, g, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy over all pixels, s clamped to [eps, 1-eps].

    The gradient passes through where the clamp is inactive and is zero
    where the raw value lies outside the clamp range.
    """
    sd, gd = _as_batch(s, g)
    clamped = np.clip(sd, eps, 1.0 - eps)
    total = sd.size
    value = -(gd * np.log(clamped) + (1.0 - gd) * np.log(1.0 - clamped)).mean()

    def vjp(gout):
        scale = gout.reshape(())
        inside = (sd >= eps) & (sd <= 1.0 - eps)
        grad = (-gd / clamped + (1.0 - gd) / (1.0 - clamped)) / total
        return scale * grad * inside

    return record_custom("cross_entropy_loss",
                         np.asarray(value, dtype=sd.dtype).reshape(1, 1, 1, 1),
                         [(s, vjp)] if isinstance(s, Tensor) else [])
