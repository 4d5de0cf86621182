"""SGD-momentum training loop with a reduce-on-plateau schedule, batched

inference, and the ablation / lambda-sweep experiment drivers.

Determinism contract: given (seed, config, dataset) the parameter
trajectory, history losses, and checkpoints are bit-identical across runs;
only the wall-time column varies. Shuffling and augmentation draw from
fresh per-epoch streams keyed by (seed, epoch), so a resumed run replays
exactly the epochs an uninterrupted run would have seen.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .data import AugmentConfig, augment
from .errors import ConfigError, FormatError, NumericError, TrainingDiverged, UsageError
from .losses import LossConfig, cross_entropy_loss, sharpening_loss
from .metrics import EvalPair, MetricsReport, evaluate_pairs, quantize
from .model import DFNetConfig, DFNetModel, build_model, forward
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

LOSS_KINDS = ("sharpening", "cross_entropy")
HISTORY_HEADER = "epoch,train_loss,lr,seconds"
ABLATION_HEADER = "variant,seed,avgF,wF,maxF,MAE,sharpness"
SWEEP_HEADER = "lambda,avgF,wF,maxF,MAE"

# Table rows: five architecture/attention cuts plus the loss baseline.
ABLATION_VARIANTS = ("full", "without_mag", "without_ami",
                     "without_mag_ami", "without_cas", "cross_entropy")

DEFAULT_LAMBDA_GRID = tuple(0.5 + 0.25 * i for i in range(9))


@dataclass
class OptimState:
    learning_rate: float = 8e-3
    momentum: float = 0.9
    # Per-step cap on the global gradient L2 norm. The soft precision term
    # of the sharpening loss divides by the predicted foreground mass, so a
    # transient near-empty prediction on one image can inject gradients
    # seven orders of magnitude above normal; momentum then compounds them
    # into float32 overflow within a few steps. Healthy runs spike to ~15,
    # so 20 leaves them untouched and only defuses the feedback loop.
    clip_norm: float = 20.0
    velocities: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")


@dataclass
class PlateauSchedule:
    patience: int = 10
    factor: float = 10.0
    best_loss: float = math.inf
    epochs_since_improvement: int = 0


def clip_gradient_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most

    ``max_norm``; returns the pre-clip norm. The squared sum is accumulated
    in float64 so a spiked float32 gradient cannot overflow the norm itself.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.square(g, dtype=np.float64).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def sgd_momentum_step(named_params, grads, state: OptimState) -> None:
    """Classical momentum: v <- momentum*v - lr*g; p <- p + v."""
    for name, p in named_params:
        g = grads.get(name)
        if g is None:
            raise UsageError(f"no gradient for parameter {name}")
        if g.shape != p.shape:
            raise UsageError(f"gradient shape {g.shape} does not match "
                             f"parameter {name} shape {p.shape}")
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.velocities[name] = v
        v *= state.momentum
        v -= state.learning_rate * g
        p.data += v


def schedule_update(schedule: PlateauSchedule, epoch_train_loss: float,
                    state: OptimState) -> bool:
    """Advance the plateau schedule; True when the lr was just divided."""
    if epoch_train_loss < schedule.best_loss:
        schedule.best_loss = epoch_train_loss
        schedule.epochs_since_improvement = 0
        return False
    schedule.epochs_since_improvement += 1
    if schedule.epochs_since_improvement >= schedule.patience:
        state.learning_rate /= schedule.factor
        schedule.epochs_since_improvement = 0
        return True
    return False


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    learning_rate: float  # the rate this epoch trained with
    seconds: float


def history_csv_lines(records) -> list[str]:
    lines = [HISTORY_HEADER]
    for r in records:
        lines.append(f"{r.epoch},{r.train_loss!r},{r.learning_rate!r},"
                     f"{r.seconds:.3f}")
    return lines


def _batch_arrays(samples, indices, aug_rng, augment_cfg, dtype):
    images, masks = [], []
    for i in indices:
        img, msk = augment(samples[i].image, samples[i].mask, aug_rng,
                           augment_cfg)
        images.append(img)
        masks.append(msk)
    x = np.stack(images).astype(dtype)
    g = np.stack(masks)[:, None].astype(dtype)
    return x, g


def train(model: DFNetModel, samples, *, epochs: int = 60,
          batch_size: int = 8, seed: int = 0,
          loss_cfg: LossConfig = LossConfig(),
          loss_kind: str = "sharpening",
          optim: "OptimState | None" = None,
          schedule: "PlateauSchedule | None" = None,
          augment_cfg: AugmentConfig = AugmentConfig(),
          start_epoch: int = 0, log_every: int = 10) -> list[EpochRecord]:
    """Run epochs [start_epoch, epochs) and return their records."""
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss {loss_kind!r}; valid: {LOSS_KINDS}")
    if not samples:
        raise UsageError("training requires at least one sample")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    optim = OptimState() if optim is None else optim
    schedule = PlateauSchedule() if schedule is None else schedule
    optim.validate()
    loss_cfg.validate()
    dtype = model.dtype
    params = list(model.named_parameters())
    records = []
    for epoch in range(start_epoch, epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng(
            np.random.SeedSequence([seed, epoch, 0])).permutation(len(samples))
        aug_rng = np.random.default_rng(
            np.random.SeedSequence([seed, epoch, 1]))
        batch_losses = []
        for lo in range(0, len(order), batch_size):
            x, g = _batch_arrays(samples, order[lo:lo + batch_size],
                                 aug_rng, augment_cfg, dtype)
            try:
                with Tape() as tape:
                    pred = forward(model, Tensor(x))
                    if loss_kind == "sharpening":
                        loss = sharpening_loss(pred, g, loss_cfg).loss
                    else:
                        loss = cross_entropy_loss(pred, g)
                backward(tape, loss)
            except NumericError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss")
            grads = {n: p.grad for n, p in params}
            clip_gradient_norm(grads, optim.clip_norm)
            sgd_momentum_step(params, grads, optim)
            batch_losses.append(value)
        epoch_loss = sum(batch_losses) / len(batch_losses)
        lr_used = optim.learning_rate
        dropped = schedule_update(schedule, epoch_loss, optim)
        records.append(EpochRecord(epoch, epoch_loss, lr_used,
                                   time.perf_counter() - t0))
        if dropped:
            log.info("epoch %d: loss plateaued, lr now %g",
                     epoch, optim.learning_rate)
        if log_every and (epoch % log_every == 0 or epoch == epochs - 1):
            log.info("epoch %d/%d: loss %.5f lr %g",
                     epoch, epochs, epoch_loss, lr_used)
    return records


# ---------------------------------------------------------------------------
# training state persistence (DFNC container underneath)


def save_training_state(path, model: DFNetModel, optim: OptimState,
                        schedule: PlateauSchedule, next_epoch: int) -> None:
    tensors = [(f"param.{name}", p.data) for name, p in model.named_parameters()]
    for name, p in model.named_parameters():
        v = optim.velocities.get(name)
        tensors.append((f"velocity.{name}",
                        np.zeros_like(p.data) if v is None else v))
    scalars = {"learning_rate": optim.learning_rate,
               "momentum": optim.momentum,
               "clip_norm": optim.clip_norm,
               "best_loss": schedule.best_loss,
               "epochs_since_improvement": schedule.epochs_since_improvement,
               "patience": schedule.patience,
               "factor": schedule.factor,
               "next_epoch": next_epoch}
    tensors.extend((f"meta.{key}", np.array([float(v)]))
                   for key, v in scalars.items())
    save_tensors(path, tensors)


def load_training_state(path, model: DFNetModel):
    """Restore parameters into ``model``; returns (optim, schedule, next_epoch)."""
    tensors = load_tensors(path)
    params = {}
    velocities = {}
    meta = {}
    for name, arr in tensors.items():
        group, _, rest = name.partition(".")
        if group == "param":
            params[rest] = arr
        elif group == "velocity":
            velocities[rest] = arr
        elif group == "meta":
            meta[rest] = float(arr.reshape(-1)[0])
        else:
            raise FormatError(f"unexpected tensor {name!r} in training state")
    model.load_parameters(params)
    expected = {name for name, _ in model.named_parameters()}
    if set(velocities) != expected:
        raise FormatError("velocity tensors do not match model parameters")
    needed = {"learning_rate", "momentum", "clip_norm", "best_loss",
              "epochs_since_improvement", "patience", "factor", "next_epoch"}
    if not needed <= set(meta):
        raise FormatError(f"missing metadata: {sorted(needed - set(meta))}")
    optim = OptimState(learning_rate=meta["learning_rate"],
                       momentum=meta["momentum"],
                       clip_norm=meta["clip_norm"], velocities=velocities)
    schedule = PlateauSchedule(
        patience=int(meta["patience"]), factor=meta["factor"],
        best_loss=meta["best_loss"],
        epochs_since_improvement=int(meta["epochs_since_improvement"]))
    return optim, schedule, int(meta["next_epoch"])


# ---------------------------------------------------------------------------
# inference and experiment drivers


def predict_maps(model: DFNetModel, samples, batch_size: int = 32) -> list:
    """Saliency maps for each sample, as float64 (H, W) arrays."""
    maps = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        x = np.stack([s.image for s in chunk]).astype(model.dtype)
        out = forward(model, Tensor(x))
        maps.extend(np.asarray(out.data[j, 0], dtype=np.float64)
                    for j in range(len(chunk)))
    return maps


def sharpness(maps) -> float:
    """Mean over maps of mean |2s - 1| on 8-bit-quantized values: 1 for a

    fully saturated map, 0 for a map stuck at 0.5.
    """
    maps = list(maps)
    if not maps:
        raise UsageError("sharpness requires at least one map")
    vals = [float(np.abs(2.0 * (quantize(m) / 255.0) - 1.0).mean())
            for m in maps]
    return sum(vals) / len(vals)


def evaluate_model(model: DFNetModel, samples,
                   batch_size: int = 32) -> "tuple[MetricsReport, float]":
    maps = predict_maps(model, samples, batch_size)
    pairs = [EvalPair.from_arrays(m, s.mask, name=s.name)
             for m, s in zip(maps, samples)]
    return evaluate_pairs(pairs), sharpness(maps)


@dataclass
class AblationRow:
    variant: str
    seed: int
    avg_f: float
    weighted_f: float
    max_f: float
    mae: float
    sharpness: float


@dataclass
class SweepRow:
    lam: float
    avg_f: float
    weighted_f: float
    max_f: float
    mae: float


def ablation_csv_lines(rows) -> list[str]:
    lines = [ABLATION_HEADER]
    for r in rows:
        lines.append(f"{r.variant},{r.seed},{r.avg_f!r},{r.weighted_f!r},"
                     f"{r.max_f!r},{r.mae!r},{r.sharpness!r}")
    return lines


def sweep_csv_lines(rows) -> list[str]:
    lines = [SWEEP_HEADER]
    for r in rows:
        lines.append(f"{r.lam!r},{r.avg_f!r},{r.weighted_f!r},{r.max_f!r},"
                     f"{r.mae!r}")
    return lines


def _default_experiment_config() -> DFNetConfig:
    return DFNetConfig(dtype="float32")


def _train_and_score(arch_variant, loss_kind, train_samples, test_samples,
                     base_config, seed, loss_cfg, epochs, batch_size,
                     augment_cfg, learning_rate, momentum, clip_norm):
    config = replace(base_config, variant=arch_variant)
    model = build_model(config, seed=seed)
    optim = OptimState(learning_rate=learning_rate, momentum=momentum,
                       clip_norm=clip_norm)
    train(model, train_samples, epochs=epochs, batch_size=batch_size,
          seed=seed, loss_cfg=loss_cfg, loss_kind=loss_kind, optim=optim,
          schedule=PlateauSchedule(), augment_cfg=augment_cfg, log_every=0)
    return evaluate_model(model, test_samples)


def run_ablation(train_samples, test_samples, *,
                 variants=ABLATION_VARIANTS, seeds=(0, 1, 2),
                 base_config: "DFNetConfig | None" = None,
                 loss_cfg: LossConfig = LossConfig(),
                 epochs: int = 60, batch_size: int = 8,
                 augment_cfg: AugmentConfig = AugmentConfig(),
                 learning_rate: float = 8e-3,
                 momentum: float = 0.9,
                 clip_norm: float = 20.0) -> list[AblationRow]:
    """Train every variant at every seed on one dataset; rows in input order.

    "cross_entropy" is the full architecture under the baseline loss; the
    other names are architecture cuts under the sharpening loss.
    """
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant names {unknown}; valid: "
                          f"{list(ABLATION_VARIANTS)}")
    base_config = base_config or _default_experiment_config()
    rows = []
    for name in variants:
        arch = "full" if name == "cross_entropy" else name
        loss_kind = "cross_entropy" if name == "cross_entropy" else "sharpening"
        for seed in seeds:
            report, sharp = _train_and_score(
                arch, loss_kind, train_samples, test_samples, base_config,
                seed, loss_cfg, epochs, batch_size, augment_cfg,
                learning_rate, momentum, clip_norm)
            rows.append(AblationRow(variant=name, seed=seed,
                                    avg_f=report.avg_f,
                                    weighted_f=report.weighted_f,
                                    max_f=report.max_f, mae=report.mae,
                                    sharpness=sharp))
            log.info("ablation %s seed %d: avgF %.4f wF %.4f maxF %.4f "
                     "MAE %.4f sharpness %.4f", name, seed, report.avg_f,
                     report.weighted_f, report.max_f, report.mae, sharp)
    return rows


def run_lambda_sweep(train_samples, test_samples, *,
                     values=DEFAULT_LAMBDA_GRID, seed: int = 0,
                     base_config: "DFNetConfig | None" = None,
                     loss_cfg: LossConfig = LossConfig(),
                     epochs: int = 60, batch_size: int = 8,
                     augment_cfg: AugmentConfig = AugmentConfig(),
                     learning_rate: float = 8e-3,
                     momentum: float = 0.9,
                     clip_norm: float = 20.0) -> list[SweepRow]:
    """One full-model training per MAE weight; rows in input order."""
    values = list(values)
    if not values:
        raise ConfigError("lambda sweep needs at least one value")
    base_config = base_config or _default_experiment_config()
    rows = []
    for lam in values:
        report, _ = _train_and_score(
            "full", "sharpening", train_samples, test_samples, base_config,
            seed, replace(loss_cfg, lam=lam), epochs, batch_size,
            augment_cfg, learning_rate, momentum, clip_norm)
        rows.append(SweepRow(lam=lam, avg_f=report.avg_f,
                             weighted_f=report.weighted_f,
                             max_f=report.max_f, mae=report.mae))
        log.info("lambda %.2f: avgF %.4f MAE %.4f", lam, report.avg_f,
                 report.mae)
    return rows
