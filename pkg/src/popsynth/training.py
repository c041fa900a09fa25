"""Training loops: focal+KL pretraining and marginal-targeted latent fine-tuning.

Both loops use the Lion optimizer (sign of an interpolated momentum) with a
two-phase learning-rate schedule: constant until ``decay_start_epoch``, then
exponential decay that lands exactly on ``min_lr`` at the final epoch.

Fine-tuning freezes the whole model: the decoder runs its batch norms in eval
mode (running statistics) and gradients reach only the trainable latent
matrix, one row per target household.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .losses import (
    FocalParams,
    dbce,
    focal_loss,
    latent_kl,
    marginal_rmse_loss,
)
from .schema import EncodedMatrix, TargetMarginals

LATENT_MAGIC = b"PSLAT01\n"
LATENT_VERSION = 1

PRETRAIN_HISTORY_COLUMNS = ("epoch", "lr", "focal", "latent_kl", "total")
FINETUNE_HISTORY_COLUMNS = ("epoch", "lr", "marginal_rmse", "dbce", "norm_kl", "total")


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4000
    initial_lr: float = 1e-3
    min_lr: float = 1e-4
    decay_start_epoch: int = 1000
    batch_size: int | None = None  # None: full batch (dataset size)
    seed: int = 0
    reparam_mode: str = nn.REPARAM_PAPER_LITERAL
    kl_weight: float = 1.0
    focal_alpha: float | None = None  # None: fraction of zeros in the data
    focal_gamma: float = 2.0
    w_marginal: float = 1.0
    w_dbce: float = 1.0
    w_normkl: float = 0.1
    softmin_temperature: float = 1.0
    dbce_subsample: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.initial_lr <= 0 or self.min_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.min_lr > self.initial_lr:
            raise ValueError("min_lr cannot exceed initial_lr")
        if self.decay_start_epoch < 0:
            raise ValueError("decay_start_epoch must be >= 0")
        if self.reparam_mode not in nn.REPARAM_MODES:
            raise ValueError(f"unknown reparameterisation mode {self.reparam_mode!r}")


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Constant, then exponential decay hitting min_lr exactly at the last epoch."""
    if epoch < 0 or epoch >= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    last = config.epochs - 1
    if epoch <= config.decay_start_epoch or last <= config.decay_start_epoch:
        return config.initial_lr
    frac = (epoch - config.decay_start_epoch) / (last - config.decay_start_epoch)
    lr = config.initial_lr * (config.min_lr / config.initial_lr) ** frac
    return max(lr, config.min_lr)


class Lion:
    """Sign-momentum optimizer.

    update direction: c = beta1 * m + (1 - beta1) * g
    parameter step:   p <- p - lr * (sign(c) + weight_decay * p)
    momentum:         m <- beta2 * m + (1 - beta2) * g
    """

    def __init__(
        self,
        params: list[nn.Param],
        beta1: float = 0.9,
        beta2: float = 0.99,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.weight_decay = weight_decay
        self.momenta = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float) -> None:
        b1, b2, wd = self.beta1, self.beta2, self.weight_decay
        for p, m in zip(self.params, self.momenta):
            c = b1 * m + (1 - b1) * p.grad
            p.value -= lr * (np.sign(c) + wd * p.value)
            m *= b2
            m += (1 - b2) * p.grad


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _assert_finite(value: float, epoch: int, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(f"{what} became non-finite at epoch {epoch}")


@dataclass
class PretrainResult:
    history: list[tuple]
    focal_alpha: float


def pretrain(model, data: EncodedMatrix, config: TrainConfig) -> PretrainResult:
    """Fit encoder and decoder to the microdata with focal reconstruction
    plus KL regularisation; fresh noise per epoch from a per-epoch stream."""
    if data.schema_fingerprint != model.schema_fingerprint:
        raise ValueError("encoded data does not match the model's schema")
    x = np.asarray(data.values, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("pretraining needs at least 2 rows")
    alpha = config.focal_alpha
    if alpha is None:
        alpha = float(1.0 - x.mean())
    focal = FocalParams(alpha=alpha, gamma=config.focal_gamma)
    batch = n if config.batch_size is None else min(config.batch_size, n)
    if batch < 2:
        raise ValueError("batch size must be >= 2")

    opt = Lion(model.parameters())
    history = []
    for epoch in range(config.epochs):
        rng = _epoch_rng(config.seed, epoch)
        order = np.arange(n) if batch == n else rng.permutation(n)
        lr = lr_schedule(epoch, config)
        fl_sum = kl_sum = 0.0
        n_batches = 0
        for start in range(0, n - batch + 1, batch):
            xb = x[order[start : start + batch]]
            model.zero_grads()
            mu, logsig = model.encode(xb, train=True)
            noise = rng.standard_normal(mu.shape)
            z = nn.reparameterize(mu, logsig, noise, config.reparam_mode)
            probs = model.decode(z, train=True)
            fl, dprobs = focal_loss(probs, xb, focal)
            kl, dmu_kl, dls_kl = latent_kl(mu, logsig)
            dz = model.decode_backward(dprobs)
            dmu, dls = nn.reparameterize_backward(dz, logsig, noise, config.reparam_mode)
            model.encode_backward(
                dmu + config.kl_weight * dmu_kl, dls + config.kl_weight * dls_kl
            )
            opt.step(lr)
            fl_sum += fl
            kl_sum += kl
            n_batches += 1
        fl_mean = fl_sum / n_batches
        kl_mean = kl_sum / n_batches
        total = fl_mean + config.kl_weight * kl_mean
        _assert_finite(total, epoch, "pretraining loss")
        history.append((epoch, lr, fl_mean, kl_mean, total))
    return PretrainResult(history=history, focal_alpha=alpha)


# ---------------------------------------------------------------------------
# latent fine-tuning


@dataclass
class LatentMatrix:
    z: np.ndarray
    seed: int


def init_latent(n_households: int, width: int, seed: int) -> LatentMatrix:
    """Standard-normal latent rows, one per target household."""
    if n_households < 1:
        raise ValueError("n_households must be >= 1")
    if width < 1:
        raise ValueError("latent width must be >= 1")
    rng = np.random.default_rng(seed)
    return LatentMatrix(z=rng.standard_normal((n_households, width)), seed=seed)


@dataclass
class FinetuneResult:
    history: list[tuple]
    final_losses: dict[str, float]
    household_marginals: dict[str, np.ndarray]
    person_marginals: dict[str, np.ndarray]


def finetune(
    model,
    latent: LatentMatrix,
    targets: TargetMarginals,
    data: EncodedMatrix,
    config: TrainConfig,
) -> FinetuneResult:
    """Optimise the latent matrix against tract marginals through the frozen
    decoder. The loss mixes marginal RMSE, decoupled BCE realism against the
    microdata and the softmin-mass uniformity penalty; the recorded soft
    marginals are those of the final latent state."""
    if data.schema_fingerprint != model.schema_fingerprint:
        raise ValueError("encoded microdata does not match the model's schema")
    if latent.z.shape[1] != model.latent_dim:
        raise ValueError(
            f"latent width {latent.z.shape[1]} != decoder input {model.latent_dim}"
        )
    if latent.z.shape[0] != targets.n_households:
        raise ValueError(
            f"latent rows {latent.z.shape[0]} != target households "
            f"{targets.n_households}"
        )
    micro = np.asarray(data.values, dtype=np.float64)
    if config.dbce_subsample is not None and config.dbce_subsample < micro.shape[0]:
        rng = np.random.default_rng([config.seed, 1])
        keep = rng.choice(micro.shape[0], size=config.dbce_subsample, replace=False)
        micro = micro[np.sort(keep)]

    z_param = nn.Param(latent.z, "latent.z")
    opt = Lion([z_param])
    history = []

    def losses_and_grad(probs):
        mres = marginal_rmse_loss(probs, targets, model.groups)
        dres = dbce(probs, micro, config.softmin_temperature)
        total = (
            config.w_marginal * mres.loss
            + config.w_dbce * dres.dbce_loss
            + config.w_normkl * dres.norm_kl
        )
        dprobs = (
            config.w_marginal * mres.grad
            + config.w_dbce * dres.grad_dbce
            + config.w_normkl * dres.grad_norm_kl
        )
        return mres, dres, total, dprobs

    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        probs = model.decode(z_param.value, train=False)
        mres, dres, total, dprobs = losses_and_grad(probs)
        _assert_finite(total, epoch, "fine-tuning loss")
        z_param.zero_grad()
        z_param.grad += model.decode_backward(dprobs, with_params=False)
        opt.step(lr)
        history.append((epoch, lr, mres.loss, dres.dbce_loss, dres.norm_kl, total))

    probs = model.decode(z_param.value, train=False)
    mres, dres, total, _ = losses_and_grad(probs)
    latent.z = z_param.value
    return FinetuneResult(
        history=history,
        final_losses={
            "marginal_rmse": mres.loss,
            "dbce": dres.dbce_loss,
            "norm_kl": dres.norm_kl,
            "total": total,
        },
        household_marginals=mres.household_marginals,
        person_marginals=mres.person_marginals,
    )


# ---------------------------------------------------------------------------
# persistence and history output


def save_latent(
    latent: LatentMatrix,
    path,
    schema_fingerprint: str = "",
    model_fingerprint: str = "",
) -> None:
    header = {
        "format": "pslatent",
        "version": LATENT_VERSION,
        "seed": latent.seed,
        "rows": latent.z.shape[0],
        "width": latent.z.shape[1],
        "schema_fingerprint": schema_fingerprint,
        "model_fingerprint": model_fingerprint,
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(latent.z, dtype="<f8").tobytes())


def load_latent(path) -> tuple[LatentMatrix, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(LATENT_MAGIC)) != LATENT_MAGIC:
            raise ValueError(f"{path}: not a latent file (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != LATENT_VERSION:
            raise ValueError(f"{path}: unsupported latent version")
        rows, width = header["rows"], header["width"]
        raw = fh.read(rows * width * 8)
        if len(raw) != rows * width * 8:
            raise ValueError(f"{path}: truncated latent payload")
        z = np.frombuffer(raw, dtype="<f8").reshape(rows, width).copy()
    return LatentMatrix(z=z, seed=header["seed"]), header


def write_history(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(
                [v if isinstance(v, int) else f"{v:.12g}" for v in row]
            )
