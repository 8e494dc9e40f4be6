"""Joint adversarial training: classification on clean and attacked inputs
plus the per-layer DAE reconstruction and adversarial-reconstruction losses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, run_attack
from .data import Dataset, batch_iter
from .layers import (FortifiedNetwork, adversarial_reconstruction_loss,
                     reconstruction_loss)
from .optim import Adam
from .tensor import Tensor, softmax_cross_entropy


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_rec: float = 0.01
    lambda_adv: float = 0.01
    epochs: int = 5
    batch_size: int = 128
    seed: int = 1
    attack: AttackConfig | None = None
    lr: float = 0.001
    dae_sigma: float = 0.01

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_adv < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    l_clean: object
    l_adv_class: object
    l_rec_total: object
    l_adv_rec_total: object


def total_loss(parts: LossBreakdown, lambda_rec: float, lambda_adv: float):
    """L_c(clean) + L_c(adv) + lambda_rec * sum_k rec_k + lambda_adv * sum_k adv_k."""
    return (parts.l_clean + parts.l_adv_class
            + lambda_rec * parts.l_rec_total
            + lambda_adv * parts.l_adv_rec_total)


@dataclass
class EpochMetrics:
    epoch: int
    l_clean: float
    l_adv_class: float
    l_rec_total: float
    l_adv_rec_total: float
    total: float
    clean_acc: float
    adv_acc: float


def train_epoch(net: FortifiedNetwork, data: Dataset, cfg: TrainConfig,
                optimizer: Adam, epoch: int) -> EpochMetrics:
    """One pass over the data: craft the adversarial batch against current
    weights (eval-mode forward, no parameter update), run both branches,
    optimize the weighted total loss."""
    noise_rng = np.random.default_rng((cfg.seed, epoch, 0xDAE))
    sums = np.zeros(5)
    correct_clean = correct_adv = 0
    n_total = 0
    for batch_index, (xb, yb) in enumerate(
            batch_iter(data, cfg.batch_size, seed=cfg.seed + epoch)):
        if cfg.attack is not None and cfg.attack.epsilon > 0:
            attack_rng = np.random.default_rng(
                (cfg.seed, epoch, batch_index, 0xA77))
            x_tilde = run_attack(net, xb, yb, cfg.attack, rng=attack_rng).x_adv
        else:
            x_tilde = xb
        # attack backward passes leave gradients on the parameters
        optimizer.zero_grad()

        clean_logits = net.forward(Tensor(xb), "clean", rng=noise_rng)
        adv_logits = net.forward(Tensor(x_tilde), "adversarial", rng=noise_rng)
        l_clean = softmax_cross_entropy(clean_logits, yb)
        l_adv_class = softmax_cross_entropy(adv_logits, yb)
        if net.fortified:
            l_rec = sum((reconstruction_loss(fl) for fl in
                         net.fortified.values()), Tensor(0.0))
            l_adv_rec = sum((adversarial_reconstruction_loss(fl) for fl in
                             net.fortified.values()), Tensor(0.0))
        else:
            l_rec = Tensor(0.0)
            l_adv_rec = Tensor(0.0)
        parts = LossBreakdown(l_clean, l_adv_class, l_rec, l_adv_rec)
        total = total_loss(parts, cfg.lambda_rec, cfg.lambda_adv)
        if not np.isfinite(total.data):
            raise TrainingError(
                f"non-finite loss at epoch {epoch}, batch {batch_index}"
            )
        total.backward()
        optimizer.step()
        net.clear_caches()

        n = len(yb)
        n_total += n
        sums += n * np.array([float(l_clean.data), float(l_adv_class.data),
                              float(l_rec.data), float(l_adv_rec.data),
                              float(total.data)])
        correct_clean += int((clean_logits.data.argmax(axis=1) == yb).sum())
        correct_adv += int((adv_logits.data.argmax(axis=1) == yb).sum())
    means = [float(v) for v in sums / n_total]
    return EpochMetrics(epoch, *means, clean_acc=correct_clean / n_total,
                        adv_acc=correct_adv / n_total)


def train(net: FortifiedNetwork, data: Dataset, cfg: TrainConfig):
    """Run cfg.epochs epochs with a fresh Adam; returns per-epoch metrics."""
    optimizer = Adam(net.params(), lr=cfg.lr)
    return [train_epoch(net, data, cfg, optimizer, epoch)
            for epoch in range(cfg.epochs)]


def evaluate(net: FortifiedNetwork, data: Dataset,
             attack: AttackConfig | None = None,
             chunk_size: int = 256) -> dict:
    """Clean and (white-box) adversarial accuracy plus mean eval-mode
    reconstruction errors per fortified position."""
    n = len(data)
    correct_clean = 0
    correct_adv = 0
    rec_sums = {pos: 0.0 for pos in net.fortified}
    for start in range(0, n, chunk_size):
        xb = data.images[start : start + chunk_size]
        yb = data.labels[start : start + chunk_size]
        logits = net(Tensor(xb))
        correct_clean += int((logits.data.argmax(axis=1) == yb).sum())
        for pos, err in _eval_rec_errors(net, xb).items():
            rec_sums[pos] += float(err.sum())
        if attack is not None:
            batch = run_attack(net, xb, yb, attack)
            correct_adv += int((~batch.success).sum())
    result = {
        "clean_accuracy": correct_clean / n,
        "adversarial_accuracy": correct_adv / n if attack is not None else None,
        "mean_rec_errors": {pos: s / n for pos, s in rec_sums.items()},
    }
    return result


def _eval_rec_errors(net: FortifiedNetwork, xb: np.ndarray) -> dict:
    """Per-example squared reconstruction error at each fortified position,
    noiseless forward."""
    h = Tensor(xb)
    errors = {}
    for i, layer in enumerate(net.layers):
        h = layer(h)
        fl = net.fortified.get(i)
        if fl is None:
            continue
        decoded, rec_vec = fl.dae.forward(h, "eval", None)
        flat = rec_vec.data.reshape(rec_vec.shape[0], -1)
        errors[i] = (flat * flat).sum(axis=1)
        h = decoded
    return errors


EPOCH_CSV_HEADER = "# fortnet epochs v1"
EPOCH_CSV_COLUMNS = ["epoch", "l_clean", "l_adv_class", "l_rec_total",
                     "l_adv_rec_total", "total", "clean_acc", "adv_acc"]


def write_epoch_log(path, metrics) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([EPOCH_CSV_HEADER])
        writer.writerow(EPOCH_CSV_COLUMNS)
        for m in metrics:
            writer.writerow([m.epoch, repr(m.l_clean), repr(m.l_adv_class),
                             repr(m.l_rec_total), repr(m.l_adv_rec_total),
                             repr(m.total), repr(m.clean_acc), repr(m.adv_acc)])
