"""Off-manifold signaling from DAE reconstruction errors, threshold
calibration, and the input-space vs hidden-space capacity sweep."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, run_attack
from .data import Dataset, batch_iter
from .layers import Activation, Dense, DenseDAE, Flatten, FortifiedNetwork
from .optim import Adam
from .tensor import Tensor, softmax_cross_entropy
from .training import _eval_rec_errors


class CalibrationError(ValueError):
    pass


@dataclass
class ManifoldSignal:
    per_layer: dict  # fortified position -> squared reconstruction error
    total: float
    context: str = "unknown"  # clean | adversarial | unknown


@dataclass
class ThresholdCalibration:
    percentile: float
    per_layer: dict  # position -> threshold
    total: float
    calibration_size: int


def reconstruction_errors(net: FortifiedNetwork, images: np.ndarray,
                          context: str = "unknown",
                          chunk_size: int = 256) -> list:
    """Per-example eval-mode (noiseless) reconstruction error at every
    fortified position."""
    if not net.fortified:
        raise ValueError("network has no fortified layers to signal from")
    signals = []
    for start in range(0, images.shape[0], chunk_size):
        errs = _eval_rec_errors(net, images[start : start + chunk_size])
        n = next(iter(errs.values())).shape[0]
        for i in range(n):
            per_layer = {pos: float(e[i]) for pos, e in errs.items()}
            signals.append(ManifoldSignal(per_layer, sum(per_layer.values()),
                                          context))
    return signals


def error_ratio(adv_signals, clean_signals) -> float:
    """Sum of adversarial totals divided by sum of clean totals."""
    if not adv_signals or not clean_signals:
        raise ValueError("both signal sets must be non-empty")
    clean_total = sum(s.total for s in clean_signals)
    adv_total = sum(s.total for s in adv_signals)
    if clean_total == 0.0:
        warnings.warn(
            "clean reconstruction error is exactly zero (identity collapse); "
            "ratio is degenerate", RuntimeWarning)
        return math.inf
    return adv_total / clean_total


def _nearest_rank(sorted_values: np.ndarray, percentile: float) -> float:
    rank = math.ceil(percentile / 100.0 * len(sorted_values))
    return float(sorted_values[rank - 1])


def calibrate_threshold(clean_signals, percentile: float = 95.0
                        ) -> ThresholdCalibration:
    """Empirical nearest-rank percentile of calibration totals (and per-layer
    errors). Needs at least 100 examples."""
    if len(clean_signals) < 100:
        raise CalibrationError(
            f"need >= 100 calibration examples, got {len(clean_signals)}"
        )
    if not 50.0 < percentile < 100.0:
        raise CalibrationError(f"percentile must be in (50, 100), got {percentile}")
    totals = np.sort([s.total for s in clean_signals])
    positions = clean_signals[0].per_layer.keys()
    per_layer = {}
    for pos in positions:
        values = np.sort([s.per_layer[pos] for s in clean_signals])
        per_layer[pos] = _nearest_rank(values, percentile)
    return ThresholdCalibration(percentile, per_layer,
                                _nearest_rank(totals, percentile),
                                len(clean_signals))


def flag_off_manifold(signal: ManifoldSignal,
                      calibration: ThresholdCalibration) -> bool:
    """True iff the total error strictly exceeds the calibrated threshold."""
    return signal.total > calibration.total


# ---------------------------------------------------------------------------
# capacity sweep (input space vs hidden space)
# ---------------------------------------------------------------------------

@dataclass
class SweepPoint:
    capacity: int
    space: str
    clean_total: float
    adv_total: float
    ratio: float


def train_dae(dae, arrays: np.ndarray, epochs: int, batch_size: int,
              lr: float, seed: int) -> None:
    """Fit a standalone DAE with the reconstruction loss only."""
    optimizer = Adam(dae.params(), lr=lr)
    noise_rng = np.random.default_rng((seed, 0xDAE))
    order_rng = np.random.default_rng((seed, 0x0BD))
    n = arrays.shape[0]
    for _ in range(epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, batch_size):
            xb = Tensor(arrays[order[start : start + batch_size]])
            _, rec_vec = dae.forward(xb, "train", noise_rng)
            loss = (rec_vec * rec_vec).sum() / float(xb.shape[0])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()


def _dae_errors(dae, arrays: np.ndarray) -> np.ndarray:
    _, rec_vec = dae.forward(Tensor(arrays), "eval", None)
    flat = rec_vec.data.reshape(arrays.shape[0], -1)
    return (flat * flat).sum(axis=1)


def _build_mlp(in_dim: int, hidden: int, classes: int,
               rng: np.random.Generator) -> FortifiedNetwork:
    layers = [Dense(in_dim, hidden, rng), Activation("leaky_relu"),
              Dense(hidden, classes, rng)]
    return FortifiedNetwork(layers, {})


def _hidden_rep(net: FortifiedNetwork, x: np.ndarray, upto: int) -> np.ndarray:
    h = Tensor(x)
    for layer in net.layers[: upto + 1]:
        h = layer(h)
    return h.data


def capacity_sweep(dataset: Dataset, capacities, space: str,
                   attack_cfg: AttackConfig, *, seed: int = 0,
                   hidden_width: int = 64, classifier_epochs: int = 5,
                   dae_epochs: int = 10, dae_sigma: float = 0.1,
                   dae_lr: float = 0.001, test_fraction: float = 0.25) -> list:
    """Train one DAE per bottleneck capacity, on raw inputs or on a trained
    classifier's hidden layer, and report the adversarial/clean error ratio.

    Capacities must be sorted descending. Returns a list of SweepPoint.
    """
    if space not in ("input", "hidden"):
        raise ValueError(f"space must be 'input' or 'hidden', got {space!r}")
    capacities = list(capacities)
    if capacities != sorted(capacities, reverse=True):
        raise ValueError("capacities must be sorted descending")

    flat = dataset.flat_images()
    labels = dataset.labels
    n_test = max(1, int(len(dataset) * test_fraction))
    x_train, y_train = flat[:-n_test], labels[:-n_test]
    x_test, y_test = flat[-n_test:], labels[-n_test:]

    rng = np.random.default_rng(seed)
    net = _build_mlp(flat.shape[1], hidden_width, dataset.num_classes, rng)
    optimizer = Adam(net.params(), lr=0.001)
    train_set = Dataset(x_train, y_train, dataset.num_classes)
    for epoch in range(classifier_epochs):
        for xb, yb in batch_iter(train_set, 128, seed=seed + epoch):
            loss = softmax_cross_entropy(net(Tensor(xb)), yb)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    x_adv = run_attack(net, x_test, y_test, attack_cfg).x_adv

    if space == "hidden":
        # representation after the first nonlinearity
        clean_rep = _hidden_rep(net, x_test, 1)
        adv_rep = _hidden_rep(net, x_adv, 1)
        train_rep = _hidden_rep(net, x_train, 1)
        width = hidden_width
    else:
        clean_rep, adv_rep, train_rep = x_test, x_adv, x_train
        width = flat.shape[1]

    points = []
    for capacity in capacities:
        dae = DenseDAE(width, int(capacity), dae_sigma, "leaky_relu",
                       np.random.default_rng((seed, capacity)))
        train_dae(dae, train_rep, dae_epochs, 128, dae_lr, seed)
        clean_err = _dae_errors(dae, clean_rep)
        adv_err = _dae_errors(dae, adv_rep)
        clean_total = float(clean_err.sum())
        adv_total = float(adv_err.sum())
        ratio = math.inf if clean_total == 0 else adv_total / clean_total
        points.append(SweepPoint(int(capacity), space, clean_total,
                                 adv_total, ratio))
    return points


def write_sweep_csv(path, points) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["# fortnet capacity sweep v1"])
        writer.writerow(["capacity", "space", "clean_total", "adv_total",
                         "ratio"])
        for p in points:
            writer.writerow([p.capacity, p.space, repr(p.clean_total),
                             repr(p.adv_total), repr(p.ratio)])
