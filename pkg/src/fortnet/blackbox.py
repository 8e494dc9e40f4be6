"""Substitute-model black-box attack: train a surrogate on the target's
label-only answers, grow its data by Jacobian augmentation, then transfer
gradient attacks crafted on the surrogate."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, run_attack
from .data import Dataset, batch_iter
from .layers import Activation, Dense, FortifiedNetwork
from .optim import Adam
from .tensor import Tensor, softmax_cross_entropy


class OracleError(RuntimeError):
    pass


@dataclass
class SubstituteConfig:
    hidden_width: int = 200
    jacobian_lambda: float = 0.1
    augmentation_rounds: int = 6
    holdout_size: int = 150
    lr: float = 0.003
    epochs_per_round: int = 10
    batch_size: int = 128

    def __post_init__(self):
        if self.augmentation_rounds < 1:
            raise ValueError("need at least one augmentation round")


class Oracle:
    """Label-only access to the defended target: argmax of its logits.

    Counts every labeled point; the substitute never sees target gradients
    or parameters.
    """

    def __init__(self, model):
        self._model = model
        self.query_count = 0

    def query(self, x: np.ndarray) -> np.ndarray:
        try:
            logits = self._model(Tensor(x))
        except Exception as exc:
            raise OracleError(f"target model failed on a query batch: {exc}")
        self.query_count += x.shape[0]
        return logits.data.argmax(axis=1)


def build_substitute(in_dim: int, num_classes: int,
                     cfg: SubstituteConfig,
                     rng: np.random.Generator) -> FortifiedNetwork:
    w = cfg.hidden_width
    layers = [Dense(in_dim, w, rng), Activation("relu"),
              Dense(w, w, rng), Activation("relu"),
              Dense(w, num_classes, rng)]
    return FortifiedNetwork(layers, {})


def jacobian_augment(substitute, points: np.ndarray, lam: float) -> np.ndarray:
    """Return the originals plus one perturbed copy each: a step of size
    `lam` along the sign of the gradient of the substitute's predicted-class
    logit, clipped to [0, 1]. Doubles the set."""
    xt = Tensor(points, requires_grad=True)
    logits = substitute(xt)
    predicted = logits.data.argmax(axis=1)
    onehot = np.zeros_like(logits.data)
    onehot[np.arange(points.shape[0]), predicted] = 1.0
    (logits * Tensor(onehot)).sum().backward()
    new_points = np.clip(points + lam * np.sign(xt.grad), 0.0, 1.0)
    return np.concatenate([points, new_points])


def _fit(substitute, x: np.ndarray, y: np.ndarray, cfg: SubstituteConfig,
         optimizer: Adam, seed: int) -> None:
    dataset = Dataset(x, y, num_classes=int(y.max()) + 1 if y.size else 2)
    for epoch in range(cfg.epochs_per_round):
        for xb, yb in batch_iter(dataset, cfg.batch_size, seed=seed + epoch):
            loss = softmax_cross_entropy(substitute(Tensor(xb)), yb)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()


def train_substitute(oracle: Oracle, seed_points: np.ndarray,
                     cfg: SubstituteConfig, num_classes: int,
                     seed: int = 0):
    """Jacobian-augmentation substitute training: label the current set via the
    oracle, fit the substitute, augment; repeated for the configured rounds,
    with a final fit on the fully augmented set.

    Returns (substitute, history) where history rows carry the per-round set
    size.
    """
    if seed_points.shape[0] != cfg.holdout_size:
        raise ValueError(
            f"expected {cfg.holdout_size} seed points, got {seed_points.shape[0]}"
        )
    rng = np.random.default_rng(seed)
    substitute = build_substitute(seed_points.shape[1], num_classes, cfg, rng)
    optimizer = Adam(substitute.params(), lr=cfg.lr)
    points = np.asarray(seed_points, dtype=float)
    labels = oracle.query(points)
    history = []
    for round_index in range(cfg.augmentation_rounds):
        history.append({"round": round_index, "set_size": points.shape[0]})
        _fit(substitute, points, labels, cfg, optimizer,
             seed=seed * 1000 + round_index)
        points = jacobian_augment(substitute, points, cfg.jacobian_lambda)
        # only the freshly created half needs oracle labels
        new_labels = oracle.query(points[labels.shape[0]:])
        labels = np.concatenate([labels, new_labels])
    history.append({"round": cfg.augmentation_rounds,
                    "set_size": points.shape[0]})
    _fit(substitute, points, labels, cfg, optimizer,
         seed=seed * 1000 + cfg.augmentation_rounds)
    return substitute, history


def transfer_attack(substitute, target, attack_cfg: AttackConfig,
                    x_test: np.ndarray, y_test: np.ndarray) -> dict:
    """Craft adversarial examples on the substitute, measure them on the
    target. Attack gradients come from the substitute only."""
    batch = run_attack(substitute, x_test, y_test, attack_cfg)
    target_logits = target(Tensor(batch.x_adv))
    target_correct = (target_logits.data.argmax(axis=1) == y_test)
    clean_logits = target(Tensor(x_test))
    agreement = (clean_logits.data.argmax(axis=1)
                 == substitute(Tensor(x_test)).data.argmax(axis=1))
    return {
        "target_adversarial_accuracy": float(target_correct.mean()),
        "substitute_agreement": float(agreement.mean()),
    }


def write_blackbox_csv(path, history, results: dict) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["# fortnet blackbox report v1"])
        writer.writerow(["round", "set_size"])
        for row in history:
            writer.writerow([row["round"], row["set_size"]])
        writer.writerow(["target_adversarial_accuracy",
                         repr(results["target_adversarial_accuracy"])])
        writer.writerow(["substitute_agreement",
                         repr(results["substitute_agreement"])])
