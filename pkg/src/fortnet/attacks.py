"""White-box gradient attacks (FGSM, PGD) and gradient-masking diagnostics.

Attacks treat the model as a callable `model(x: Tensor) -> logits` whose
forward pass is deterministic (eval mode, no DAE noise) and differentiable
with respect to the input, including through any fortified layers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Tensor, softmax_cross_entropy


class AttackError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    epsilon: float
    alpha: float = 0.01
    steps: int = 1
    random_start: bool = False
    clip_min: float = 0.0
    clip_max: float = 1.0
    kind: str = "fgsm"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "pgd" and self.alpha <= 0:
            raise ValueError(f"pgd alpha must be > 0, got {self.alpha}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass
class AdversarialBatch:
    x: np.ndarray
    x_adv: np.ndarray
    labels: np.ndarray
    success: np.ndarray  # per-example: adversarial prediction is wrong

    def max_deviation(self) -> float:
        return float(np.abs(self.x_adv - self.x).max())


def project_linf(x_adv: np.ndarray, x_orig: np.ndarray, epsilon: float,
                 clip_min: float = 0.0, clip_max: float = 1.0) -> np.ndarray:
    """Project onto the l-inf ball around x_orig intersected with the domain."""
    if x_adv.shape != x_orig.shape:
        raise ValueError(f"shape mismatch: {x_adv.shape} vs {x_orig.shape}")
    out = np.clip(x_adv, x_orig - epsilon, x_orig + epsilon)
    out = np.clip(out, clip_min, clip_max)
    # rounding in x_orig +/- epsilon can leave |out - x_orig| one ulp above
    # epsilon; nudge those entries back toward the center so the recomputed
    # deviation never exceeds epsilon
    mask = np.abs(out - x_orig) > epsilon
    while mask.any():
        out = np.where(mask, np.nextafter(out, x_orig), out)
        mask = np.abs(out - x_orig) > epsilon
    return out


def _input_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    loss = softmax_cross_entropy(model(xt), y)
    loss.backward()
    g = xt.grad
    if not np.isfinite(g).all():
        raise AttackError(
            f"non-finite input gradient (loss={float(loss.data)!r}); "
            "check the model's forward pass"
        )
    return g


def _predict(model, x: np.ndarray) -> np.ndarray:
    return model(Tensor(x)).data.argmax(axis=1)


def _run_pgd(model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
             rng: np.random.Generator | None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start requires an rng")
        x_adv = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
        x_adv = np.clip(x_adv, cfg.clip_min, cfg.clip_max)
    else:
        x_adv = x.copy()
    for _ in range(cfg.steps):
        g = _input_gradient(model, x_adv, y)
        x_adv = x_adv + cfg.alpha * np.sign(g)
        x_adv = project_linf(x_adv, x, cfg.epsilon, cfg.clip_min, cfg.clip_max)
    return x_adv


def _finish(model, x, x_adv, y) -> AdversarialBatch:
    success = _predict(model, x_adv) != np.asarray(y)
    return AdversarialBatch(x=np.asarray(x, dtype=float), x_adv=x_adv,
                            labels=np.asarray(y), success=success)


def fgsm(model, x, y, cfg: AttackConfig) -> AdversarialBatch:
    """One signed-gradient step of size epsilon, clipped to the domain."""
    step_cfg = replace(cfg, kind="pgd", steps=1, alpha=max(cfg.epsilon, 1e-30),
                       random_start=False)
    x_adv = _run_pgd(model, x, y, step_cfg, rng=None)
    return _finish(model, x, x_adv, y)


def pgd(model, x, y, cfg: AttackConfig, rng=None) -> AdversarialBatch:
    """Iterated signed steps with l-inf ball projection after each step."""
    x_adv = _run_pgd(model, x, y, replace(cfg, kind="pgd"), rng)
    return _finish(model, x, x_adv, y)


def run_attack(model, x, y, cfg: AttackConfig, rng=None) -> AdversarialBatch:
    if cfg.kind == "fgsm":
        return fgsm(model, x, y, cfg)
    return pgd(model, x, y, cfg, rng=rng)


def accuracy(model, x, y) -> float:
    return float((_predict(model, x) == np.asarray(y)).mean())


# ---------------------------------------------------------------------------
# gradient-masking diagnostics
# ---------------------------------------------------------------------------

@dataclass
class MaskingCheck:
    name: str
    value: float
    threshold: float
    passed: bool


@dataclass
class MaskingReport:
    checks: list = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["# fortnet masking report v1"])
            writer.writerow(["check", "value", "threshold", "pass"])
            for c in self.checks:
                writer.writerow([c.name, repr(c.value), repr(c.threshold),
                                 int(c.passed)])


def masking_diagnostics(model, x, y, base_cfg: AttackConfig,
                        blackbox_adv_accuracy: float | None = None,
                        unbounded_steps: int = 100) -> MaskingReport:
    """Standard gradient-obfuscation checks on held-out data.

    (a) unbounded PGD (epsilon=1 on a [0,1] domain) must drive accuracy to
    near zero; (b) the white-box attack must be at least as strong as the
    black-box one (within 2 points); (c) iterative PGD must be at least as
    strong as single-step FGSM at the same epsilon (within 0.5 points).
    """
    report = MaskingReport()

    unbounded = AttackConfig(epsilon=1.0, alpha=2.5 / unbounded_steps,
                             steps=unbounded_steps, kind="pgd",
                             clip_min=base_cfg.clip_min,
                             clip_max=base_cfg.clip_max)
    acc_unbounded = 1.0 - pgd(model, x, y, unbounded).success.mean()
    report.checks.append(MaskingCheck(
        "unbounded_pgd_accuracy", float(acc_unbounded), 0.05,
        acc_unbounded <= 0.05))

    fgsm_cfg = replace(base_cfg, kind="fgsm")
    pgd_cfg = replace(base_cfg, kind="pgd",
                      steps=max(base_cfg.steps, 10),
                      alpha=base_cfg.alpha if base_cfg.kind == "pgd"
                      else max(base_cfg.epsilon / 10.0, 1e-3))
    acc_fgsm = 1.0 - fgsm(model, x, y, fgsm_cfg).success.mean()
    acc_pgd = 1.0 - pgd(model, x, y, pgd_cfg).success.mean()
    report.checks.append(MaskingCheck(
        "pgd_leq_fgsm_accuracy_gap", float(acc_pgd - acc_fgsm), 0.005,
        acc_pgd <= acc_fgsm + 0.005))

    if blackbox_adv_accuracy is not None:
        whitebox = acc_fgsm if base_cfg.kind == "fgsm" else acc_pgd
        gap = float(blackbox_adv_accuracy - whitebox)
        report.checks.append(MaskingCheck(
            "blackbox_minus_whitebox_accuracy", gap, -0.02, gap >= -0.02))

    return report
