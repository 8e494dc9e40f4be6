"""End-to-end acceptance suite.

Each test prints one live PASS/FAIL line for its criterion before asserting,
so a full run doubles as a checklist. Experiments run on the bundled 8x8
handwritten-digit corpus (the stand-in when full-size IDX files are not
available; see the data loader for the IDX path).

Covered criteria:
  1. autodiff gradients match central finite differences on random cases
  2. FGSM is bitwise PGD(steps=1, alpha=eps); outputs stay in ball and domain
  3. a small-noise 1-D DAE's reconstruction vector points along the score
  4. fortified convnet beats the adversarial-training baseline under FGSM
  5. same direction under PGD
  6. gradient-masking diagnostics all pass on the fortified model
  7. detection capacity sweep: hidden-space ratios > 1, input-space shrinks
  8. black-box substitute pipeline: transfer weaker than white-box, 9600 pts
  9. rerunning an experiment reproduces the epoch log bit-exactly
"""

import numpy as np
import pytest
import yaml

from conftest import analytic_gradients, numeric_gradients
from fortnet import blackbox as bb
from fortnet.attacks import (AttackConfig, fgsm, masking_diagnostics, pgd,
                             run_attack)
from fortnet.cli import (_FlatInputModel, build_network, load_digits_dataset,
                         run_experiment)
from fortnet.detection import capacity_sweep, train_dae
from fortnet.layers import DenseDAE
from fortnet.tensor import Tensor, conv2d, softmax_cross_entropy
from fortnet.training import TrainConfig, evaluate, train

SEEDS = (1, 2, 3)
FGSM_CFG = AttackConfig(epsilon=0.3, kind="fgsm")
PGD_CFG = AttackConfig(epsilon=0.1, alpha=0.02, steps=10, kind="pgd")


def report(capsys, label, passed, detail):
    with capsys.disabled():
        print(f"\n[acceptance] {label}: {'PASS' if passed else 'FAIL'} ({detail})")


# ---------------------------------------------------------------------------
# shared trained models (expensive; built once per session)
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def corpus():
    return load_digits_dataset()


def convnet_cfg(fortified):
    return {
        "input_shape": [1, 8, 8],
        "layers": [
            {"type": "conv", "filters": 16, "kernel": 4, "stride": 2,
             "padding": 1},
            {"type": "relu"},
            {"type": "flatten"},
            {"type": "dense", "units": 96},
            {"type": "relu"},
            {"type": "dense", "units": 10},
        ],
        "fortified_positions": [4] if fortified else [],
        "dae": {"sigma": 0.01, "activation": "leaky_relu",
                "bottleneck_factor": 0.5},
    }


def train_convnet(corpus, seed, fortified, attack):
    train_set, test_set = corpus
    net = build_network(convnet_cfg(fortified), seed)
    cfg = TrainConfig(lambda_rec=0.01 if fortified else 0.0,
                      lambda_adv=0.01 if fortified else 0.0,
                      epochs=5, batch_size=32, seed=seed, attack=attack,
                      lr=0.002, dae_sigma=0.01)
    train(net, train_set, cfg)
    result = evaluate(net, test_set, attack)
    return net, result


def run_cohort(corpus, attack):
    out = {}
    for fortified in (True, False):
        runs = [train_convnet(corpus, s, fortified, attack) for s in SEEDS]
        runs.sort(key=lambda nr: nr[1]["adversarial_accuracy"])
        out["fortified" if fortified else "baseline"] = runs
    return out


@pytest.fixture(scope="session")
def fgsm_cohort(corpus):
    return run_cohort(corpus, FGSM_CFG)


@pytest.fixture(scope="session")
def pgd_cohort(corpus):
    return run_cohort(corpus, PGD_CFG)


def median_result(runs):
    return runs[len(runs) // 2][1]


@pytest.fixture(scope="session")
def fortified_net(pgd_cohort):
    """Median-seed fortified model, used as the defended target for the
    masking and black-box criteria."""
    return pgd_cohort["fortified"][len(SEEDS) // 2][0]


@pytest.fixture(scope="session")
def blackbox_pipeline(corpus, fortified_net):
    _, test_set = corpus
    flat = test_set.flat_images()
    target = _FlatInputModel(fortified_net, (1, 8, 8))
    cfg = bb.SubstituteConfig()
    oracle = bb.Oracle(target)
    substitute, history = bb.train_substitute(oracle, flat[:150], cfg,
                                              test_set.num_classes, seed=0)
    x_eval = flat[150:]
    y_eval = test_set.labels[150:]
    whitebox_fgsm = 1.0 - fgsm(target, x_eval, y_eval, FGSM_CFG).success.mean()
    return {
        "target": target,
        "history": history,
        "transfer_fgsm": bb.transfer_attack(substitute, target, FGSM_CFG,
                                            x_eval, y_eval),
        "transfer_pgd": bb.transfer_attack(substitute, target, PGD_CFG,
                                           x_eval, y_eval),
        "whitebox_fgsm": float(whitebox_fgsm),
    }


# ---------------------------------------------------------------------------
# 1. autodiff soundness
# ---------------------------------------------------------------------------

def _case_builders():
    def elementwise(rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4,))
        c = rng.normal(size=(3, 4))
        return (lambda t: ((t[0] + t[1]) * t[2] - t[0]).tanh().sum(),
                [a, b, c])

    def division_power(rng):
        a = rng.normal(size=(2, 5))
        b = rng.uniform(1.0, 2.0, size=(2, 5))
        return (lambda t: ((t[0] / t[1]) ** 3).mean() + (-t[0]).sum(),
                [a, b])

    def matmul_relu(rng):
        a = rng.normal(size=(4, 3))
        b = rng.normal(size=(3, 5))
        return (lambda t: (t[0] @ t[1]).relu().sum(), [a, b])

    def matmul_leaky(rng):
        a = rng.normal(size=(2, 6))
        b = rng.normal(size=(6, 2))
        return (lambda t: (t[0] @ t[1]).leaky_relu(0.1).mean(), [a, b])

    def shape_ops(rng):
        a = rng.normal(size=(2, 3, 4))
        return (lambda t: (t[0].reshape(6, 4).transpose((1, 0)).flip((0,))
                           * 2.0).tanh().sum(), [a])

    def axis_reductions(rng):
        a = rng.normal(size=(3, 5))
        return (lambda t: (t[0].sum(axis=0) * t[0].mean(axis=1).sum()).sum(),
                [a])

    def convolution(rng):
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        return (lambda t: conv2d(t[0], t[1], stride=2, padding=1).tanh().sum(),
                [x, k])

    def cross_entropy(rng):
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        return (lambda t: softmax_cross_entropy(t[0], labels), [logits])

    def broadcast_chain(rng):
        a = rng.normal(size=(4, 1))
        b = rng.normal(size=(1, 5))
        return (lambda t: ((t[0] * t[1] + t[0]) ** 2).mean(), [a, b])

    def fanout(rng):
        a = rng.normal(size=(3, 3))
        return (lambda t: (t[0] @ t[0].transpose()).sum() + t[0].relu().sum(),
                [a])

    return [elementwise, division_power, matmul_relu, matmul_leaky, shape_ops,
            axis_reductions, convolution, cross_entropy, broadcast_chain,
            fanout]


def test_criterion_1_autodiff_soundness(capsys):
    builders = _case_builders()
    worst = 0.0
    for case in range(50):
        rng = np.random.default_rng(1000 + case)
        build, arrays = builders[case % len(builders)](rng)
        analytic = analytic_gradients(build, arrays)
        numeric = numeric_gradients(
            lambda arrs: build([Tensor(a) for a in arrs]).data,
            [a.copy() for a in arrays])
        for a_g, n_g in zip(analytic, numeric):
            scale = np.maximum(np.abs(n_g), 1.0)
            worst = max(worst, float((np.abs(a_g - n_g) / scale).max()))
    passed = worst < 1e-4
    report(capsys, "criterion 1 autodiff soundness", passed,
           f"max rel grad error {worst:.2e} over 50 cases")
    assert passed


# ---------------------------------------------------------------------------
# 2. attack identities
# ---------------------------------------------------------------------------

def test_criterion_2_attack_identities(corpus, capsys):
    _, test_set = corpus
    net = build_network(convnet_cfg(True), seed=9)
    x, y = test_set.images[:64], test_set.labels[:64]
    bitwise_ok = True
    contained_ok = True
    for eps in (0.05, 0.1, 0.3):
        f_cfg = AttackConfig(epsilon=eps, kind="fgsm")
        p_cfg = AttackConfig(epsilon=eps, alpha=eps, steps=1, kind="pgd")
        x_f = fgsm(net, x, y, f_cfg).x_adv
        x_p = pgd(net, x, y, p_cfg).x_adv
        bitwise_ok &= np.array_equal(x_f, x_p)
        for cfg in (f_cfg, AttackConfig(epsilon=eps, alpha=eps / 4, steps=7,
                                        kind="pgd")):
            adv = run_attack(net, x, y, cfg).x_adv
            contained_ok &= bool((np.abs(adv - x) <= eps).all())
            contained_ok &= bool((adv >= 0.0).all() and (adv <= 1.0).all())
    passed = bitwise_ok and contained_ok
    report(capsys, "criterion 2 attack identities", passed,
           f"bitwise={bitwise_ok} containment={contained_ok}")
    assert passed


# ---------------------------------------------------------------------------
# 3. score proportionality of a small-noise DAE
# ---------------------------------------------------------------------------

def test_criterion_3_score_proportionality(capsys):
    sigma = 0.25
    samples = np.random.default_rng(7).normal(size=(16384, 1))
    dae = DenseDAE(1, 32, sigma, "leaky_relu", np.random.default_rng(3))
    train_dae(dae, samples, epochs=120, batch_size=128, lr=0.002, seed=0)

    grid = np.linspace(0.5, 2.0, 50)
    probes = np.concatenate([grid, -grid])[:, None]
    _, rec = dae.forward(Tensor(probes), "eval", None)
    r, x = rec.data[:, 0], probes[:, 0]
    # for a standard normal the score is -x, so r(x) ~ sigma^2 * (-x)
    sign_frac = float((np.sign(r) == np.sign(-x)).mean())
    magnitude = np.abs(r) / (sigma ** 2 * np.abs(x))
    mag_frac = float(((magnitude >= 0.5) & (magnitude <= 1.5)).mean())
    passed = sign_frac >= 0.95 and mag_frac >= 0.95
    report(capsys, "criterion 3 score proportionality", passed,
           f"sign frac {sign_frac:.2f}, magnitude-in-band frac {mag_frac:.2f},"
           f" ratio range [{magnitude.min():.2f}, {magnitude.max():.2f}]")
    assert passed


# ---------------------------------------------------------------------------
# 4/5. directional robustness vs the adversarial-training baseline
# ---------------------------------------------------------------------------

def _directional_check(cohort, capsys, label):
    fort_adv = np.median([r["adversarial_accuracy"]
                          for _, r in cohort["fortified"]])
    base_adv = np.median([r["adversarial_accuracy"]
                          for _, r in cohort["baseline"]])
    fort_clean = np.median([r["clean_accuracy"]
                            for _, r in cohort["fortified"]])
    passed = fort_adv >= base_adv and fort_clean >= 0.95
    report(capsys, label, passed,
           f"fortified adv {fort_adv:.3f} vs baseline adv {base_adv:.3f}, "
           f"fortified clean {fort_clean:.3f}")
    assert passed


def test_criterion_4_fgsm_direction(fgsm_cohort, capsys):
    _directional_check(fgsm_cohort, capsys, "criterion 4 FGSM direction")


def test_criterion_5_pgd_direction(pgd_cohort, capsys):
    _directional_check(pgd_cohort, capsys, "criterion 5 PGD direction")


# ---------------------------------------------------------------------------
# 6. gradient-masking suite
# ---------------------------------------------------------------------------

def test_criterion_6_gradient_masking(corpus, fortified_net,
                                      blackbox_pipeline, capsys):
    _, test_set = corpus
    transfer_acc = blackbox_pipeline["transfer_pgd"][
        "target_adversarial_accuracy"]
    rep = masking_diagnostics(fortified_net, test_set.images, test_set.labels,
                              PGD_CFG, blackbox_adv_accuracy=transfer_acc,
                              unbounded_steps=100)
    detail = "; ".join(f"{c.name}={c.value:.4f}" for c in rep.checks)
    passed = rep.all_passed and len(rep.checks) == 3
    report(capsys, "criterion 6 gradient masking", passed, detail)
    assert passed


# ---------------------------------------------------------------------------
# 7. detection capacity sweep
# ---------------------------------------------------------------------------

def test_criterion_7_detection_sweep(corpus, capsys):
    train_set, _ = corpus
    capacities = [48, 16, 4]
    hidden = capacity_sweep(train_set, capacities, "hidden", FGSM_CFG, seed=0,
                            classifier_epochs=5, dae_epochs=15)
    inputs = capacity_sweep(train_set, capacities, "input", FGSM_CFG, seed=0,
                            classifier_epochs=5, dae_epochs=15)
    hidden_ok = all(p.ratio > 1.0 for p in hidden)
    input_ok = inputs[-1].ratio < inputs[0].ratio  # smallest vs largest
    passed = hidden_ok and input_ok
    report(capsys, "criterion 7 detection sweep", passed,
           "hidden ratios " + str([round(p.ratio, 3) for p in hidden])
           + ", input ratios " + str([round(p.ratio, 3) for p in inputs]))
    assert passed


# ---------------------------------------------------------------------------
# 8. black-box substitute pipeline
# ---------------------------------------------------------------------------

def test_criterion_8_blackbox_pipeline(blackbox_pipeline, capsys):
    transfer = blackbox_pipeline["transfer_fgsm"][
        "target_adversarial_accuracy"]
    whitebox = blackbox_pipeline["whitebox_fgsm"]
    final_size = blackbox_pipeline["history"][-1]["set_size"]
    passed = transfer >= whitebox - 0.02 and final_size == 9600
    report(capsys, "criterion 8 black-box pipeline", passed,
           f"transfer adv acc {transfer:.3f} vs white-box {whitebox:.3f}, "
           f"final substitute set {final_size}")
    assert passed


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path, capsys):
    config = {
        "dataset": {"source": "digits", "train_limit": 512, "test_limit": 128},
        "model": convnet_cfg(True),
        "attack": {"kind": "fgsm", "epsilon": 0.3},
        "training": {"epochs": 2, "batch_size": 32, "lr": 0.002},
        "run": {"seeds": [1], "out_dir": "ignored"},
    }
    path = tmp_path / "config.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(config, f)
    run_experiment(path, {"out": str(tmp_path / "a")})
    run_experiment(path, {"out": str(tmp_path / "b")})
    a = (tmp_path / "a" / "epochs_1.csv").read_bytes()
    b = (tmp_path / "b" / "epochs_1.csv").read_bytes()
    passed = a == b
    report(capsys, "criterion 9 determinism", passed,
           f"epoch logs identical over rerun: {passed}")
    assert passed
