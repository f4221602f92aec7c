"""Acceptance suite: one test per criterion, each printing a PASS line.

Criteria 4-8 need a 28x28 ten-class digit dataset at desk scale.  Real
MNIST IDX files are used when found under $GCAPS_DATA_DIR (files named
train-images-idx3-ubyte / train-labels-idx1-ubyte / t10k-images-idx3-ubyte
/ t10k-labels-idx1-ubyte, optionally .gz); otherwise the suite falls
back to the deterministic synthetic digit set from tests/synth_digits.py
and says so.  All thresholds and protocols are identical either way.

The trained desk models are expensive (tens of minutes each at the 5000
steps the criteria pin down).  Set GCAPS_ACCEPT_CACHE=<dir> to reuse
checkpoints across suite invocations during development; leave it unset
for a from-scratch run.
"""

import os
import struct
import time
from pathlib import Path

import numpy as np
import pytest

import gcaps.autodiff as ad
from gcaps.attacks import AttackSpec, fgsm, pgd, robust_accuracy
from gcaps.autodiff import Tensor
from gcaps.cli import main as cli_main
from gcaps.data_io import filter_class, load_idx, subset
from gcaps.feature_gen import GenSpec, generate
from gcaps.metrics import (BatchRoutingRecord, collect_record, d_score,
                           accuracy, parent_uniqueness, t_score, usefulness)
from gcaps.model import CapsNet, desk_config, margin_loss, tiny_config
from gcaps.routing import scale_factor
from gcaps.trainer import TrainSpec, load_checkpoint, save_checkpoint, train

from conftest import assert_grads_close, finite_difference_grads

TRAIN_STEPS = 5000          # criterion 4 pins 5k steps on a 10k subset
TRAIN_SUBSET = 10000
ADV_STEPS = 900             # inner PGD a=0.01, k=40, eps=0.3 per criterion 6
ADV_WARMUP = 300            # radius ramp; cold-start attack training collapses
ATTACK_EXAMPLES = 1000


def _cache_dir():
    value = os.environ.get("GCAPS_ACCEPT_CACHE", "")
    return Path(value) if value else None


def _announce(num, detail):
    print(f"\nACCEPTANCE criterion {num}: PASS  ({detail})", flush=True)


# -- shared data and trained models ------------------------------------------

@pytest.fixture(scope="session")
def digit_data(tmp_path_factory):
    env_dir = os.environ.get("GCAPS_DATA_DIR", "")
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    if env_dir:
        paths = []
        for name in names:
            p = Path(env_dir) / name
            if not p.exists() and Path(str(p) + ".gz").exists():
                p = Path(str(p) + ".gz")
            paths.append(p)
        if all(p.exists() for p in paths):
            train_ds = load_idx(paths[0], paths[1], name="mnist")
            test_ds = load_idx(paths[2], paths[3], name="mnist")
            assert test_ds.images.shape == (10000, 28, 28), \
                f"unexpected MNIST test shape {test_ds.images.shape}"
            print("\n[acceptance] using real MNIST from", env_dir, flush=True)
            return {"train": train_ds, "test": test_ds, "source": "mnist"}
    # Fallback: deterministic synthetic digits written to and re-read
    # from IDX files, so the real ingestion path is exercised.
    from synth_digits import write_dataset
    data_dir = tmp_path_factory.mktemp("digits")
    print("\n[acceptance] no MNIST found; generating synthetic digit IDX files",
          flush=True)
    write_dataset(data_dir, train=12000, test=2000, seed=0)
    train_ds = load_idx(data_dir / "train-images-idx3-ubyte",
                        data_dir / "train-labels-idx1-ubyte", name="synthdigits")
    test_ds = load_idx(data_dir / "t10k-images-idx3-ubyte",
                       data_dir / "t10k-labels-idx1-ubyte", name="synthdigits")
    return {"train": train_ds, "test": test_ds, "source": "synthdigits",
            "dir": data_dir}


def _train_or_load(tag, config, spec, train_ds):
    cache = _cache_dir()
    ckpt = cache / f"{tag}.gcaps" if cache else None
    if ckpt is not None and ckpt.exists():
        model, _, _ = load_checkpoint(ckpt, expected_config=config)
        print(f"\n[acceptance] loaded cached {tag} from {ckpt}", flush=True)
        return model, 0.0
    model = CapsNet(config, seed=spec.seed)
    t0 = time.time()
    train(model, train_ds, spec)
    elapsed = time.time() - t0
    print(f"\n[acceptance] trained {tag}: {spec.steps} steps in {elapsed/60:.1f} min",
          flush=True)
    if ckpt is not None:
        cache.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, model, step=spec.steps, seed=spec.seed)
    return model, elapsed


@pytest.fixture(scope="session")
def sda_run(digit_data):
    train_ds = subset(digit_data["train"], TRAIN_SUBSET)
    spec = TrainSpec(steps=TRAIN_STEPS, batch_size=16, seed=0, eval_every=0)
    model, elapsed = _train_or_load("sda_standard", desk_config(), spec, train_ds)
    return {"model": model, "elapsed": elapsed}


@pytest.fixture(scope="session")
def rba_run(digit_data):
    train_ds = subset(digit_data["train"], TRAIN_SUBSET)
    spec = TrainSpec(steps=TRAIN_STEPS, batch_size=16, seed=0, eval_every=0)
    model, elapsed = _train_or_load("rba_standard", desk_config(routing="rba"),
                                    spec, train_ds)
    return {"model": model, "elapsed": elapsed}


@pytest.fixture(scope="session")
def robust_run(digit_data):
    train_ds = subset(digit_data["train"], TRAIN_SUBSET)
    spec = TrainSpec(steps=ADV_STEPS, batch_size=16, seed=0, eval_every=0,
                     adversarial=True,          # inner defaults: a=0.01 k=40 eps=0.3
                     attack_warmup=ADV_WARMUP)
    model, elapsed = _train_or_load("sda_robust", desk_config(), spec, train_ds)
    return {"model": model, "elapsed": elapsed}


# -- criterion 1: gradient correctness ----------------------------------------

def test_criterion_01_gradient_correctness(rng):
    t0 = time.time()

    checks = []
    def check(name, build, arrays):
        tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
                   for a in arrays]
        build(*tensors).backward()
        numeric = finite_difference_grads(
            lambda *plain: float(build(*[Tensor(p) for p in plain]).data), arrays)
        for t, n in zip(tensors, numeric):
            grad = t.grad if t.grad is not None else np.zeros_like(n)
            assert_grads_close(grad, n, rtol=1e-4, context=name)
        checks.append(name)

    a = rng.standard_normal((2, 3)) + 2.0
    b = rng.standard_normal((2, 3)) + 2.0
    check("add", lambda x, y: ad.sum_(ad.add(x, y)), [a, b])
    check("sub", lambda x, y: ad.sum_(ad.square(ad.sub(x, y))), [a, b])
    check("mul", lambda x, y: ad.sum_(ad.mul(x, y)), [a, b])
    check("div", lambda x, y: ad.sum_(ad.div(x, y)), [a, b])
    check("square", lambda x: ad.sum_(ad.square(x)), [a])
    check("log", lambda x: ad.sum_(ad.log(x)), [np.abs(a) + 0.5])
    check("exp", lambda x: ad.sum_(ad.exp(x)), [a * 0.3])
    check("relu", lambda x: ad.sum_(ad.relu(x)), [a - 2.0 + 0.31])
    check("clip", lambda x: ad.sum_(ad.square(ad.clip(x, 0.0, 1.0))), [a / 4.0])
    check("minimum", lambda x, y: ad.sum_(ad.square(ad.minimum(x, y))), [a, b + 0.17])
    check("sum", lambda x: ad.sum_(ad.square(ad.sum_(x, axis=1))), [a])
    check("mean", lambda x: ad.sum_(ad.square(ad.mean(x, axis=0))), [a])
    check("max", lambda x: ad.sum_(ad.square(ad.max_(x, axis=1))), [a])
    check("softmax", lambda x: ad.sum_(ad.mul(ad.softmax(x, axis=1), b)), [a])
    check("l2_norm", lambda x: ad.sum_(ad.l2_norm(x, axis=1)), [a])
    check("squash", lambda x: ad.sum_(ad.l2_norm(ad.squash(x), axis=-1)), [a])
    check("matmul", lambda x, y: ad.sum_(ad.square(ad.matmul(x, y))),
          [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
    check("reshape", lambda x: ad.sum_(ad.square(ad.reshape(x, (3, 2)))), [a])
    check("transpose", lambda x: ad.sum_(ad.square(ad.transpose(x, (1, 0)))), [a])
    check("concat", lambda x, y: ad.sum_(ad.square(ad.concat([x, y], axis=0))), [a, b])
    check("conv2d", lambda x, w, c: ad.sum_(ad.square(ad.conv2d(x, w, c, stride=2, pad=1))),
          [rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((2, 2, 3, 3)),
           rng.standard_normal(2)])
    check("pair_distance", lambda p, u: ad.sum_(ad.square(ad.pair_distance(p, u))),
          [rng.standard_normal((1, 3, 2, 2)), rng.standard_normal((1, 2, 2))])
    check("pair_dot", lambda p, u: ad.sum_(ad.square(ad.pair_dot(p, u))),
          [rng.standard_normal((1, 3, 2, 2)), rng.standard_normal((1, 2, 2))])
    check("weighted_sum", lambda c, p: ad.sum_(ad.square(ad.weighted_sum(c, p))),
          [rng.uniform(0.2, 1.0, size=(1, 3, 2)), rng.standard_normal((1, 3, 2, 2))])
    check("capsule_transform", lambda v, w: ad.sum_(ad.square(ad.capsule_transform(v, w))),
          [rng.standard_normal((1, 3, 2)), rng.standard_normal((3, 2, 2, 2))])

    # Full forward passes through 3 routing iterations on the tiny config.
    x = rng.uniform(size=(2, 6, 6))
    labels = np.array([0, 1])
    for routing in ("sda", "rba"):
        model = CapsNet(tiny_config(routing=routing, iterations=3), seed=5)
        names = list(model.params)
        model.zero_grad()
        loss = margin_loss(model.forward(x).class_norms, labels)
        loss.backward()
        arrays = [model.params[n].data.copy() for n in names]
        def eval_loss(*plain):
            trial = CapsNet(model.config,
                            params={n: Tensor(p, requires_grad=True)
                                    for n, p in zip(names, plain)})
            return margin_loss(trial.forward(x).class_norms, labels).item()
        numeric = finite_difference_grads(eval_loss, arrays, h=1e-5)
        for name, num in zip(names, numeric):
            grad = model.params[name].grad
            assert_grads_close(grad, num, rtol=1e-4, context=f"{routing} network {name}")
        checks.append(f"{routing} full network")

    elapsed = time.time() - t0
    assert elapsed < 60.0, f"gradient checks took {elapsed:.1f}s, budget is 60s"
    _announce(1, f"{len(checks)} op/network checks vs finite differences, "
                 f"{elapsed:.1f}s")


# -- criterion 2: routing algebra ---------------------------------------------

def test_criterion_02_routing_algebra(rng):
    from gcaps.routing import rba_route, sda_route
    for _ in range(5):
        lower = rng.uniform(-0.5, 0.5, size=(2, 6, 3))
        pred = rng.standard_normal((2, 6, 4, 3))
        for route in (sda_route, rba_route):
            for r in (1, 3):
                c = route(Tensor(lower), Tensor(pred), iterations=r).couplings.data
                np.testing.assert_allclose(c.sum(axis=-1), 1.0, atol=1e-9)

    c10 = ad.softmax(Tensor(np.array([0.0] + [-2.0] * 9))).data[0]
    c128 = ad.softmax(Tensor(np.array([0.0] + [-2.0] * 127))).data[0]
    assert abs(c10 - 0.4508) < 1e-4, c10
    assert abs(c128 - 0.0550) < 1e-4, c128

    t = scale_factor(0.9, 10, d_p=1.0, d_o=2.0)
    logits = np.array([t * 1.0] + [t * 2.0] * 9)
    recovered = float(np.exp(logits[0]) / np.exp(logits).sum())
    assert abs(recovered - 0.9) < 1e-9
    _announce(2, f"row sums 1 +/- 1e-9; max couplings {c10:.4f}/{c128:.4f}; "
                 f"scale-factor roundtrip err {abs(recovered-0.9):.1e}")


# -- criterion 3: metric oracles ----------------------------------------------

def test_criterion_03_metric_oracles(rng):
    uniform = np.full((3, 4, 5), 0.2)
    assert abs(t_score(BatchRoutingRecord(uniform, np.zeros((3, 5))))) < 1e-12
    onehot = np.zeros((3, 4, 5))
    onehot[..., 2] = 1.0
    assert t_score(BatchRoutingRecord(onehot, np.zeros((3, 5)))) == 1.0
    half = np.zeros((2, 3, 4))
    half[..., 0] = half[..., 1] = 0.5
    np.testing.assert_allclose(
        t_score(BatchRoutingRecord(half, np.zeros((2, 4)))), 0.5, atol=1e-12)

    worst = 0.0
    for _ in range(20):
        acts = rng.uniform(size=(7, 9))
        got = d_score(BatchRoutingRecord(np.full((7, 2, 9), 1 / 9), acts))
        brute = max(
            np.sqrt(np.mean((acts[:, j] - acts[:, j].mean()) ** 2))
            for j in range(9))
        worst = max(worst, abs(got - brute))
    assert worst < 1e-12
    _announce(3, f"T oracle cases exact; D vs brute-force std, max err {worst:.1e}")


# -- criteria 4 and 5: structural separation and clean accuracy ----------------

def test_criterion_04_structural_separation(digit_data, sda_run, rba_run):
    test_ds = digit_data["test"]
    probe = test_ds.images[:512]
    class0 = filter_class(test_ds, 0).images[:256]

    sda_rec = collect_record(sda_run["model"], probe, layer="hidden")
    rba_rec = collect_record(rba_run["model"], probe, layer="hidden")
    sda_rec0 = collect_record(sda_run["model"], class0, layer="hidden")

    t_sda, t_rba = t_score(sda_rec), t_score(rba_rec)
    d_all, d_cls0 = d_score(sda_rec), d_score(sda_rec0)
    # literal strictness saturates for float couplings; compare at a
    # dominance margin where tree-like and near-uniform routing differ
    pu_sda = parent_uniqueness(sda_rec, margin=0.1)
    pu_rba = parent_uniqueness(rba_rec, margin=0.1)

    assert t_sda > 0.3, f"SDA T-score {t_sda:.4f} <= 0.3"
    assert t_rba < 0.1, f"RBA T-score {t_rba:.4f} >= 0.1"
    assert d_all > d_cls0, f"SDA D all {d_all:.4f} <= single-class {d_cls0:.4f}"
    assert pu_sda > pu_rba, "SDA parent uniqueness should exceed RBA"
    if sda_run["elapsed"]:
        assert sda_run["elapsed"] < 1800, "runtime target: < 30 min per run"
    _announce(4, f"T sda={t_sda:.3f} rba={t_rba:.3f}; D all={d_all:.3f} "
                 f"class0={d_cls0:.3f}; PU sda={pu_sda:.2f} rba={pu_rba:.2f} "
                 f"on {digit_data['source']}")


def test_criterion_05_clean_accuracy(digit_data, sda_run, rba_run):
    test_ds = digit_data["test"]
    acc_sda = accuracy(sda_run["model"], test_ds)
    acc_rba = accuracy(rba_run["model"], test_ds)
    assert acc_sda >= 0.95, f"SDA accuracy {acc_sda:.4f} < 0.95"
    assert acc_rba >= 0.95, f"RBA accuracy {acc_rba:.4f} < 0.95"
    _announce(5, f"clean accuracy sda={acc_sda:.4f} rba={acc_rba:.4f} "
                 f"on {digit_data['source']} test set")


# -- criterion 6: adversarial robustness gap -----------------------------------

def test_criterion_06_adversarial_robustness(digit_data, sda_run, robust_run):
    test_ds = digit_data["test"]
    spec = AttackSpec(kind="pgd", epsilon=0.1, step_size=0.01, steps=40,
                      random_start=True)
    t0 = time.time()
    standard = robust_accuracy(sda_run["model"], test_ds, spec, seed=0,
                               limit=ATTACK_EXAMPLES)
    robust = robust_accuracy(robust_run["model"], test_ds, spec, seed=0,
                             limit=ATTACK_EXAMPLES)
    attack_minutes = (time.time() - t0) / 60
    gap = robust - standard
    assert gap >= 0.30, (f"robust {robust:.4f} vs standard {standard:.4f}: "
                         f"gap {gap:.4f} < 0.30")
    _announce(6, f"PGD eps=0.1 on {ATTACK_EXAMPLES} images: robust={robust:.4f} "
                 f"standard={standard:.4f} gap={gap:.4f}; attacks took "
                 f"{attack_minutes:.1f} min")


# -- criterion 7: attack correctness -------------------------------------------

def test_criterion_07_attack_correctness(digit_data, sda_run):
    model = sda_run["model"]
    test_ds = digit_data["test"]
    x = test_ds.images[:32][:, None]
    y = test_ds.labels[:32]

    np.testing.assert_array_equal(fgsm(model, x, y, 0.0), x)
    zero_spec = AttackSpec(kind="pgd", epsilon=0.0, steps=5, random_start=True)
    np.testing.assert_array_equal(pgd(model, x, y, zero_spec), x)

    eps = 0.1
    one_step = AttackSpec(kind="pgd", epsilon=eps, step_size=eps, steps=1,
                          random_start=False)
    np.testing.assert_array_equal(pgd(model, x, y, one_step),
                                  fgsm(model, x, y, eps))

    for spec in (AttackSpec(kind="fgsm", epsilon=0.3),
                 AttackSpec(kind="pgd", epsilon=0.3, step_size=0.01, steps=10,
                            random_start=True)):
        adv = pgd(model, x, y, spec) if spec.kind == "pgd" else \
            fgsm(model, x, y, spec.epsilon)
        assert np.abs(adv - x).max() <= spec.epsilon + 1e-9
        assert adv.min() >= 0.0 and adv.max() <= 1.0
    _announce(7, "eps=0 identity, FGSM == 1-step PGD, ball/range invariants")


# -- criterion 8: feature generation -------------------------------------------

def test_criterion_08_feature_generation(digit_data, robust_run):
    model = robust_run["model"]
    t0 = time.time()
    activations, improved_total, restarts_total = [], 0, 0
    for capsule in range(model.config.output_caps):
        spec = GenSpec(layer="output", capsule=capsule, iterations=1000,
                       restarts=12, keep_best=3, seed=0)
        result = generate(model, spec)
        activations.append(result.activation)
        improved_total += int((result.restart_losses < result.initial_losses).sum())
        restarts_total += spec.restarts
        assert result.image.min() >= 0.0 and result.image.max() <= 1.0
    minutes = (time.time() - t0) / 60
    strong = sum(1 for a in activations if a >= 0.5)
    improved_frac = improved_total / restarts_total
    assert strong >= 7, f"only {strong}/10 capsules reached activation 0.5: {activations}"
    assert improved_frac >= 0.9, f"descent improved only {improved_frac:.2%} of restarts"
    _announce(8, f"{strong}/10 capsules >= 0.5 (activations "
                 f"{[round(a, 2) for a in activations]}); descent progress "
                 f"{improved_frac:.0%}; {minutes:.1f} min")


# -- criterion 9: reproducibility ----------------------------------------------

def test_criterion_09_reproducibility(digit_data, tmp_path):
    if digit_data["source"] == "synthdigits":
        data_dir = digit_data["dir"]
    else:
        data_dir = os.environ["GCAPS_DATA_DIR"]
    cfg = tmp_path / "repro.cfg"
    cfg.write_text(f"""
[data]
dir = {data_dir}
train_limit = 512
test_limit = 128

[model]
preset = desk

[train]
steps = 60
batch_size = 16
eval_every = 30
eval_examples = 64

[attack]
epsilons = 0.0,0.1
steps = 5
examples = 32
""")
    artifacts = {}
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli_main(["train", "--config", str(cfg), "--out", str(out),
                         "--seed", "11", "--threads", "1"]) == 0
        assert cli_main(["eval", "--config", str(cfg), "--out", str(out / "eval"),
                         "--checkpoint", str(out / "model.gcaps"),
                         "--seed", "11", "--threads", "1"]) == 0
        assert cli_main(["attack", "--config", str(cfg), "--out", str(out / "attack"),
                         "--checkpoint", str(out / "model.gcaps"),
                         "--seed", "11", "--threads", "1"]) == 0
        artifacts[name] = {
            "log": (out / "run_log.csv").read_bytes(),
            "ckpt": (out / "model.gcaps").read_bytes(),
            "metrics": (out / "eval" / "metrics.csv").read_bytes(),
            "robustness": (out / "attack" / "robustness.csv").read_bytes(),
        }
    for key in artifacts["a"]:
        assert artifacts["a"][key] == artifacts["b"][key], f"{key} differs between runs"
    _announce(9, "two identical seeded runs: run log, checkpoint, metrics and "
                 "robustness CSVs bit-identical")


# -- criterion 10: format round-trips -------------------------------------------

def test_criterion_10_format_roundtrips(digit_data, sda_run, tmp_path, rng):
    model = sda_run["model"]
    path = tmp_path / "model.gcaps"
    save_checkpoint(path, model, step=TRAIN_STEPS, seed=0)
    loaded, _, _ = load_checkpoint(path, expected_config=model.config)
    x = rng.uniform(size=(100, 28, 28))
    diff = np.abs(model.class_scores(x) - loaded.class_scores(x)).max()
    assert diff == 0.0, f"forward parity broken: max abs diff {diff}"

    # IDX fixture with hand-computed bytes.
    images = np.array([[[0, 128], [255, 64]]], dtype=np.uint8)
    img_path, lbl_path = tmp_path / "img", tmp_path / "lbl"
    img_path.write_bytes(struct.pack(">IIII", 0x00000803, 1, 2, 2) +
                         bytes([0, 128, 255, 64]))
    lbl_path.write_bytes(struct.pack(">II", 0x00000801, 1) + bytes([7]))
    ds = load_idx(img_path, lbl_path)
    np.testing.assert_allclose(ds.images[0],
                               np.array([[0, 128], [255, 64]]) / 255.0)
    assert ds.labels[0] == 7

    test_ds = digit_data["test"]
    rho = usefulness(np.ones(len(test_ds)), range(test_ds.num_classes), test_ds)
    assert rho == 0.0, f"constant-1 feature scored {rho}, expected exactly 0"
    _announce(10, f"checkpoint parity diff {diff}; IDX bytes match; "
                  f"constant-feature usefulness exactly {rho}")
