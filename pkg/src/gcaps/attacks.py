"""FGSM and PGD adversarial example generation under an L-inf budget.

Both attacks maximize the training margin loss with respect to the
input, keep every iterate inside the epsilon ball around the clean
image and inside the valid pixel range [0, 1], and flow gradients
through all routing iterations exactly as training does.  Randomness
(the PGD random start) is drawn from per-example substreams keyed by
(seed, example index) so batched and per-example execution agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError
from .io_utils import write_csv
from .model import margin_loss
from .rng import substream

BALL_TOL = 1e-9


@dataclass
class AttackSpec:
    kind: str = "pgd"            # {"fgsm", "pgd"}
    epsilon: float = 0.3         # L-inf radius in pixel units
    step_size: float = 0.01      # a
    steps: int = 40              # k
    random_start: bool = True

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ConfigError(f"unknown attack kind '{self.kind}'")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.step_size <= 0.0:
            raise ConfigError(f"step size must be positive, got {self.step_size}")
        if self.steps < 1:
            raise ConfigError(f"step count must be >= 1, got {self.steps}")


def _as_images(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[:, None]
    return arr


def input_loss_gradient(model, x: np.ndarray, labels) -> np.ndarray:
    """d margin_loss / d x, with parameter gradients suppressed."""
    with model.params_frozen():
        x_t = Tensor(x, requires_grad=True)
        result = model.forward(x_t)
        loss = margin_loss(result.class_norms, labels)
        loss.backward()
    return x_t.grad


def batch_loss(model, x: np.ndarray, labels) -> float:
    return margin_loss(model.forward(x).class_norms, labels).item()


def fgsm(model, x, labels, epsilon: float) -> np.ndarray:
    """Single sign-gradient step of size epsilon, clipped to [0, 1]."""
    x = _as_images(x)
    grad = input_loss_gradient(model, x, labels)
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def pgd(model, x, labels, spec: AttackSpec, seed: int = 0,
        index_offset: int = 0) -> np.ndarray:
    """k steps of projected sign-gradient ascent on the margin loss.

    Each step moves by ``spec.step_size`` along the loss-gradient sign,
    then projects onto the intersection of the epsilon ball around the
    clean input and the pixel range.  With ``random_start`` the iterate
    begins uniformly inside the ball (per-example substreams keyed by
    seed and absolute example index).
    """
    x0 = _as_images(x)
    if spec.epsilon == 0.0:
        return x0.copy()
    adv = x0.copy()
    if spec.random_start:
        noise = np.stack([
            substream(seed, "attack", index_offset + i).uniform(
                -spec.epsilon, spec.epsilon, size=x0.shape[1:])
            for i in range(x0.shape[0])
        ])
        adv = np.clip(x0 + noise, 0.0, 1.0)
    for _ in range(spec.steps):
        grad = input_loss_gradient(model, adv, labels)
        adv = adv + spec.step_size * np.sign(grad)
        adv = np.clip(adv, x0 - spec.epsilon, x0 + spec.epsilon)
        adv = np.clip(adv, 0.0, 1.0)
    return adv


def attack_batch(model, x, labels, spec: AttackSpec, seed: int = 0,
                 index_offset: int = 0) -> np.ndarray:
    x = _as_images(x)
    if spec.epsilon == 0.0:
        return x.copy()
    if spec.kind == "fgsm":
        adv = fgsm(model, x, labels, spec.epsilon)
    else:
        adv = pgd(model, x, labels, spec, seed=seed, index_offset=index_offset)
    check_attack_constraints(x, adv, spec.epsilon)
    return adv


def check_attack_constraints(x: np.ndarray, adv: np.ndarray, epsilon: float) -> None:
    """Ball and pixel-range invariants, checked on every generated example."""
    gap = np.abs(adv - x).reshape(len(x), -1).max(axis=1)
    if np.any(gap > epsilon + BALL_TOL):
        raise AssertionError(f"adversarial example left the epsilon ball: "
                             f"max |x_adv - x| = {gap.max()} > {epsilon}")
    if adv.min() < 0.0 or adv.max() > 1.0:
        raise AssertionError("adversarial example left the valid pixel range [0, 1]")


def robust_accuracy(model, dataset, spec: AttackSpec, seed: int = 0,
                    limit: int | None = None, batch_size: int = 100) -> float:
    """Fraction of examples still classified correctly after a per-example attack."""
    images = _as_images(dataset.images)
    labels = np.asarray(dataset.labels)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    correct = 0
    for start in range(0, len(labels), batch_size):
        x = images[start:start + batch_size]
        y = labels[start:start + batch_size]
        adv = attack_batch(model, x, y, spec, seed=seed, index_offset=start)
        correct += int((model.predict(adv) == y).sum())
    return correct / len(labels)


ROBUSTNESS_HEADER = ("dataset", "algorithm", "attack", "epsilon", "accuracy")


def write_robustness_csv(path, rows: Iterable[Sequence]) -> None:
    write_csv(path, ROBUSTNESS_HEADER, rows)
