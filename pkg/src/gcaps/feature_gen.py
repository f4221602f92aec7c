"""Activation-maximization image generation for single capsules.

Starting from random pixels, repeatedly steps the image against the
sign of the activation-loss gradient, clipping to [0, 1] each step.
Multiple restarts dodge local minima; the returned image is the
pixelwise average of the lowest-loss restarts.  Averaging deliberately
blurs capsules that encode several distinct features, so the
per-restart images are kept alongside the average.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .io_utils import write_csv
from .rng import substream


@dataclass
class GenSpec:
    layer: str = "output"         # {"hidden", "output"}
    capsule: int = 0
    step_size: float = 0.01       # per-pixel update magnitude
    l1_weight: float = 1e-5       # pixel penalty weight
    iterations: int = 1000
    restarts: int = 60
    keep_best: int = 5
    l1_enabled: Optional[bool] = None   # default: only for hidden capsules
    seed: int = 0

    def __post_init__(self):
        if self.layer not in ("hidden", "output"):
            raise ConfigError(f"unknown target layer '{self.layer}'")
        if self.keep_best > self.restarts:
            raise ConfigError(f"keep_best ({self.keep_best}) exceeds restarts ({self.restarts})")
        if self.keep_best < 1 or self.restarts < 1 or self.iterations < 0:
            raise ConfigError("restarts and keep_best must be >= 1, iterations >= 0")
        if self.l1_enabled is None:
            self.l1_enabled = self.layer == "hidden"


def _capsule_activation(model, x_t: Tensor, layer: str, capsule: int) -> Tensor:
    """(B,) activation norms of one capsule under a full forward pass."""
    result = model.forward(x_t)
    state = result.hidden if layer == "hidden" else result.output
    norms = ad.l2_norm(state.activations, axis=-1)          # (B, J)
    if not 0 <= capsule < norms.shape[1]:
        raise ConfigError(f"capsule index {capsule} outside layer of size {norms.shape[1]}")
    selector = np.zeros(norms.shape[1])
    selector[capsule] = 1.0
    return ad.sum_(ad.mul(norms, selector), axis=1)


def _loss_terms(activation: Tensor, x_t: Tensor, l1_enabled: bool,
                l1_weight: float) -> Tensor:
    """(B,) per-image activation loss (||v|| - 1)^2 [+ lambda * sum(pixels)]."""
    loss = ad.square(ad.sub(activation, 1.0))
    if l1_enabled:
        loss = ad.add(loss, ad.mul(ad.sum_(x_t, axis=(1, 2, 3)), l1_weight))
    return loss


def activation_loss(model, image, capsule: int, layer: str = "output",
                    l1_enabled: Optional[bool] = None,
                    l1_weight: float = 1e-5) -> float:
    """Activation loss of a single image for one capsule."""
    if l1_enabled is None:
        l1_enabled = layer == "hidden"
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    x_t = Tensor(x)
    act = _capsule_activation(model, x_t, layer, capsule)
    return float(_loss_terms(act, x_t, l1_enabled, l1_weight).data[0])


@dataclass
class GenResult:
    image: np.ndarray               # (H, W) average of the kept restarts
    activation: float               # capsule activation on the averaged image
    loss: float                     # activation loss of the averaged image
    restart_images: np.ndarray      # (R, H, W) final images per restart
    restart_losses: np.ndarray      # (R,)
    restart_activations: np.ndarray
    initial_losses: np.ndarray      # (R,) losses at the random inits


def generate(model, spec: GenSpec) -> GenResult:
    """Run all restarts (batched) and average the keep-best results."""
    cfg = model.config
    shape = (spec.restarts, 1, cfg.input_height, cfg.input_width)
    x = np.stack([
        substream(spec.seed, "gen", spec.layer, spec.capsule, r).uniform(size=shape[1:])
        for r in range(spec.restarts)
    ])

    def batch_losses(images: np.ndarray):
        with ad.no_grad():
            x_t = Tensor(images)
            act = _capsule_activation(model, x_t, spec.layer, spec.capsule)
            loss = _loss_terms(act, x_t, spec.l1_enabled, spec.l1_weight)
        return loss.data.copy(), act.data.copy()

    initial_losses, _ = batch_losses(x)
    with model.params_frozen():
        for _ in range(spec.iterations):
            x_t = Tensor(x, requires_grad=True)
            act = _capsule_activation(model, x_t, spec.layer, spec.capsule)
            losses = _loss_terms(act, x_t, spec.l1_enabled, spec.l1_weight)
            # Restarts are independent, so one backward from the sum
            # yields each restart's own gradient.
            ad.sum_(losses).backward()
            x = np.clip(x - spec.step_size * np.sign(x_t.grad), 0.0, 1.0)

    final_losses, final_acts = batch_losses(x)
    keep = np.argsort(final_losses, kind="stable")[:spec.keep_best]
    averaged = x[keep, 0].mean(axis=0)
    avg_loss, avg_act = batch_losses(averaged[None, None])
    return GenResult(
        image=averaged,
        activation=float(avg_act[0]),
        loss=float(avg_loss[0]),
        restart_images=x[:, 0],
        restart_losses=final_losses,
        restart_activations=final_acts,
        initial_losses=initial_losses,
    )


GENERATION_HEADER = ("layer", "capsule", "activation", "loss")


def write_generation_csv(path, rows: Iterable[Sequence]) -> None:
    write_csv(path, GENERATION_HEADER, rows)
