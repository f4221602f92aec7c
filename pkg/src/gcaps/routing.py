"""Iterative routing between two capsule layers.

Two algorithms share one interface: scaled-distance-agreement (SDA)
routing, where agreement is a negatively scaled Euclidean distance
between activation-restricted predictions and upper capsule outputs,
and the classic routing-by-agreement (RBA) baseline, where agreement is
the dot product between raw predictions and upper outputs, accumulated
into the logits.

Everything here is expressed in autodiff ops, so gradients flow through
all routing iterations (the couplings are graph nodes, not constants).

Shapes (B examples, I lower capsules, J upper capsules):
    lower activations  (B, I, d_l)
    predictions        (B, I, J, d_u)
    couplings/logits   (B, I, J), rows over j summing to 1
    upper activations  (B, J, d_u)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeMismatchError

# Coupling assigned to a parent capsule at half the mean distance.
PARENT_COUPLING = 0.9
DEFAULT_ITERATIONS = 3


@dataclass
class RoutingResult:
    """Per-forward-pass routing artifacts, kept for metrics and loss."""

    upper: Tensor               # (B, J, d_u) upper activations
    couplings: Tensor           # (B, I, J) couplings that produced `upper`
    logits: Tensor              # (B, I, J) final routing logits
    scale: Optional[Tensor]     # (B, I) per-lower-capsule distance scale (SDA only)


def _check_routing_shapes(op: str, lower: Tensor, predictions: Tensor) -> None:
    if lower.ndim != 3 or predictions.ndim != 4:
        raise ShapeMismatchError(op, lower.shape, predictions.shape,
                                 detail="expected (B,I,d_l) activations and (B,I,J,d_u) predictions")
    if lower.shape[:2] != predictions.shape[:2]:
        raise ShapeMismatchError(op, lower.shape, predictions.shape,
                                 detail="batch or lower-capsule counts differ")


def scale_factor(c_ip: float, num_upper: int, d_p: float, d_o: float) -> float:
    """Distance scale t making softmax assign coupling ``c_ip`` to the parent.

    Solves softmax over logits {d_p * t, (J-1) x d_o * t} = c_ip for t.
    Well defined only for more than one upper capsule and distinct
    distances.
    """
    if num_upper < 2:
        raise DomainError("scale_factor", f"requires at least 2 upper capsules, got {num_upper}")
    if not 0.0 < c_ip < 1.0:
        raise DomainError("scale_factor", f"parent coupling must be in (0, 1), got {c_ip}")
    if d_p == d_o:
        raise DomainError("scale_factor", "parent and non-parent distances must differ")
    return (math.log(c_ip * (num_upper - 1)) - math.log(1.0 - c_ip)) / (d_p - d_o)


def restrict_predictions(lower: Tensor, predictions: Tensor) -> Tensor:
    """Cap each prediction's norm at its predicting capsule's activation.

    Keeps the prediction direction and rescales its length to
    min(||v_i||, ||u_hat||): an inactive lower capsule cannot cast a
    large vote regardless of its learned transform.  Norm divisions are
    guarded, so a fully inactive capsule's vote is bounded by ~1e-6
    instead of exactly zero.
    """
    _check_routing_shapes("restrict_predictions", lower, predictions)
    lower_norm = ad.l2_norm(lower, axis=-1, keepdims=True)             # (B, I, 1)
    lower_norm = ad.reshape(lower_norm, lower_norm.shape + (1,))       # (B, I, 1, 1)
    pred_norm = ad.l2_norm(predictions, axis=-1, keepdims=True)        # (B, I, J, 1)
    target = ad.minimum(lower_norm, pred_norm)
    return ad.mul(predictions, ad.div(target, pred_norm))


def _weighted_vote(couplings: Tensor, predictions: Tensor) -> Tensor:
    """s_j = sum_i c_ij * u_hat_{j|i} -> (B, J, d_u)."""
    return ad.weighted_sum(couplings, predictions)


def sda_route(lower: Tensor, predictions: Tensor,
              iterations: int = DEFAULT_ITERATIONS) -> RoutingResult:
    """Scaled-distance-agreement routing.

    Per iteration: softmax couplings over the logits, weighted vote,
    squash, then recompute the logits as distance times a per-capsule
    scale chosen so that a parent at half the mean prediction-to-output
    distance would receive coupling 0.9.  Logits are reassigned each
    iteration, not accumulated.
    """
    _check_routing_shapes("sda_route", lower, predictions)
    if iterations < 1:
        raise DomainError("sda_route", f"iterations must be >= 1, got {iterations}")
    num_upper = predictions.shape[2]
    if num_upper < 2:
        raise DomainError("sda_route", f"requires at least 2 upper capsules, got {num_upper}")

    restricted = restrict_predictions(lower, predictions)
    numerator = math.log(PARENT_COUPLING * (num_upper - 1)) - math.log(1.0 - PARENT_COUPLING)

    logits = Tensor(np.zeros(predictions.shape[:3]))
    couplings = upper = scale = None
    for _ in range(iterations):
        couplings = ad.softmax(logits, axis=-1)
        upper = ad.squash(_weighted_vote(couplings, restricted), axis=-1)
        # (B, I, J) distances between restricted predictions and outputs
        dist = ad.pair_distance(restricted, upper)
        scale = ad.div(ad.Tensor(np.float64(numerator)),
                       ad.mul(ad.mean(dist, axis=-1), -0.5))           # (B, I)
        logits = ad.mul(dist, ad.reshape(scale, scale.shape + (1,)))
    return RoutingResult(upper=upper, couplings=couplings, logits=logits, scale=scale)


def rba_route(lower: Tensor, predictions: Tensor,
              iterations: int = DEFAULT_ITERATIONS) -> RoutingResult:
    """Routing-by-agreement baseline.

    Predictions are used unrestricted and the dot product between each
    prediction and the upper output is accumulated into the logits, so a
    large learned prediction can couple strongly even when its lower
    capsule is inactive.  ``lower`` is accepted for interface parity but
    does not enter the computation.
    """
    _check_routing_shapes("rba_route", lower, predictions)
    if iterations < 1:
        raise DomainError("rba_route", f"iterations must be >= 1, got {iterations}")

    logits = Tensor(np.zeros(predictions.shape[:3]))
    couplings = upper = None
    for _ in range(iterations):
        couplings = ad.softmax(logits, axis=-1)
        upper = ad.squash(_weighted_vote(couplings, predictions), axis=-1)
        agree = ad.pair_dot(predictions, upper)
        logits = ad.add(logits, agree)
    return RoutingResult(upper=upper, couplings=couplings, logits=logits, scale=None)


ROUTERS = {"sda": sda_route, "rba": rba_route}
