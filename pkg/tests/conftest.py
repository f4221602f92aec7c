"""Shared test helpers: finite-difference gradient checking and data."""

from __future__ import annotations

import numpy as np
import pytest

from gcaps.autodiff import Tensor


def finite_difference_grads(fn, arrays, h=1e-5):
    """Central-difference gradients of a scalar-valued function.

    ``fn`` maps plain numpy arrays to a float; each array element is
    perturbed by +/- h.
    """
    grads = []
    base = [np.array(a, dtype=np.float64) for a in arrays]
    for k, arr in enumerate(base):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = fn(*base)
            flat[idx] = orig - h
            down = fn(*base)
            flat[idx] = orig
            gflat[idx] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, context=""):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    worst = float(rel.max()) if rel.size else 0.0
    assert worst < rtol, (
        f"gradient mismatch{' in ' + context if context else ''}: "
        f"max relative error {worst:.3e} >= {rtol}")


def gradcheck(build_loss, arrays, rtol=1e-4, h=1e-5, context=""):
    """Compare backward() gradients against central finite differences.

    ``build_loss`` maps Tensors (one per input array) to a scalar Tensor.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()

    def eval_loss(*plain):
        return float(build_loss(*[Tensor(p) for p in plain]).data)

    numeric = finite_difference_grads(eval_loss, arrays, h=h)
    for t, n in zip(tensors, numeric):
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert_grads_close(grad, n, rtol=rtol, context=context)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def boosted_tiny_model(seed=4, routing="sda"):
    """Tiny model with transform weights scaled into a trainable range.

    At the tiny preset's scale the default small-init predictions are
    crushed by the double squash, leaving a nearly flat loss; unit tests
    that need learning signal boost the transforms.
    """
    from gcaps.model import CapsNet, tiny_config

    model = CapsNet(tiny_config(routing=routing), seed=seed)
    model.params["w_hidden"].data *= 10.0
    model.params["w_output"].data *= 10.0
    return model
