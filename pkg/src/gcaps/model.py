"""Capsule network: conv stem, primary capsules, one hidden capsule
layer and an output capsule layer, with pluggable routing.

The default architecture follows the classic CapsNet stem (9x9 conv,
ReLU, 9x9 stride-2 primary-capsule conv) with a 32-capsule hidden layer
inserted between the primary and output capsule layers.  A reduced
"desk" preset shrinks the stem for fast CPU experiments; a "tiny"
preset exists for finite-difference tests.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeMismatchError
from .routing import ROUTERS, DEFAULT_ITERATIONS, RoutingResult
from .rng import substream


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; round-trips through canonical text."""

    input_height: int = 28
    input_width: int = 28
    conv_channels: int = 256
    conv_kernel: int = 9
    conv_stride: int = 1
    primary_types: int = 32
    primary_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    hidden_caps: int = 32
    hidden_dim: int = 8
    output_caps: int = 10
    output_dim: int = 16
    routing: str = "sda"
    iterations: int = DEFAULT_ITERATIONS

    def __post_init__(self):
        if self.hidden_caps < 2 or self.output_caps < 2:
            raise ConfigError("hidden_caps and output_caps must each be >= 2 "
                              "(the distance scale is undefined for a single parent)")
        if self.routing not in ROUTERS:
            raise ConfigError(f"unknown routing '{self.routing}', expected one of {sorted(ROUTERS)}")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")

    # -- derived sizes --

    def conv_out_hw(self) -> tuple:
        h = (self.input_height - self.conv_kernel) // self.conv_stride + 1
        w = (self.input_width - self.conv_kernel) // self.conv_stride + 1
        return h, w

    def primary_out_hw(self) -> tuple:
        h, w = self.conv_out_hw()
        ph = (h - self.primary_kernel) // self.primary_stride + 1
        pw = (w - self.primary_kernel) // self.primary_stride + 1
        if ph < 1 or pw < 1:
            raise ConfigError("input too small for the configured conv stack")
        return ph, pw

    @property
    def num_primary(self) -> int:
        ph, pw = self.primary_out_hw()
        return self.primary_types * ph * pw

    def param_shapes(self) -> Dict[str, tuple]:
        return {
            "conv1_w": (self.conv_channels, 1, self.conv_kernel, self.conv_kernel),
            "conv1_b": (self.conv_channels,),
            "primary_w": (self.primary_types * self.primary_dim, self.conv_channels,
                          self.primary_kernel, self.primary_kernel),
            "primary_b": (self.primary_types * self.primary_dim,),
            "w_hidden": (self.num_primary, self.hidden_caps, self.primary_dim, self.hidden_dim),
            "w_output": (self.hidden_caps, self.output_caps, self.hidden_dim, self.output_dim),
        }

    def to_text(self) -> str:
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ConfigError(f"unknown model config field '{key}'")
            kwargs[key] = value.strip() if key == "routing" else int(value)
        return cls(**kwargs)


def full_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides) if overrides else ModelConfig()


def desk_config(**overrides) -> ModelConfig:
    """Reduced stem for laptop-CPU experiments."""
    cfg = ModelConfig(conv_channels=32, primary_types=8)
    return replace(cfg, **overrides) if overrides else cfg


def tiny_config(**overrides) -> ModelConfig:
    """4 primary capsules, 3 hidden, 2 output; small enough to finite-difference."""
    cfg = ModelConfig(input_height=6, input_width=6, conv_channels=2, conv_kernel=3,
                      conv_stride=1, primary_types=4, primary_dim=2, primary_kernel=3,
                      primary_stride=2, hidden_caps=3, hidden_dim=2,
                      output_caps=2, output_dim=3)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class LayerState:
    """Routing artifacts of one routed layer for one forward pass."""

    name: str
    predictions: Tensor          # (B, I, J, d_u)
    result: RoutingResult

    @property
    def couplings(self) -> Tensor:
        return self.result.couplings

    @property
    def logits(self) -> Tensor:
        return self.result.logits

    @property
    def activations(self) -> Tensor:
        return self.result.upper

    def activation_norms(self) -> np.ndarray:
        return np.sqrt((self.result.upper.data ** 2).sum(axis=-1))


@dataclass
class ForwardResult:
    input: Tensor                # (B, 1, H, W), tracked when attacking
    class_norms: Tensor          # (B, N) output capsule activations
    layers: List[LayerState]     # hidden, output

    @property
    def hidden(self) -> LayerState:
        return self.layers[0]

    @property
    def output(self) -> LayerState:
        return self.layers[1]


def _transform(v: Tensor, w: Tensor) -> Tensor:
    """Predictions u_hat_{j|i} = W_ij v_i for all capsule pairs."""
    return ad.capsule_transform(v, w)


class CapsNet:
    """The network plus its parameters; forward exposes routing state."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 params: Optional[Dict[str, Tensor]] = None):
        self.config = config
        if params is not None:
            expected = config.param_shapes()
            for name, shape in expected.items():
                if name not in params or tuple(params[name].shape) != shape:
                    got = tuple(params[name].shape) if name in params else None
                    raise ConfigError(f"parameter '{name}' has shape {got}, expected {shape}")
            self.params = params
        else:
            self.params = self._init_params(seed)

    def _init_params(self, seed: int) -> Dict[str, Tensor]:
        shapes = self.config.param_shapes()
        params: Dict[str, Tensor] = {}
        for name, shape in shapes.items():
            rng = substream(seed, "init", name)
            if name.endswith("_b"):
                data = np.zeros(shape)
            elif name.startswith(("conv", "primary")):
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                data = rng.uniform(-bound, bound, size=shape)
            else:
                # Transform matrices: small so early prediction norms stay
                # well below the lower activations and restriction binds.
                data = rng.normal(0.0, 0.1, size=shape)
            params[name] = Tensor(data, requires_grad=True)
        return params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    @contextlib.contextmanager
    def params_frozen(self):
        """Temporarily stop tracking parameter gradients (input-only attacks)."""
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield
        finally:
            for p in self.params.values():
                p.requires_grad = True

    def _prepare_input(self, x, track_input: bool) -> Tensor:
        if isinstance(x, Tensor):
            arr = x.data
        else:
            arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim == 3:
            arr = arr[:, None]
        cfg = self.config
        if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[2:] != (cfg.input_height, cfg.input_width):
            raise ShapeMismatchError("forward", arr.shape,
                                     (-1, 1, cfg.input_height, cfg.input_width),
                                     detail="input images do not match the configured size")
        if isinstance(x, Tensor):
            if arr is not x.data:
                raise ShapeMismatchError("forward", x.shape,
                                         (-1, 1, cfg.input_height, cfg.input_width),
                                         detail="tracked tensor inputs must already be (B,1,H,W)")
            return x
        return Tensor(arr, requires_grad=track_input)

    def forward(self, x, track_input: bool = False) -> ForwardResult:
        cfg = self.config
        x_t = self._prepare_input(x, track_input)
        batch = x_t.shape[0]

        h = ad.relu(ad.conv2d(x_t, self.params["conv1_w"], self.params["conv1_b"],
                              stride=cfg.conv_stride))
        p = ad.conv2d(h, self.params["primary_w"], self.params["primary_b"],
                      stride=cfg.primary_stride)
        ph, pw = cfg.primary_out_hw()
        # (B, types*dim, ph, pw) -> (B, types, dim, ph, pw) -> capsule-major
        p = ad.reshape(p, (batch, cfg.primary_types, cfg.primary_dim, ph, pw))
        p = ad.transpose(p, (0, 1, 3, 4, 2))
        p = ad.reshape(p, (batch, cfg.num_primary, cfg.primary_dim))
        primary_v = ad.squash(p, axis=-1)

        route = ROUTERS[cfg.routing]
        pred_hidden = _transform(primary_v, self.params["w_hidden"])
        hidden = route(primary_v, pred_hidden, cfg.iterations)

        pred_output = _transform(hidden.upper, self.params["w_output"])
        output = route(hidden.upper, pred_output, cfg.iterations)

        class_norms = ad.l2_norm(output.upper, axis=-1)
        return ForwardResult(
            input=x_t,
            class_norms=class_norms,
            layers=[LayerState("hidden", pred_hidden, hidden),
                    LayerState("output", pred_output, output)],
        )

    def class_scores(self, x) -> np.ndarray:
        with ad.no_grad():
            return self.forward(x).class_norms.data

    def predict(self, x) -> np.ndarray:
        """Class with the largest output norm; ties go to the lowest index."""
        return np.argmax(self.class_scores(x), axis=1)


def margin_loss(class_norms: Tensor, labels, m_plus: float = 0.9,
                m_minus: float = 0.1, lam: float = 0.5) -> Tensor:
    """Per-class margin loss, averaged over the batch.

    sum_k T_k max(0, m+ - ||v_k||)^2 + lam (1 - T_k) max(0, ||v_k|| - m-)^2
    with T_k = 1 for the true class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = class_norms.shape[1]
    onehot = np.zeros((labels.shape[0], num_classes))
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    present = ad.square(ad.relu(ad.sub(m_plus, class_norms)))
    absent = ad.square(ad.relu(ad.sub(class_norms, m_minus)))
    per_example = ad.sum_(ad.add(ad.mul(onehot, present),
                                 ad.mul((1.0 - onehot) * lam, absent)), axis=1)
    return ad.mean(per_example)
