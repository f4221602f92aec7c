"""Training loops (plain ERM and ERM under attack), optimizers,
checkpoint serialization and run logging.

Adversarial training replaces each batch by its PGD perturbation
(defaults a=0.01, k=40, eps=0.3) before the gradient step, minimizing
the empirical risk under attack.  A fixed seed makes the whole
trajectory reproducible on a single thread.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .attacks import AttackSpec, check_attack_constraints, pgd, robust_accuracy
from .autodiff import Tensor
from .data_io import batch_iter
from .errors import CheckpointError, ConfigError, TrainingDivergedError
from .model import CapsNet, ModelConfig, margin_loss  # noqa: F401  (margin_loss re-exported)

CHECKPOINT_MAGIC = b"GCAPS"
CHECKPOINT_VERSION = 1


def default_inner_attack() -> AttackSpec:
    return AttackSpec(kind="pgd", epsilon=0.3, step_size=0.01, steps=40, random_start=True)


@dataclass
class TrainSpec:
    steps: int = 5000
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"              # {"adam", "sgd"}
    adversarial: bool = False
    attack: Optional[AttackSpec] = None  # inner maximizer when adversarial
    attack_warmup: int = 0               # steps over which the inner radius ramps 0 -> eps
    seed: int = 0
    eval_every: int = 500
    eval_examples: int = 256
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        if self.attack_warmup < 0:
            raise ConfigError("attack_warmup must be >= 0")
        if self.adversarial and self.attack is None:
            self.attack = default_inner_attack()

    def inner_attack_at(self, step_index: int) -> Optional[AttackSpec]:
        """Inner maximizer for a 0-based step, honoring the warmup ramp.

        Adversarial training straight from random parameters at the full
        radius gives the model no foothold to learn at desk scale; the
        ramp reaches the configured radius at ``attack_warmup`` steps and
        is the identity when warmup is 0.
        """
        if not self.adversarial:
            return None
        if step_index >= self.attack_warmup or self.attack_warmup == 0:
            return self.attack
        factor = step_index / self.attack_warmup
        eps = self.attack.epsilon * factor
        if eps <= 0.0:
            return None
        return replace(self.attack, epsilon=eps,
                       steps=max(1, int(round(self.attack.steps * factor))))


class Adam:
    """Adaptive-moment estimation over the model's parameter dict."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class SGD:
    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data -= self.lr * p.grad


def make_optimizer(model: CapsNet, spec: TrainSpec):
    if spec.optimizer == "adam":
        return Adam(model.params, lr=spec.learning_rate)
    return SGD(model.params, lr=spec.learning_rate)


def train_step(model: CapsNet, optimizer, images: np.ndarray, labels: np.ndarray,
               spec: TrainSpec, step_index: int = 0) -> float:
    """One optimizer update; under the adversarial flag the batch is
    replaced by its PGD perturbation first.  Returns the (possibly
    adversarial) batch loss."""
    x = images
    inner = spec.inner_attack_at(step_index)
    if inner is not None and inner.epsilon > 0.0:
        x = pgd(model, images, labels, inner, seed=spec.seed,
                index_offset=step_index * spec.batch_size)
        check_attack_constraints(np.asarray(images, dtype=np.float64).reshape(x.shape),
                                 x, inner.epsilon)
    model.zero_grad()
    loss = margin_loss(model.forward(x).class_norms, labels)
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss {value} at step {step_index}; aborting before the update")
    loss.backward()
    optimizer.step()
    return value


@dataclass
class TrainResult:
    model: CapsNet
    log_rows: List[Tuple]          # (step, loss, clean_acc or "", robust_acc or "")
    final_step: int


def _eval_accuracy(model: CapsNet, dataset, limit: int) -> float:
    images = dataset.images[:limit]
    labels = np.asarray(dataset.labels[:limit])
    return float((model.predict(images) == labels).mean())


def train(model: CapsNet, train_set, spec: TrainSpec, eval_set=None,
          log_path=None, checkpoint_dir=None, quiet: bool = True) -> TrainResult:
    """Run ``spec.steps`` updates, streaming rows into the append-only run log."""
    optimizer = make_optimizer(model, spec)
    batches = batch_iter(train_set, spec.batch_size, seed=spec.seed)
    rows: List[Tuple] = []
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a", encoding="utf-8")
        if log_file.tell() == 0:
            log_file.write("step,loss,clean_acc,robust_acc\n")
    try:
        for step in range(1, spec.steps + 1):
            batch = next(batches)
            loss = train_step(model, optimizer, batch.images, batch.labels, spec,
                              step_index=step - 1)
            clean = robust = ""
            if eval_set is not None and spec.eval_every and step % spec.eval_every == 0:
                clean = repr(_eval_accuracy(model, eval_set, spec.eval_examples))
                if spec.adversarial:
                    robust = repr(robust_accuracy(
                        model, eval_set, spec.attack, seed=spec.seed,
                        limit=min(spec.eval_examples, 64)))
                if not quiet:
                    print(f"step {step}: loss {loss:.4f} clean {clean} robust {robust}",
                          flush=True)
            row = (step, repr(loss), clean, robust)
            rows.append(row)
            if log_file is not None:
                log_file.write(",".join(str(v) for v in row) + "\n")
                log_file.flush()
            if checkpoint_dir is not None and spec.checkpoint_every and \
                    step % spec.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step_{step:06d}.gcaps",
                                model, step=step, seed=spec.seed)
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model=model, log_rows=rows, final_step=spec.steps)


# -- checkpoint format -------------------------------------------------------
#
# magic "GCAPS" | u32 version | u64 step | u64 seed
# | u32 config length | canonical config text
# | u32 parameter count | records
# record: u32 name length | name utf-8 | u32 rank | u32 extents[rank]
#         | float64 little-endian values
# All integers little-endian.


def serialize_checkpoint(model: CapsNet, step: int, seed: int) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<QQ", step, seed))
    config_text = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(config_text)))
    buf.write(config_text)
    buf.write(struct.pack("<I", len(model.params)))
    for name, tensor in model.params.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", tensor.data.ndim))
        buf.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.data.shape))
        buf.write(tensor.data.astype("<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, model: CapsNet, step: int = 0, seed: int = 0) -> None:
    from .io_utils import atomic_write_bytes
    atomic_write_bytes(path, serialize_checkpoint(model, step, seed))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint "
                                  f"(needed {count} bytes at offset {self.pos})")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None
                    ) -> Tuple[CapsNet, int, int]:
    """Read a checkpoint; returns (model, step, seed).

    Rejects bad magic, unknown versions, truncation, parameter shapes
    inconsistent with the stored config, and (when ``expected_config``
    is given) any config field that differs from the expectation.
    """
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: checkpoint file not found") from None
    r = _Reader(raw, path)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a GCAPS checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    step, seed = r.u64(), r.u64()
    config = ModelConfig.from_text(r.take(r.u32()).decode("utf-8"))
    if expected_config is not None:
        for name in config.__dataclass_fields__:
            got, want = getattr(config, name), getattr(expected_config, name)
            if got != want:
                raise CheckpointError(
                    f"{path}: config field '{name}' is {got}, expected {want}")
    expected_shapes = config.param_shapes()
    count = r.u32()
    if count != len(expected_shapes):
        raise CheckpointError(f"{path}: {count} parameters stored, "
                              f"expected {len(expected_shapes)}")
    params: Dict[str, Tensor] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        if name not in expected_shapes:
            raise CheckpointError(f"{path}: unexpected parameter '{name}'")
        if shape != expected_shapes[name]:
            raise CheckpointError(f"{path}: parameter '{name}' has shape {shape}, "
                                  f"expected {expected_shapes[name]}")
        values = np.frombuffer(r.take(8 * int(np.prod(shape))), dtype="<f8")
        params[name] = Tensor(values.reshape(shape).astype(np.float64),
                              requires_grad=True)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    missing = set(expected_shapes) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    model = CapsNet(config, params=params)
    return model, step, seed
