"""Dense-tensor numerics with hand-written reverse-mode gradients.

Tensors are plain ``numpy.ndarray`` objects.  Everything the model stores is
float32; the ops are dtype-preserving so gradient checks can rerun the same
code in float64.
"""

from __future__ import annotations

import hashlib
import zlib
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, InputError

DTYPE = np.float32


def stream_id(name: str) -> int:
    """Stable integer label for a named RNG stream."""
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and a stream path.

    Identical arguments give an identical sequence on every platform, and
    distinct stream paths give independent sequences.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    words += [stream_id(s) if isinstance(s, str) else int(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def dense_forward(weights: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``x @ weights.T + bias`` for ``weights`` of shape (out, in)."""
    if weights.ndim != 2 or x.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise DimensionError(
            f"dense_forward: weights {weights.shape} incompatible with input {x.shape}"
        )
    if bias.shape != (weights.shape[0],):
        raise DimensionError(
            f"dense_forward: bias {bias.shape} incompatible with weights {weights.shape}"
        )
    return x @ weights.T + bias


def dense_backward(
    weights: np.ndarray, x: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_weights, grad_bias, grad_input) of a dense layer."""
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ weights
    return grad_w, grad_b, grad_x


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, grad_out.dtype.type(0))


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``logits`` against integer ``labels``.

    Returns the loss as a Python float and its exact gradient with respect to
    the logits (already divided by the batch size).
    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"softmax_xent: logits {logits.shape} incompatible with labels {labels.shape}"
        )
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"softmax_xent: labels must lie in [0, {k})")
    batch = logits.shape[0]
    rows = np.arange(batch)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(total)
    loss = float(-log_probs[rows, labels].mean())
    grad = exp / total
    grad[rows, labels] -= 1
    grad /= logits.dtype.type(batch)
    return loss, grad


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True
    velocity: np.ndarray | None = None


@dataclass
class ParamSet:
    """Ordered parameter store; iteration follows insertion order."""

    entries: dict[str, Param] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Param:
        if name in self.entries:
            raise ConfigError(f"duplicate parameter id {name!r}")
        value = np.ascontiguousarray(value)
        p = Param(value, np.zeros_like(value), trainable)
        self.entries[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def value(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def zero_grad(self) -> None:
        for p in self.entries.values():
            p.grad[...] = 0

    def count(self, trainable_only: bool = True) -> int:
        return sum(
            p.value.size for p in self.entries.values() if p.trainable or not trainable_only
        )

    def copy(self) -> ParamSet:
        out = ParamSet()
        for name, p in self.entries.items():
            out.entries[name] = Param(
                p.value.copy(),
                p.grad.copy(),
                p.trainable,
                None if p.velocity is None else p.velocity.copy(),
            )
        return out

    def astype(self, dtype) -> ParamSet:
        out = ParamSet()
        for name, p in self.entries.items():
            v = p.value.astype(dtype)
            out.entries[name] = Param(v, np.zeros_like(v), p.trainable)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.entries.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.entries.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()


def sgd_step(
    params: ParamSet,
    learning_rate: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    keys=None,
) -> ParamSet:
    """In-place SGD update with heavy-ball momentum and L2 weight decay.

    Only trainable entries are touched, and if ``keys`` is given only those
    among them.  The momentum buffer starts as a copy of the first gradient,
    so a constant gradient ``g`` gives steps ``g``, ``(1 + m) g``, ...
    """
    if learning_rate < 0:
        raise ConfigError(f"learning rate must be nonnegative, got {learning_rate}")
    if momentum < 0 or weight_decay < 0:
        raise ConfigError("momentum and weight decay must be nonnegative")
    names = params.entries.keys() if keys is None else keys
    for name in names:
        p = params.entries[name]
        if not p.trainable:
            continue
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.value
        if momentum:
            if p.velocity is None:
                p.velocity = g.copy()
            else:
                p.velocity *= momentum
                p.velocity += g
            g = p.velocity
        if learning_rate:
            p.value -= learning_rate * g
    return params


def relative_error(analytic: float, numeric: float, atol: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)


def grad_check(
    loss_fn: Callable[[ParamSet, object], float],
    params: ParamSet,
    probe,
    eps: float = 1e-5,
    num_samples: int = 64,
    seed: int = 0,
    atol: float = 1e-6,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(params, probe)`` must return the scalar loss and leave the
    analytic gradient in ``params[...].grad``.  The check runs on a float64
    copy of ``params``; at most ``num_samples`` trainable scalars are probed.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    work = params.astype(np.float64)
    work.zero_grad()
    loss_fn(work, probe)
    coords = [
        (name, i) for name, p in work.items() if p.trainable for i in range(p.value.size)
    ]
    if not coords:
        return 0.0
    rng = make_rng(seed, "grad_check")
    if len(coords) > num_samples:
        picks = rng.choice(len(coords), size=num_samples, replace=False)
        coords = [coords[i] for i in sorted(picks)]
    analytic = [float(work[name].grad.flat[i]) for name, i in coords]
    worst = 0.0
    for (name, i), a in zip(coords, analytic):
        flat = work[name].value.reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = loss_fn(work, probe)
        flat[i] = orig - eps
        f_minus = loss_fn(work, probe)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2 * eps)
        worst = max(worst, relative_error(a, numeric, atol))
    return worst
