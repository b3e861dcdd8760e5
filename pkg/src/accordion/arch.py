"""Depth-elastic residual MLP.

The network is ``stem -> [block 0] -> transition -> [block 1] -> ... -> head``.
Each block holds ``units_per_block`` residual units ``h + W2 relu(W1 h + b1) + b2``.
A depth configuration switches units off; an inactive unit is the identity.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import nncore
from .errors import ConfigError, DimensionError
from .nncore import DTYPE, ParamSet, make_rng


class Scheme(str, enum.Enum):
    COML = "coml"
    BLOCKCOML = "blockcoml"

    @classmethod
    def parse(cls, value) -> Scheme:
        if isinstance(value, Scheme):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown skip scheme {value!r}") from None


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int = 2
    block_widths: tuple[int, ...] = (64, 64, 64)
    units_per_block: int = 6
    num_classes: int = 3
    bits_per_param: int = 64

    def __post_init__(self):
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))
        if not self.block_widths:
            raise ConfigError("need at least one block")
        if min(self.block_widths) < 1 or self.units_per_block < 1:
            raise ConfigError("block widths and units_per_block must be positive")
        if self.input_dim < 1 or self.num_classes < 1 or self.bits_per_param < 1:
            raise ConfigError("input_dim, num_classes and bits_per_param must be positive")

    @property
    def num_blocks(self) -> int:
        return len(self.block_widths)

    @property
    def total_units(self) -> int:
        return self.num_blocks * self.units_per_block

    def to_text(self) -> str:
        """Canonical ``key=value`` lines."""
        return "".join(
            f"{k}={v}\n"
            for k, v in (
                ("input_dim", self.input_dim),
                ("block_widths", ",".join(map(str, self.block_widths))),
                ("units_per_block", self.units_per_block),
                ("num_classes", self.num_classes),
                ("bits_per_param", self.bits_per_param),
            )
        )

    @classmethod
    def from_text(cls, text: str) -> ArchSpec:
        kv = parse_kv(text)
        try:
            return cls(
                input_dim=int(kv["input_dim"]),
                block_widths=tuple(int(w) for w in kv["block_widths"].split(",")),
                units_per_block=int(kv["units_per_block"]),
                num_classes=int(kv["num_classes"]),
                bits_per_param=int(kv["bits_per_param"]),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad architecture descriptor: {exc}") from None


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed descriptor line {line!r}")
        out[key.strip()] = value.strip()
    return out


UnitId = tuple[int, int]  # (block, position), both 0-based


def unit_order(scheme, spec: ArchSpec) -> list[UnitId]:
    """Order in which units are switched on as the kept count grows."""
    scheme = Scheme.parse(scheme)
    B, K = spec.num_blocks, spec.units_per_block
    if scheme is Scheme.COML:
        return [(b, k) for b in range(B) for k in range(K)]
    return [(b, k) for k in range(K) for b in range(B)]


def active_set(scheme, n: int, spec: ArchSpec) -> frozenset[UnitId]:
    if not 0 <= n <= spec.total_units:
        raise ConfigError(f"kept units {n} outside [0, {spec.total_units}]")
    return frozenset(unit_order(scheme, spec)[:n])


@dataclass(frozen=True)
class DepthConfig:
    scheme: Scheme
    kept_units: int

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))

    @classmethod
    def full(cls, spec: ArchSpec, scheme=Scheme.COML) -> DepthConfig:
        return cls(scheme, spec.total_units)

    def active_set(self, spec: ArchSpec) -> frozenset[UnitId]:
        return active_set(self.scheme, self.kept_units, spec)

    def is_full(self, spec: ArchSpec) -> bool:
        return self.kept_units == spec.total_units


@dataclass(frozen=True)
class Transition:
    """Fixed width map between consecutive blocks (no trainable weights)."""

    kind: str  # "identity" | "avgpool" | "projection"
    in_width: int
    out_width: int
    matrix: np.ndarray | None = None

    def forward(self, h: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return h
        if self.kind == "avgpool":
            return (h[:, 0::2] + h[:, 1::2]) * h.dtype.type(0.5)
        return h @ self.matrix.T.astype(h.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return grad
        if self.kind == "avgpool":
            out = np.empty((grad.shape[0], self.in_width), dtype=grad.dtype)
            half = grad * grad.dtype.type(0.5)
            out[:, 0::2] = half
            out[:, 1::2] = half
            return out
        return grad @ self.matrix.astype(grad.dtype, copy=False)

    @property
    def macs(self) -> int:
        if self.kind == "identity":
            return 0
        if self.kind == "avgpool":
            return self.out_width
        return self.in_width * self.out_width


def make_transitions(spec: ArchSpec, seed: int) -> list[Transition]:
    out = []
    for b in range(1, spec.num_blocks):
        w_in, w_out = spec.block_widths[b - 1], spec.block_widths[b]
        if w_in == w_out:
            out.append(Transition("identity", w_in, w_out))
        elif w_in == 2 * w_out:
            out.append(Transition("avgpool", w_in, w_out))
        else:
            rng = make_rng(seed, "transition", b)
            m = rng.standard_normal((w_out, w_in)) / np.sqrt(w_in)
            out.append(Transition("projection", w_in, w_out, m.astype(DTYPE)))
    return out


def unit_param_names(b: int, k: int) -> list[str]:
    p = f"unit.{b}.{k}."
    return [p + "W1", p + "b1", p + "W2", p + "b2"]


STEM = ["stem.W", "stem.b"]
HEAD = ["head.W", "head.b"]


@dataclass
class AccordionModel:
    spec: ArchSpec
    seed: int
    params: ParamSet
    transitions: list[Transition] = field(default_factory=list)

    def with_params(self, params: ParamSet) -> AccordionModel:
        return replace(self, params=params)

    def unit_params(self, unit: UnitId) -> list[str]:
        return unit_param_names(*unit)

    def full_config(self, scheme=Scheme.COML) -> DepthConfig:
        return DepthConfig.full(self.spec, scheme)


def build(spec: ArchSpec, seed: int = 0, branch_scale: float | None = None) -> AccordionModel:
    """Fresh model with He-normal dense weights and zero biases.

    The second layer of every residual branch is additionally scaled by
    ``branch_scale`` (default ``1/sqrt(total_units)``) so activations do not
    blow up through a deep stack without normalization layers.
    """
    if branch_scale is None:
        branch_scale = 1.0 / np.sqrt(spec.total_units)
    rng = make_rng(seed, "init")
    params = ParamSet()

    def dense(name: str, fan_out: int, fan_in: int, scale: float = 1.0):
        w = rng.standard_normal((fan_out, fan_in)) * (np.sqrt(2.0 / fan_in) * scale)
        params.add(name, w.astype(DTYPE))

    w0 = spec.block_widths[0]
    dense("stem.W", w0, spec.input_dim)
    params.add("stem.b", np.zeros(w0, DTYPE))
    for b, w in enumerate(spec.block_widths):
        for k in range(spec.units_per_block):
            n1, c1, n2, c2 = unit_param_names(b, k)
            dense(n1, w, w)
            params.add(c1, np.zeros(w, DTYPE))
            dense(n2, w, w, branch_scale)
            params.add(c2, np.zeros(w, DTYPE))
    dense("head.W", spec.num_classes, spec.block_widths[-1])
    params.add("head.b", np.zeros(spec.num_classes, DTYPE))
    return AccordionModel(spec, seed, params, make_transitions(spec, seed))


def _active_mask(model: AccordionModel, config: DepthConfig | None) -> list[list[bool]]:
    spec = model.spec
    if config is None:
        active = frozenset(unit_order(Scheme.COML, spec))
    else:
        active = config.active_set(spec)
    return [[(b, k) in active for k in range(spec.units_per_block)] for b in range(spec.num_blocks)]


def _forward(model: AccordionModel, config, x: np.ndarray, cache: list | None):
    spec, P = model.spec, model.params
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"batch shape {x.shape} does not match input_dim {spec.input_dim}")
    mask = _active_mask(model, config)
    pre = nncore.dense_forward(P.value("stem.W"), P.value("stem.b"), x)
    h = nncore.relu(pre)
    if cache is not None:
        cache.append(("stem", x, pre))
    for b in range(spec.num_blocks):
        if b > 0:
            h = model.transitions[b - 1].forward(h)
        for k in range(spec.units_per_block):
            if not mask[b][k]:
                continue
            n1, c1, n2, c2 = unit_param_names(b, k)
            a = nncore.dense_forward(P.value(n1), P.value(c1), h)
            r = nncore.relu(a)
            z = nncore.dense_forward(P.value(n2), P.value(c2), r)
            if cache is not None:
                cache.append(("unit", (b, k), h, a, r))
            h = h + z
    if cache is not None:
        cache.append(("head", h))
    return nncore.dense_forward(P.value("head.W"), P.value("head.b"), h)


def forward(model: AccordionModel, config: DepthConfig | None, batch: np.ndarray) -> np.ndarray:
    """Logits of ``batch`` with only the units of ``config`` switched on.

    ``config=None`` runs the full network.
    """
    return _forward(model, config, batch, None)


def loss_and_grad(
    model: AccordionModel, config: DepthConfig | None, batch: np.ndarray, labels: np.ndarray
) -> tuple[float, list[str]]:
    """Cross-entropy loss; writes gradients of the touched parameters.

    Only stem, head and active-unit gradients are written.  Returns the loss
    and the parameter names that received gradients.
    """
    P = model.params
    cache: list = []
    logits = _forward(model, config, batch, cache)
    loss, g = nncore.softmax_xent(logits, labels)

    touched = []

    def put(name, grad):
        P[name].grad[...] = grad
        touched.append(name)

    _, h = cache.pop()
    gw, gb, g = nncore.dense_backward(P.value("head.W"), h, g)
    put("head.W", gw)
    put("head.b", gb)
    block = model.spec.num_blocks - 1
    for entry in reversed(cache):
        if entry[0] == "stem":
            break
        _, (b, k), h_in, a, r = entry
        while block > b:
            g = model.transitions[block - 1].backward(g)
            block -= 1
        n1, c1, n2, c2 = unit_param_names(b, k)
        gw2, gb2, gr = nncore.dense_backward(P.value(n2), r, g)
        ga = nncore.relu_backward(a, gr)
        gw1, gb1, gh = nncore.dense_backward(P.value(n1), h_in, ga)
        put(n2, gw2)
        put(c2, gb2)
        put(n1, gw1)
        put(c1, gb1)
        g = g + gh
    while block > 0:
        g = model.transitions[block - 1].backward(g)
        block -= 1
    _, x, pre = cache[0]
    g = nncore.relu_backward(pre, g)
    gw, gb, _ = nncore.dense_backward(P.value("stem.W"), x, g)
    put("stem.W", gw)
    put("stem.b", gb)
    return loss, touched


@dataclass(frozen=True)
class SizeReport:
    param_count: int
    size_bits: int
    mac_count: int
    layer_fraction: float
    size_fraction: float
    mac_fraction: float
    unit_size_fraction: float


def unit_param_count(spec: ArchSpec, block: int) -> int:
    w = spec.block_widths[block]
    return 2 * (w * w + w)


def unit_macs(spec: ArchSpec, block: int) -> int:
    w = spec.block_widths[block]
    return 2 * w * w


def _base_counts(model: AccordionModel) -> tuple[int, int]:
    spec = model.spec
    params = sum(model.params.value(n).size for n in STEM + HEAD)
    macs = spec.input_dim * spec.block_widths[0] + spec.block_widths[-1] * spec.num_classes
    macs += sum(t.macs for t in model.transitions)
    return params, macs


def size_of(model: AccordionModel, config: DepthConfig) -> SizeReport:
    """Transmission size and per-sample compute of a depth configuration.

    ``mac_fraction`` and ``unit_size_fraction`` compare residual units only;
    ``size_fraction`` compares whole transmitted models.
    """
    spec = model.spec
    base_params, base_macs = _base_counts(model)
    active = config.active_set(spec)
    unit_p = sum(unit_param_count(spec, b) for b, _ in active)
    unit_m = sum(unit_macs(spec, b) for b, _ in active)
    all_p = spec.units_per_block * sum(unit_param_count(spec, b) for b in range(spec.num_blocks))
    all_m = spec.units_per_block * sum(unit_macs(spec, b) for b in range(spec.num_blocks))
    count = base_params + unit_p
    return SizeReport(
        param_count=count,
        size_bits=spec.bits_per_param * count,
        mac_count=base_macs + unit_m,
        layer_fraction=len(active) / spec.total_units,
        size_fraction=count / (base_params + all_p),
        mac_fraction=unit_m / all_m,
        unit_size_fraction=unit_p / all_p,
    )


def size_fn(model: AccordionModel, scheme):
    """``n -> size_bits`` for the given scheme."""
    scheme = Scheme.parse(scheme)
    return lambda n: size_of(model, DepthConfig(scheme, n)).size_bits


@dataclass(frozen=True, order=True)
class Piece:
    """One transmissible part of the model."""

    kind: str  # "stem" | "head" | "transition" | "unit"
    block: int = 0
    pos: int = 0

    def param_names(self) -> list[str]:
        if self.kind == "stem":
            return list(STEM)
        if self.kind == "head":
            return list(HEAD)
        if self.kind == "transition":
            return []
        return unit_param_names(self.block, self.pos)

    def __str__(self) -> str:
        if self.kind == "unit":
            return f"unit({self.block},{self.pos})"
        return self.kind


BASE_PIECES = (Piece("stem"), Piece("head"), Piece("transition"))


def chunk_priority(scheme, spec: ArchSpec) -> list[Piece]:
    """Transmission order: every prefix of length ``3 + n`` runs config n."""
    return list(BASE_PIECES) + [Piece("unit", b, k) for b, k in unit_order(scheme, spec)]
