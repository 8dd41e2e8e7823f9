"""Dense layers, capped weight-normalized layers, encoders and decoders.

Weights are stored as ``(in, out)`` matrices so a layer computes
``x @ W + b``; column ``i`` of ``W`` is the weight vector of output unit ``i``.
"""

from __future__ import annotations

import math
import re
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .distributions import BernoulliVec, DiagGaussian, bernoulli_log_prob
from .tensor import Tensor, column_l2_norm, elu, minimum, sigmoid, softplus

VARIANCE_FLOOR = 1e-8
DEGENERATE_NORM = 1e-12
CAP_INIT = 3.0

_ACTIVATIONS = {
    "elu": elu,
    "softplus": softplus,
    "identity": lambda t: t,
}


class ArchParseError(ValueError):
    def __init__(self, spec: str, position: int, reason: str):
        super().__init__(f"{reason} at position {position} in {spec!r}")
        self.position = position


@dataclass(frozen=True)
class ArchSpec:
    """Hidden widths plus a terminal ``z`` (Gaussian) or ``x`` (Bernoulli) head."""

    hidden: tuple[int, ...]
    head: str
    head_width: int

    def __str__(self) -> str:
        return "-".join([f"d{w}" for w in self.hidden] + [f"{self.head}{self.head_width}"])


_TOKEN = re.compile(r"([dzx])([0-9]+)")


def parse_arch(spec: str) -> ArchSpec:
    """Parse strings such as ``"d300-d300-z64"`` or ``"d500-x784"``."""
    pos = 0
    hidden: list[int] = []
    tokens = spec.split("-") if spec else [""]
    for i, token in enumerate(tokens):
        m = _TOKEN.fullmatch(token)
        if m is None:
            raise ArchParseError(spec, pos, f"malformed layer token {token!r}")
        kind, width = m.group(1), int(m.group(2))
        if width <= 0:
            raise ArchParseError(spec, pos + 1, "layer width must be positive")
        last = i == len(tokens) - 1
        if kind == "d":
            if last:
                raise ArchParseError(spec, pos, "missing terminal z or x layer")
            hidden.append(width)
        elif not last:
            raise ArchParseError(spec, pos, f"terminal layer {kind!r} must come last")
        else:
            return ArchSpec(tuple(hidden), kind, width)
        pos += len(token) + 1
    raise ArchParseError(spec, pos, "missing terminal z or x layer")  # pragma: no cover


class Module:
    """Anything holding named parameter tensors."""

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    @contextmanager
    def frozen(self):
        """Temporarily stop gradient flow into this module's parameters."""
        params = list(self.parameters().values())
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


class DenseLayer(Module):
    def __init__(self, weight: np.ndarray, bias: np.ndarray, activation: str = "identity", name: str = "dense"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = Tensor(weight, requires_grad=True, name=f"{name}.W")
        self.bias = Tensor(bias, requires_grad=True, name=f"{name}.b")
        self.activation = activation
        self.name = name

    @classmethod
    def init(cls, rng, n_in, n_out, activation="identity", name="dense"):
        return cls(_glorot(rng, n_in, n_out), np.zeros(n_out), activation, name)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def parameters(self):
        return {self.weight.name: self.weight, self.bias.name: self.bias}

    def effective_weight(self) -> Tensor:
        return self.weight

    def __call__(self, x) -> Tensor:
        return _ACTIVATIONS[self.activation](x @ self.effective_weight() + self.bias)


class WeightNormDense(Module):
    """Dense layer whose weight columns have norm at most ``H``.

    Each column is ``w_i = v_i / ||v_i|| * s_i`` with
    ``s_i = min(||v_i||, H * sigmoid(u_i))``.
    """

    def __init__(self, v, u, bias, H: float, activation: str = "identity", name: str = "wn"):
        if not (H > 0 and math.isfinite(H)):
            raise ValueError(f"cap H must be positive and finite, got {H}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.v = Tensor(v, requires_grad=True, name=f"{name}.v")
        self.u = Tensor(u, requires_grad=True, name=f"{name}.u")
        self.bias = Tensor(bias, requires_grad=True, name=f"{name}.b")
        self.H = float(H)
        self.activation = activation
        self.name = name

    @classmethod
    def init(cls, rng, n_in, n_out, H, activation="identity", name="wn"):
        return cls(_glorot(rng, n_in, n_out), np.full(n_out, CAP_INIT), np.zeros(n_out), H, activation, name)

    @property
    def in_features(self) -> int:
        return self.v.shape[0]

    @property
    def out_features(self) -> int:
        return self.v.shape[1]

    def parameters(self):
        return {self.v.name: self.v, self.u.name: self.u, self.bias.name: self.bias}

    def effective_weight(self) -> Tensor:
        norm = column_l2_norm(self.v)
        if np.min(norm.data) < DEGENERATE_NORM:
            i = int(np.argmin(norm.data))
            raise ValueError(f"{self.name}: direction column {i} has degenerate norm {norm.data[i]:.3g}")
        scale = minimum(norm, self.H * sigmoid(self.u))
        return self.v * (scale / norm)

    def __call__(self, x) -> Tensor:
        return _ACTIVATIONS[self.activation](x @ self.effective_weight() + self.bias)


def _layer(rng, n_in, n_out, activation, name, H):
    if H is None:
        return DenseLayer.init(rng, n_in, n_out, activation, name)
    return WeightNormDense.init(rng, n_in, n_out, H, activation, name)


def _collect(layers) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for layer in layers:
        out.update(layer.parameters())
    return out


@dataclass
class Encoder(Module):
    """Maps a batch of inputs to a batch of diagonal Gaussians."""

    hidden: list = field(default_factory=list)
    mean_head: Module = None
    var_head: Module = None
    arch: ArchSpec | None = None

    @property
    def in_dim(self) -> int:
        first = self.hidden[0] if self.hidden else self.mean_head
        return first.in_features

    @property
    def latent_dim(self) -> int:
        return self.mean_head.out_features

    @property
    def layers(self) -> list:
        return [*self.hidden, self.mean_head, self.var_head]

    def parameters(self):
        return _collect(self.layers)

    def __call__(self, x) -> DiagGaussian:
        h = x
        for layer in self.hidden:
            h = layer(h)
        return DiagGaussian(self.mean_head(h), self.var_head(h) + VARIANCE_FLOOR)


@dataclass
class Decoder(Module):
    """Maps latent codes to Bernoulli logits."""

    hidden: list = field(default_factory=list)
    logits_head: Module = None
    arch: ArchSpec | None = None

    @property
    def latent_dim(self) -> int:
        first = self.hidden[0] if self.hidden else self.logits_head
        return first.in_features

    @property
    def out_dim(self) -> int:
        return self.logits_head.out_features

    @property
    def layers(self) -> list:
        return [*self.hidden, self.logits_head]

    def parameters(self):
        return _collect(self.layers)

    def __call__(self, z) -> BernoulliVec:
        h = z
        for layer in self.hidden:
            h = layer(h)
        return BernoulliVec(self.logits_head(h))

    def log_likelihood(self, z, x) -> Tensor:
        """``ln p(x | z)`` summed over observation units."""
        return bernoulli_log_prob(self(z), x)


def build_encoder(
    arch: ArchSpec | str,
    in_dim: int,
    weight_normalized: bool = False,
    H: float | None = None,
    seed: int = 0,
    cap_heads: bool = True,
) -> Encoder:
    if isinstance(arch, str):
        arch = parse_arch(arch)
    if arch.head != "z":
        raise ValueError(f"encoder architecture must end in a z layer, got {arch}")
    if weight_normalized and H is None:
        raise ValueError("weight-normalized encoder needs a cap H")
    rng = np.random.default_rng(seed)
    cap = H if weight_normalized else None
    hidden = []
    width = in_dim
    for i, w in enumerate(arch.hidden):
        hidden.append(_layer(rng, width, w, "elu", f"enc.h{i}", cap))
        width = w
    head_cap = cap if cap_heads else None
    mean_head = _layer(rng, width, arch.head_width, "identity", "enc.mean", head_cap)
    var_head = _layer(rng, width, arch.head_width, "softplus", "enc.var", head_cap)
    return Encoder(hidden, mean_head, var_head, arch)


def build_decoder(arch: ArchSpec | str, latent_dim: int, seed: int = 0) -> Decoder:
    if isinstance(arch, str):
        arch = parse_arch(arch)
    if arch.head != "x":
        raise ValueError(f"decoder architecture must end in an x layer, got {arch}")
    rng = np.random.default_rng(seed)
    hidden = []
    width = latent_dim
    for i, w in enumerate(arch.hidden):
        hidden.append(DenseLayer.init(rng, width, w, "elu", f"dec.h{i}"))
        width = w
    head = DenseLayer.init(rng, width, arch.head_width, "identity", "dec.logits")
    return Decoder(hidden, head, arch)


def column_norms(layer: Module) -> np.ndarray:
    w = layer.effective_weight().data
    return np.sqrt((w * w).sum(axis=0))


def lipschitz_bounds(layers) -> tuple[float, float, float]:
    """(product of spectral norms, product of Frobenius norms, cap bound).

    The cap bound is ``prod_l H_l * sqrt(out_l)`` and is only defined when
    every layer is weight-normalized (otherwise ``inf``). ELU and identity
    activations are 1-Lipschitz, so the spectral product bounds the chain.
    """
    spectral = frobenius = cap = 1.0
    for layer in layers:
        w = layer.effective_weight().data
        spectral *= float(np.linalg.norm(w, 2))
        frobenius *= float(np.linalg.norm(w))
        if isinstance(layer, WeightNormDense):
            cap *= layer.H * math.sqrt(layer.out_features)
        else:
            cap = math.inf
    return spectral, frobenius, cap
