"""Deterministic differentiable-computation core.

Small-tensor linear algebra with reverse-mode gradients (torch autograd on
float64 CPU tensors), a counter-based seedable RNG, a named parameter store
with paired gradient slots, an Adam optimizer, and a central finite-difference
gradient oracle used by the test suite as the independent check on every
reverse-mode gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

DTYPE = torch.float64

# Encoders emit log-sigma; sigma = exp(clamp(logsig)). The Gaussian product
# divides by sigma^2, so sigma must stay away from 0 and infinity.
SIGMA_MIN = 1e-3
SIGMA_MAX = 10.0
LOG_SIGMA_MIN = math.log(SIGMA_MIN)
LOG_SIGMA_MAX = math.log(SIGMA_MAX)


class DimensionError(ValueError):
    """Shape mismatch in a tensor operation."""


class ParameterError(ValueError):
    """Invalid numeric parameter (e.g. nonpositive temperature)."""


class InvariantError(ValueError):
    """A declared invariant was violated (e.g. nonpositive sigma)."""


class StateError(RuntimeError):
    """Operation called in an invalid state (e.g. missing gradients)."""


class Rng:
    """Counter-based (Philox) seedable generator.

    Identical seeds yield identical streams across runs and platforms.
    `spawn(i)` derives an independent stream, used so parallel rollout
    workers draw reproducible, non-overlapping randomness.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def spawn(self, stream: int) -> "Rng":
        return Rng(self.seed, stream)

    # numpy-facing draws (arena, bookkeeping)
    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        return self._gen.random(size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # torch-facing draws (model noise); returned tensors carry no gradient
    def normal(self, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(size=shape)).to(DTYPE)

    def uniform(self, *shape: int) -> torch.Tensor:
        return torch.from_numpy(self._gen.random(size=shape)).to(DTYPE)

    def gumbel(self, *shape: int) -> torch.Tensor:
        u = self._gen.random(size=shape)
        return torch.from_numpy(-np.log(-np.log(u + 1e-20) + 1e-20)).to(DTYPE)


@dataclass
class DiagonalGaussian:
    """Diagonal-covariance Gaussian belief: per-dimension mean and std."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise DimensionError(
                f"mu shape {tuple(self.mu.shape)} != sigma shape {tuple(self.sigma.shape)}"
            )

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


def _orthogonal(shape: Tuple[int, int], gen: np.random.Generator, gain: float) -> np.ndarray:
    rows, cols = shape
    n = max(rows, cols)
    a = gen.standard_normal(size=(n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    return gain * q[:rows, :cols]


class ParameterStore:
    """Named, seeded collection of trainable tensors with gradient slots.

    Two stores built from the same seed and declaration order are bitwise
    identical. Adam moment state is kept per optimizer group so disjoint
    loss groups can share parameters without sharing moments.
    """

    def __init__(self, seed: int):
        self.rng_seed = int(seed)
        self._init_gen = np.random.Generator(np.random.Philox(key=[self.rng_seed, 2**31]))
        self.entries: Dict[str, torch.Tensor] = {}
        self.adam_state: Dict[str, Dict[str, object]] = {}

    def add(self, name: str, shape: Sequence[int], init: str = "orthogonal", gain: float = 1.0) -> torch.Tensor:
        if name in self.entries:
            raise StateError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "normal":
            data = 0.01 * self._init_gen.standard_normal(size=shape)
        elif init == "orthogonal":
            if len(shape) != 2:
                raise DimensionError(f"orthogonal init needs a matrix, got shape {shape}")
            data = _orthogonal(shape, self._init_gen, gain)
        else:
            raise ParameterError(f"unknown init {init!r}")
        t = torch.from_numpy(np.ascontiguousarray(data)).to(DTYPE)
        t.requires_grad_(True)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> List[str]:
        return list(self.entries)

    def zero_grad(self, names: Optional[Iterable[str]] = None) -> None:
        for n in names if names is not None else self.entries:
            p = self.entries[n]
            if p.grad is not None:
                p.grad.detach_()
                p.grad.zero_()

    def grad_norm(self, names: Optional[Iterable[str]] = None) -> float:
        total = 0.0
        for n in names if names is not None else self.entries:
            g = self.entries[n].grad
            if g is not None:
                total += float((g * g).sum())
        return math.sqrt(total)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.detach().numpy().copy() for n, p in self.entries.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for n, p in self.entries.items():
            if n not in state:
                raise StateError(f"checkpoint missing parameter {n!r}")
            arr = np.asarray(state[n])
            if tuple(arr.shape) != tuple(p.shape):
                raise DimensionError(
                    f"parameter {n!r}: checkpoint shape {arr.shape} != model shape {tuple(p.shape)}"
                )
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr).to(DTYPE))


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """x @ weight.T + bias, registered for reverse-mode differentiation."""
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(
            f"linear: input shape {tuple(x.shape)} incompatible with weight shape {tuple(weight.shape)}"
        )
    out = x @ weight.transpose(-1, -2)
    if bias is not None:
        out = out + bias
    return out


def softmax(logits: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Numerically stable softmax (max subtraction)."""
    shifted = logits - logits.max(dim=axis, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def gumbel_softmax(
    logits: torch.Tensor,
    temperature: float = 1.0,
    rng: Optional[Rng] = None,
    hard: bool = True,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Gumbel-Softmax sample; hard mode is straight-through one-hot.

    `noise` lets callers replay a stored Gumbel draw (recurrent PPO replay);
    otherwise it is drawn from `rng`.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    if noise is None:
        if rng is None:
            raise ParameterError("gumbel_softmax needs either rng or noise")
        noise = rng.gumbel(*logits.shape)
    y = softmax((logits + noise) / temperature, axis=-1)
    if not hard:
        return y
    idx = y.argmax(dim=-1, keepdim=True)
    one_hot = torch.zeros_like(y).scatter_(-1, idx, 1.0)
    return one_hot + (y - y.detach())  # forward: exactly one-hot; backward: soft


def reparameterized_sample(
    g: DiagonalGaussian,
    rng: Optional[Rng] = None,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """mu + sigma * eps with eps ~ N(0, 1); gradient flows to mu and sigma only."""
    if not bool((g.sigma > 0).all()):
        raise InvariantError("reparameterized_sample: sigma must be positive everywhere")
    if noise is None:
        if rng is None:
            raise ParameterError("reparameterized_sample needs either rng or noise")
        noise = rng.normal(*g.mu.shape)
    return g.mu + g.sigma * noise


def gated_recurrent_step(
    x: torch.Tensor,
    hidden: torch.Tensor,
    params: ParameterStore,
    prefix: str = "gru",
) -> torch.Tensor:
    """One step of a standard gated recurrent cell (reset, update, candidate).

    Weight layout: w_ih [3H, I], w_hh [3H, H], gate order (r, z, n);
    h' = (1 - z) * n + z * h.
    """
    w_ih = params[f"{prefix}.w_ih"]
    w_hh = params[f"{prefix}.w_hh"]
    b_ih = params[f"{prefix}.b_ih"]
    b_hh = params[f"{prefix}.b_hh"]
    h_dim = hidden.shape[-1]
    if w_ih.shape[0] != 3 * h_dim or x.shape[-1] != w_ih.shape[1]:
        raise DimensionError(
            f"gated_recurrent_step: input {tuple(x.shape)} / hidden {tuple(hidden.shape)} "
            f"incompatible with w_ih {tuple(w_ih.shape)}"
        )
    gi = linear(x, w_ih, b_ih)
    gh = linear(hidden, w_hh, b_hh)
    i_r, i_z, i_n = gi.split(h_dim, dim=-1)
    h_r, h_z, h_n = gh.split(h_dim, dim=-1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1.0 - z) * n + z * hidden


def adam_step(
    store: ParameterStore,
    lr: float = 5e-4,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-5,
    names: Optional[Sequence[str]] = None,
    group: str = "default",
) -> None:
    """Standard bias-corrected Adam update over `names`; zeroes those grads.

    Moment state is kept per (group, name) so separate loss groups that touch
    the same parameter keep independent moments.
    """
    if names is None:
        names = store.names()
    state = store.adam_state.setdefault(group, {"t": 0, "m": {}, "v": {}})
    for n in names:
        if store[n].grad is None:
            raise StateError(f"adam_step: gradient missing for {n!r}")
    state["t"] += 1
    t = state["t"]
    b1, b2 = betas
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    with torch.no_grad():
        for n in names:
            p = store[n]
            g = p.grad
            m = state["m"].setdefault(n, torch.zeros_like(p))
            v = state["v"].setdefault(n, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt() + eps, value=-lr)
    store.zero_grad(names)


def finite_difference_gradient(
    f: Callable[[ParameterStore], float],
    store: ParameterStore,
    h: float = 1e-4,
    names: Optional[Sequence[str]] = None,
    coords_per_param: Optional[int] = None,
    rng: Optional[Rng] = None,
) -> Dict[str, np.ndarray]:
    """Central-difference gradients (f(x+h) - f(x-h)) / 2h per coordinate.

    Independent oracle for reverse-mode gradients. `coords_per_param`
    subsamples coordinates (chosen by `rng`) to keep large checks fast;
    unsampled coordinates are returned as NaN.
    """
    if h <= 0:
        raise ParameterError("finite_difference_gradient: h must be > 0")
    if names is None:
        names = store.names()
    out: Dict[str, np.ndarray] = {}
    for n in names:
        p = store[n]
        flat = p.detach().numpy().ravel()
        grad = np.full(flat.shape, np.nan)
        idx = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            if rng is None:
                raise ParameterError("coordinate subsampling requires an rng")
            idx = rng.permutation(flat.size)[:coords_per_param]
        def value(v) -> float:
            return float(v.detach() if torch.is_tensor(v) else v)

        for i in idx:
            orig = flat[i]
            with torch.no_grad():
                p.view(-1)[i] = orig + h
            fp = value(f(store))
            with torch.no_grad():
                p.view(-1)[i] = orig - h
            fm = value(f(store))
            with torch.no_grad():
                p.view(-1)[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
        out[n] = grad.reshape(p.shape)
    return out


def clamp_log_sigma(log_sigma: torch.Tensor) -> torch.Tensor:
    return torch.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def clamp_sigma(sigma: torch.Tensor) -> torch.Tensor:
    return torch.clamp(sigma, SIGMA_MIN, SIGMA_MAX)
