"""Spiking neuron dynamics shared by IF, LIF and I-LIF neurons.

One update per timestep::

    U = H + (X - (H - u_rest)) / tau
    S = f(U - u_thr)
    H = U * (1 - S)

``f`` is the Heaviside step for IF/LIF and ``clip(round(x), 0, D) / D`` for
I-LIF. I-LIF outputs live on the 1/D grid during training and are expanded
into D binary spikes (spike-ahead) for inference.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Literal

import numpy as np

Kind = Literal["IF", "LIF", "ILIF"]


@dataclass(frozen=True)
class NeuronConfig:
    kind: Kind = "ILIF"
    tau: float = 2.0
    u_thr: float = 0.0
    u_rest: float = 0.0
    D: int = 4
    surrogate_width: float = 0.5
    soft_reset: bool = False  # I-LIF only: H = U - S*D instead of U*(1 - S)

    def __post_init__(self):
        if self.kind not in ("IF", "LIF", "ILIF"):
            raise ValueError(f"unknown neuron kind {self.kind!r}")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.kind == "IF" and self.tau != 1:
            raise ValueError("IF neurons require tau == 1")
        if self.kind == "ILIF":
            if self.u_thr != 0 or self.u_rest != 0:
                raise ValueError("I-LIF requires u_thr == u_rest == 0")
            if int(self.D) != self.D or self.D < 1:
                raise ValueError("D must be an integer >= 1")
        if self.surrogate_width <= 0:
            raise ValueError("surrogate_width must be > 0")

    @classmethod
    def IF(cls, u_thr: float = 1.0, **kw):
        return cls(kind="IF", tau=1.0, u_thr=u_thr, D=1, **kw)

    @classmethod
    def LIF(cls, tau: float = 2.0, u_thr: float = 1.0, **kw):
        return cls(kind="LIF", tau=tau, u_thr=u_thr, D=1, **kw)

    @classmethod
    def ILIF(cls, D: int = 4, tau: float = 2.0, **kw):
        return cls(kind="ILIF", tau=tau, u_thr=0.0, u_rest=0.0, D=D, **kw)

    @property
    def levels(self) -> int:
        """Virtual timesteps per real timestep (1 for binary neurons)."""
        return self.D if self.kind == "ILIF" else 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NeuronState:
    h: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float64):
        return cls(np.zeros(shape, dtype=dtype))


@dataclass(frozen=True)
class SpikeTensor:
    values: np.ndarray
    coding: Literal["binary", "integer_scaled"] = "binary"
    D: int = 1

    def __post_init__(self):
        if self.coding not in ("binary", "integer_scaled"):
            raise ValueError(f"unknown coding {self.coding!r}")

    def is_valid(self) -> bool:
        return bool(is_spike_valued(self.values, self.D if self.coding == "integer_scaled" else 1))

    def counts(self) -> np.ndarray:
        """Integer spike counts per element (values * D)."""
        return np.rint(self.values * self.D).astype(np.int64)

    @property
    def firing_rate(self) -> float:
        if self.values.size == 0:
            return 0.0
        return float(self.counts().sum()) / (self.values.size * self.D)


def is_spike_valued(values: np.ndarray, D: int = 1) -> bool:
    """True when every element is exactly k/D for an integer k in [0, D]."""
    v = np.asarray(values)
    k = v * D
    return bool(np.all((k == np.rint(k)) & (k >= 0) & (k <= D)))


def fire(u_minus_thr: np.ndarray, config: NeuronConfig) -> np.ndarray:
    """The firing nonlinearity ``f``."""
    if config.kind == "ILIF":
        D = config.D
        return np.clip(np.rint(u_minus_thr), 0, D) / D
    return (u_minus_thr >= 0).astype(np.result_type(u_minus_thr, np.float32))


def surrogate_grad(u_minus_thr: np.ndarray, config: NeuronConfig) -> np.ndarray:
    """Surrogate derivative of the firing function.

    IF/LIF: rectangle of height 1/(2w) on |u - thr| < w. I-LIF: 1 on the
    open clip range (0, D), i.e. the straight-through derivative of
    ``clip(round(u), 0, D)``; the 1/D output scale is applied by the caller.
    """
    x = np.asarray(u_minus_thr)
    if config.kind == "ILIF":
        return ((x > 0) & (x < config.D)).astype(x.dtype if x.dtype.kind == "f" else np.float64)
    w = config.surrogate_width
    return (np.abs(x) < w) / (2.0 * w)


def surrogate_forward(u_minus_thr: np.ndarray, config: NeuronConfig) -> np.ndarray:
    """Piecewise-linear stand-in for ``f`` whose derivative is exactly the
    surrogate (times 1/D for I-LIF); used by finite-difference checks."""
    if config.kind == "ILIF":
        return np.clip(u_minus_thr, 0, config.D) / config.D
    w = config.surrogate_width
    return np.clip((u_minus_thr + w) / (2 * w), 0.0, 1.0)


def neuron_step(state: NeuronState, x: np.ndarray, config: NeuronConfig):
    """One timestep. Returns ``(SpikeTensor, NeuronState)``."""
    x = np.asarray(x)
    if state.h.shape != x.shape:
        raise ValueError(f"input shape {x.shape} does not match state {state.h.shape}")
    h = state.h
    u = h + (x - (h - config.u_rest)) / config.tau
    s = fire(u - config.u_thr, config)
    if config.kind == "ILIF" and config.soft_reset:
        h_new = u - s * config.D
    else:
        h_new = u * (1 - s)
    coding = "integer_scaled" if config.kind == "ILIF" else "binary"
    return SpikeTensor(s, coding, config.levels), NeuronState(h_new)


def run_neuron(x_seq: np.ndarray, config: NeuronConfig, state: NeuronState | None = None):
    """Apply :func:`neuron_step` along the leading (time) axis."""
    state = state or NeuronState.zeros(x_seq.shape[1:], x_seq.dtype)
    out = []
    for x in x_seq:
        s, state = neuron_step(state, x, config)
        out.append(s.values)
    coding = "integer_scaled" if config.kind == "ILIF" else "binary"
    return SpikeTensor(np.stack(out), coding, config.levels), state


def spike_ahead_expand(s: SpikeTensor, policy: str = "leading") -> SpikeTensor:
    """Expand k/D activations into D-step binary trains, new axis 0.

    ``leading`` places the k ones first; ``spread`` distributes them evenly.
    Either way the train holds exactly k ones and its mean is the input.
    """
    if s.coding != "integer_scaled":
        raise ValueError("spike-ahead expansion needs integer_scaled input")
    D = s.D
    if not is_spike_valued(s.values, D):
        raise ValueError(f"values are not on the 1/{D} grid")
    k = s.counts()
    steps = np.arange(D).reshape((D,) + (1,) * k.ndim)
    if policy == "leading":
        train = steps < k[None]
    elif policy == "spread":
        # step d fires when floor((d+1)k/D) > floor(dk/D)
        train = ((steps + 1) * k[None]) // D > (steps * k[None]) // D
    else:
        raise ValueError(f"unknown placement policy {policy!r}")
    return SpikeTensor(train.astype(s.values.dtype), "binary", 1)
