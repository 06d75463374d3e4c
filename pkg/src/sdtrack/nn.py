"""Layer building blocks on top of :mod:`sdtrack.autodiff`.

Spiking layers follow one pattern: a spiking neuron turns the real-valued
input into spikes, then a convolution or linear map and batch norm. The
neuron output Tensor carries its :class:`~sdtrack.neurons.SpikeTensor`
(``.spikes``) so the consuming layer can audit it and report firing
statistics to the active :class:`Recorder`.
"""
from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .neurons import NeuronConfig, SpikeTensor, fire, spike_ahead_expand, \
    surrogate_forward, surrogate_grad

SPIKE_CODINGS = ("integer", "spike_ahead")


class SpikePurityError(RuntimeError):
    pass


# -- recording -------------------------------------------------------------

@dataclass
class LayerRecord:
    layer_id: str
    kind: str
    total: int = 0
    nonzero: int = 0  # ones in the binary (spike-ahead) view
    violations: int = 0
    ssa_ops: float = 0.0  # accumulations actually triggered, per sample-timestep
    calls: int = 0

    @property
    def firing_rate(self) -> float:
        return self.nonzero / self.total if self.total else 0.0


@dataclass
class Recorder:
    """Collects per-layer spike statistics during forward passes.

    ``strict`` raises :class:`SpikePurityError` on the first operand that is
    not a valid spike tensor; otherwise violations are counted.
    """

    strict: bool = False
    records: dict[str, LayerRecord] = field(default_factory=dict)
    spike_sums: dict[str, int] = field(default_factory=dict)

    def _rec(self, layer_id: str, kind: str) -> LayerRecord:
        if layer_id not in self.records:
            self.records[layer_id] = LayerRecord(layer_id, kind)
        return self.records[layer_id]

    def spike_operand(self, layer_id: str, kind: str, x: Tensor) -> None:
        rec = self._rec(layer_id, kind)
        rec.calls += 1
        spikes: SpikeTensor | None = getattr(x, "spikes", None)
        ok = spikes is not None and spikes.is_valid()
        if spikes is not None and spikes.coding == "binary" and spikes.values.shape != x.shape:
            # spike-ahead train: the operand is the mean over its first axis
            ok = ok and spikes.values.shape[1:] == x.shape
        if not ok:
            rec.violations += 1
            if self.strict:
                raise SpikePurityError(f"{layer_id}: operand is not a spike tensor")
            return
        n = spike_count(spikes)
        rec.total += x.data.size * _levels(spikes, x)
        rec.nonzero += n
        self.spike_sums[layer_id] = self.spike_sums.get(layer_id, 0) + n

    def ssa(self, layer_id: str, ops: float) -> None:
        rec = self._rec(layer_id, "ssa")
        rec.ssa_ops += ops
        rec.calls += 1

    @property
    def violations(self) -> int:
        return sum(r.violations for r in self.records.values())


def _levels(spikes: SpikeTensor, x: Tensor) -> int:
    if spikes.coding == "integer_scaled":
        return spikes.D
    return spikes.values.size // x.data.size


def spike_count(spikes: SpikeTensor) -> int:
    """Number of ones in the binary view of a spike tensor."""
    if spikes.coding == "integer_scaled":
        return int(spikes.counts().sum())
    return int(np.count_nonzero(spikes.values))


_RECORDER: contextvars.ContextVar[Recorder | None] = contextvars.ContextVar("sdtrack_recorder", default=None)


class recording:
    """Context manager installing a recorder for forwards in this context."""

    def __init__(self, recorder: Recorder | None = None):
        self.recorder = recorder or Recorder()

    def __enter__(self) -> Recorder:
        self._token = _RECORDER.set(self.recorder)
        return self.recorder

    def __exit__(self, *exc):
        _RECORDER.reset(self._token)


def active_recorder() -> Recorder | None:
    return _RECORDER.get()


# -- module base -------------------------------------------------------------

class Module:
    training: bool = True
    spike_coding: str = "integer"
    layer_id: str = ""

    def children(self):
        def walk(key, v):
            if isinstance(v, Module):
                yield key, v
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    yield from walk(f"{key}.{i}", m)

        for k, v in vars(self).items():
            yield from walk(k, v)

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for k, m in self.children():
            yield from m.named_modules(f"{prefix}.{k}" if prefix else k)

    def named_parameters(self, prefix: str = ""):
        for name, mod in self.named_modules(prefix):
            for k, v in vars(mod).items():
                if isinstance(v, Parameter):
                    yield (f"{name}.{k}" if name else k), v

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        for name, mod in self.named_modules():
            for k, v in getattr(mod, "buffers", {}).items():
                yield (f"{name}.{k}" if name else k), v

    def assign_ids(self) -> None:
        for name, mod in self.named_modules():
            mod.layer_id = name

    def train(self, mode: bool = True):
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def set_spike_coding(self, coding: str):
        if coding not in SPIKE_CODINGS:
            raise ValueError(f"unknown spike coding {coding!r}")
        for _, m in self.named_modules():
            m.spike_coding = coding
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def layers(self):
        """Leaf compute layers with FLOP accounting, in construction order."""
        return [m for _, m in self.named_modules() if hasattr(m, "flops")]


def init_weight(shape, fan_in: int, rng: np.random.Generator | None, dtype=None) -> np.ndarray:
    """Kaiming-uniform; ``rng=None`` returns a zero-cost placeholder for
    shape-only model instances."""
    dtype = dtype or ad.get_default_dtype()
    if rng is None:
        return np.broadcast_to(np.zeros((), dtype=dtype), shape)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _fill(shape, value: float, rng) -> np.ndarray:
    dtype = ad.get_default_dtype()
    if rng is None:
        return np.broadcast_to(np.full((), value, dtype=dtype), shape)
    return np.full(shape, value, dtype=dtype)


# -- layers ------------------------------------------------------------------

class SpikingNeuron(Module):
    """Multi-step neuron over a time-major batch: input (T*B, ...)."""

    def __init__(self, config: NeuronConfig):
        self.config = config

    def __call__(self, x: Tensor, T: int) -> Tensor:
        cfg = self.config
        B = x.shape[0] // T
        steps = [x] if T == 1 else [x[t * B:(t + 1) * B] for t in range(T)]
        h = None
        outs = []
        for xt in steps:
            if h is None:
                u = (xt + cfg.u_rest) / cfg.tau if cfg.u_rest else xt / cfg.tau
            else:
                u = h + (xt - (h - cfg.u_rest)) / cfg.tau
            s = spike_fn(u - cfg.u_thr if cfg.u_thr else u, cfg)
            if cfg.kind == "ILIF" and cfg.soft_reset:
                h = u - s * float(cfg.D)
            else:
                h = u * (1.0 - s)
            outs.append(s)
        out = outs[0] if T == 1 else ad.concat(outs, axis=0)
        coding = "integer_scaled" if cfg.kind == "ILIF" else "binary"
        if SURROGATE_FORWARD.get():
            return out
        spikes = SpikeTensor(out.data, coding, cfg.levels)
        if self.spike_coding == "spike_ahead" and coding == "integer_scaled":
            train = spike_ahead_expand(spikes)
            # count/D rebuilt from the binary train is bit-identical to clip(round(u))/D
            out = Tensor._make(train.values.sum(axis=0) / out.dtype.type(cfg.D), (out,), lambda g: (g,))
            spikes = train
        out.spikes = spikes
        return out


SURROGATE_FORWARD: contextvars.ContextVar[bool] = contextvars.ContextVar("sdtrack_surrogate_fwd", default=False)


class surrogate_substitution:
    """Replace the firing function by its piecewise-linear surrogate primitive
    in forward passes (for finite-difference checks of surrogate paths)."""

    def __enter__(self):
        self._token = SURROGATE_FORWARD.set(True)

    def __exit__(self, *exc):
        SURROGATE_FORWARD.reset(self._token)


def spike_fn(u_minus_thr: Tensor, config: NeuronConfig) -> Tensor:
    x = u_minus_thr.data
    value = surrogate_forward(x, config) if SURROGATE_FORWARD.get() else fire(x, config)
    local = surrogate_grad(x, config)
    if config.kind == "ILIF":
        local = local / config.D
    return ad.custom_unary(u_minus_thr, value.astype(x.dtype, copy=False), local.astype(x.dtype, copy=False))


class BatchNorm(Module):
    def __init__(self, channels: int, axis: int = 1, rng=None, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(_fill((channels,), 1.0, rng))
        self.beta = Parameter(_fill((channels,), 0.0, rng))
        self.buffers = {
            "running_mean": _fill((channels,), 0.0, rng),
            "running_var": _fill((channels,), 1.0, rng),
        }
        self.axis, self.momentum, self.eps = axis, momentum, eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.batch_norm(x, self.gamma, self.beta, self.buffers["running_mean"],
                             self.buffers["running_var"], self.training, self.momentum, self.eps, self.axis)

    def fold_scale_shift(self) -> tuple[np.ndarray, np.ndarray]:
        """(scale, shift) with BN_eval(y) == scale * y + shift per channel."""
        inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
        scale = self.gamma.data * inv
        return scale, self.beta.data - self.buffers["running_mean"] * scale


class ConvBN(Module):
    """[SN ->] conv -> [BN]. ``spiking`` puts a neuron in front; otherwise the
    conv consumes real values (input stem, head output)."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int | None = None,
                 groups: int = 1, *, in_hw: tuple[int, int], neuron: NeuronConfig | None = None,
                 bn: bool = True, bias: bool = False, rng=None):
        padding = k // 2 if padding is None else padding
        self.cin, self.cout, self.k, self.stride, self.padding, self.groups = cin, cout, k, stride, padding, groups
        self.in_hw = tuple(in_hw)
        self.out_hw = tuple(ad.conv_output_size(n, k, stride, padding) for n in in_hw)
        self.sn = SpikingNeuron(neuron) if neuron is not None else None
        self.weight = Parameter(init_weight((cout, cin // groups, k, k), cin // groups * k * k, rng))
        self.bias = Parameter(_fill((cout,), 0.0, rng)) if bias else None
        self.bn = BatchNorm(cout, axis=1, rng=rng) if bn else None
        self.folded = False

    @property
    def kind(self) -> str:
        return "spike_conv" if self.sn is not None else "float_conv"

    def flops(self) -> int:
        return self.k * self.k * (self.cin // self.groups) * self.cout * self.out_hw[0] * self.out_hw[1]

    def __call__(self, x: Tensor, T: int = 1) -> Tensor:
        if self.sn is not None:
            x = self.sn(x, T)
            rec = active_recorder()
            if rec is not None:
                rec.spike_operand(self.layer_id, self.kind, x)
        y = ad.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)
        if self.bn is not None and not self.folded:
            y = self.bn(y)
        return y

    def fold_bn(self) -> None:
        """Merge eval-mode BN into conv weight and bias."""
        if self.bn is None or self.folded:
            return
        scale, shift = self.bn.fold_scale_shift()
        self.weight = Parameter((self.weight.data * scale[:, None, None, None]).astype(self.weight.dtype),
                                trainable=False)
        b = self.bias.data if self.bias is not None else 0.0
        self.bias = Parameter((b * scale + shift).astype(self.weight.dtype), trainable=False)
        self.folded = True


class LinearBN(Module):
    """[SN ->] linear -> [BN] over the channel (last) axis of token tensors.

    With ``spike_input=True`` and no neuron the layer expects operands that
    already went through a shared neuron (see :meth:`consume`)."""

    def __init__(self, din: int, dout: int, *, tokens: int, neuron: NeuronConfig | None, bn: bool = True,
                 spike_input: bool | None = None, rng=None):
        self.din, self.dout, self.tokens = din, dout, tokens
        self.sn = SpikingNeuron(neuron) if neuron is not None else None
        self.spike_input = neuron is not None if spike_input is None else spike_input
        self.weight = Parameter(init_weight((din, dout), din, rng))
        self.bn = BatchNorm(dout, axis=-1, rng=rng) if bn else None

    @property
    def kind(self) -> str:
        return "spike_fc" if self.spike_input else "float_fc"

    def flops(self) -> int:
        return self.tokens * self.din * self.dout

    def consume(self, s: Tensor) -> Tensor:
        if self.spike_input:
            rec = active_recorder()
            if rec is not None:
                rec.spike_operand(self.layer_id, self.kind, s)
        y = ad.linear(s, self.weight)
        return self.bn(y) if self.bn is not None else y

    def __call__(self, x: Tensor, T: int = 1) -> Tensor:
        if self.sn is not None:
            x = self.sn(x, T)
        return self.consume(x)
