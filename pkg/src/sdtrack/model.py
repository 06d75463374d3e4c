"""The spike-driven transformer tracker.

Pipeline: template and search event images are placed on the diagonal of a
block matrix (IPL), a float stem and three spiking conv stages run over the
composed map, the two diagonal blocks are split back and tokenized, two
spiking transformer stages mix template and search tokens through spike
self-attention, and a spiking center head reads the box off the search
tokens.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .neurons import NeuronConfig, is_spike_valued, spike_ahead_expand
from .nn import BatchNorm, ConvBN, LinearBN, Module, SpikingNeuron, active_recorder


@dataclass(frozen=True)
class ModelConfig:
    C: int = 32
    stage_blocks: tuple[int, int, int, int, int] = (2, 2, 1, 6, 2)
    stage5_channel_mult: int = 10
    embed_dim: int | None = None  # stage-4 width; defaults to 8C
    num_heads: int = 8
    ssa_scale: float | None = None  # defaults to 1/sqrt(head_dim)
    T: int = 1
    neuron: NeuronConfig = field(default_factory=NeuronConfig.ILIF)
    template_size: int = 128
    search_size: int = 256
    head_top_channels: int = 256
    stem_kernel: int = 7
    dw_kernel: int = 7
    sep_ratio: int = 2
    conv_mlp_ratio: int = 4
    mlp_ratio: int = 4
    stride: int = 16

    def __post_init__(self):
        if len(self.stage_blocks) != 5:
            raise ValueError("stage_blocks needs five entries")
        for size in (self.template_size, self.search_size):
            if size % self.stride:
                raise ValueError(f"input size {size} not divisible by stride {self.stride}")
        for d in (self.dim4, self.dim5):
            if d % self.num_heads:
                raise ValueError(f"width {d} not divisible by {self.num_heads} heads")
        if self.head_top_channels % 8:
            raise ValueError("head_top_channels must be divisible by 8")

    @property
    def conv_channels(self) -> tuple[int, int, int]:
        return (2 * self.C, 4 * self.C, 8 * self.C)

    @property
    def dim4(self) -> int:
        return self.embed_dim or 8 * self.C

    @property
    def dim5(self) -> int:
        return self.stage5_channel_mult * self.C

    @property
    def search_feat(self) -> int:
        return self.search_size // self.stride

    @property
    def template_feat(self) -> int:
        return self.template_size // self.stride

    @property
    def n_tokens(self) -> int:
        return self.search_feat ** 2 + self.template_feat ** 2

    @property
    def total_timesteps(self) -> int:
        return self.T * self.neuron.levels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["neuron"] = NeuronConfig(**d["neuron"])
        d["stage_blocks"] = tuple(d["stage_blocks"])
        return cls(**d)


def tiny_config(**kw) -> ModelConfig:
    return replace(ModelConfig(C=32, stage_blocks=(2, 2, 1, 6, 2), stage5_channel_mult=10, num_heads=8,
                               head_top_channels=256), **kw)


def base_config(**kw) -> ModelConfig:
    return replace(ModelConfig(C=64, stage_blocks=(2, 2, 1, 12, 3), stage5_channel_mult=12, num_heads=8,
                               head_top_channels=512), **kw)


def toy_config(**kw) -> ModelConfig:
    defaults = dict(C=8, stage_blocks=(0, 1, 1, 1, 1), stage5_channel_mult=10, num_heads=2,
                    template_size=32, search_size=64, head_top_channels=32, stem_kernel=3, dw_kernel=3,
                    neuron=NeuronConfig.ILIF(D=4, tau=2.0))
    defaults.update(kw)
    return ModelConfig(**defaults)


PRESETS = {"tiny": tiny_config, "base": base_config, "toy": toy_config}


@dataclass
class TrackResult:
    box: tuple[float, float, float, float]  # (cx, cy, w, h), normalized to the search region
    score: float
    score_map: np.ndarray


@dataclass
class HeadOutput:
    score: Tensor  # (B, 1, H, W) probabilities
    offset: Tensor  # (B, 2, H, W) sub-cell offsets in (-0.5, 0.5)
    size: Tensor  # (B, 2, H, W) normalized (w, h)


# -- IPL -------------------------------------------------------------------

def ipl_compose(x, z) -> Tensor:
    """Block-diagonal composition [[X, 0], [0, Z]] over the last two axes."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    z = z if isinstance(z, Tensor) else Tensor(z)
    if x.shape[:-2] != z.shape[:-2]:
        raise ValueError(f"leading axes differ: {x.shape} vs {z.shape}")
    hx, wx = x.shape[-2:]
    hz, wz = z.shape[-2:]
    lead = [(0, 0)] * (x.ndim - 2)
    top = ad.pad(x, lead + [(0, 0), (0, wz)])
    bottom = ad.pad(z, lead + [(0, 0), (wx, 0)])
    return ad.concat([top, bottom], axis=-2)


def ipl_split(u: Tensor, x_extent: tuple[int, int], z_extent: tuple[int, int]) -> tuple[Tensor, Tensor]:
    hx, wx = x_extent
    hz, wz = z_extent
    if u.shape[-2:] != (hx + hz, wx + wz):
        raise ValueError(f"feature map {u.shape[-2:]} does not match extents {x_extent} + {z_extent}")
    return u[..., :hx, :wx], u[..., hx:, wx:]


def tokenize(x_feat: Tensor, z_feat: Tensor) -> Tensor:
    """(N, D, h, w) maps -> (N, h_z*w_z + h_x*w_x, D) tokens, template first."""
    def flat(f):
        n, d, h, w = f.shape
        return f.transpose(0, 2, 3, 1).reshape(n, h * w, d)
    return ad.concat([flat(z_feat), flat(x_feat)], axis=1)


def detokenize(tokens: Tensor, z_hw: tuple[int, int], x_hw: tuple[int, int]) -> tuple[Tensor, Tensor]:
    n, _, d = tokens.shape
    nz = z_hw[0] * z_hw[1]
    z = tokens[:, :nz].reshape(n, z_hw[0], z_hw[1], d).transpose(0, 3, 1, 2)
    x = tokens[:, nz:].reshape(n, x_hw[0], x_hw[1], d).transpose(0, 3, 1, 2)
    return x, z


# -- spike self-attention ------------------------------------------------------

def ssa(q: Tensor, k: Tensor, v: Tensor, scale: float, *, strict: bool = False, D: int = 1) -> Tensor:
    """Q (K^T V) * scale over (..., N, d) spike matrices, no softmax."""
    if strict:
        for name, t in (("Q", q), ("K", k), ("V", v)):
            if not is_spike_valued(t.data, D):
                raise ValueError(f"{name} is not a spike tensor")
    kv = ad.matmul(k.swapaxes(-1, -2), v)
    return ad.matmul(q, kv) * scale


def _binary_view(t: Tensor) -> np.ndarray:
    """(levels, ...) binary spikes behind an operand."""
    spikes = getattr(t, "spikes", None)
    if spikes is None:
        return t.data[None]
    if spikes.coding == "integer_scaled":
        return spike_ahead_expand(spikes).values
    return spikes.values if spikes.values.shape != t.shape else spikes.values[None]


def ssa_effective_ops(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> float:
    """Accumulations triggered by binary Q, K, V of shape (L, M, h, N, d),
    averaged over the leading L*M (virtual step x sample) axes.

    K^T V adds V rows for every active K element: sum_n |K_n| |V_n| per head;
    Q (K^T V) adds d-wide rows of K^T V for every active Q element."""
    nk = k.sum(axis=-1)
    nv = v.sum(axis=-1)
    ops = (nk * nv).sum(axis=(-1, -2)) + q.sum(axis=(-1, -2, -3)) * q.shape[-1]
    return float(ops.mean())


class SpikeSelfAttention(Module):
    def __init__(self, dim: int, heads: int, tokens: int, neuron: NeuronConfig, scale: float | None, rng):
        self.dim, self.heads, self.tokens = dim, heads, tokens
        self.head_dim = dim // heads
        self.scale = scale if scale is not None else 1.0 / math.sqrt(self.head_dim)
        self.in_sn = SpikingNeuron(neuron)
        self.q = LinearBN(dim, dim, tokens=tokens, neuron=None, spike_input=True, rng=rng)
        self.k = LinearBN(dim, dim, tokens=tokens, neuron=None, spike_input=True, rng=rng)
        self.v = LinearBN(dim, dim, tokens=tokens, neuron=None, spike_input=True, rng=rng)
        self.q_sn = SpikingNeuron(neuron)
        self.k_sn = SpikingNeuron(neuron)
        self.v_sn = SpikingNeuron(neuron)
        self.proj = LinearBN(dim, dim, tokens=tokens, neuron=neuron, rng=rng)
        self.D = neuron.levels

    kind = "ssa"

    def flops(self) -> int:
        # K^T V and Q (K^T V): N * dh^2 each, per head
        return 2 * self.tokens * self.head_dim ** 2 * self.heads

    def _heads(self, t: Tensor) -> Tensor:
        n, N, _ = t.shape
        return t.reshape(n, N, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, u: Tensor, T: int) -> Tensor:
        s = self.in_sn(u, T)
        qs = self.q_sn(self.q.consume(s), T)
        ks = self.k_sn(self.k.consume(s), T)
        vs = self.v_sn(self.v.consume(s), T)
        rec = active_recorder()
        if rec is not None:
            views = [_binary_view(t) for t in (qs, ks, vs)]
            L, n, N = views[0].shape[:3]
            views = [b.reshape(L, n, N, self.heads, self.head_dim).transpose(0, 1, 3, 2, 4) for b in views]
            rec.ssa(self.layer_id, ssa_effective_ops(*views))
        a = ssa(self._heads(qs), self._heads(ks), self._heads(vs), self.scale)
        n, _, N, _ = a.shape
        a = a.transpose(0, 2, 1, 3).reshape(n, N, self.dim)
        return self.proj(a, T)


# -- blocks ----------------------------------------------------------------

class SNNConvBlock(Module):
    """u' = u + SepConv(u); u'' = u' + ConvGroup(u')."""

    def __init__(self, dim: int, hw, cfg: ModelConfig, rng):
        n = cfg.neuron
        e = dim * cfg.sep_ratio
        m = dim * cfg.conv_mlp_ratio
        self.pw1 = ConvBN(dim, e, 1, in_hw=hw, neuron=n, rng=rng)
        self.dw = ConvBN(e, e, cfg.dw_kernel, groups=e, in_hw=hw, neuron=n, rng=rng)
        self.pw2 = ConvBN(e, dim, 1, in_hw=hw, neuron=n, rng=rng)
        self.conv1 = ConvBN(dim, m, 3, in_hw=hw, neuron=n, rng=rng)
        self.conv2 = ConvBN(m, dim, 3, in_hw=hw, neuron=n, rng=rng)

    def sep_conv(self, u: Tensor, T: int) -> Tensor:
        return self.pw2(self.dw(self.pw1(u, T), T), T)

    def conv_group(self, u: Tensor, T: int) -> Tensor:
        return self.conv2(self.conv1(u, T), T)

    def __call__(self, u: Tensor, T: int) -> Tensor:
        u = u + self.sep_conv(u, T)
        return u + self.conv_group(u, T)


class SNNTransformerBlock(Module):
    """u' = u + SSA(u); u'' = u' + MLP(u')."""

    def __init__(self, dim: int, tokens: int, cfg: ModelConfig, rng):
        self.attn = SpikeSelfAttention(dim, cfg.num_heads, tokens, cfg.neuron, cfg.ssa_scale, rng)
        self.fc1 = LinearBN(dim, dim * cfg.mlp_ratio, tokens=tokens, neuron=cfg.neuron, rng=rng)
        self.fc2 = LinearBN(dim * cfg.mlp_ratio, dim, tokens=tokens, neuron=cfg.neuron, rng=rng)

    def mlp(self, u: Tensor, T: int) -> Tensor:
        return self.fc2(self.fc1(u, T), T)

    def __call__(self, u: Tensor, T: int) -> Tensor:
        u = u + self.attn(u, T)
        return u + self.mlp(u, T)


class HeadBranch(Module):
    """Four spiking 3x3 convs (channels halving) and a float 1x1 output conv
    on the real-valued activation of the fourth."""

    def __init__(self, cin: int, top: int, cout: int, hw, neuron: NeuronConfig, rng, out_bias: float = 0.0):
        chans = [cin, top, top // 2, top // 4, top // 8]
        self.convs = [ConvBN(a, b, 3, in_hw=hw, neuron=neuron, rng=rng) for a, b in zip(chans, chans[1:])]
        self.out = ConvBN(chans[-1], cout, 1, in_hw=hw, neuron=None, bn=False, bias=True, rng=rng)
        if rng is not None and out_bias:
            self.out.bias.data[...] = out_bias

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = conv(x, 1)
        return self.out(x)


class CenterHead(Module):
    def __init__(self, cin: int, cfg: ModelConfig, rng):
        hw = (cfg.search_feat, cfg.search_feat)
        top = cfg.head_top_channels
        # score prior of ~0.1 keeps the focal loss stable at init
        self.cls = HeadBranch(cin, top, 1, hw, cfg.neuron, rng, out_bias=-2.19)
        self.offset = HeadBranch(cin, top, 2, hw, cfg.neuron, rng)
        self.size = HeadBranch(cin, top, 2, hw, cfg.neuron, rng)

    def __call__(self, x: Tensor) -> HeadOutput:
        return HeadOutput(
            score=ad.sigmoid(self.cls(x)),
            offset=ad.sigmoid(self.offset(x)) - 0.5,
            size=ad.sigmoid(self.size(x)),
        )


class SDTrack(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator | int | None = 0):
        """``rng=None`` builds a shape-only instance (no parameter memory) for
        FLOP and parameter accounting."""
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(int(rng))
        self.config = cfg = config
        n = cfg.neuron
        hc = cfg.search_size + cfg.template_size
        self.stem = ConvBN(3, cfg.C, cfg.stem_kernel, stride=2, in_hw=(hc, hc), neuron=None, rng=rng)
        hw = self.stem.out_hw
        cin = cfg.C
        self.downsample, self.conv_stages = [], []
        for cout, nblocks in zip(cfg.conv_channels, cfg.stage_blocks[:3]):
            ds = ConvBN(cin, cout, 3, stride=2, in_hw=hw, neuron=n, rng=rng)
            hw = ds.out_hw
            self.downsample.append(ds)
            self.conv_stages.append([SNNConvBlock(cout, hw, cfg, rng) for _ in range(nblocks)])
            cin = cout
        if hw != (cfg.search_feat + cfg.template_feat,) * 2:
            raise ValueError(f"conv stack ends at {hw}, expected stride {cfg.stride}")
        tokens = cfg.n_tokens
        self.tokenizer = ConvBN(cin, cfg.dim4, 1, in_hw=hw, neuron=n, rng=rng)
        # spatial geometry for FLOPs: the tokenizer only runs on the split blocks
        self.tokenizer.out_hw = (tokens, 1)
        self.stage4 = [SNNTransformerBlock(cfg.dim4, tokens, cfg, rng) for _ in range(cfg.stage_blocks[3])]
        self.stage5_proj = LinearBN(cfg.dim4, cfg.dim5, tokens=tokens, neuron=n, rng=rng)
        self.stage5 = [SNNTransformerBlock(cfg.dim5, tokens, cfg, rng) for _ in range(cfg.stage_blocks[4])]
        self.head = CenterHead(cfg.dim5, cfg, rng)
        self.assign_ids()

    # -- pieces
    def _as_input(self, a, name: str) -> Tensor:
        a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=ad.get_default_dtype()))
        if a.ndim != 5 or a.shape[0] != self.config.T or a.shape[2] != 3:
            raise ValueError(f"{name} must be (T={self.config.T}, B, 3, H, W), got {a.shape}")
        return a

    def backbone(self, z, x) -> tuple[Tensor, Tensor]:
        """Returns (tokens (T*B, N, D5), composed conv features)."""
        cfg = self.config
        T = cfg.T
        z = self._as_input(z, "template")
        x = self._as_input(x, "search")
        if z.shape[-1] != cfg.template_size or x.shape[-1] != cfg.search_size:
            raise ValueError(f"input sizes {z.shape[-2:]}, {x.shape[-2:]} do not match config")
        B = x.shape[1]
        u = ipl_compose(x, z)
        u = u.reshape((T * B,) + u.shape[2:])
        u = self.stem(u)
        for ds, blocks in zip(self.downsample, self.conv_stages):
            u = ds(u, T)
            for blk in blocks:
                u = blk(u, T)
        hs, ht = cfg.search_feat, cfg.template_feat
        xf, zf = ipl_split(u, (hs, hs), (ht, ht))
        tok = tokenize(self.tokenizer(xf, T), self.tokenizer(zf, T))
        for blk in self.stage4:
            tok = blk(tok, T)
        tok = self.stage5_proj(tok, T)
        for blk in self.stage5:
            tok = blk(tok, T)
        return tok, u

    def __call__(self, z, x) -> HeadOutput:
        cfg = self.config
        tok, _ = self.backbone(z, x)
        n = tok.shape[0]
        B = n // cfg.T
        hs, ht = cfg.search_feat, cfg.template_feat
        xmap, _ = detokenize(tok, (ht, ht), (hs, hs))
        if cfg.T > 1:
            xmap = xmap.reshape((cfg.T, B) + xmap.shape[1:]).mean(axis=0)
        return self.head(xmap)

    def forward(self, z, x, mode: str = "infer") -> HeadOutput:
        """``train``: batch-statistics BN, integer spikes. ``infer``: running
        BN statistics, spike-ahead binary spikes. ``eval``: running BN
        statistics, integer spikes."""
        if mode == "train":
            self.train(True).set_spike_coding("integer")
        elif mode == "infer":
            self.train(False).set_spike_coding("spike_ahead")
        elif mode == "eval":
            self.train(False).set_spike_coding("integer")
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return self(z, x)

    def predict(self, z, x, mode: str = "infer") -> list[TrackResult]:
        with ad.no_grad():
            out = self.forward(z, x, mode)
        return decode_predictions(out)

    def track(self, z: np.ndarray, x: np.ndarray, mode: str = "infer") -> TrackResult:
        """Single pair, inputs (T, 3, H, W)."""
        return self.predict(np.asarray(z)[:, None], np.asarray(x)[:, None], mode)[0]

    def calibrate_bn(self, z, x) -> None:
        """Copy the batch statistics of one forward into every BN's running
        buffers. Untrained models otherwise sit below threshold everywhere
        (running mean 0, var 1), which makes firing-rate reports empty."""
        bns = [m for _, m in self.named_modules() if isinstance(m, BatchNorm)]
        saved = [bn.momentum for bn in bns]
        for bn in bns:
            bn.momentum = 1.0
        try:
            with ad.no_grad():
                self.forward(z, x, "train")
        finally:
            for bn, mom in zip(bns, saved):
                bn.momentum = mom
            self.train(False)

    def fold_bn(self) -> None:
        for _, m in self.named_modules():
            if isinstance(m, ConvBN):
                m.fold_bn()


def count_parameters(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


# -- decoding ----------------------------------------------------------------

def argmax_cell(score_map: np.ndarray) -> tuple[int, int]:
    """Row-major argmax; ties go to the lowest flat index."""
    idx = int(np.argmax(score_map))
    return divmod(idx, score_map.shape[-1])


def box_from_maps(score: np.ndarray, offset: np.ndarray, size: np.ndarray) -> TrackResult:
    """score (H, W), offset (2, H, W), size (2, H, W) -> normalized box."""
    H, W = score.shape
    r, c = argmax_cell(score)
    cx = (c + 0.5 + offset[0, r, c]) / W
    cy = (r + 0.5 + offset[1, r, c]) / H
    w, h = size[0, r, c], size[1, r, c]
    box = tuple(float(np.clip(v, 0.0, 1.0)) for v in (cx, cy, w, h))
    return TrackResult(box, float(score[r, c]), score)


def decode_predictions(out: HeadOutput) -> list[TrackResult]:
    s, o, z = out.score.data, out.offset.data, out.size.data
    return [box_from_maps(s[b, 0], o[b], z[b]) for b in range(s.shape[0])]


def boxes_at_cells(out: HeadOutput, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Differentiable (B, 4) boxes read from the offset/size maps at given
    cells (cell indices carry no gradient)."""
    B, _, H, W = out.score.shape
    b = np.arange(B)
    off = out.offset[b, :, rows, cols]  # (B, 2)
    size = out.size[b, :, rows, cols]
    base = np.stack([(cols + 0.5) / W, (rows + 0.5) / H], axis=1).astype(off.dtype)
    centre = off * np.array([1.0 / W, 1.0 / H], dtype=off.dtype) + base
    return ad.concat([centre, size], axis=1)
