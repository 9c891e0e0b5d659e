"""Side-tuned detector: frozen conv backbone, RFB reducers, HDConv ladder, U-Net decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .nn import Conv2d, GroupNorm, Module, Parameter
from .tensor import (
    Tensor, add, channel_pool, concat_channels, gelu, maxpool2d, mul, scale,
    sigmoid, silu, split_channels, upsample_nearest,
)

SIDE_CHANNELS = 32
SCONV_MODES = ("decomposed", "small", "small_skip", "square")


def _dw(c, k, rng, trainable=True):
    return Conv2d(c, c, k, rng, groups=c, bias=False, trainable=trainable)


class SConv(Module):
    """3x3 -> 5x5 -> (1x7, 7x1) depthwise cascade, concatenated and fused by a 1x1 conv.

    ``mode`` selects the ablation variants: ``small`` keeps only the 3x3 -> 5x5
    chain, ``small_skip`` adds the short connection, ``square`` replaces the
    strip pair by a dense 7x7 depthwise kernel.
    """

    def __init__(self, c, rng, mode="decomposed", trainable=True):
        if mode not in SCONV_MODES:
            raise ValueError(f"unknown sconv mode {mode!r}; expected one of {SCONV_MODES}")
        self.c, self.mode = c, mode
        self.dw3 = _dw(c, 3, rng, trainable)
        self.dw5 = _dw(c, 5, rng, trainable)
        if mode == "decomposed":
            self.dw1x7 = _dw(c, (1, 7), rng, trainable)
            self.dw7x1 = _dw(c, (7, 1), rng, trainable)
        elif mode == "square":
            self.dw7 = _dw(c, 7, rng, trainable)
        n_parts = 2 if mode in ("small", "small_skip") else 3
        self.fuse = Conv2d(n_parts * c, c, 1, rng, trainable=trainable)

    def branches(self, x):
        if x.shape[1] != self.c:
            raise ValueError(f"SConv built for {self.c} channels, got input {x.shape}")
        d3 = self.dw3(x)
        d5 = self.dw5(d3)
        if self.mode == "small":
            return [d3, d5]
        if self.mode == "small_skip":
            return [d3, add(d3, d5)]
        if self.mode == "square":
            return [d3, d5, self.dw7(add(d3, d5))]
        return [d3, d5, self.dw7x1(self.dw1x7(add(d3, d5)))]

    def forward(self, x):
        return self.fuse(concat_channels(self.branches(x)))


def cascade(parts, sconvs, scaling=True, interaction=True):
    """Multi-scale cascade: branch j works at 1/2**j resolution on U_j + previous output."""
    if len(parts) != len(sconvs):
        raise ValueError(f"{len(parts)} parts for {len(sconvs)} branches")
    h, w = parts[0].shape[2:]
    r = len(parts)
    if scaling and (h % 2 ** (r - 1) or w % 2 ** (r - 1)):
        raise ValueError(f"resolution {h}x{w} not divisible by 2**{r - 1} for {r} branches")
    outs = []
    for j, (u, op) in enumerate(zip(parts, sconvs)):
        if j > 0 and interaction:
            u = add(u, outs[-1])
        f = 2 ** j if scaling else 1
        outs.append(upsample_nearest(op(maxpool2d(u, f)), f))
    return outs


def spatial_attention(branches, conv):
    """Gate each branch with a sigmoid map from a conv over channel mean/max maps."""
    pooled = []
    for b in branches:
        pooled += [channel_pool(b, "mean"), channel_pool(b, "max")]
    gates = split_channels(sigmoid(conv(concat_channels(pooled))), [1] * len(branches))
    # gates are (n,1,h,w) and broadcast over each branch's channels
    return concat_channels([b * g for b, g in zip(branches, gates)])


class Selka(Module):
    """Large-kernel attention: FC -> GELU -> split -> cascade -> gate, times a value path.

    ``hidden`` is the width the attention works in (default ``c``); it must be
    divisible by ``r`` so the branch split is equal.
    """

    def __init__(self, c, r, rng, hidden=None, sconv_mode="decomposed", scaling=True,
                 interaction=True, use_spatial=True, trainable=True):
        hidden = c if hidden is None else hidden
        if r < 1 or hidden % r:
            raise ValueError(f"SELKA width {hidden} is not divisible by r={r}")
        self.c, self.r, self.hidden = c, r, hidden
        self.scaling, self.interaction, self.use_spatial = scaling, interaction, use_spatial
        self.fc_in = Conv2d(c, hidden, 1, rng, trainable=trainable)
        self.sconvs = [SConv(hidden // r, rng, sconv_mode, trainable) for _ in range(r)]
        self.spatial_conv = Conv2d(2 * r, r, 7, rng, trainable=trainable) if use_spatial else None
        self.v_conv = Conv2d(hidden, hidden, 1, rng, trainable=trainable)
        self.fc_out = Conv2d(hidden, c, 1, rng, trainable=trainable)

    def attention(self, y):
        parts = split_channels(y, [self.hidden // self.r] * self.r)
        outs = cascade(parts, self.sconvs, self.scaling, self.interaction)
        if self.use_spatial:
            return spatial_attention(outs, self.spatial_conv)
        return concat_channels(outs)

    def forward(self, x):
        if x.shape[1] != self.c:
            raise ValueError(f"SELKA built for {self.c} channels, got input {x.shape}")
        y = gelu(self.fc_in(x))
        z = mul(silu(self.attention(y)), silu(self.v_conv(y)))
        return add(self.fc_out(z), x)


class PreBasicBlock(Module):
    """Pre-activation residual block: (norm -> silu -> 3x3 conv) twice, plus skip."""

    def __init__(self, c, rng, trainable=True):
        self.n1, self.n2 = GroupNorm(c), GroupNorm(c)
        self.c1 = Conv2d(c, c, 3, rng, trainable=trainable)
        self.c2 = Conv2d(c, c, 3, rng, trainable=trainable)

    def forward(self, x):
        y = self.c1(silu(self.n1(x)))
        y = self.c2(silu(self.n2(y)))
        return add(y, x)


class HDConv(Module):
    """x + l1 * SELKA(GN(x)), then + l2 * PreBasicBlock(PreBasicBlock(.))."""

    def __init__(self, c, r, rng, hidden=None, layer_scale=1e-2, use_attention=True,
                 use_residual=True, **selka_kw):
        self.use_attention, self.use_residual = use_attention, use_residual
        if use_attention:
            self.norm = GroupNorm(c)
            self.selka = Selka(c, r, rng, hidden=hidden, **selka_kw)
            self.lambda1 = Parameter(np.full(c, layer_scale))
        if use_residual:
            self.pre_blocks = [PreBasicBlock(c, rng), PreBasicBlock(c, rng)]
            self.lambda2 = Parameter(np.full(c, layer_scale))

    def forward(self, x):
        if self.use_attention:
            x = add(x, scale(self.selka(self.norm(x)), self.lambda1))
        if self.use_residual:
            y = x
            for blk in self.pre_blocks:
                y = blk(y)
            x = add(x, scale(y, self.lambda2))
        return x


class RFB(Module):
    """Channel reducer: 1x1 to 32, dilated depthwise 3x3 (1, 3, 5) summed, 1x1 fuse."""

    def __init__(self, cin, rng, cout=SIDE_CHANNELS, dilations=(1, 3, 5)):
        self.reduce = Conv2d(cin, cout, 1, rng)
        self.branches = [Conv2d(cout, cout, 3, rng, dilation=d, groups=cout, bias=False)
                         for d in dilations]
        self.fuse = Conv2d(cout, cout, 1, rng)

    def forward(self, x):
        y = self.reduce(x)
        acc = self.branches[0](y)
        for b in self.branches[1:]:
            acc = add(acc, b(y))
        return self.fuse(acc)


class ConvNormAct(Module):
    def __init__(self, cin, cout, rng, k=3, stride=1, trainable=True, bias=True):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, pad=(k - 1) // 2, bias=bias,
                           trainable=trainable)
        self.norm = GroupNorm(cout)

    def forward(self, x):
        return silu(self.norm(self.conv(x)))


class Backbone(Module):
    """Frozen random-weight conv pyramid standing in for a pretrained encoder.

    Stem at 1/2 resolution, four stride-2 stages at 1/4 .. 1/32. Only the group
    norm affines may be trained.
    """

    def __init__(self, in_ch, stem_ch, channels, seed, norm_tuning=True):
        rng = np.random.default_rng(seed)
        self.stem = ConvNormAct(in_ch, stem_ch, rng, stride=2, trainable=False, bias=False)
        self.stages = []
        prev = stem_ch
        for c in channels:
            self.stages.append([ConvNormAct(prev, c, rng, stride=2, trainable=False, bias=False),
                                ConvNormAct(c, c, rng, trainable=False, bias=False)])
            prev = c
        for name, p in self.named_parameters():
            p.trainable = norm_tuning and ".norm." in f".{name}"

    def forward(self, x):
        stem = self.stem(x)
        feats, y = [], stem
        for down, conv in self.stages:
            y = conv(down(y))
            feats.append(y)
        return stem, feats


class UpBlock(Module):
    def __init__(self, cin, cout, rng):
        self.a = ConvNormAct(cin, cout, rng)
        self.b = ConvNormAct(cout, cout, rng)

    def forward(self, x, skip=None):
        x = upsample_nearest(x, 2)
        if skip is not None:
            x = concat_channels([x, skip])
        return self.b(self.a(x))


class Decoder(Module):
    """Deepest-first U-Net decoder over the side outputs, the stem, then full resolution."""

    def __init__(self, stem_ch, rng, c=SIDE_CHANNELS, head_ch=16, head_bias=-2.0):
        self.levels = [UpBlock(2 * c, c, rng) for _ in range(3)]
        self.stem_level = UpBlock(c + stem_ch, c, rng)
        self.final = ConvNormAct(c, head_ch, rng)
        self.head = Conv2d(head_ch, 1, 1, rng)
        self.head.bias.data[:] = head_bias

    def forward(self, sides, stem):
        y = sides[-1]
        for level, skip in zip(self.levels, sides[-2::-1]):
            y = level(y, skip)
        y = self.stem_level(y, stem)
        return sigmoid(self.head(self.final(upsample_nearest(y, 2))))


@dataclass
class ModelConfig:
    in_ch: int = 1
    stem_ch: int = 32
    channels: tuple = (64, 128, 256, 512)
    r: int = 3
    layer_scale: float = 1e-2
    side: bool = True
    norm_tuning: bool = True
    use_attention: bool = True
    use_residual: bool = True
    sconv_mode: str = "decomposed"
    scaling: bool = True
    interaction: bool = True
    spatial_attention: bool = True
    seed: int = 0
    backbone_seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4:
            raise ValueError(f"need 4 stage channel counts, got {self.channels}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        if self.sconv_mode not in SCONV_MODES:
            raise ValueError(f"unknown sconv_mode {self.sconv_mode!r}")

    def with_(self, **kw):
        return replace(self, **kw)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def stage_branches(r, stage):
    """Branch count at stage 0..3; deeper stages are too small for 2**(r-1) pooling."""
    return max(1, min(r, 4 - stage))


class LspstModel(Module):
    STRIDE = 32

    def __init__(self, cfg=None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.backbone = Backbone(cfg.in_ch, cfg.stem_ch, cfg.channels, cfg.backbone_seed, cfg.norm_tuning)
        self.rfb = [RFB(c, rng) for c in cfg.channels]
        self.ladder = []
        if cfg.side:
            for s in range(4):
                r = stage_branches(cfg.r, s)
                self.ladder.append(HDConv(
                    SIDE_CHANNELS, r, rng, hidden=r * math.ceil(SIDE_CHANNELS / r),
                    layer_scale=cfg.layer_scale, use_attention=cfg.use_attention,
                    use_residual=cfg.use_residual, sconv_mode=cfg.sconv_mode,
                    scaling=cfg.scaling, interaction=cfg.interaction,
                    use_spatial=cfg.spatial_attention))
        self.decoder = Decoder(cfg.stem_ch, rng)

    def features(self, image):
        """Forward pass returning every intermediate the contracts talk about."""
        n, c, h, w = image.shape
        if c != self.cfg.in_ch:
            raise ValueError(f"model expects {self.cfg.in_ch} input channel(s), got {c}")
        if h % self.STRIDE or w % self.STRIDE:
            raise ValueError(f"input {h}x{w} must be divisible by {self.STRIDE}")
        stem, stages = self.backbone(image)
        reduced = [rfb(f) for rfb, f in zip(self.rfb, stages)]
        sides = []
        for s, red in enumerate(reduced):
            if not self.ladder:
                sides.append(red)
                continue
            x = red if s == 0 else add(red, maxpool2d(sides[-1], 2))
            sides.append(self.ladder[s](x))
        out = self.decoder(sides, stem)
        return {"stem": stem, "stages": stages, "rfb": reduced, "sides": sides, "out": out}

    def forward(self, image):
        if not isinstance(image, Tensor):
            image = Tensor(image)
        return self.features(image)["out"]

    def frozen_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not p.trainable]


def count_params(model):
    trainable = frozen = 0
    for _, p in model.named_parameters():
        if p.trainable:
            trainable += p.data.size
        else:
            frozen += p.data.size
    return {"trainable": trainable, "frozen": frozen}
