"""The MSAU-PAF network.

Two chained U-Net blocks segment the char-grid (block 1: key mask, block 2:
full class map).  The attention-refined bottlenecks of both blocks, together
with the last block's decoder features at field resolution, feed a shared
trunk with corner pooling and two 1x1 heads producing the PIF and PAF
composite fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
from torch import nn

from . import autodiff as ad


RESIDUAL_INIT_GAIN = 0.1


@dataclass(frozen=True)
class NetConfig:
    n_input_channels: int = 91  # N_char + 1
    n_blocks: int = 2
    res_depth: int = 2
    n_downsampling: int = 4
    base_channels: int = 8
    max_channels: int = 32
    n_classes: int = 5
    n_keypoint_classes: int = 4
    n_link_types: int = 1
    head_channels: int = 16
    pif_paf_stages: int = 1
    field_stride: int = 4
    use_coordconv: bool = True
    use_corner_pool: bool = True

    def __post_init__(self):
        if self.n_downsampling < 1:
            raise ValueError("n_downsampling must be >= 1")
        if self.n_blocks != 2:
            raise ValueError("MSAU-PAF uses exactly two U-Net blocks")
        level = math.log2(self.field_stride)
        if level != int(level) or not 0 <= level <= self.n_downsampling:
            raise ValueError("field_stride must be a power of two <= 2**n_downsampling")
        if self.pif_paf_stages < 1:
            raise ValueError("pif_paf_stages must be >= 1")

    @property
    def multiple(self) -> int:
        return 2**self.n_downsampling

    @property
    def field_level(self) -> int:
        return int(math.log2(self.field_stride))

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2**level, self.max_channels)


@dataclass
class FieldMaps:
    seg_key: torch.Tensor  # N x 2 x H x W
    seg_full: torch.Tensor  # N x n_classes x H x W
    pif: torch.Tensor  # N x K x 5 x Hf x Wf  (c, x, y, b, sigma)
    paf: torch.Tensor  # N x L x 7 x Hf x Wf  (c, x1, y1, b1, x2, y2, b2)

    def detach(self) -> "FieldMaps":
        return FieldMaps(*(t.detach() for t in (self.seg_key, self.seg_full, self.pif, self.paf)))

    def sample(self, i: int) -> "FieldMaps":
        return FieldMaps(self.seg_key[i], self.seg_full[i], self.pif[i], self.paf[i])


def coordconv_channels(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """2 x H x W map: x then y coordinates, each scaled to [-1, 1]."""
    xs = torch.linspace(-1, 1, width, dtype=dtype) if width > 1 else torch.zeros(1, dtype=dtype)
    ys = torch.linspace(-1, 1, height, dtype=dtype) if height > 1 else torch.zeros(1, dtype=dtype)
    return torch.stack([xs.expand(height, width), ys[:, None].expand(height, width)])


def add_coords(x: torch.Tensor) -> torch.Tensor:
    n, _, h, w = x.shape
    coords = coordconv_channels(h, w, x.dtype).to(x.device)
    return ad.channel_concat([x, coords.unsqueeze(0).expand(n, -1, -1, -1)])


def corner_pool(x: torch.Tensor) -> torch.Tensor:
    """Sum of the suffix max down each column and the suffix max right along each row."""
    rows, cols = x.dim() - 2, x.dim() - 1
    t = torch.flip(torch.cummax(torch.flip(x, [rows]), dim=rows).values, [rows])
    l = torch.flip(torch.cummax(torch.flip(x, [cols]), dim=cols).values, [cols])
    return t + l


class Conv(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int = 3):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(c_out, c_in, k, k))
        self.bias = nn.Parameter(torch.zeros(c_out))

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias)


class NonLocal(nn.Module):
    """Embedded dot-product self-attention over all positions, residual."""

    def __init__(self, channels: int):
        super().__init__()
        inner = max(channels // 2, 1)
        self.query = Conv(channels, inner, 1)
        self.key = Conv(channels, inner, 1)
        self.value = Conv(channels, channels, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q = self.query(x).flatten(2)
        k = self.key(x).flatten(2)
        v = self.value(x).flatten(2)
        affinity = ad.scalar_mul(ad.global_matmul(q.transpose(1, 2), k), q.shape[1] ** -0.5)
        weights = torch.softmax(affinity, dim=-1)
        out = ad.global_matmul(v, weights.transpose(1, 2)).view(n, c, h, w)
        return ad.add(x, out)


class ResStage(nn.Module):
    def __init__(self, channels: int, depth: int):
        super().__init__()
        self.convs = nn.ModuleList(Conv(channels, channels) for _ in range(depth))

    def forward(self, x):
        for conv in self.convs:
            x = ad.relu(ad.add(x, conv(x)))
        return x


class UNetBlock(nn.Module):
    """Encoder/decoder with skips; attention at the bottleneck.

    Returns the full-resolution decoder output, the bottleneck attention
    output and the decoder features at every level.
    """

    def __init__(self, c_in: int, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        nd = cfg.n_downsampling
        extra = 2 if cfg.use_coordconv else 0
        self.stem = Conv(c_in + extra, cfg.channels(0))
        self.enc = nn.ModuleList(ResStage(cfg.channels(s), cfg.res_depth) for s in range(nd + 1))
        self.down = nn.ModuleList(Conv(cfg.channels(s), cfg.channels(s + 1)) for s in range(nd))
        self.attention = NonLocal(cfg.channels(nd))
        self.up = nn.ModuleList(
            Conv(cfg.channels(s + 1) + cfg.channels(s), cfg.channels(s)) for s in range(nd)
        )
        self.dec = nn.ModuleList(ResStage(cfg.channels(s), cfg.res_depth) for s in range(nd))

    def forward(self, x):
        nd = self.cfg.n_downsampling
        if self.cfg.use_coordconv:
            x = add_coords(x)
        x = ad.relu(self.stem(x))
        skips = []
        for s in range(nd):
            x = self.enc[s](x)
            skips.append(x)
            x = ad.relu(self.down[s](ad.max_pool2(x)))
        x = self.enc[nd](x)
        bottleneck = self.attention(x)
        x = bottleneck
        levels = {nd: bottleneck}
        for s in reversed(range(nd)):
            x = ad.channel_concat([ad.nearest_upsample(x), skips[s]])
            x = self.dec[s](ad.relu(self.up[s](x)))
            levels[s] = x
        return x, bottleneck, levels


class MSAUPAF(nn.Module):
    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        base = cfg.channels(0)
        self.embed = Conv(cfg.n_input_channels, base, 1)
        self.block1 = UNetBlock(base, cfg)
        self.key_head = Conv(base, 2, 1)
        self.block2 = UNetBlock(2 * base, cfg)
        self.seg_head = Conv(base, cfg.n_classes, 1)

        nd, lv = cfg.n_downsampling, cfg.field_level
        trunk_in = 2 * cfg.channels(nd) + cfg.channels(lv) + (2 if cfg.use_coordconv else 0)
        hc = cfg.head_channels
        self.trunk_in = Conv(trunk_in, hc)
        self.trunk = nn.ModuleList(
            Conv(hc + (2 if cfg.use_coordconv else 0), hc) for _ in range(cfg.pif_paf_stages)
        )
        self.pif_head = Conv(hc, cfg.n_keypoint_classes * 5, 1)
        self.paf_head = Conv(hc, cfg.n_link_types * 7, 1)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("weight"):
                    p.copy_(ad.he_init(p.shape, gen))
                else:
                    p.zero_()
            # residual branches and attention values start near identity
            for name, mod in self.named_modules():
                if isinstance(mod, ResStage):
                    for conv in mod.convs:
                        conv.weight.mul_(RESIDUAL_INIT_GAIN)
                elif isinstance(mod, NonLocal):
                    mod.value.weight.mul_(RESIDUAL_INIT_GAIN)
            # confidence starts low, spreads and scales near 1 after softplus
            pif_b = self.pif_head.bias.view(self.cfg.n_keypoint_classes, 5)
            pif_b[:, 0] = -3.0
            pif_b[:, 4] = 0.5
            paf_b = self.paf_head.bias.view(self.cfg.n_link_types, 7)
            paf_b[:, 0] = -3.0

    def forward(self, x: torch.Tensor) -> FieldMaps:
        cfg = self.cfg
        n, c, h, w = x.shape
        if c != cfg.n_input_channels:
            raise ad.ShapeError(f"expected {cfg.n_input_channels} input channels, got {c}")
        m = cfg.multiple
        ph, pw = -h % m, -w % m
        if ph or pw:
            x = torch.nn.functional.pad(x, (0, pw, 0, ph))
            x[:, 0, h:, :] = 1.0
            x[:, 0, :, w:] = 1.0

        e = ad.relu(self.embed(x))
        f1, bott1, _ = self.block1(e)
        seg_key = self.key_head(f1)
        f2, bott2, levels2 = self.block2(ad.channel_concat([e, f1]))
        seg_full = self.seg_head(f2)

        up = 2 ** (cfg.n_downsampling - cfg.field_level)
        parts = [levels2[cfg.field_level]]
        parts += [ad.nearest_upsample(b, up) if up > 1 else b for b in (bott1, bott2)]
        t = ad.channel_concat(parts)
        if cfg.use_coordconv:
            t = add_coords(t)
        t = ad.relu(self.trunk_in(t))
        if cfg.use_corner_pool:
            t = corner_pool(t)
        for conv in self.trunk:
            t = ad.relu(conv(add_coords(t) if cfg.use_coordconv else t))
        pif = self.pif_head(t)
        paf = self.paf_head(t)

        hf = -(-h // cfg.field_stride)
        wf = -(-w // cfg.field_stride)
        return FieldMaps(
            seg_key=seg_key[:, :, :h, :w],
            seg_full=seg_full[:, :, :h, :w],
            pif=pif[:, :, :hf, :wf].reshape(n, cfg.n_keypoint_classes, 5, hf, wf),
            paf=paf[:, :, :hf, :wf].reshape(n, cfg.n_link_types, 7, hf, wf),
        )


def forward(grid_onehot: torch.Tensor, config: NetConfig, params: Mapping[str, torch.Tensor]) -> FieldMaps:
    """Stateless forward pass with an explicit parameter mapping."""
    model = MSAUPAF(config)
    if grid_onehot.dim() == 3:
        grid_onehot = grid_onehot.unsqueeze(0)
    return torch.func.functional_call(model, dict(params), (grid_onehot,))


def load_params(model: nn.Module, params: Mapping[str, "object"]) -> None:
    state = {k: torch.as_tensor(v) for k, v in params.items()}
    missing = set(dict(model.named_parameters())) - set(state)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
    model.load_state_dict(state, strict=True)
