"""Networks: serialized patch-attention UNets, cross-attention fusion, embeddings.

Three parts: a light noise branch (2-stage UNet with time conditioning), a
fusion module that cross-attends the conditional branch's bottleneck onto the
noise branch's bottleneck, and a deeper conditional branch (4-stage UNet)
producing per-point class logits.  Attention runs inside contiguous patches of
points sorted along space-filling curves, with blocks rotating through the
four serialization orders.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .diffusion import ConfigurationError
from .geometry import ORDERS, PoolingMap, _curve_keys, build_pooling_map

CHECKPOINT_VERSION = 1

SKIP_MODES_CN = ("concat", "add", "multiply")
FIT_TARGETS = ("epsilon", "x0")
NN_INPUTS = ("features", "labels", "positions")


def time_embed(t, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Sinusoidal embedding: dim/2 geometric frequencies over [1, 1e4].

    Each (sin, cos) pair has unit norm, so the embedding norm is sqrt(dim/2)
    at every t.
    """
    if dim < 2 or dim % 2:
        raise ConfigurationError(f"time embedding dim must be even and >= 2, got {dim}")
    t = torch.as_tensor(np.asarray(t, dtype=np.float64), dtype=dtype).reshape(-1, 1)
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=dtype)
                      * (-math.log(1e4) / max(half - 1, 1)))
    ang = t * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters for both branches and the fusion module."""

    nn_enc_depths: tuple = (1, 1)
    nn_enc_channels: tuple = (8, 16)
    nn_enc_heads: tuple = (1, 2)
    nn_dec_depths: tuple = (1, 1)
    nn_dec_channels: tuple = (8, 8)
    nn_strides: tuple = (4, 4)
    cn_enc_depths: tuple = (1, 1, 1, 1)
    cn_enc_channels: tuple = (8, 16, 32, 64)
    cn_enc_heads: tuple = (1, 2, 4, 8)
    cn_dec_depths: tuple = (1, 1, 1, 1)
    cn_dec_channels: tuple = (8, 8, 16, 32)
    cn_strides: tuple = (2, 2, 2, 2)
    ffm_depth: int = 1
    ffm_channels: int = 16
    ffm_heads: int = 2
    ffm_feat_scale: float = 1.0
    patch_size: int = 128
    mlp_ratio: int = 4
    drop_path: float = 0.0
    time_embed_dim: int = 16
    skip_mode_nn: str = "add"
    skip_mode_cn: str = "concat"
    skip_scale: float = 1.0 / math.sqrt(2.0)
    fit_target: str = "epsilon"
    nn_input: str = "features"
    grid_size: float = 0.05

    def __post_init__(self):
        for side in ("nn", "cn"):
            enc_d = getattr(self, f"{side}_enc_depths")
            enc_c = getattr(self, f"{side}_enc_channels")
            enc_h = getattr(self, f"{side}_enc_heads")
            dec_d = getattr(self, f"{side}_dec_depths")
            dec_c = getattr(self, f"{side}_dec_channels")
            strides = getattr(self, f"{side}_strides")
            s = len(enc_d)
            if not (len(enc_c) == len(enc_h) == len(strides) == len(dec_d) == len(dec_c) == s):
                raise ConfigurationError(f"{side} stage counts are inconsistent")
            for c, h in zip(enc_c, enc_h):
                if c % h:
                    raise ConfigurationError(f"{side} channels {c} not divisible by heads {h}")
            head_dim = enc_c[0] // enc_h[0]
            for c in dec_c:
                if c % head_dim:
                    raise ConfigurationError(
                        f"{side} decoder channels {c} not divisible by head dim {head_dim}")
        if self.skip_mode_nn != "add":
            raise ConfigurationError(f"nn skip mode must be 'add', got {self.skip_mode_nn!r}")
        if self.skip_mode_cn not in SKIP_MODES_CN:
            raise ConfigurationError(f"unknown cn skip mode: {self.skip_mode_cn!r}")
        for side in ("nn", "cn") if self.skip_mode_cn in ("add", "multiply") else ("nn",):
            enc_c = getattr(self, f"{side}_enc_channels")
            dec_c = getattr(self, f"{side}_dec_channels")
            skip_c = (enc_c[0],) + tuple(enc_c[:-1])
            if tuple(dec_c) != skip_c:
                raise ConfigurationError(
                    f"{side} additive skips need decoder channels {skip_c}, got {dec_c}")
        if self.patch_size < 1:
            raise ConfigurationError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.ffm_channels % self.ffm_heads:
            raise ConfigurationError(
                f"ffm channels {self.ffm_channels} not divisible by heads {self.ffm_heads}")
        if self.fit_target not in FIT_TARGETS:
            raise ConfigurationError(f"unknown fit_target: {self.fit_target!r}")
        if self.nn_input not in NN_INPUTS:
            raise ConfigurationError(f"unknown nn_input: {self.nn_input!r}")
        if self.grid_size <= 0:
            raise ConfigurationError(f"grid_size must be > 0, got {self.grid_size}")


def tiny_preset(**overrides) -> NetworkConfig:
    """Desk-scale configuration; 8 channels per head."""
    return NetworkConfig(**overrides)


def paper_preset(**overrides) -> NetworkConfig:
    """Full-scale configuration; 16 channels per head."""
    base = dict(
        nn_enc_depths=(2, 2), nn_enc_channels=(64, 128), nn_enc_heads=(4, 8),
        nn_dec_depths=(2, 2), nn_dec_channels=(64, 64), nn_strides=(4, 4),
        cn_enc_depths=(2, 2, 6, 6), cn_enc_channels=(64, 128, 256, 512),
        cn_enc_heads=(4, 8, 16, 32),
        cn_dec_depths=(2, 2, 2, 2), cn_dec_channels=(64, 64, 128, 256),
        cn_strides=(2, 2, 2, 2),
        ffm_depth=1, ffm_channels=512, ffm_heads=32,
        patch_size=1024, mlp_ratio=4, drop_path=0.3, time_embed_dim=128,
    )
    base.update(overrides)
    return NetworkConfig(**base)


# ---------------------------------------------------------------------------
# Feature carrier


def _order_perm(coords: np.ndarray, offsets: np.ndarray, grid: float, order: str) -> np.ndarray:
    """Per-batch stable sort permutation along a space-filling curve."""
    perm = np.zeros(len(coords), dtype=np.int64)
    start = 0
    for end in offsets:
        pos = coords[start:end]
        q = np.floor((pos - pos.min(axis=0)) / grid).astype(np.int64)
        perm[start:end] = start + np.argsort(_curve_keys(q, order), kind="stable")
        start = int(end)
    return perm


@dataclass
class FeatureMap:
    """Features plus the geometry needed to attend over and unpool them."""

    values: torch.Tensor  # (M, C)
    coords: np.ndarray  # (M, 3)
    offsets: np.ndarray
    grid: float
    trail: list = field(default_factory=list)  # PoolingMaps from full resolution
    _perms: dict = field(default_factory=dict, repr=False)

    def perm(self, order: str) -> torch.Tensor:
        if order not in self._perms:
            p = _order_perm(self.coords, self.offsets, self.grid, order)
            self._perms[order] = torch.from_numpy(p)
        return self._perms[order]


# ---------------------------------------------------------------------------
# Attention blocks


def _assert_row_stochastic(w: torch.Tensor) -> None:
    # Non-finite rows pass through: they surface as a non-finite loss, which
    # the training step reports and aborts on.
    with torch.no_grad():
        s = w.sum(dim=-1)
        finite = torch.isfinite(s)
        if not torch.allclose(s[finite], torch.ones_like(s[finite]), atol=1e-6):
            raise AssertionError("attention rows do not sum to 1")


class PatchAttention(nn.Module):
    """Multi-head self-attention within contiguous patches of a sorted sequence."""

    def __init__(self, channels: int, heads: int, patch_size: int):
        super().__init__()
        if channels % heads:
            raise ConfigurationError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.patch_size = patch_size
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, perm: torch.Tensor, offsets: np.ndarray) -> torch.Tensor:
        xs = x[perm]
        out = torch.empty_like(xs)
        h, d = self.heads, xs.shape[1] // self.heads
        start = 0
        for end in offsets:
            for p0 in range(start, int(end), self.patch_size):
                p1 = min(p0 + self.patch_size, int(end))
                chunk = xs[p0:p1]
                m = len(chunk)
                q, k, v = self.qkv(chunk).reshape(m, 3, h, d).permute(1, 2, 0, 3)
                w = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
                _assert_row_stochastic(w)
                out[p0:p1] = self.proj((w @ v).transpose(0, 1).reshape(m, h * d))
            start = int(end)
        res = torch.empty_like(out)
        res[perm] = out
        return res


class DropPath(nn.Module):
    """Stochastic depth: drop the residual branch with probability p."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = (torch.rand((), device=x.device) >= self.p).to(x.dtype)
        return x * keep / (1.0 - self.p)


class AttnBlock(nn.Module):
    """Pre-norm attention + MLP with residuals; one serialization order each."""

    def __init__(self, channels: int, heads: int, patch_size: int,
                 mlp_ratio: int, drop_path: float, order: str):
        super().__init__()
        self.order = order
        self.norm1 = nn.LayerNorm(channels)
        self.attn = PatchAttention(channels, heads, patch_size)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, channels * mlp_ratio),
            nn.GELU(),
            nn.Linear(channels * mlp_ratio, channels),
        )
        self.drop_path = DropPath(drop_path)

    def forward(self, x: torch.Tensor, fmap: FeatureMap) -> torch.Tensor:
        x = x + self.drop_path(self.attn(self.norm1(x), fmap.perm(self.order), fmap.offsets))
        x = x + self.drop_path(self.mlp(self.norm2(x)))
        return x


class StageBlocks(nn.Module):
    def __init__(self, depth, channels, heads, patch_size, mlp_ratio, drop_path, order_offset):
        super().__init__()
        self.blocks = nn.ModuleList(
            AttnBlock(channels, heads, patch_size, mlp_ratio, drop_path,
                      ORDERS[(order_offset + i) % len(ORDERS)])
            for i in range(depth))

    def forward(self, x: torch.Tensor, fmap: FeatureMap) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x, fmap)
        return x


# ---------------------------------------------------------------------------
# UNet over grid-pooled point levels


def _pool_mean(x: torch.Tensor, pmap: PoolingMap) -> torch.Tensor:
    parent = torch.from_numpy(pmap.parent)
    out = torch.zeros(pmap.num_cells, x.shape[1], dtype=x.dtype, device=x.device)
    out.index_add_(0, parent, x)
    return out / torch.from_numpy(pmap.counts).to(x.dtype).unsqueeze(1)


class PointUNet(nn.Module):
    """Encoder/decoder over voxel-pooled levels with patch attention at each.

    Each encoder stage pools first (voxel size scaled by the stage stride),
    so the bottleneck sits prod(strides) pooling levels below the input.
    """

    def __init__(self, in_channels: int, out_channels: int, *, enc_depths, enc_channels,
                 enc_heads, dec_depths, dec_channels, strides, patch_size, mlp_ratio,
                 drop_path, skip_mode, skip_scale, grid, time_dim=0):
        super().__init__()
        self.num_stages = len(enc_depths)
        self.strides = tuple(strides)
        self.skip_mode = skip_mode
        self.skip_scale = skip_scale
        self.grid = grid
        self.stem = nn.Linear(in_channels + 3, enc_channels[0])
        self.time_proj = nn.Linear(time_dim, enc_channels[0]) if time_dim else None
        head_dim = enc_channels[0] // enc_heads[0]

        skip_channels = (enc_channels[0],) + tuple(enc_channels[:-1])
        self.enc_proj = nn.ModuleList()
        self.enc_stages = nn.ModuleList()
        self.dec_proj = nn.ModuleList()
        self.dec_merge = nn.ModuleList()
        self.dec_stages = nn.ModuleList()
        order_at = 0
        for i in range(self.num_stages):
            prev = enc_channels[i - 1] if i else enc_channels[0]
            self.enc_proj.append(nn.Linear(prev, enc_channels[i]))
            self.enc_stages.append(StageBlocks(
                enc_depths[i], enc_channels[i], enc_heads[i], patch_size,
                mlp_ratio, drop_path, order_at))
            order_at += enc_depths[i]
        for i in range(self.num_stages):
            upper = enc_channels[-1] if i == self.num_stages - 1 else dec_channels[i + 1]
            self.dec_proj.append(nn.Linear(upper, dec_channels[i]))
            if skip_mode == "concat":
                self.dec_merge.append(nn.Linear(dec_channels[i] + skip_channels[i],
                                                dec_channels[i]))
            else:
                self.dec_merge.append(nn.Identity())
            self.dec_stages.append(StageBlocks(
                dec_depths[i], dec_channels[i], dec_channels[i] // head_dim,
                patch_size, mlp_ratio, drop_path, order_at))
            order_at += dec_depths[i]
        self.head = nn.Linear(dec_channels[0], out_channels)

    def encode(self, feats: torch.Tensor, coords: np.ndarray, offsets: np.ndarray,
               t_emb: torch.Tensor | None = None):
        """Returns (bottleneck FeatureMap, skips, levels) for decode()."""
        pos = torch.as_tensor(coords, dtype=feats.dtype, device=feats.device)
        x = self.stem(torch.cat([feats, pos], dim=1))
        if self.time_proj is not None:
            if t_emb is None:
                raise ConfigurationError("this network requires a time embedding")
            x = x + self.time_proj(t_emb)
        fmap = FeatureMap(x, coords, offsets, self.grid)
        levels = [fmap]
        skips = []
        voxel = self.grid
        for i in range(self.num_stages):
            skips.append(x)
            voxel *= self.strides[i]
            pmap, c_pos, c_off = build_pooling_map(fmap.coords, fmap.offsets,
                                                   voxel, stride=self.strides[i])
            x = self.enc_proj[i](_pool_mean(x, pmap))
            fmap = FeatureMap(x, c_pos, c_off, voxel, trail=levels[-1].trail + [pmap])
            x = self.enc_stages[i](x, fmap)
            fmap.values = x
            levels.append(fmap)
        return fmap, skips, levels

    def decode(self, bottleneck: torch.Tensor, skips, levels) -> torch.Tensor:
        x = bottleneck
        for i in range(self.num_stages - 1, -1, -1):
            pmap = levels[i + 1].trail[-1]
            if len(x) != pmap.num_cells:
                raise ValueError(
                    f"unpooling trail mismatch: {len(x)} rows vs {pmap.num_cells} cells")
            x = self.dec_proj[i](x[torch.from_numpy(pmap.parent)])
            skip = skips[i] * self.skip_scale
            if self.skip_mode == "add":
                x = x + skip
            elif self.skip_mode == "multiply":
                x = x * skip
            else:
                x = self.dec_merge[i](torch.cat([x, skip], dim=1))
            x = self.dec_stages[i](x, levels[i])
        return self.head(x)

    def forward(self, feats, coords, offsets, t_emb=None):
        bott, skips, levels = self.encode(feats, coords, offsets, t_emb)
        return self.decode(bott.values, skips, levels)


# ---------------------------------------------------------------------------
# Feature fusion (cross-attention, noise branch -> conditional branch only)


class FusionBlock(nn.Module):
    def __init__(self, cn_channels: int, nn_channels: int, channels: int,
                 heads: int, mlp_ratio: int, feat_scale: float):
        super().__init__()
        self.heads = heads
        self.feat_scale = feat_scale
        self.q = nn.Linear(cn_channels, channels)
        self.k = nn.Linear(nn_channels, channels)
        self.v = nn.Linear(nn_channels, channels)
        # bias-free so a zeroed value projection removes all noise-branch influence
        self.mlp = nn.Linear(channels, cn_channels, bias=False)
        self.ffn = nn.Sequential(
            nn.Linear(cn_channels, cn_channels * mlp_ratio),
            nn.GELU(),
            nn.Linear(cn_channels * mlp_ratio, cn_channels),
        )

    def forward(self, f_cn: torch.Tensor, offs_cn: np.ndarray,
                f_nn: torch.Tensor, offs_nn: np.ndarray) -> torch.Tensor:
        if len(offs_cn) != len(offs_nn):
            raise ValueError("fusion inputs have different batch counts")
        h = self.heads
        d = self.q.out_features // h
        mixed = torch.empty(len(f_cn), self.q.out_features,
                            dtype=f_cn.dtype, device=f_cn.device)
        cs = ns = 0
        for ce, ne in zip(offs_cn, offs_nn):
            q = self.q(f_cn[cs:ce]).reshape(-1, h, d).transpose(0, 1)
            kv_in = self.feat_scale * f_nn[ns:ne]
            k = self.k(kv_in).reshape(-1, h, d).transpose(0, 1)
            v = self.v(kv_in).reshape(-1, h, d).transpose(0, 1)
            w = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
            _assert_row_stochastic(w)
            mixed[cs:ce] = (w @ v).transpose(0, 1).reshape(ce - cs, h * d)
            cs, ns = int(ce), int(ne)
        out = self.mlp(mixed) + f_cn
        return self.ffn(out) + out


class FeatureFusion(nn.Module):
    """Stack of cross-attention fusion blocks; output matches f_cn's width."""

    def __init__(self, cn_channels, nn_channels, channels, heads, depth,
                 mlp_ratio, feat_scale):
        super().__init__()
        self.blocks = nn.ModuleList(
            FusionBlock(cn_channels, nn_channels, channels, heads, mlp_ratio, feat_scale)
            for _ in range(depth))

    def forward(self, f_cn, offs_cn, f_nn, offs_nn):
        for blk in self.blocks:
            f_cn = blk(f_cn, offs_cn, f_nn, offs_nn)
        return f_cn


# ---------------------------------------------------------------------------
# Full model


class CDSegModel(nn.Module):
    """Noise branch + fusion + conditional branch.

    `counters` tracks encoder/decoder passes per branch for cost accounting.
    """

    def __init__(self, config: NetworkConfig, in_channels: int, num_classes: int):
        super().__init__()
        self.config = config
        self.in_channels = in_channels
        self.num_classes = num_classes
        signal = {"features": in_channels, "labels": num_classes, "positions": 3}[config.nn_input]
        # Non-feature signals (labels/positions) are diffused alongside the
        # clean condition features, which ride as extra input channels.
        nn_in = signal if config.nn_input == "features" else signal + in_channels
        self.nn_channels = signal
        self.noise_net = PointUNet(
            nn_in, signal,
            enc_depths=config.nn_enc_depths, enc_channels=config.nn_enc_channels,
            enc_heads=config.nn_enc_heads, dec_depths=config.nn_dec_depths,
            dec_channels=config.nn_dec_channels, strides=config.nn_strides,
            patch_size=config.patch_size, mlp_ratio=config.mlp_ratio,
            drop_path=config.drop_path, skip_mode=config.skip_mode_nn,
            skip_scale=config.skip_scale, grid=config.grid_size,
            time_dim=config.time_embed_dim)
        self.cond_net = PointUNet(
            in_channels, num_classes,
            enc_depths=config.cn_enc_depths, enc_channels=config.cn_enc_channels,
            enc_heads=config.cn_enc_heads, dec_depths=config.cn_dec_depths,
            dec_channels=config.cn_dec_channels, strides=config.cn_strides,
            patch_size=config.patch_size, mlp_ratio=config.mlp_ratio,
            drop_path=config.drop_path, skip_mode=config.skip_mode_cn,
            skip_scale=1.0, grid=config.grid_size)
        self.ffm = FeatureFusion(
            config.cn_enc_channels[-1], config.nn_enc_channels[-1],
            config.ffm_channels, config.ffm_heads, config.ffm_depth,
            config.mlp_ratio, config.ffm_feat_scale)
        self.double()
        self.reset_counters()

    def reset_counters(self):
        self.counters = {"nn_encoder": 0, "nn_decoder": 0,
                         "cn_encoder": 0, "cn_decoder": 0}

    def _dtype(self):
        return next(self.parameters()).dtype

    def _tensor(self, x) -> torch.Tensor:
        if isinstance(x, torch.Tensor):
            return x.to(self._dtype())
        return torch.as_tensor(np.asarray(x), dtype=self._dtype())

    def _t_embed(self, t, offsets: np.ndarray) -> torch.Tensor:
        emb = time_embed(t, self.config.time_embed_dim, dtype=self._dtype())
        sizes = np.diff(np.concatenate(([0], offsets)))
        if len(emb) == 1 and len(sizes) > 1:
            emb = emb.expand(len(sizes), -1)
        if len(emb) != len(sizes):
            raise ValueError(f"{len(emb)} timesteps for {len(sizes)} batch elements")
        return emb.repeat_interleave(torch.from_numpy(sizes), dim=0)

    def nn_encode(self, c_t, coords, offsets, t) -> FeatureMap:
        """Noise-branch encoder only; returns the bottleneck feature map."""
        self.counters["nn_encoder"] += 1
        bott, _, _ = self.noise_net.encode(
            self._tensor(c_t), coords, offsets, self._t_embed(t, offsets))
        return bott

    def nn_forward(self, c_t, coords, offsets, t):
        """Full noise branch; returns (noise prediction, bottleneck)."""
        self.counters["nn_encoder"] += 1
        self.counters["nn_decoder"] += 1
        bott, skips, levels = self.noise_net.encode(
            self._tensor(c_t), coords, offsets, self._t_embed(t, offsets))
        eps_pred = self.noise_net.decode(bott.values, skips, levels)
        return eps_pred, bott

    def cn_forward(self, feats, coords, offsets, nn_bottleneck: FeatureMap | None = None):
        """Conditional branch; fuses the noise bottleneck when provided."""
        self.counters["cn_encoder"] += 1
        self.counters["cn_decoder"] += 1
        bott, skips, levels = self.cond_net.encode(self._tensor(feats), coords, offsets)
        x = bott.values
        if nn_bottleneck is not None:
            x = self.ffm(x, bott.offsets, nn_bottleneck.values, nn_bottleneck.offsets)
        return self.cond_net.decode(x, skips, levels)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: CDSegModel, schedule=None, extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "in_channels": model.in_channels,
        "num_classes": model.num_classes,
        "schedule": schedule.to_dict() if schedule is not None else None,
        "state": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[CDSegModel, dict | None, dict]:
    payload = torch.load(path, weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version: {version}")
    cfg_dict = {k: tuple(v) if isinstance(v, list) else v for k, v in payload["config"].items()}
    config = NetworkConfig(**cfg_dict)
    model = CDSegModel(config, payload["in_channels"], payload["num_classes"])
    state = payload["state"]
    expected = model.state_dict()
    if set(state) != set(expected):
        missing = set(expected) - set(state)
        surplus = set(state) - set(expected)
        raise ConfigurationError(
            f"checkpoint parameters do not match config (missing {sorted(missing)}, "
            f"unexpected {sorted(surplus)})")
    for name, tensor in state.items():
        if tuple(tensor.shape) != tuple(expected[name].shape):
            raise ConfigurationError(
                f"checkpoint shape mismatch for {name}: "
                f"{tuple(tensor.shape)} vs {tuple(expected[name].shape)}")
    model.load_state_dict(state)
    return model, payload["schedule"], payload["extra"]
