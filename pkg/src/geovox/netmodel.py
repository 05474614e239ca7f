"""Attention-gated 3D U-Net used as velocity field and noise predictor."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import ParameterSet, Tensor


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 16
    gn_groups: int = 8
    f_int: int | None = None  # None -> F_l // 2, at least 4
    state_channels: int = 9
    cond_channels: int = 10
    out_channels: int = 9
    time_embed_dim: int = 32
    time_scale: float = 1000.0  # t in [0,1] is multiplied by this before the sinusoid ladder
    attention: bool = True

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1 or self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError(f"invalid U-Net configuration: {self}")
        if self.f_int is not None and self.f_int < 1:
            raise ConfigError("f_int must be >= 1")

    @property
    def in_channels(self) -> int:
        return self.state_channels + self.cond_channels

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def gate_channels(self, level: int) -> int:
        if self.f_int is not None:
            return self.f_int
        return max(4, self.channels(level) // 2)

    def groups(self, c: int) -> int:
        return math.gcd(c, self.gn_groups)

    def to_dict(self) -> dict:
        return asdict(self)


class _Builder:
    """Creates named parameters with deterministic initialisation."""

    def __init__(self, params: ParameterSet, rng: np.random.Generator, dtype):
        self.params = params
        self.rng = rng
        self.dtype = dtype

    def conv(self, name, cin, cout, k):
        std = math.sqrt(2.0 / (cin * k**3))
        w = self.params.add(f"{name}.weight", Tensor((self.rng.standard_normal((cout, cin, k, k, k)) * std).astype(self.dtype)))
        b = self.params.add(f"{name}.bias", Tensor(np.zeros(cout, self.dtype)))
        return w, b

    def norm(self, name, c):
        g = self.params.add(f"{name}.gamma", Tensor(np.ones(c, self.dtype)))
        b = self.params.add(f"{name}.beta", Tensor(np.zeros(c, self.dtype)))
        return g, b

    def linear(self, name, cin, cout):
        std = math.sqrt(2.0 / cin)
        w = self.params.add(f"{name}.weight", Tensor((self.rng.standard_normal((cout, cin)) * std).astype(self.dtype)))
        b = self.params.add(f"{name}.bias", Tensor(np.zeros(cout, self.dtype)))
        return w, b


@dataclass
class AttentionGateParams:
    wx: Tensor
    bx: Tensor
    wg: Tensor
    bg: Tensor
    wpsi: Tensor
    bpsi: Tensor
    gn_x: tuple[Tensor, Tensor]
    gn_g: tuple[Tensor, Tensor]
    gn_psi: tuple[Tensor, Tensor]
    groups: int

    @classmethod
    def build(cls, b: _Builder, name: str, f_l: int, f_g: int, f_int: int, groups: int) -> "AttentionGateParams":
        wx, bx = b.conv(f"{name}.w_x", f_l, f_int, 1)
        wg, bg = b.conv(f"{name}.w_g", f_g, f_int, 1)
        wpsi, bpsi = b.conv(f"{name}.w_psi", f_int, 1, 1)
        return cls(wx, bx, wg, bg, wpsi, bpsi, b.norm(f"{name}.gn_x", f_int), b.norm(f"{name}.gn_g", f_int),
                   b.norm(f"{name}.gn_psi", 1), groups)


def attention_gate(x_l: Tensor, g: Tensor, p: AttentionGateParams) -> tuple[Tensor, Tensor]:
    """Return (x_l * alpha, alpha) with alpha in (0, 1) of shape [B,1,D,H,W].

    A gating signal at half resolution is nearest-upsampled first.
    """
    if g.shape[2:] != x_l.shape[2:]:
        if tuple(2 * s for s in g.shape[2:]) == x_l.shape[2:]:
            g = T.upsample_nearest2(g)
        else:
            raise ShapeError(f"gating signal {g.shape} cannot be aligned with {x_l.shape}")
    qx = T.group_norm(T.conv3d(x_l, p.wx, p.bx), p.groups, *p.gn_x)
    qg = T.group_norm(T.conv3d(g, p.wg, p.bg), p.groups, *p.gn_g)
    q = T.relu(T.add(qx, qg))
    alpha = T.sigmoid(T.group_norm(T.conv3d(q, p.wpsi, p.bpsi), 1, *p.gn_psi))
    return T.hadamard(x_l, alpha), alpha


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float32, scale: float = 1000.0) -> np.ndarray:
    """Sinusoidal features of t in [0, 1] on a geometric frequency ladder."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = scale * t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class _Block:
    """conv3 -> GN -> (+time bias) -> ReLU -> conv3 -> GN -> ReLU."""

    def __init__(self, b: _Builder, name: str, cin: int, cout: int, groups: int, hidden: int):
        self.w1, self.b1 = b.conv(f"{name}.conv1", cin, cout, 3)
        self.n1 = b.norm(f"{name}.gn1", cout)
        self.w2, self.b2 = b.conv(f"{name}.conv2", cout, cout, 3)
        self.n2 = b.norm(f"{name}.gn2", cout)
        self.tw, self.tb = b.linear(f"{name}.time", hidden, cout)
        self.groups = groups

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = T.group_norm(T.conv3d(x, self.w1, self.b1, padding=1), self.groups, *self.n1)
        h = T.relu(T.add_channel_bias(h, T.linear(temb, self.tw, self.tb)))
        h = T.group_norm(T.conv3d(h, self.w2, self.b2, padding=1), self.groups, *self.n2)
        return T.relu(h)


class UNet:
    """v(x_t, t, c): encoder/decoder with (optionally gated) skip connections."""

    def __init__(self, config: UNetConfig = UNetConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = ParameterSet()
        b = _Builder(self.params, np.random.default_rng(seed), self.dtype)
        cfg = config
        hidden = 2 * cfg.time_embed_dim
        self.t1 = b.linear("time.mlp1", cfg.time_embed_dim, hidden)
        self.enc = []
        self.down = []
        cin = cfg.in_channels
        for lvl in range(cfg.levels):
            c = cfg.channels(lvl)
            self.enc.append(_Block(b, f"enc{lvl}", cin, c, cfg.groups(c), hidden))
            if lvl < cfg.levels - 1:
                self.down.append(b.conv(f"down{lvl}", c, c, 3))
            cin = c
        self.gates: dict[int, AttentionGateParams] = {}
        self.dec: dict[int, _Block] = {}
        for lvl in reversed(range(cfg.levels - 1)):
            c, cg = cfg.channels(lvl), cfg.channels(lvl + 1)
            if cfg.attention:
                fi = cfg.gate_channels(lvl)
                self.gates[lvl] = AttentionGateParams.build(b, f"gate{lvl}", c, cg, fi, cfg.groups(fi))
            self.dec[lvl] = _Block(b, f"dec{lvl}", c + cg, c, cfg.groups(c), hidden)
        self.head = b.conv("head", cfg.channels(0), cfg.out_channels, 1)
        self.last_alphas: dict[int, np.ndarray] = {}

    def check_input(self, shape) -> None:
        cfg = self.config
        if len(shape) != 5:
            raise ShapeError(f"expected [B,C,D,H,W], got {shape}")
        f = 2 ** (cfg.levels - 1)
        if any(s % f for s in shape[2:]):
            raise ConfigError(f"spatial extent {shape[2:]} not divisible by {f}")

    def forward(self, x_t, t, c) -> Tensor:
        cfg = self.config
        x_t = T.as_tensor(x_t, self.dtype)
        c = T.as_tensor(c, self.dtype)
        self.check_input(x_t.shape)
        if x_t.shape[1] != cfg.state_channels or c.shape[1] != cfg.cond_channels:
            raise ShapeError(f"channels: state {x_t.shape[1]} / cond {c.shape[1]}, "
                             f"expected {cfg.state_channels} / {cfg.cond_channels}")
        if c.shape[0] != x_t.shape[0] or c.shape[2:] != x_t.shape[2:]:
            raise ShapeError(f"condition {c.shape} does not match state {x_t.shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x_t.shape[0],))
        if not np.all(np.isfinite(t)):
            raise ShapeError("time values must be finite")
        emb = Tensor(timestep_embedding(t, cfg.time_embed_dim, self.dtype, cfg.time_scale))
        temb = T.relu(T.linear(emb, *self.t1))
        h = T.concat_channels(x_t, c)
        skips = []
        for lvl, block in enumerate(self.enc):
            h = block(h, temb)
            if lvl < cfg.levels - 1:
                skips.append(h)
                h = T.downsample_stride2(h, *self.down[lvl])
        self.last_alphas = {}
        for lvl in reversed(range(cfg.levels - 1)):
            up = T.upsample_nearest2(h)
            skip = skips[lvl]
            if cfg.attention:
                skip, alpha = attention_gate(skip, up, self.gates[lvl])
                self.last_alphas[lvl] = alpha.data
            h = self.dec[lvl](T.concat_channels(skip, up), temb)
        return T.conv3d(h, *self.head)

    __call__ = forward

    def predict(self, x_t, t, c) -> np.ndarray:
        with T.no_grad():
            return self.forward(x_t, t, c).data
