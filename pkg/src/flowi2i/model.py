"""Transformer velocity network with image-only conditioning.

Three inputs share one PatchEmbed projection: the noisy latent x_t, the
conditioning latent y, and the control latent. y tokens are consumed through
cross-attention in every block (the pathway text tokens would normally
occupy); control tokens run through duplicated copies of the first
`control_depth` blocks whose outputs are added back into the backbone through
zero-initialized projections, so an untrained control branch is exactly
inert.

Two conditioning-drop variants:
  * PRIMARY: dropping zeroes y only; the control pathway always stays active.
  * BIS: dropping zeroes y and disables the control branch jointly, which is
    what makes fully unconditional generation possible after training.

The ZERO sentinel for y is literally a zero latent pushed through the shared
patch embedding. ABSENT control means the branch is skipped (control=None for
a whole batch, or a per-sample 0/1 mask on the injections inside mixed
training batches, which is equivalent because the branch is feedforward and
per-sample).
"""

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import torch
from torch import nn

from .errors import ContractError, ParameterError, ShapeError


class Variant(str, Enum):
    PRIMARY = "primary"
    BIS = "bis"


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 1
    latent_size: int = 128
    patch_size: int = 16
    hidden_dim: int = 128
    depth: int = 4
    heads: int = 4
    control_depth: int = 2
    variant: Variant = Variant.PRIMARY
    p_drop: float = 0.1

    def __post_init__(self):
        if min(self.latent_channels, self.latent_size, self.patch_size, self.hidden_dim,
               self.depth, self.heads, self.control_depth) < 1:
            raise ParameterError("all model dimensions must be positive")
        if self.latent_size % self.patch_size != 0:
            raise ParameterError(
                f"latent_size {self.latent_size} not divisible by patch_size {self.patch_size}"
            )
        if self.hidden_dim % self.heads != 0:
            raise ParameterError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.hidden_dim % 4 != 0:
            raise ParameterError("hidden_dim must be divisible by 4 for the 2-D positions")
        if self.control_depth > self.depth:
            raise ParameterError(
                f"control_depth {self.control_depth} exceeds depth {self.depth}"
            )
        if not (0.0 <= self.p_drop <= 1.0):
            raise ParameterError(f"p_drop must lie in [0, 1], got {self.p_drop}")

    @property
    def grid_side(self):
        return self.latent_size // self.patch_size

    @property
    def tokens(self):
        return self.grid_side**2


@dataclass
class ConditioningBundle:
    """Batched conditioning state for one forward pass.

    y rows that were dropped hold zeros (the ZERO sentinel). control=None is
    the ABSENT sentinel for the whole batch; control_active, when set, is a
    (B,) 0/1 float mask marking rows whose control injection is live.
    """

    y: torch.Tensor
    control: torch.Tensor | None
    control_active: torch.Tensor | None = None

    def __post_init__(self):
        if self.control is not None and tuple(self.control.shape) != tuple(self.y.shape):
            raise ShapeError(
                f"control shape {tuple(self.control.shape)} != y shape {tuple(self.y.shape)}"
            )
        if self.control_active is not None and self.control_active.shape[0] != self.y.shape[0]:
            raise ShapeError("control_active length must match the batch size")

    @classmethod
    def conditional(cls, latent):
        """Both roles filled by the same encoded source latent (y == control)."""
        return cls(y=latent, control=latent)

    @classmethod
    def unconditional(cls, latent, variant):
        """The CFG unconditional branch for a given variant.

        PRIMARY keeps the control features active (y=ZERO only); BIS disables
        control entirely.
        """
        if variant == Variant.PRIMARY:
            if latent is None:
                raise ContractError("PRIMARY unconditional branch still requires a control latent")
            return cls(y=torch.zeros_like(latent), control=latent)
        return cls(y=torch.zeros_like(latent), control=None)

    def control_absent(self):
        if self.control is None:
            return True
        if self.control_active is not None:
            return bool((self.control_active == 0).all())
        return False


def apply_condition_drop(bundle, p_drop, variant, rng):
    """Per-sample CFG conditioning drop.

    Draws one Bernoulli(p_drop) per sample. On drop, PRIMARY zeroes y and
    leaves control untouched; BIS zeroes y and marks the sample's control
    injection inactive.
    """
    if not (0.0 <= p_drop <= 1.0):
        raise ParameterError(f"p_drop must lie in [0, 1], got {p_drop}")
    if variant == Variant.PRIMARY and bundle.control is None:
        raise ContractError("PRIMARY requires an active control latent")
    batch = bundle.y.shape[0]
    drops = rng.random(batch) < p_drop
    if not drops.any():
        return bundle
    mask = torch.from_numpy(drops)
    y = bundle.y.clone()
    y[mask] = 0.0
    if variant == Variant.PRIMARY:
        return replace(bundle, y=y)
    if bundle.control_active is not None:
        active = bundle.control_active.clone()
    else:
        active = torch.ones(batch, dtype=bundle.y.dtype, device=bundle.y.device)
    active[mask] = 0.0
    return ConditioningBundle(y=y, control=bundle.control, control_active=active)


def sincos_positions_2d(grid_side, dim):
    """Fixed (non-learned) 2-D sinusoidal position table, shape (grid^2, dim)."""

    def axis_embed(pos, d):
        omega = np.arange(d // 2, dtype=np.float64) / (d / 2)
        omega = 1.0 / 10000.0**omega
        angles = np.outer(pos, omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    coords = np.arange(grid_side, dtype=np.float64)
    emb_y = axis_embed(np.repeat(coords, grid_side), dim // 2)
    emb_x = axis_embed(np.tile(coords, grid_side), dim // 2)
    return np.concatenate([emb_y, emb_x], axis=1)


class TimeEmbed(nn.Module):
    """Sinusoidal encoding of t followed by a two-layer nonlinear map."""

    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        half = self.dim // 2
        device, dtype = t.device, t.dtype
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, device=device, dtype=dtype) / half
        )
        angles = t[:, None] * 1000.0 * freqs[None, :]
        enc = torch.cat([torch.cos(angles), torch.sin(angles)], dim=-1)
        return self.mlp(enc)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        b, n, d = x.shape
        m = context.shape[1]
        q = self.to_q(x).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(context).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(context).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-LN transformer block: self-attention, cross-attention to y, MLP."""

    def __init__(self, dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.cross = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.SiLU(), nn.Linear(4 * dim, dim))

    def forward(self, x, y):
        x = x + self.attn(self.norm1(x))
        x = x + self.cross(self.norm_q(x), context=self.norm_kv(y))
        x = x + self.mlp(self.norm2(x))
        return x


class VelocityModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, p, d = config.latent_channels, config.patch_size, config.hidden_dim
        self.patch = nn.Conv2d(c, d, kernel_size=p, stride=p)  # shared by x, y, control
        self.time = TimeEmbed(d)
        pos = sincos_positions_2d(config.grid_side, d)
        self.register_buffer(
            "pos", torch.from_numpy(pos).to(torch.float32).unsqueeze(0), persistent=False
        )
        self.blocks = nn.ModuleList(Block(d, config.heads) for _ in range(config.depth))
        self.control_blocks = nn.ModuleList(
            Block(d, config.heads) for _ in range(config.control_depth)
        )
        self.control_proj = nn.ModuleList(
            nn.Linear(d, d) for _ in range(config.control_depth)
        )
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, c * p * p)

    def patch_tokens(self, grid):
        """Shared patch projection: (B, C, S, S) -> (B, N, hidden_dim), no positions."""
        expected = (self.config.latent_channels, self.config.latent_size, self.config.latent_size)
        if tuple(grid.shape[1:]) != expected:
            raise ShapeError(f"grid shape {tuple(grid.shape[1:])} != configured {expected}")
        return self.patch(grid).flatten(2).transpose(1, 2)

    def _unpatchify(self, tokens):
        cfg = self.config
        b = tokens.shape[0]
        g, p, c = cfg.grid_side, cfg.patch_size, cfg.latent_channels
        x = tokens.view(b, g, g, c, p, p)
        x = x.permute(0, 3, 1, 4, 2, 5)
        return x.reshape(b, c, cfg.latent_size, cfg.latent_size)

    def forward(self, x_t, t, bundle):
        if self.config.variant == Variant.PRIMARY and bundle.control is None:
            raise ContractError("PRIMARY forward requires an active control latent")
        if tuple(bundle.y.shape) != tuple(x_t.shape):
            raise ShapeError(f"y shape {tuple(bundle.y.shape)} != x_t shape {tuple(x_t.shape)}")
        if not torch.is_tensor(t):
            t = torch.full((x_t.shape[0],), float(t), dtype=x_t.dtype, device=x_t.device)

        pos = self.pos.to(x_t.dtype)
        x = self.patch_tokens(x_t) + pos + self.time(t)[:, None, :]
        y = self.patch_tokens(bundle.y) + pos

        injections = []
        if bundle.control is not None:
            ctrl = x + self.patch_tokens(bundle.control)
            mask = bundle.control_active
            for blk, proj in zip(self.control_blocks, self.control_proj):
                ctrl = blk(ctrl, y)
                inj = proj(ctrl)
                if mask is not None:
                    inj = inj * mask.to(inj.dtype).view(-1, 1, 1)
                injections.append(inj)

        h = x
        for i, blk in enumerate(self.blocks):
            h = blk(h, y)
            if i < len(injections):
                h = h + injections[i]
        return self._unpatchify(self.head(self.final_norm(h)))

    def init_parameters(self, generator):
        """Deterministically (re)initialize every parameter from `generator`.

        Xavier-uniform for linear/conv weights, zero biases, unit LayerNorm;
        the control injection projections and the output head start at exact
        zero so the network is inert where it must be.
        """
        touched = set()
        for mod in self.modules():
            if isinstance(mod, (nn.Linear, nn.Conv2d)):
                w = mod.weight
                if isinstance(mod, nn.Conv2d):
                    rf = mod.kernel_size[0] * mod.kernel_size[1]
                    fan_in, fan_out = mod.in_channels * rf, mod.out_channels * rf
                else:
                    fan_out, fan_in = w.shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                w.data.uniform_(-bound, bound, generator=generator)
                touched.add(id(w))
                if mod.bias is not None:
                    mod.bias.data.zero_()
                    touched.add(id(mod.bias))
            elif isinstance(mod, nn.LayerNorm):
                mod.weight.data.fill_(1.0)
                mod.bias.data.zero_()
                touched.update((id(mod.weight), id(mod.bias)))
        for proj in self.control_proj:
            proj.weight.data.zero_()
            proj.bias.data.zero_()
        self.head.weight.data.zero_()
        self.head.bias.data.zero_()
        missed = [n for n, p in self.named_parameters() if id(p) not in touched]
        if missed:
            raise RuntimeError(f"init_parameters missed {missed}")
        return self


def build_model(config, seed):
    """Construct a VelocityModel with fully seeded parameters."""
    model = VelocityModel(config)
    model.init_parameters(torch.Generator().manual_seed(seed))
    return model
