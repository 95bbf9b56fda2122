"""Minimal DINOv2-compatible vision transformer for feature export.

Implements exactly the inference path needed here: patch embedding, class
token (plus optional register tokens), pre-norm blocks with LayerScale, a
final layer norm, and access to the last block's attention probabilities so
the classification query's attention over patches can be exported per head.

State-dict keys follow the published DINOv2 naming
(``patch_embed.proj.*``, ``blocks.N.attn.qkv.*``, ``blocks.N.ls1.gamma``,
``norm.*``, ...), so released checkpoints load directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

MODEL_SIZES = {
    "small": dict(embed_dim=384, depth=12, n_heads=6),
    "base": dict(embed_dim=768, depth=12, n_heads=12),
    "large": dict(embed_dim=1024, depth=24, n_heads=16),
}

PATCH_SIZE = 14


@dataclass(frozen=True)
class VitSpec:
    embed_dim: int
    depth: int
    n_heads: int
    n_registers: int = 0
    mlp_ratio: float = 4.0
    patch_size: int = PATCH_SIZE
    pretrain_grid: int = 37  # pos_embed stored for 518/14 = 37 per side

    @classmethod
    def for_size(cls, size: str, n_registers: int = 0) -> "VitSpec":
        if size not in MODEL_SIZES:
            raise ValueError(f"unknown model size {size!r}, expected {sorted(MODEL_SIZES)}")
        return cls(n_registers=n_registers, **MODEL_SIZES[size])


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim, bias=True)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)  # each [b, heads, n, hd]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        return (out, attn) if need_weights else (out, None)


class LayerScale(nn.Module):
    def __init__(self, dim: int, init: float = 1e-5):
        super().__init__()
        self.gamma = nn.Parameter(init * torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gamma


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, n_heads)
        self.ls1 = LayerScale(dim)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.ls2 = LayerScale(dim)

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        attn_out, weights = self.attn(self.norm1(x), need_weights)
        x = x + self.ls1(attn_out)
        x = x + self.ls2(self.mlp(self.norm2(x)))
        return x, weights


class VisionTransformer(nn.Module):
    def __init__(self, spec: VitSpec):
        super().__init__()
        self.spec = spec
        d = spec.embed_dim
        self.patch_embed_proj = nn.Conv2d(3, d, spec.patch_size, spec.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        n_pre = spec.pretrain_grid**2
        self.pos_embed = nn.Parameter(torch.zeros(1, n_pre + 1, d))
        if spec.n_registers:
            self.register_tokens = nn.Parameter(torch.zeros(1, spec.n_registers, d))
        self.blocks = nn.ModuleList(
            Block(d, spec.n_heads, spec.mlp_ratio) for _ in range(spec.depth)
        )
        self.norm = nn.LayerNorm(d, eps=1e-6)

    def _interpolated_pos_embed(self, grid_h: int, grid_w: int) -> torch.Tensor:
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:]
        g = self.spec.pretrain_grid
        if (grid_h, grid_w) == (g, g):
            return self.pos_embed
        d = patch_pos.shape[-1]
        patch_pos = patch_pos.reshape(1, g, g, d).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(
            patch_pos, size=(grid_h, grid_w), mode="bicubic", align_corners=False
        )
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid_h * grid_w, d)
        return torch.cat([cls_pos, patch_pos], dim=1)

    @torch.inference_mode()
    def extract(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run a batch [B, 3, H, W]; returns (spatial_tokens, cls_attention).

        ``spatial_tokens``: [B, N, D] after the final layer norm, class and
        register tokens dropped.  ``cls_attention``: [B, heads, N], the last
        block's softmaxed classification-query attention restricted to patch
        keys (not yet renormalized).
        """
        b, _, h, w = images.shape
        p = self.spec.patch_size
        if h % p or w % p:
            raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
        x = self.patch_embed_proj(images)  # [B, D, gh, gw]
        grid_h, grid_w = x.shape[2], x.shape[3]
        x = x.flatten(2).transpose(1, 2)  # [B, N, D]
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        x = x + self._interpolated_pos_embed(grid_h, grid_w)
        n_reg = self.spec.n_registers
        if n_reg:
            x = torch.cat(
                [x[:, :1], self.register_tokens.expand(b, -1, -1), x[:, 1:]], dim=1
            )
        weights = None
        for i, block in enumerate(self.blocks):
            x, w_i = block(x, need_weights=(i == len(self.blocks) - 1))
            if w_i is not None:
                weights = w_i
        x = self.norm(x)
        spatial = x[:, 1 + n_reg :]
        cls_attention = weights[:, :, 0, 1 + n_reg :]
        return spatial, cls_attention

    def seeded_random_init(self, seed: int) -> None:
        """Deterministic random weights for geometry tests without a checkpoint."""
        gen = torch.Generator().manual_seed(seed)
        for param in self.parameters():
            if param.ndim > 1:
                nn.init.trunc_normal_(param, std=0.02, generator=gen)
            else:
                nn.init.zeros_(param)
        with torch.no_grad():
            for block in self.blocks:
                block.ls1.gamma.fill_(1e-5)
                block.ls2.gamma.fill_(1e-5)
                block.norm1.weight.fill_(1.0)
                block.norm2.weight.fill_(1.0)
            self.norm.weight.fill_(1.0)
            nn.init.trunc_normal_(self.pos_embed, std=0.02, generator=gen)


_IGNORED_KEYS = {"mask_token"}


def _remap_key(key: str) -> str | None:
    if key.startswith("backbone."):
        key = key[len("backbone.") :]
    if key in _IGNORED_KEYS:
        return None
    if key.startswith("patch_embed.proj."):
        return "patch_embed_proj." + key[len("patch_embed.proj.") :]
    return key


def load_state_dict(model: VisionTransformer, state: dict) -> None:
    for wrapper in ("state_dict", "model", "teacher"):
        if wrapper in state and isinstance(state[wrapper], dict):
            state = state[wrapper]
    remapped = {}
    for key, value in state.items():
        new_key = _remap_key(key)
        if new_key is not None:
            remapped[new_key] = value
    missing, unexpected = model.load_state_dict(remapped, strict=False)
    real_missing = [k for k in missing if not k.startswith("register_tokens")]
    if real_missing:
        raise ValueError(f"checkpoint is missing parameters: {real_missing[:5]} ...")
    if unexpected:
        raise ValueError(f"checkpoint has unknown parameters: {unexpected[:5]} ...")


def detect_registers(state: dict) -> int:
    for wrapper in ("state_dict", "model", "teacher"):
        if wrapper in state and isinstance(state[wrapper], dict):
            state = state[wrapper]
    for key in ("register_tokens", "backbone.register_tokens"):
        if key in state:
            return int(state[key].shape[1])
    return 0


def build_model(
    size: str,
    checkpoint: str | None = None,
    n_registers: int | None = None,
    random_seed: int | None = None,
) -> VisionTransformer:
    """Construct the backbone, from a checkpoint or with seeded random weights.

    Exactly one of ``checkpoint`` / ``random_seed`` must be given.  Register
    count is auto-detected from the checkpoint unless forced.
    """
    if (checkpoint is None) == (random_seed is None):
        raise ValueError("provide either a checkpoint path or a random seed")
    state = None
    if checkpoint is not None:
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        if n_registers is None:
            n_registers = detect_registers(state)
    spec = VitSpec.for_size(size, n_registers=n_registers or 0)
    model = VisionTransformer(spec)
    if state is not None:
        load_state_dict(model, state)
    else:
        model.seeded_random_init(random_seed)
    model.eval()
    return model
