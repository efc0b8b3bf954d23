"""Small strided-conv image encoder producing multi-scale maps and a flattened token set."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .numerics import ACTIVATIONS, DimensionError


@dataclass
class ImageFeatures:
    levels: list[torch.Tensor]  # each (H_l, W_l, C_img)
    tokens: torch.Tensor  # (sum H_l W_l, C_img)
    pos: torch.Tensor  # (sum H_l W_l, C_img): sinusoidal encoding + level embedding
    ground_xy: torch.Tensor  # (sum H_l W_l, 2): token centres in normalized area coordinates


def level_shapes(h: int, w: int, n_levels: int) -> list[tuple[int, int]]:
    shapes = []
    for _ in range(n_levels):
        h, w = math.ceil(h / 2), math.ceil(w / 2)
        shapes.append((h, w))
    return shapes


def flatten_levels(levels: list[torch.Tensor]) -> torch.Tensor:
    """Concatenate (..., H, W, C) maps into (..., sum HW, C), row-major within each level."""
    return torch.cat([lv.reshape(*lv.shape[:-3], -1, lv.shape[-1]) for lv in levels], dim=-2)


def unflatten_levels(tokens: torch.Tensor, shapes: list[tuple[int, int]]) -> list[torch.Tensor]:
    out = []
    start = 0
    for h, w in shapes:
        chunk = tokens[..., start:start + h * w, :]
        out.append(chunk.reshape(*tokens.shape[:-2], h, w, tokens.shape[-1]))
        start += h * w
    if start != tokens.shape[-2]:
        raise DimensionError(f"token count {tokens.shape[-2]} does not match level shapes {shapes}")
    return out


def cell_centres(shapes: list[tuple[int, int]]) -> torch.Tensor:
    """(sum HW, 2) cell centres in [-1, 1]^2; rows map to the first coordinate, columns to the second."""
    out = []
    for h, w in shapes:
        r = 2 * (torch.arange(h, dtype=torch.float64) + 0.5) / h - 1
        c = 2 * (torch.arange(w, dtype=torch.float64) + 0.5) / w - 1
        out.append(torch.stack(torch.meshgrid(r, c, indexing="ij"), dim=-1).reshape(-1, 2))
    return torch.cat(out)


def sinusoidal_2d(h: int, w: int, dim: int, extent: float, temperature: float = 10000.0) -> torch.Tensor:
    """(h * w, dim) encoding of pixel-centre coordinates expressed on a common [0, extent) grid."""
    if dim % 4:
        raise DimensionError(f"2D sinusoidal encoding needs a width divisible by 4, got {dim}")
    rows = (torch.arange(h, dtype=torch.float64) + 0.5) * (extent / h)
    cols = (torch.arange(w, dtype=torch.float64) + 0.5) * (extent / w)
    quarter = dim // 4
    freq = temperature ** (-torch.arange(quarter, dtype=torch.float64) / quarter)
    r = rows[:, None] * freq
    c = cols[:, None] * freq
    enc_r = torch.cat([r.sin(), r.cos()], dim=-1)[:, None, :].expand(h, w, 2 * quarter)
    enc_c = torch.cat([c.sin(), c.cos()], dim=-1)[None, :, :].expand(h, w, 2 * quarter)
    return torch.cat([enc_r, enc_c], dim=-1).reshape(h * w, dim)


class ImageEncoder(nn.Module):
    """3x3 stride-2 convolutions; each stage output is one level.

    ``activation=None`` and ``bias=False`` give a purely linear stack (used by tests).
    """

    def __init__(self, c_img: int = 64, n_levels: int = 3, image_size: tuple[int, int] = (64, 64),
                 activation: str | None = "relu", bias: bool = True):
        super().__init__()
        self.c_img = c_img
        self.image_size = tuple(image_size)
        self.activation = activation
        chans = [1] + [c_img] * n_levels
        self.convs = nn.ModuleList(
            nn.Conv2d(a, b, kernel_size=3, stride=2, padding=1, bias=bias) for a, b in zip(chans[:-1], chans[1:])
        )
        self.shapes = level_shapes(*self.image_size, n_levels)
        self.level_embed = nn.Parameter(torch.zeros(n_levels, c_img))
        nn.init.normal_(self.level_embed, std=0.1)
        pe = [sinusoidal_2d(h, w, c_img, extent=float(self.image_size[0])) for h, w in self.shapes]
        self.register_buffer("sin_pos", torch.cat(pe), persistent=False)
        self.register_buffer("ground_xy", cell_centres(self.shapes), persistent=False)

    @property
    def n_tokens(self) -> int:
        return sum(h * w for h, w in self.shapes)

    def positional(self) -> torch.Tensor:
        lvl = torch.cat([self.level_embed[i].expand(h * w, -1) for i, (h, w) in enumerate(self.shapes)])
        return self.sin_pos.to(lvl.dtype) + lvl

    def encode_levels(self, images: torch.Tensor) -> list[torch.Tensor]:
        """(B, H, W) -> list of (B, H_l, W_l, C_img)."""
        if tuple(images.shape[-2:]) != self.image_size:
            raise DimensionError(f"image is {tuple(images.shape[-2:])}, encoder expects {self.image_size}")
        x = images.unsqueeze(1)
        act = ACTIVATIONS[self.activation] if self.activation else None
        levels = []
        for conv in self.convs:
            x = conv(x)
            if act is not None:
                x = act(x)
            levels.append(x.permute(0, 2, 3, 1))
        return levels

    def encode_batch(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, H, W) -> flat tokens (B, S, C_img) and shared positional codes (S, C_img)."""
        return flatten_levels(self.encode_levels(images)), self.positional()

    def forward(self, image: torch.Tensor) -> ImageFeatures:
        levels = self.encode_levels(image.unsqueeze(0))
        levels = [lv[0] for lv in levels]
        return ImageFeatures(levels, flatten_levels(levels), self.positional(), self.ground_xy.to(image.dtype))


def image_encode(image: torch.Tensor, params: ImageEncoder) -> ImageFeatures:
    return params(image)
