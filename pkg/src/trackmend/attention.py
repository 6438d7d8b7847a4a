"""Patch-based temporal attention between a frame feature map and an adjacent one.

The layer matches every 3x3 feature patch of the current frame against all
patches of the adjacent frame by cosine similarity, softmax-normalizes the
similarities, aggregates the adjacent patches with the resulting weights, and
folds the aggregated patches back to a feature map (averaging overlaps by
coverage count). It is parameter-free and differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

PATCH_SIZE = 3
NORM_EPS = 1e-8


@dataclass
class PatchGrid:
    """Flattened 3x3 patches, one per spatial location of the source map."""

    patches: torch.Tensor  # (H*W, C*9)
    height: int
    width: int


def _unfold(fmap: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, H*W, C*9) stride-1 zero-padded patches."""
    cols = F.unfold(fmap, kernel_size=PATCH_SIZE, padding=PATCH_SIZE // 2)
    return cols.transpose(1, 2)


def _fold_mean(patches: torch.Tensor, channels: int, height: int, width: int) -> torch.Tensor:
    """(B, H*W, C*9) -> (B, C, H, W), dividing each pixel by its patch coverage."""
    cols = patches.transpose(1, 2)
    summed = F.fold(cols, output_size=(height, width), kernel_size=PATCH_SIZE, padding=PATCH_SIZE // 2)
    ones = torch.ones(
        (1, PATCH_SIZE * PATCH_SIZE, height * width), dtype=patches.dtype, device=patches.device
    )
    coverage = F.fold(ones, output_size=(height, width), kernel_size=PATCH_SIZE, padding=PATCH_SIZE // 2)
    return summed / coverage


def safe_normalize(x: torch.Tensor, dim: int = -1, eps: float = NORM_EPS) -> torch.Tensor:
    """L2-normalize along ``dim``; vectors with norm below ``eps`` map to zero."""
    norm = x.norm(dim=dim, keepdim=True)
    return x * (norm >= eps) / norm.clamp_min(eps)


def extract_patches(fmap: torch.Tensor) -> PatchGrid:
    """Extract one flattened zero-padded 3x3 patch per spatial location.

    ``fmap`` has shape (C, H, W); entries are ordered channel-major, kernel
    positions row-major within each channel.
    """
    if fmap.dim() != 3:
        raise ValueError(f"expected a (C, H, W) feature map, got shape {tuple(fmap.shape)}")
    _, h, w = fmap.shape
    patches = _unfold(fmap.unsqueeze(0)).squeeze(0)
    return PatchGrid(patches=patches, height=h, width=w)


def patch_similarity(f: torch.Tensor, r: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two flattened patches; 0 if either is (near-)zero."""
    return (safe_normalize(f.reshape(-1), dim=0) * safe_normalize(r.reshape(-1), dim=0)).sum()

def attention_weights(similarities: torch.Tensor) -> torch.Tensor:
    """Softmax over the last dimension, stabilized by max subtraction."""
    shifted = similarities - similarities.max(dim=-1, keepdim=True).values
    exp = shifted.exp()
    return exp / exp.sum(dim=-1, keepdim=True)


def attend(weights: torch.Tensor, adjacent_patches: torch.Tensor) -> torch.Tensor:
    """Weighted sum of adjacent patches: (..., N) x (N, D) -> (..., D)."""
    if weights.shape[-1] != adjacent_patches.shape[-2]:
        raise ValueError(
            f"weight count {weights.shape[-1]} does not match patch count {adjacent_patches.shape[-2]}"
        )
    return torch.matmul(weights, adjacent_patches)


def temporal_attention(
    current: torch.Tensor, adjacent: torch.Tensor, return_weights: bool = False
):
    """Cosine patch attention of ``current`` over ``adjacent``, folded back to a map.

    Accepts (C, H, W) or (B, C, H, W); the output has the input's shape. With
    ``return_weights`` the (B, H*W, H*W) weight tensor is returned as well.
    """
    if current.shape != adjacent.shape:
        raise ValueError(f"shape mismatch: {tuple(current.shape)} vs {tuple(adjacent.shape)}")
    squeeze = current.dim() == 3
    if squeeze:
        current = current.unsqueeze(0)
        adjacent = adjacent.unsqueeze(0)
    _, channels, height, width = current.shape

    query = _unfold(current)
    reference = _unfold(adjacent)
    sims = torch.matmul(safe_normalize(query), safe_normalize(reference).transpose(1, 2))
    weights = attention_weights(sims)
    out = _fold_mean(torch.matmul(weights, reference), channels, height, width)

    if squeeze:
        out = out.squeeze(0)
        weights = weights.squeeze(0)
    return (out, weights) if return_weights else out


class TemporalAttention(nn.Module):
    """Module wrapper around :func:`temporal_attention` (no parameters)."""

    def forward(self, current: torch.Tensor, adjacent: torch.Tensor) -> torch.Tensor:
        return temporal_attention(current, adjacent)
