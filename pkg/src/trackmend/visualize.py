"""Inspection images: per-tracklet region-score strips and completion grids."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .data import OcclusionRecord, Region, RegionMask, VideoDataset, apply_region_mask
from .occlusion import RegionScoreTable


def score_strip(table: RegionScoreTable, cell: int = 10) -> Image.Image:
    """3 region rows x T frame columns; red = low score, green = high."""
    unit = (np.clip(table.scores.T, -1.0, 1.0) + 1.0) / 2.0  # (3, T)
    rgb = np.zeros((*unit.shape, 3), dtype=np.uint8)
    rgb[..., 0] = np.round((1.0 - unit) * 255)
    rgb[..., 1] = np.round(unit * 255)
    img = Image.fromarray(rgb, "RGB")
    return img.resize((unit.shape[1] * cell, unit.shape[0] * cell), Image.NEAREST)


def save_score_strips(
    tables: Mapping[int, RegionScoreTable], out_dir: Path, limit: int | None = None
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for tid in sorted(tables)[: limit if limit else None]:
        path = out_dir / f"scores_{tid:04d}.png"
        score_strip(tables[tid]).save(path)
        paths.append(path)
    return paths


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)


def image_grid(rows: Sequence[Sequence[np.ndarray]], pad: int = 2) -> Image.Image:
    """Grid of equally sized (3, H, W) unit-range images, row-major."""
    h, w = rows[0][0].shape[1:]
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    canvas = np.full((n_rows * (h + pad) + pad, n_cols * (w + pad) + pad, 3), 32, dtype=np.uint8)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y = pad + i * (h + pad)
            x = pad + j * (w + pad)
            canvas[y : y + h, x : x + w] = _to_uint8(img)
    return Image.fromarray(canvas, "RGB")


def save_completion_grids(
    dataset: VideoDataset,
    records: Sequence[OcclusionRecord],
    out_dir: Path,
    completed: VideoDataset | None = None,
    limit: int = 8,
) -> list[Path]:
    """Original / masked / completed rows for flagged frames, one grid per tracklet."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_track: dict[int, list[OcclusionRecord]] = {}
    for r in records:
        by_track.setdefault(r.tracklet_id, []).append(r)

    paths = []
    for tid in sorted(by_track)[:limit]:
        track = dataset.tracks[tid]
        originals, masked, rebuilt = [], [], []
        for record in sorted(by_track[tid], key=lambda r: r.frame_index)[:8]:
            frame = track.frames[record.frame_index]
            mask = RegionMask.banded(Region(record.region), frame.height, frame.width)
            originals.append(frame.pixels)
            masked.append(apply_region_mask(frame, mask).pixels)
            if completed is not None:
                rebuilt.append(completed.tracks[tid].frames[record.frame_index].pixels)
        rows = [originals, masked] + ([rebuilt] if rebuilt else [])
        path = out_dir / f"completion_{tid:04d}.png"
        image_grid(rows).save(path)
        paths.append(path)
    return paths
