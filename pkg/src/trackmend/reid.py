"""Video re-ID model and retrieval metrics.

The model extracts per-frame convolutional features, optionally mixes
information across time with residual spacetime self-attention blocks, pools
frame features by temporal averaging, and classifies identities with a linear
head. Retrieval ranks gallery tracklets by Euclidean distance between pooled
embeddings; quality is reported as CMC and mAP under the standard
cross-camera protocol.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Track

PROFILE_TINY = "tiny"
PROFILE_PAPER = "paper"

_TINY_CHANNELS = (16, 32, 64, 64)
_TINY_STRIDES = (2, 2, 2, 1)
# spacetime attention goes after these block indices when enabled
_TINY_NONLOCAL_AFTER = (2, 3)


class NonLocalBlock(nn.Module):
    """Residual spacetime self-attention over all (t, h, w) positions.

    Embedded-Gaussian similarity with channel reduction 2; the output
    projection is zero-initialized, so a fresh block is an exact identity.
    """

    def __init__(self, channels: int, reduction: int = 2):
        super().__init__()
        inner = max(1, channels // reduction)
        self.query = nn.Conv3d(channels, inner, kernel_size=1)
        self.key = nn.Conv3d(channels, inner, kernel_size=1)
        self.value = nn.Conv3d(channels, inner, kernel_size=1)
        self.out = nn.Conv3d(inner, channels, kernel_size=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.inner = inner

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        b, c, t, h, w = x.shape
        q = self.query(x).reshape(b, self.inner, -1)
        k = self.key(x).reshape(b, self.inner, -1)
        v = self.value(x).reshape(b, self.inner, -1)
        weights = torch.softmax(torch.bmm(q.transpose(1, 2), k), dim=-1)
        mixed = torch.bmm(weights, v.transpose(1, 2)).transpose(1, 2)
        out = x + self.out(mixed.reshape(b, self.inner, t, h, w))
        return (out, weights) if return_weights else out


def _tiny_block(in_channels: int, out_channels: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


def _build_tiny(use_nonlocal: bool) -> tuple[nn.ModuleList, int]:
    modules: list[nn.Module] = []
    prev = 3
    for i, (out, stride) in enumerate(zip(_TINY_CHANNELS, _TINY_STRIDES)):
        modules.append(_tiny_block(prev, out, stride))
        prev = out
        if use_nonlocal and i in _TINY_NONLOCAL_AFTER:
            modules.append(NonLocalBlock(prev))
    return nn.ModuleList(modules), prev


def _build_paper(use_nonlocal: bool) -> tuple[nn.ModuleList, int]:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    # keep the final stage at stride 1 for finer retrieval features
    net.layer4[0].conv2.stride = (1, 1)
    net.layer4[0].downsample[0].stride = (1, 1)

    modules: list[nn.Module] = [nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)]
    modules.extend(net.layer1)

    def extend_stage(stage: nn.Sequential, nonlocal_after: tuple[int, ...], channels: int) -> None:
        for i, block in enumerate(stage):
            modules.append(block)
            if use_nonlocal and i in nonlocal_after:
                modules.append(NonLocalBlock(channels))

    # two blocks in the third stage and three in the fourth, every other block
    extend_stage(net.layer2, (0, 2), 512)
    extend_stage(net.layer3, (0, 2, 4), 1024)
    modules.extend(net.layer4)
    return nn.ModuleList(modules), 2048


class ReidModel(nn.Module):
    """Per-frame backbone + optional non-local blocks + temporal mean + classifier."""

    def __init__(self, num_classes: int, profile: str = PROFILE_TINY, use_nonlocal: bool = False):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if profile == PROFILE_TINY:
            self.blocks, self.feature_dim = _build_tiny(use_nonlocal)
        elif profile == PROFILE_PAPER:
            self.blocks, self.feature_dim = _build_paper(use_nonlocal)
        else:
            raise ValueError(f"unknown profile {profile!r}")
        self.profile = profile
        self.use_nonlocal = use_nonlocal
        self.num_classes = num_classes
        self.classifier = nn.Linear(self.feature_dim, num_classes)

    def feature_maps(self, clips: torch.Tensor) -> torch.Tensor:
        """(B, T, 3, H, W) -> (B, T, C, h, w); non-local blocks mix across T."""
        if clips.dim() != 5:
            raise ValueError(f"expected (B, T, C, H, W) clips, got shape {tuple(clips.shape)}")
        b, t = clips.shape[:2]
        x = clips.reshape(b * t, *clips.shape[2:])
        for module in self.blocks:
            if isinstance(module, NonLocalBlock):
                c, h, w = x.shape[1:]
                x = x.reshape(b, t, c, h, w).permute(0, 2, 1, 3, 4)
                x = module(x)
                x = x.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
            else:
                x = module(x)
        c, h, w = x.shape[1:]
        return x.reshape(b, t, c, h, w)

    def frame_features(self, clips: torch.Tensor) -> torch.Tensor:
        """(B, T, 3, H, W) -> (B, T, D) by global average pooling each frame."""
        return self.feature_maps(clips).mean(dim=(-2, -1))

    def forward(self, clips: torch.Tensor) -> torch.Tensor:
        """Identity logits from temporally averaged frame features."""
        return self.classifier(self.frame_features(clips).mean(dim=1))

    def classify_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """Per-frame identity distribution (softmax over classes); sums to 1."""
        logits = self(frames.unsqueeze(1))
        return torch.softmax(logits, dim=-1)


def track_to_tensor(track: Track) -> torch.Tensor:
    """(T, 3, H, W) float32 tensor in [0, 1] from a decoded track."""
    return torch.from_numpy(np.stack([f.pixels for f in track.frames]))


@dataclass(frozen=True)
class VideoEmbedding:
    vector: np.ndarray
    identity: int
    camera: int
    tracklet_id: int


def video_embedding(
    track: Track, model: ReidModel, tracklet_id: int = -1, frame_indices: Sequence[int] | None = None
) -> VideoEmbedding:
    """Temporal mean of per-frame features, in evaluation mode.

    ``frame_indices`` restricts pooling to a subset of frames (used when
    score-flagged frames are discarded); by default all frames are pooled.
    """
    if track.length == 0:
        raise ValueError("cannot embed an empty track")
    clips = track_to_tensor(track)
    if frame_indices is not None:
        if len(frame_indices) == 0:
            raise ValueError("frame_indices must not be empty")
        clips = clips[list(frame_indices)]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        features = model.frame_features(clips.unsqueeze(0))[0]
    if was_training:
        model.train()
    return VideoEmbedding(
        vector=features.mean(dim=0).numpy().astype(np.float64),
        identity=track.identity,
        camera=track.camera,
        tracklet_id=tracklet_id,
    )


class ReidFeatureExtractor:
    """Adapter exposing a trained model's final spatial feature map per frame.

    Used by the occlusion scorer: region vectors are band-pooled from this map.
    """

    def __init__(self, model: ReidModel):
        self.model = model.eval()

    def feature_map(self, frame) -> np.ndarray:
        clips = torch.from_numpy(frame.pixels).unsqueeze(0).unsqueeze(0)
        with torch.no_grad():
            fmap = self.model.feature_maps(clips)[0, 0]
        return fmap.numpy()


# ---------------------------------------------------------------------------
# retrieval + metrics
# ---------------------------------------------------------------------------

@dataclass
class RankingResult:
    """Pairwise distances and stable ascending gallery rankings."""

    distances: np.ndarray  # (Q, G)
    order: np.ndarray  # (Q, G) gallery indices, best first
    cmc: np.ndarray | None = None
    mean_ap: float | None = None
    excluded_queries: int | None = None


class CmcResult(NamedTuple):
    cmc: np.ndarray
    mean_ap: float
    excluded_queries: int


def _as_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        return np.asarray(embeddings, dtype=np.float64)
    return np.stack([e.vector for e in embeddings]).astype(np.float64)


def retrieve(queries, gallery) -> RankingResult:
    """Euclidean retrieval with a stable ascending sort (ties keep gallery order)."""
    q = _as_matrix(queries)
    g = _as_matrix(gallery)
    if g.shape[0] == 0:
        raise ValueError("gallery must be nonempty")
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"embedding dimensions differ: {q.shape[1]} vs {g.shape[1]}")
    diff = q[:, None, :] - g[None, :, :]
    distances = np.sqrt((diff * diff).sum(axis=-1))
    order = np.argsort(distances, axis=1, kind="stable")
    return RankingResult(distances=distances, order=order)


def cmc_map(
    result: RankingResult,
    query_labels: Sequence[int],
    gallery_labels: Sequence[int],
    query_cams: Sequence[int] | None = None,
    gallery_cams: Sequence[int] | None = None,
    max_rank: int = 20,
) -> CmcResult:
    """CMC curve and mAP over the ranked lists.

    With camera ids given, gallery items sharing both identity and camera
    with the query are excluded (cross-camera protocol). Queries left without
    any valid match are excluded from the averages and counted.
    """
    q_labels = np.asarray(query_labels)
    g_labels = np.asarray(gallery_labels)
    filter_cams = query_cams is not None and gallery_cams is not None
    if filter_cams:
        q_cams = np.asarray(query_cams)
        g_cams = np.asarray(gallery_cams)

    all_cmc = []
    all_ap = []
    excluded = 0
    for qi in range(result.order.shape[0]):
        ranked = result.order[qi]
        if filter_cams:
            keep = ~((g_labels[ranked] == q_labels[qi]) & (g_cams[ranked] == q_cams[qi]))
            ranked = ranked[keep]
        matches = (g_labels[ranked] == q_labels[qi]).astype(np.int64)
        num_rel = int(matches.sum())
        if num_rel == 0 or len(ranked) == 0:
            excluded += 1
            continue
        hits = matches.cumsum()
        cmc_row = (hits >= 1).astype(np.float64)
        if len(cmc_row) < max_rank:
            cmc_row = np.concatenate([cmc_row, np.full(max_rank - len(cmc_row), cmc_row[-1])])
        all_cmc.append(cmc_row[:max_rank])
        precision_at = hits / np.arange(1, len(matches) + 1)
        all_ap.append(float((precision_at * matches).sum() / num_rel))

    if not all_cmc:
        return CmcResult(cmc=np.zeros(max_rank), mean_ap=0.0, excluded_queries=excluded)
    return CmcResult(
        cmc=np.mean(all_cmc, axis=0),
        mean_ap=float(np.mean(all_ap)),
        excluded_queries=excluded,
    )


def evaluate_embeddings(
    query_embeddings: Sequence[VideoEmbedding],
    gallery_embeddings: Sequence[VideoEmbedding],
    cross_camera: bool | None = None,
    max_rank: int = 20,
) -> RankingResult:
    """Retrieve and score in one step; cross-camera filtering is applied when
    the embeddings span more than one camera (or as explicitly requested)."""
    result = retrieve(query_embeddings, gallery_embeddings)
    cameras = {e.camera for e in query_embeddings} | {e.camera for e in gallery_embeddings}
    if cross_camera is None:
        cross_camera = len(cameras) > 1
    scores = cmc_map(
        result,
        [e.identity for e in query_embeddings],
        [e.identity for e in gallery_embeddings],
        [e.camera for e in query_embeddings] if cross_camera else None,
        [e.camera for e in gallery_embeddings] if cross_camera else None,
        max_rank=max_rank,
    )
    result.cmc = scores.cmc
    result.mean_ap = scores.mean_ap
    result.excluded_queries = scores.excluded_queries
    return result


def evaluation_report(result: RankingResult, ranks: Sequence[int] = (1, 5, 10, 20)) -> dict:
    """Structured metric report mirroring the usual rank-1/5/10/20 + mAP table."""
    if result.cmc is None or result.mean_ap is None:
        raise ValueError("run evaluate_embeddings (or cmc_map) before building a report")
    report = {f"rank{r}": round(float(result.cmc[r - 1]), 6) for r in ranks if r <= len(result.cmc)}
    report["mAP"] = round(float(result.mean_ap), 6)
    report["excluded_queries"] = int(result.excluded_queries or 0)
    return report


def format_report(report: dict) -> str:
    parts = [f"{k}={report[k]:.4f}" for k in sorted(report) if k.startswith("rank")]
    parts.append(f"mAP={report['mAP']:.4f}")
    parts.append(f"excluded={report.get('excluded_queries', 0)}")
    return " ".join(parts)
