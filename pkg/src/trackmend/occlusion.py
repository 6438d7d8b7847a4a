"""Occlusion localization by region similarity scoring.

Each frame's backbone feature map is split into three horizontal bands and
band-pooled into per-region vectors. A tracklet's per-region prototype is the
temporal mean of those vectors; each (frame, region) gets the cosine
similarity between its vector and the prototype. Entries scoring below the
threshold tau are flagged as occluded.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

import numpy as np

from .data import REGIONS, OcclusionRecord, Region, Track, region_bands

DEFAULT_TAU = 0.89
_ZERO_NORM_EPS = 1e-12


class FeatureExtractor(Protocol):
    def feature_map(self, frame) -> np.ndarray:
        """Spatial feature map (C, h, w) for one frame."""
        ...


@dataclass(frozen=True)
class RegionFeature:
    vector: np.ndarray
    frame_index: int
    region: Region


def region_features(track: Track, extractor: FeatureExtractor) -> list[RegionFeature]:
    """One pooled vector per (frame, region), from one forward pass per frame.

    The extractor's final feature map is split into three horizontal bands
    (same remainder rule as pixel-space region bands) and each band is
    average-pooled.
    """
    features: list[RegionFeature] = []
    for frame in track.frames:
        fmap = np.asarray(extractor.feature_map(frame), dtype=np.float64)
        if fmap.ndim != 3:
            raise ValueError(f"extractor must return a (C, h, w) map, got shape {fmap.shape}")
        h = fmap.shape[1]
        if h < 3:
            raise ValueError(f"feature map height {h} is too small to band-split into 3 regions")
        for region, (lo, hi) in zip(REGIONS, region_bands(h)):
            features.append(
                RegionFeature(
                    vector=fmap[:, lo:hi, :].mean(axis=(1, 2)),
                    frame_index=frame.index,
                    region=region,
                )
            )
    return features


def video_region_prototype(features: Sequence[RegionFeature], region: Region) -> np.ndarray:
    """Temporal mean of one region's vectors across the whole tracklet."""
    vectors = [f.vector for f in features if f.region == Region(region)]
    if not vectors:
        raise ValueError(f"no features for region {Region(region).value!r}")
    return np.mean(vectors, axis=0)


def region_prototypes(features: Sequence[RegionFeature]) -> dict[Region, np.ndarray]:
    return {region: video_region_prototype(features, region) for region in REGIONS}


@dataclass
class RegionScoreTable:
    """Cosine scores of shape (T, 3); columns follow upper/middle/lower order."""

    scores: np.ndarray
    frame_indices: list[int]

    def entry(self, frame_index: int, region: Region) -> float:
        t = self.frame_indices.index(frame_index)
        return float(self.scores[t, REGIONS.index(Region(region))])

    def to_dict(self) -> dict:
        return {"frame_indices": list(self.frame_indices), "scores": self.scores.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "RegionScoreTable":
        return cls(
            scores=np.asarray(payload["scores"], dtype=np.float64),
            frame_indices=[int(i) for i in payload["frame_indices"]],
        )


def region_scores(
    features: Sequence[RegionFeature], prototypes: Mapping[Region, np.ndarray]
) -> RegionScoreTable:
    """Cosine similarity of every (frame, region) vector to its prototype.

    Zero-norm vectors (either side) score 0 with a warning rather than NaN.
    """
    frame_indices = sorted({f.frame_index for f in features})
    row_of = {idx: t for t, idx in enumerate(frame_indices)}
    scores = np.zeros((len(frame_indices), 3), dtype=np.float64)
    for feature in features:
        proto = np.asarray(prototypes[feature.region], dtype=np.float64)
        v_norm = np.linalg.norm(feature.vector)
        p_norm = np.linalg.norm(proto)
        if v_norm < _ZERO_NORM_EPS or p_norm < _ZERO_NORM_EPS:
            warnings.warn(
                f"zero-norm vector at frame {feature.frame_index}, region "
                f"{feature.region.value}; scoring it 0",
                RuntimeWarning,
                stacklevel=2,
            )
            score = 0.0
        else:
            score = float(feature.vector @ proto / (v_norm * p_norm))
        scores[row_of[feature.frame_index], REGIONS.index(feature.region)] = min(1.0, max(-1.0, score))
    return RegionScoreTable(scores=scores, frame_indices=frame_indices)


def score_track(track: Track, extractor: FeatureExtractor) -> RegionScoreTable:
    features = region_features(track, extractor)
    return region_scores(features, region_prototypes(features))


def _check_tau(tau: float) -> None:
    if not -1.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [-1, 1], got {tau}")


def locate_occlusions(table: RegionScoreTable, tau: float) -> list[tuple[int, Region]]:
    """Exactly the (frame_index, region) entries with score strictly below tau."""
    _check_tau(tau)
    flagged = []
    for t, frame_index in enumerate(table.frame_indices):
        for k, region in enumerate(REGIONS):
            if table.scores[t, k] < tau:
                flagged.append((frame_index, region))
    return flagged


def unoccluded_frames(table: RegionScoreTable, tau: float) -> list[int]:
    """Frames with no region scoring below tau."""
    flagged_frames = {f for f, _ in locate_occlusions(table, tau)}
    return [f for f in table.frame_indices if f not in flagged_frames]


def flagged_to_records(tracklet_id: int, flagged: Sequence[tuple[int, Region]]) -> list[OcclusionRecord]:
    return [OcclusionRecord(tracklet_id=tracklet_id, frame_index=f, region=r) for f, r in flagged]


def locate_all(tables: Mapping[int, RegionScoreTable], tau: float) -> list[OcclusionRecord]:
    records: list[OcclusionRecord] = []
    for tracklet_id in sorted(tables):
        records.extend(flagged_to_records(tracklet_id, locate_occlusions(tables[tracklet_id], tau)))
    return records


# ---------------------------------------------------------------------------
# calibration against ground truth
# ---------------------------------------------------------------------------

def roc_auc(labels: Sequence[bool], scores: Sequence[float]) -> float:
    """Area under the ROC curve via the rank statistic, with tie averaging."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    order = np.argsort(scores, kind="mergesort")
    _, inverse, counts = np.unique(scores[order], return_inverse=True, return_counts=True)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    average_rank = starts + (counts + 1) / 2.0
    ranks = np.empty(len(scores))
    ranks[order] = average_rank[inverse]
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _score_label_pairs(
    tables: Mapping[int, RegionScoreTable], truth: Sequence[OcclusionRecord]
) -> tuple[np.ndarray, np.ndarray]:
    truth_set = {(r.tracklet_id, r.frame_index, Region(r.region)) for r in truth}
    scores, labels = [], []
    for tracklet_id in sorted(tables):
        table = tables[tracklet_id]
        for t, frame_index in enumerate(table.frame_indices):
            for k, region in enumerate(REGIONS):
                scores.append(table.scores[t, k])
                labels.append((tracklet_id, frame_index, region) in truth_set)
    return np.asarray(labels, dtype=bool), np.asarray(scores, dtype=np.float64)


def detection_auc(tables: Mapping[int, RegionScoreTable], truth: Sequence[OcclusionRecord]) -> float:
    """ROC AUC for flagging occluded regions: lower similarity = occluded."""
    labels, scores = _score_label_pairs(tables, truth)
    return roc_auc(labels, -scores)


@dataclass(frozen=True)
class TauPoint:
    tau: float
    true_positive_rate: float
    false_positive_rate: float
    flagged_fraction: float


def tau_sweep(
    tables: Mapping[int, RegionScoreTable],
    truth: Sequence[OcclusionRecord],
    taus: Sequence[float],
) -> list[TauPoint]:
    labels, scores = _score_label_pairs(tables, truth)
    points = []
    for tau in taus:
        _check_tau(tau)
        flagged = scores < tau
        tp = float((flagged & labels).sum())
        fp = float((flagged & ~labels).sum())
        points.append(
            TauPoint(
                tau=float(tau),
                true_positive_rate=tp / max(1, labels.sum()),
                false_positive_rate=fp / max(1, (~labels).sum()),
                flagged_fraction=float(flagged.mean()),
            )
        )
    return points


def calibrate_tau(
    tables: Mapping[int, RegionScoreTable],
    truth: Sequence[OcclusionRecord],
    taus: Sequence[float] | None = None,
) -> float:
    """Tau maximizing Youden's J (TPR - FPR) over a grid of candidate values."""
    labels, scores = _score_label_pairs(tables, truth)
    if taus is None:
        unique = np.unique(scores)
        taus = (unique[1:] + unique[:-1]) / 2.0 if len(unique) > 1 else unique
    best_tau, best_j = float(taus[0]), -np.inf
    for tau in taus:
        flagged = scores < tau
        tpr = float((flagged & labels).sum()) / max(1, labels.sum())
        fpr = float((flagged & ~labels).sum()) / max(1, (~labels).sum())
        if tpr - fpr > best_j:
            best_j, best_tau = tpr - fpr, float(tau)
    return best_tau
