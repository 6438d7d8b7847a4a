"""Training orchestration for the four-phase pipeline.

Phase 1 pretrains the per-frame identity network on sampled 4-frame tracks
(temporal average pooling, cross-entropy). Phase 2 scores regions with that
network and flags occlusions. Phase 3 trains the completion networks on
unoccluded training frames with one region band masked at random, alternating
generator and discriminator updates 1:1 and keeping the identity guider
frozen. Phase 4 rewrites every flagged region of the dataset with the trained
completion networks.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from PIL import Image

from .checkpoints import load_checkpoint, parameter_checksum, save_checkpoint
from .completion import BundleOptions, CompletionBundle, build_bundle, local_discriminator_input
from .data import (
    CLEAN_DIR,
    REGIONS,
    DatasetManifest,
    Frame,
    OcclusionRecord,
    Region,
    RegionMask,
    Track,
    VideoDataset,
    copy_frame_file,
    occlusions_to_json,
    region_band,
    sample_track,
)
from .losses import LossWeights, adversarial_losses, composite, guider_loss, reconstruction_loss, total_loss
from .occlusion import RegionScoreTable, score_track, unoccluded_frames
from .reid import (
    ReidFeatureExtractor,
    ReidModel,
    VideoEmbedding,
    evaluate_embeddings,
    evaluation_report,
    track_to_tensor,
    video_embedding,
)


@dataclass
class TrainConfig:
    """Protocol hyperparameters; defaults follow the full-scale recipe, the
    ``desk()`` profile shrinks budgets for CPU-scale runs."""

    batch_size: int = 32
    track_length: int = 4
    reid_lr: float = 0.0003
    reid_lr_decay: float = 0.1
    reid_decay_every: int = 50
    reid_epochs: int = 150
    stcnet_lr: float = 0.0001
    stcnet_steps: int = 2000
    weight_decay: float = 0.0005
    gan_betas: tuple[float, float] = (0.5, 0.999)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    profile: str = "tiny"
    use_nonlocal: bool = False
    spatial_only: bool = False
    use_temporal: bool = True
    temporal_variant: str = "attention"
    use_local_disc: bool = True
    use_global_disc: bool = True
    use_guider: bool = True
    completion_size: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if min(self.reid_lr, self.stcnet_lr) <= 0 or self.batch_size < 1 or self.track_length < 1:
            raise ValueError("rates and batch/track sizes must be positive")
        if self.spatial_only:
            self.use_temporal = False
            self.use_local_disc = False
            self.use_global_disc = False
            self.use_guider = False
        if self.temporal_variant != "attention" and not self.use_temporal:
            raise ValueError("temporal_variant requires use_temporal")

    @classmethod
    def desk(cls, seed: int = 0, **overrides) -> "TrainConfig":
        values = dict(batch_size=8, reid_epochs=20, stcnet_steps=600, seed=seed)
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def unit_to_signed(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


def signed_to_unit(x: torch.Tensor) -> torch.Tensor:
    return (x + 1.0) / 2.0


def resize_frames(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def band_mask_tensor(region: Region, height: int, width: int) -> torch.Tensor:
    return torch.from_numpy(RegionMask.banded(region, height, width).mask.astype(np.float32))


# ---------------------------------------------------------------------------
# phase 1/4: identity network training
# ---------------------------------------------------------------------------

@dataclass
class ReidResult:
    model: ReidModel
    label_map: dict[int, int]
    history: list[dict]
    config: TrainConfig


def train_reid_model(dataset: VideoDataset, config: TrainConfig, use_nonlocal: bool | None = None) -> ReidResult:
    """Train the identity classifier on sampled fixed-length tracks.

    Horizontal mirroring is the only augmentation; learning rate decays by the
    configured factor on the configured epoch schedule. Deterministic for a
    fixed seed.
    """
    if use_nonlocal is None:
        use_nonlocal = config.use_nonlocal
    seed_everything(config.seed)
    train_tids = dataset.split_ids("train")
    if not train_tids:
        raise ValueError("training split is empty")
    identities = sorted({dataset.tracks[t].identity for t in train_tids})
    label_map = {identity: i for i, identity in enumerate(identities)}

    model = ReidModel(num_classes=len(identities), profile=config.profile, use_nonlocal=use_nonlocal)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.reid_lr, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.StepLR(
        optimizer, step_size=config.reid_decay_every, gamma=config.reid_lr_decay
    )
    rng = np.random.default_rng(config.seed)

    history: list[dict] = []
    model.train()
    for epoch in range(config.reid_epochs):
        order = rng.permutation(len(train_tids))
        total_loss_value = 0.0
        correct = 0
        seen = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_tids[i] for i in order[start : start + config.batch_size]]
            clips = []
            labels = []
            for tid in batch:
                track = dataset.tracks[tid]
                sampled = sample_track(track, config.track_length, rng)
                tensor = track_to_tensor(sampled)
                if rng.random() < 0.5:
                    tensor = torch.flip(tensor, dims=(-1,))
                clips.append(tensor)
                labels.append(label_map[track.identity])
            clips_t = torch.stack(clips)
            labels_t = torch.tensor(labels)
            logits = model(clips_t)
            loss = F.cross_entropy(logits, labels_t)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at epoch {epoch}, step {start // config.batch_size}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss_value += loss.item() * len(batch)
            correct += int((logits.argmax(dim=1) == labels_t).sum())
            seen += len(batch)
        scheduler.step()
        history.append(
            {
                "epoch": epoch,
                "loss": total_loss_value / seen,
                "accuracy": correct / seen,
                "lr": scheduler.get_last_lr()[0],
            }
        )
    model.eval()
    return ReidResult(model=model, label_map=label_map, history=history, config=config)


def pretrain_reid(dataset: VideoDataset, config: TrainConfig) -> ReidResult:
    """Phase-1 pretraining: the plain backbone used as extractor and guider."""
    return train_reid_model(dataset, config, use_nonlocal=False)


def save_reid_checkpoint(path: Path, result: ReidResult) -> Path:
    return save_checkpoint(
        path,
        "reid",
        {
            "state_dict": result.model.state_dict(),
            "num_classes": result.model.num_classes,
            "profile": result.model.profile,
            "use_nonlocal": result.model.use_nonlocal,
            "label_map": {str(k): int(v) for k, v in result.label_map.items()},
            "train_config": result.config.to_dict(),
            "history": result.history,
        },
    )


def load_reid_model(path: Path) -> tuple[ReidModel, dict]:
    payload = load_checkpoint(path, "reid")
    model = ReidModel(
        num_classes=payload["num_classes"],
        profile=payload["profile"],
        use_nonlocal=payload["use_nonlocal"],
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


@dataclass
class Guider:
    """Frozen identity classifier plus its identity-to-class mapping."""

    model: ReidModel
    label_map: dict[int, int]

    @classmethod
    def from_result(cls, result: ReidResult) -> "Guider":
        return cls(model=result.model, label_map=dict(result.label_map))

    @classmethod
    def from_checkpoint(cls, path: Path) -> "Guider":
        model, payload = load_reid_model(path)
        return cls(model=model, label_map={int(k): v for k, v in payload["label_map"].items()})


# ---------------------------------------------------------------------------
# phase 3: completion training
# ---------------------------------------------------------------------------

def _occluded_indices(occlusion_records: Iterable) -> set[int]:
    occluded: set[int] = set()
    for record in occlusion_records:
        occluded.add(record.frame_index if isinstance(record, OcclusionRecord) else int(record))
    return occluded


def select_adjacent_frames(track: Track, index: int, occlusion_records: Iterable) -> tuple[Frame, Frame]:
    """Nearest unoccluded frame strictly before/after ``index``.

    When no unoccluded frame exists in a direction the current frame stands
    in, keeping the three-input interface total.
    """
    if not 0 <= index < track.length:
        raise ValueError(f"index {index} outside track of length {track.length}")
    occluded = _occluded_indices(occlusion_records)
    previous = next(
        (track.frames[j] for j in range(index - 1, -1, -1) if j not in occluded), track.frames[index]
    )
    following = next(
        (track.frames[j] for j in range(index + 1, track.length) if j not in occluded), track.frames[index]
    )
    return previous, following


def _records_by_track(records: Iterable[OcclusionRecord]) -> dict[int, list[OcclusionRecord]]:
    grouped: dict[int, list[OcclusionRecord]] = {}
    for record in records:
        grouped.setdefault(record.tracklet_id, []).append(record)
    return grouped


@dataclass
class StcnetResult:
    bundle: CompletionBundle
    metrics: list[dict]
    config: TrainConfig


def _zero() -> torch.Tensor:
    return torch.zeros(())


def train_stcnet(
    dataset: VideoDataset,
    occlusion_records: Sequence[OcclusionRecord],
    config: TrainConfig,
    guider: Guider | None = None,
) -> StcnetResult:
    """Train the completion networks on unoccluded training frames.

    Every step masks one region band uniformly at random, runs the spatial
    (and, per flags, temporal) generator, composites, and applies the weighted
    objective; discriminators update on their own terms, alternating 1:1. The
    guider never receives parameter updates.
    """
    if config.use_guider and guider is None:
        raise ValueError("a pretrained guider is required when use_guider is set")
    seed_everything(config.seed)

    frame_size = None
    by_track = _records_by_track(occlusion_records)
    eligible: list[tuple[int, int]] = []
    for tid in dataset.split_ids("train"):
        track = dataset.tracks[tid]
        frame_size = track.frame_size
        occluded = _occluded_indices(by_track.get(tid, []))
        eligible.extend((tid, j) for j in range(track.length) if j not in occluded)
    if not eligible:
        raise ValueError("no unoccluded frames available for completion training")

    completion_size = tuple(config.completion_size) if config.completion_size else frame_size
    options = BundleOptions(
        profile=config.profile,
        frame_size=completion_size,
        use_temporal=config.use_temporal,
        temporal_variant=config.temporal_variant,
        use_local_disc=config.use_local_disc,
        use_global_disc=config.use_global_disc,
    )
    bundle = build_bundle(options, guider=guider.model if config.use_guider else None)
    if bundle.guider is not None:
        bundle.guider.eval()
        for parameter in bundle.guider.parameters():
            parameter.requires_grad_(False)

    gen_opt = torch.optim.Adam(bundle.generator_parameters(), lr=config.stcnet_lr, betas=config.gan_betas)
    disc_params = []
    for disc in (bundle.global_disc, bundle.local_disc):
        if disc is not None:
            disc_params.extend(disc.parameters())
    disc_opt = (
        torch.optim.Adam(disc_params, lr=config.stcnet_lr, betas=config.gan_betas) if disc_params else None
    )

    rng = np.random.default_rng(config.seed)
    guider_size = None
    if bundle.guider is not None:
        guider_size = frame_size  # the guider was trained at the dataset resolution

    metrics: list[dict] = []
    for step in range(config.stcnet_steps):
        picks = [eligible[i] for i in rng.integers(0, len(eligible), size=config.batch_size)]
        regions = [REGIONS[int(rng.integers(0, 3))] for _ in picks]

        originals, previous, following, labels = [], [], [], []
        for tid, fidx in picks:
            track = dataset.tracks[tid]
            prev, nxt = select_adjacent_frames(track, fidx, by_track.get(tid, []))
            originals.append(torch.from_numpy(track.frames[fidx].pixels))
            previous.append(torch.from_numpy(prev.pixels))
            following.append(torch.from_numpy(nxt.pixels))
            if guider is not None:
                labels.append(guider.label_map[track.identity])

        x = resize_frames(unit_to_signed(torch.stack(originals)), completion_size)
        prev_t = resize_frames(unit_to_signed(torch.stack(previous)), completion_size)
        next_t = resize_frames(unit_to_signed(torch.stack(following)), completion_size)
        mask = torch.stack(
            [band_mask_tensor(region, *completion_size) for region in regions]
        ).unsqueeze(1)

        first = composite(bundle.spatial(x * (1 - mask)), x, mask)
        if bundle.temporal is not None:
            second = composite(bundle.temporal(first, prev_t, next_t), x, mask)
        else:
            second = first

        rec = reconstruction_loss(x, first, second)
        d_global = g_global = d_local = g_local = _zero()
        if bundle.global_disc is not None:
            d_global, g_global = adversarial_losses(bundle.global_disc, x, second)
        if bundle.local_disc is not None:
            half = (completion_size[0] // 2, completion_size[1] // 2)
            real_crop = local_discriminator_input(x, regions, half)
            fake_crop = local_discriminator_input(second, regions, half)
            d_local, g_local = adversarial_losses(bundle.local_disc, real_crop, fake_crop)

        guide = _zero()
        if bundle.guider is not None:
            guider_in = signed_to_unit(resize_frames(second, guider_size))
            guide = guider_loss(bundle.guider.classify_frames, guider_in, torch.tensor(labels))

        generator_total = total_loss(rec, g_global, g_local, guide, config.loss_weights)
        gen_opt.zero_grad()
        generator_total.backward()
        gen_opt.step()

        if disc_opt is not None:
            disc_total = d_global + d_local
            if not torch.isfinite(disc_total):
                raise RuntimeError(f"non-finite discriminator loss at step {step}")
            disc_opt.zero_grad()
            disc_total.backward()
            disc_opt.step()

        metrics.append(
            {
                "step": step,
                "reconstruction": rec.item(),
                "adversarial_global": g_global.item(),
                "adversarial_local": g_local.item(),
                "guider": guide.item(),
                "total": generator_total.item(),
                "disc_global": d_global.item(),
                "disc_local": d_local.item(),
            }
        )
    bundle.eval()
    return StcnetResult(bundle=bundle, metrics=metrics, config=config)


def write_metrics(path: Path, metrics: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return path


def save_stcnet_checkpoint(path: Path, result: StcnetResult) -> Path:
    return save_checkpoint(
        path,
        "stcnet",
        {
            "options": result.bundle.options.to_dict(),
            "state_dicts": result.bundle.state_dicts(),
            "train_config": result.config.to_dict(),
        },
    )


def load_stcnet_bundle(path: Path) -> CompletionBundle:
    payload = load_checkpoint(path, "stcnet")
    bundle = build_bundle(BundleOptions.from_dict(payload["options"]))
    bundle.load_state_dicts(payload["state_dicts"])
    return bundle.eval()


def heldout_completion_l1(
    bundle: CompletionBundle,
    dataset: VideoDataset,
    occlusion_records: Sequence[OcclusionRecord],
    splits: Sequence[str] = ("query", "gallery"),
    max_samples: int = 64,
    seed: int = 99,
) -> float:
    """Mean per-pixel L1 inside a random masked band on held-out unoccluded frames."""
    by_track = _records_by_track(occlusion_records)
    candidates: list[tuple[int, int]] = []
    for split in splits:
        for tid in dataset.split_ids(split):
            occluded = _occluded_indices(by_track.get(tid, []))
            candidates.extend((tid, j) for j in range(dataset.tracks[tid].length) if j not in occluded)
    if not candidates:
        raise ValueError("no held-out unoccluded frames to evaluate")
    rng = np.random.default_rng(seed)
    picks = [candidates[i] for i in rng.choice(len(candidates), size=min(max_samples, len(candidates)), replace=False)]

    bundle.eval()
    size = bundle.options.frame_size
    losses = []
    with torch.no_grad():
        for (tid, fidx), region_draw in zip(picks, rng.integers(0, 3, size=len(picks))):
            track = dataset.tracks[tid]
            region = REGIONS[int(region_draw)]
            x = resize_frames(unit_to_signed(torch.from_numpy(track.frames[fidx].pixels)).unsqueeze(0), size)
            prev, nxt = select_adjacent_frames(track, fidx, by_track.get(tid, []))
            prev_t = resize_frames(unit_to_signed(torch.from_numpy(prev.pixels)).unsqueeze(0), size)
            next_t = resize_frames(unit_to_signed(torch.from_numpy(nxt.pixels)).unsqueeze(0), size)
            mask = band_mask_tensor(region, *size)
            first = composite(bundle.spatial(x * (1 - mask)), x, mask)
            second = composite(bundle.temporal(first, prev_t, next_t), x, mask) if bundle.temporal else first
            losses.append(((x - second).abs() * mask).sum().item() / (mask.sum().item() * x.shape[1]))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# phase 4: dataset completion
# ---------------------------------------------------------------------------

def complete_dataset(
    dataset: VideoDataset,
    occlusion_records: Sequence[OcclusionRecord],
    bundle: CompletionBundle,
    out_root: Path,
    source_checkpoint: str | None = None,
) -> DatasetManifest:
    """Rewrite every flagged region with generated content; copy the rest verbatim.

    Non-mask pixels of rewritten frames stay bit-exact to the originals: the
    final composite happens on the stored uint8 values.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    bundle.eval()
    size = bundle.options.frame_size
    by_track = _records_by_track(occlusion_records)

    with torch.no_grad():
        for rec in dataset.manifest.tracklets:
            track = dataset.tracks[rec.tracklet_id]
            records = by_track.get(rec.tracklet_id, [])
            regions_of = {}
            for r in records:
                regions_of.setdefault(r.frame_index, []).append(Region(r.region))
            for fidx, rel in enumerate(rec.frames):
                if fidx not in regions_of:
                    copy_frame_file(dataset.root, out_root, rel)
                    continue
                frame = track.frames[fidx]
                out_h, out_w = frame.height, frame.width
                x = resize_frames(unit_to_signed(torch.from_numpy(frame.pixels)).unsqueeze(0), size)
                mask = torch.zeros(size)
                out_mask = np.zeros((out_h, out_w), dtype=bool)
                for region in regions_of[fidx]:
                    mask = torch.maximum(mask, band_mask_tensor(region, *size))
                    lo, hi = region_band(region, out_h)
                    out_mask[lo:hi, :] = True
                prev, nxt = select_adjacent_frames(track, fidx, records)
                prev_t = resize_frames(unit_to_signed(torch.from_numpy(prev.pixels)).unsqueeze(0), size)
                next_t = resize_frames(unit_to_signed(torch.from_numpy(nxt.pixels)).unsqueeze(0), size)

                first = composite(bundle.spatial(x * (1 - mask)), x, mask)
                second = composite(bundle.temporal(first, prev_t, next_t), x, mask) if bundle.temporal else first
                generated = resize_frames(second, (out_h, out_w))[0]
                generated_u8 = (
                    (signed_to_unit(generated).clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()
                )

                original_u8 = np.asarray(
                    Image.open(Path(dataset.root) / rel).convert("RGB"), dtype=np.uint8
                ).transpose(2, 0, 1)
                final = np.where(out_mask[None, :, :], generated_u8, original_u8)
                out_path = out_root / rel
                out_path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(final.transpose(1, 2, 0), "RGB").save(out_path)

    manifest = DatasetManifest(
        root=out_root,
        tracklets=[replace(t) for t in dataset.manifest.tracklets],
        occlusions=[],
        meta={
            **dataset.manifest.meta,
            "completed_from": str(dataset.root),
            "completion_checkpoint": source_checkpoint,
            "completed_regions": occlusions_to_json(occlusion_records),
        },
    )
    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def embed_split(dataset: VideoDataset, model: ReidModel, split: str) -> list[VideoEmbedding]:
    return [
        video_embedding(dataset.tracks[tid], model, tracklet_id=tid) for tid in dataset.split_ids(split)
    ]


def evaluate_dataset(dataset: VideoDataset, model: ReidModel, max_rank: int = 20) -> dict:
    """CMC/mAP report for the dataset's query/gallery split."""
    queries = embed_split(dataset, model, "query")
    gallery = embed_split(dataset, model, "gallery")
    if not queries or not gallery:
        raise ValueError("dataset has no query/gallery split to evaluate")
    result = evaluate_embeddings(queries, gallery, max_rank=max_rank)
    return evaluation_report(result)


def score_eval_tables(dataset: VideoDataset, model: ReidModel) -> dict[int, RegionScoreTable]:
    """Region score tables for every query/gallery tracklet."""
    extractor = ReidFeatureExtractor(model)
    tables = {}
    for split in ("query", "gallery"):
        for tid in dataset.split_ids(split):
            tables[tid] = score_track(dataset.tracks[tid], extractor)
    return tables


def discard_and_evaluate(
    dataset: VideoDataset,
    model: ReidModel,
    tables: Mapping[int, RegionScoreTable],
    tau: float,
    max_rank: int = 20,
) -> dict:
    """Retrieval metrics with score-flagged frames discarded before pooling.

    Tracks whose every frame is flagged fall back to the single frame with the
    highest minimum region score.
    """
    def keep_for(tid: int) -> list[int]:
        table = tables[tid]
        keep = unoccluded_frames(table, tau)
        if not keep:
            keep = [table.frame_indices[int(np.argmax(table.scores.min(axis=1)))]]
        return keep

    def embeddings(split: str) -> list[VideoEmbedding]:
        return [
            video_embedding(dataset.tracks[tid], model, tracklet_id=tid, frame_indices=keep_for(tid))
            for tid in dataset.split_ids(split)
        ]

    result = evaluate_embeddings(embeddings("query"), embeddings("gallery"), max_rank=max_rank)
    return evaluation_report(result)


def tau_retrieval_sweep(
    dataset: VideoDataset,
    model: ReidModel,
    tables: Mapping[int, RegionScoreTable],
    taus: Sequence[float],
) -> list[dict]:
    return [{"tau": float(tau), **discard_and_evaluate(dataset, model, tables, tau)} for tau in taus]
