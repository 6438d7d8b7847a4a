"""Frame/track data model, synthetic occluded-pedestrian data, and dataset IO.

On-disk layout::

    root/<identity>/<camera>_<tracklet>/frame_0000.png
    root/clean/<identity>/<camera>_<tracklet>/frame_0000.png   (pre-occlusion copies)
    root/manifest.json

The manifest stores tracklet records, the train/query/gallery split, and
ground-truth occlusions as ``(tracklet, frame_index, region)`` triples under
the ``occlusions`` key.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

MANIFEST_NAME = "manifest.json"
CLEAN_DIR = "clean"


class Region(str, Enum):
    """One of the three fixed horizontal bands of a frame."""

    UPPER = "upper"
    MIDDLE = "middle"
    LOWER = "lower"


REGIONS: tuple[Region, Region, Region] = (Region.UPPER, Region.MIDDLE, Region.LOWER)


def region_bands(height: int) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """Row ranges ``[start, end)`` of the upper/middle/lower bands.

    The bands split the height into three near-equal parts; the lower band
    absorbs the remainder when ``height`` is not divisible by 3.
    """
    if height < 3:
        raise ValueError(f"height must be >= 3 to form three bands, got {height}")
    third = height // 3
    return ((0, third), (third, 2 * third), (2 * third, height))


def region_band(region: Region, height: int) -> tuple[int, int]:
    return region_bands(height)[REGIONS.index(Region(region))]


@dataclass(frozen=True)
class Frame:
    """A pedestrian crop plus identity/camera metadata and tracklet position.

    ``pixels`` is float32 of shape (3, H, W) in [0, 1]; training code converts
    to the completion range [-1, 1] where needed.
    """

    pixels: np.ndarray
    identity: int
    camera: int
    index: int

    def __post_init__(self) -> None:
        p = self.pixels
        if not isinstance(p, np.ndarray) or p.ndim != 3 or p.shape[0] != 3:
            raise ValueError(f"pixels must be a (3, H, W) array, got shape {getattr(p, 'shape', None)}")
        _, h, w = p.shape
        if h % 4 != 0 or w % 4 != 0:
            raise ValueError(f"frame size must be divisible by 4, got {h}x{w}")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class RegionMask:
    """Binary occlusion mask covering exactly one horizontal band.

    ``mask`` is uint8 of shape (H, W) with 1 on every occluded pixel.
    """

    region: Region
    mask: np.ndarray

    @classmethod
    def banded(cls, region: Region, height: int, width: int) -> "RegionMask":
        start, end = region_band(region, height)
        mask = np.zeros((height, width), dtype=np.uint8)
        mask[start:end, :] = 1
        return cls(region=Region(region), mask=mask)

    def validate(self) -> None:
        """Check the band-exactness invariant (1 on the band, 0 elsewhere)."""
        h, w = self.mask.shape
        expected = RegionMask.banded(self.region, h, w).mask
        if not np.array_equal(self.mask, expected):
            raise ValueError(f"mask does not match the {self.region.value} band of a {h}x{w} frame")

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]


def apply_region_mask(frame: Frame, mask: RegionMask) -> Frame:
    """Zero out the masked pixels of ``frame``; the input is not mutated."""
    if mask.mask.shape != (frame.height, frame.width):
        raise ValueError(
            f"mask shape {mask.mask.shape} does not match frame {frame.height}x{frame.width}"
        )
    keep = (1 - mask.mask).astype(np.float32)
    return Frame(
        pixels=frame.pixels * keep[None, :, :],
        identity=frame.identity,
        camera=frame.camera,
        index=frame.index,
    )


@dataclass(frozen=True)
class Track:
    """An ordered sequence of frames sharing identity, camera, and size."""

    frames: tuple[Frame, ...]

    def __post_init__(self) -> None:
        if len(self.frames) == 0:
            raise ValueError("a track must contain at least one frame")
        first = self.frames[0]
        for f in self.frames[1:]:
            if f.identity != first.identity or f.camera != first.camera:
                raise ValueError("all frames of a track must share identity and camera")
            if f.pixels.shape != first.pixels.shape:
                raise ValueError("all frames of a track must share spatial dimensions")
        indices = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("frame indices must be strictly increasing")

    @property
    def identity(self) -> int:
        return self.frames[0].identity

    @property
    def camera(self) -> int:
        return self.frames[0].camera

    @property
    def length(self) -> int:
        return len(self.frames)

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.frames[0].height, self.frames[0].width


def sample_track(track: Track, length: int, rng: np.random.Generator) -> Track:
    """Crop ``length`` consecutive frames at a uniform random offset.

    Tracks shorter than ``length`` are extended by cyclic repetition from
    offset 0. Frames in the result are renumbered 0..length-1.
    """
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    total = track.length
    if total <= length:
        picks = [i % total for i in range(length)]
    else:
        offset = int(rng.integers(0, total - length + 1))
        picks = list(range(offset, offset + length))
    frames = tuple(
        Frame(pixels=track.frames[p].pixels, identity=track.identity, camera=track.camera, index=i)
        for i, p in enumerate(picks)
    )
    return Track(frames=frames)


@dataclass(frozen=True)
class OcclusionRecord:
    tracklet_id: int
    frame_index: int
    region: Region

    def to_triple(self) -> list:
        return [self.tracklet_id, self.frame_index, self.region.value]

    @classmethod
    def from_triple(cls, triple: Sequence) -> "OcclusionRecord":
        tid, fidx, region = triple
        return cls(tracklet_id=int(tid), frame_index=int(fidx), region=Region(region))


@dataclass
class TrackletRecord:
    tracklet_id: int
    identity: int
    camera: int
    split: str
    frames: list[str]


@dataclass
class DatasetManifest:
    """Index of a dataset on disk: tracklets, splits, occlusions, provenance."""

    root: Path
    tracklets: list[TrackletRecord] = field(default_factory=list)
    occlusions: list[OcclusionRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "tracklets": [
                {
                    "tracklet": t.tracklet_id,
                    "identity": t.identity,
                    "camera": t.camera,
                    "split": t.split,
                    "frames": list(t.frames),
                }
                for t in self.tracklets
            ],
            "occlusions": [r.to_triple() for r in self.occlusions],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, root: Path, payload: dict) -> "DatasetManifest":
        tracklets = [
            TrackletRecord(
                tracklet_id=int(t["tracklet"]),
                identity=int(t["identity"]),
                camera=int(t["camera"]),
                split=str(t["split"]),
                frames=[str(f) for f in t["frames"]],
            )
            for t in payload.get("tracklets", [])
        ]
        occlusions = [OcclusionRecord.from_triple(t) for t in payload.get("occlusions", [])]
        return cls(root=Path(root), tracklets=tracklets, occlusions=occlusions, meta=payload.get("meta", {}))

    def save(self) -> Path:
        path = Path(self.root) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root: Path) -> "DatasetManifest":
        path = Path(root) / MANIFEST_NAME
        if not path.is_file():
            raise FileNotFoundError(f"no manifest at {path}")
        return cls.from_dict(Path(root), json.loads(path.read_text()))


def occlusions_to_json(records: Iterable[OcclusionRecord]) -> list:
    """Serialize occlusion records to the manifest-compatible triple list."""
    return [r.to_triple() for r in records]


def occlusions_from_json(triples: Iterable[Sequence]) -> list[OcclusionRecord]:
    return [OcclusionRecord.from_triple(t) for t in triples]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    root: Path
    identities: int = 20
    tracklets_per_identity: int = 4
    frames_per_tracklet: int = 16
    height: int = 64
    width: int = 32
    cameras: int = 2
    occlusion_rate: float = 0.25
    train_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.height % 4 != 0 or self.width % 4 != 0:
            raise ValueError(f"frame size must be divisible by 4, got {self.height}x{self.width}")
        if self.identities < 0:
            raise ValueError("identities must be >= 0")
        if not 0.0 <= self.occlusion_rate < 1.0:
            raise ValueError("occlusion_rate must lie in [0, 1)")
        if self.cameras < 1:
            raise ValueError("cameras must be >= 1")
        if self.tracklets_per_identity < 1 or self.frames_per_tracklet < 1:
            raise ValueError("tracklets_per_identity and frames_per_tracklet must be >= 1")


# Wardrobe palette shared by all identities. Identities are triples of picks,
# so distinct people routinely share one or two garment colors.
_PALETTE = np.array(
    [
        [204, 51, 51],
        [51, 153, 221],
        [238, 204, 51],
        [51, 170, 85],
        [153, 68, 204],
        [238, 119, 34],
        [221, 221, 221],
        [51, 51, 51],
    ],
    dtype=np.int16,
)

_CAMERA_BG = np.array(
    [[96, 104, 112], [128, 116, 96], [88, 120, 104], [120, 96, 120]],
    dtype=np.int16,
)
_CAMERA_GAIN = (1.0, 0.86, 1.1, 0.94)

_MEAN_RUN_LENGTH = 3.5  # runs are uniform on {2..5}


@dataclass
class _IdentityStyle:
    head: np.ndarray
    shirt: np.ndarray
    pants: np.ndarray
    torso_width: float
    gait_freq: float
    gait_phase: float


def _draw_styles(count: int, rng: np.random.Generator) -> list[_IdentityStyle]:
    styles: list[_IdentityStyle] = []
    seen: set[tuple[int, int, int]] = set()
    for _ in range(count):
        for _attempt in range(100):
            triple = tuple(int(rng.integers(0, len(_PALETTE))) for _ in range(3))
            if triple not in seen:
                break
        seen.add(triple)
        styles.append(
            _IdentityStyle(
                head=_PALETTE[triple[0]],
                shirt=_PALETTE[triple[1]],
                pants=_PALETTE[triple[2]],
                torso_width=float(rng.uniform(0.34, 0.46)),
                gait_freq=float(rng.uniform(0.5, 1.4)),
                gait_phase=float(rng.uniform(0.0, 2 * np.pi)),
            )
        )
    return styles


def _render_clean_frame(
    style: _IdentityStyle,
    camera: int,
    t: int,
    height: int,
    width: int,
    noise_rng: np.random.Generator,
    center_shift: int = 0,
) -> np.ndarray:
    """Procedural pedestrian: head/torso/legs blocks with a periodic gait sway."""
    cam = camera % len(_CAMERA_BG)
    img = np.empty((height, width, 3), dtype=np.int16)
    img[:] = _CAMERA_BG[cam]

    sway = style.gait_freq * t + style.gait_phase
    cx = width // 2 + center_shift + int(round(0.04 * width * np.sin(0.7 * sway)))

    def block(r0: float, r1: float, c_lo: int, c_hi: int, color: np.ndarray) -> None:
        rows = slice(int(r0 * height), int(r1 * height))
        cols = slice(max(0, c_lo), min(width, c_hi))
        img[rows, cols] = color

    head_w = max(2, int(0.22 * width))
    block(0.03, 0.16, cx - head_w // 2, cx + (head_w + 1) // 2, style.head)

    torso_w = max(3, int(style.torso_width * width))
    block(0.18, 0.55, cx - torso_w // 2, cx + (torso_w + 1) // 2, style.shirt)

    leg_w = max(2, int(0.13 * width))
    stride = int(round(0.07 * width * np.sin(sway)))
    left = cx - int(0.10 * width) + stride
    right = cx + int(0.10 * width) - stride
    block(0.57, 0.96, left - leg_w // 2, left + (leg_w + 1) // 2, style.pants)
    block(0.57, 0.96, right - leg_w // 2, right + (leg_w + 1) // 2, style.pants)

    img = img.astype(np.float64) * _CAMERA_GAIN[cam]
    noise = noise_rng.integers(-6, 7, size=img.shape)
    return np.clip(img + noise, 0, 255).astype(np.uint8)


def _distractor_style(avoid: set[int], rng: np.random.Generator) -> _IdentityStyle:
    choices = [i for i in range(len(_PALETTE)) if i not in avoid] or list(range(len(_PALETTE)))
    picks = rng.choice(choices, size=3, replace=len(choices) < 3)
    return _IdentityStyle(
        head=_PALETTE[int(picks[0])],
        shirt=_PALETTE[int(picks[1])],
        pants=_PALETTE[int(picks[2])],
        torso_width=float(rng.uniform(0.34, 0.46)),
        gait_freq=float(rng.uniform(0.5, 1.4)),
        gait_phase=float(rng.uniform(0.0, 2 * np.pi)),
    )


def _render_occluder_band(
    distractor: _IdentityStyle,
    region: Region,
    camera: int,
    t: int,
    height: int,
    width: int,
    shift: int,
    noise_rng: np.random.Generator,
) -> np.ndarray:
    """The matching band of a distractor pedestrian passing in front.

    The distractor wears palette colors the occluded person does not, so the
    band looks like a plausible body part of somebody else rather than noise.
    """
    full = _render_clean_frame(distractor, camera, t, height, width, noise_rng, center_shift=shift)
    lo, hi = region_band(region, height)
    return full[lo:hi]


def _plan_runs(n_frames: int, rate: float, rng: np.random.Generator) -> list[tuple[int, int, Region]]:
    """Non-overlapping occlusion runs of 2..5 consecutive frames."""
    if rate <= 0.0 or n_frames < 2:
        return []
    expected_runs = rate * n_frames / _MEAN_RUN_LENGTH
    n_runs = int(expected_runs) + (1 if rng.random() < expected_runs % 1.0 else 0)
    taken = np.zeros(n_frames, dtype=bool)
    runs: list[tuple[int, int, Region]] = []
    for _ in range(n_runs):
        for _attempt in range(20):
            length = int(rng.integers(2, 6))
            length = min(length, n_frames)
            start = int(rng.integers(0, n_frames - length + 1))
            if not taken[start : start + length].any():
                taken[start : start + length] = True
                runs.append((start, length, REGIONS[int(rng.integers(0, 3))]))
                break
    return runs


def _assign_splits(
    identities: int, tracklets_per_identity: int, cameras: int, train_fraction: float, rng: np.random.Generator
) -> tuple[set[int], dict[tuple[int, int], str]]:
    """Return train identity set and per-(identity, local tracklet) split labels."""
    order = rng.permutation(identities)
    n_train = int(round(train_fraction * identities))
    train_ids = set(int(i) for i in order[:n_train])
    split_of: dict[tuple[int, int], str] = {}
    for identity in range(identities):
        if identity in train_ids:
            for t in range(tracklets_per_identity):
                split_of[(identity, t)] = "train"
            continue
        first_of_camera: set[int] = set()
        labels = []
        for t in range(tracklets_per_identity):
            camera = t % cameras
            if camera not in first_of_camera:
                first_of_camera.add(camera)
                labels.append("query")
            else:
                labels.append("gallery")
        if "gallery" not in labels and labels:
            labels[-1] = "gallery"
        for t, label in enumerate(labels):
            split_of[(identity, t)] = label
    return train_ids, split_of


def frame_relpath(identity: int, camera: int, tracklet_id: int, frame_index: int) -> str:
    return f"{identity:04d}/{camera}_{tracklet_id:04d}/frame_{frame_index:04d}.png"


def generate_synthetic_dataset(config: SynthConfig) -> DatasetManifest:
    """Write a synthetic occluded-pedestrian dataset and return its manifest.

    Occlusions overwrite one vertical region band for a contiguous run of
    frames; the pre-occlusion rendering of every occluded frame is kept under
    ``root/clean/`` so completion quality can be measured against ground
    truth. Deterministic for a fixed config and seed.
    """
    config.validate()
    root = Path(config.root)
    root.mkdir(parents=True, exist_ok=True)

    style_rng = np.random.default_rng([config.seed, 11])
    split_rng = np.random.default_rng([config.seed, 13])
    styles = _draw_styles(config.identities, style_rng)
    _, split_of = _assign_splits(
        config.identities, config.tracklets_per_identity, config.cameras, config.train_fraction, split_rng
    )

    manifest = DatasetManifest(
        root=root,
        meta={
            "kind": "synthetic",
            "seed": config.seed,
            "frame_size": [config.height, config.width],
            "cameras": config.cameras,
            "occlusion_rate": config.occlusion_rate,
        },
    )

    tracklet_id = 0
    for identity in range(config.identities):
        style = styles[identity]
        for t in range(config.tracklets_per_identity):
            camera = t % config.cameras
            frame_rng = np.random.default_rng([config.seed, 17, identity, t])
            occ_rng = np.random.default_rng([config.seed, 19, identity, t])
            phase0 = int(frame_rng.integers(0, 32))

            frames = [
                _render_clean_frame(style, camera, phase0 + k, config.height, config.width, frame_rng)
                for k in range(config.frames_per_tracklet)
            ]
            runs = _plan_runs(config.frames_per_tracklet, config.occlusion_rate, occ_rng)

            rel_frames: list[str] = []
            for k, clean in enumerate(frames):
                rel = frame_relpath(identity, camera, tracklet_id, k)
                rel_frames.append(rel)
                final = clean
                for start, length, region in runs:
                    if start <= k < start + length:
                        lo, hi = region_band(region, config.height)
                        avoid = {
                            int(np.flatnonzero((_PALETTE == c).all(axis=1))[0])
                            for c in (style.head, style.shirt, style.pants)
                        }
                        occluder = _render_occluder(hi - lo, config.width, avoid, occ_rng)
                        final = clean.copy()
                        final[lo:hi, :] = occluder
                        clean_path = root / CLEAN_DIR / rel
                        clean_path.parent.mkdir(parents=True, exist_ok=True)
                        Image.fromarray(clean, "RGB").save(clean_path)
                        manifest.occlusions.append(
                            OcclusionRecord(tracklet_id=tracklet_id, frame_index=k, region=region)
                        )
                path = root / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(final, "RGB").save(path)

            manifest.tracklets.append(
                TrackletRecord(
                    tracklet_id=tracklet_id,
                    identity=identity,
                    camera=camera,
                    split=split_of[(identity, t)],
                    frames=rel_frames,
                )
            )
            tracklet_id += 1

    manifest.save()
    return manifest


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def _load_frame_array(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


@dataclass
class VideoDataset:
    """Immutable in-memory view of a dataset: decoded tracks plus the manifest."""

    root: Path
    manifest: DatasetManifest
    tracks: dict[int, Track]
    identity_map: dict[int, int]

    @property
    def num_identities(self) -> int:
        return len(self.identity_map)

    @property
    def num_cameras(self) -> int:
        return len({t.camera for t in self.manifest.tracklets}) if self.manifest.tracklets else 0

    def record(self, tracklet_id: int) -> TrackletRecord:
        return self._records[tracklet_id]

    def split_ids(self, split: str) -> list[int]:
        return [t.tracklet_id for t in self.manifest.tracklets if t.split == split]

    def occlusions_by_track(self) -> dict[int, list[OcclusionRecord]]:
        out: dict[int, list[OcclusionRecord]] = {}
        for r in self.manifest.occlusions:
            out.setdefault(r.tracklet_id, []).append(r)
        return out

    def occluded_frames(self, tracklet_id: int) -> set[int]:
        return {r.frame_index for r in self.manifest.occlusions if r.tracklet_id == tracklet_id}

    def clean_frame(self, tracklet_id: int, frame_index: int) -> Frame | None:
        """Pre-occlusion rendering of a frame, if the dataset stores one."""
        rec = self.record(tracklet_id)
        rel = rec.frames[frame_index]
        path = Path(self.root) / CLEAN_DIR / rel
        if not path.is_file():
            return None
        return Frame(
            pixels=_load_frame_array(path),
            identity=self.identity_map[rec.identity],
            camera=rec.camera,
            index=frame_index,
        )

    def __post_init__(self) -> None:
        self._records = {t.tracklet_id: t for t in self.manifest.tracklets}


def load_dataset(root: Path) -> VideoDataset:
    """Decode a dataset from disk. Pure function of the directory contents."""
    root = Path(root)
    manifest = DatasetManifest.load(root)

    identities = sorted({t.identity for t in manifest.tracklets})
    identity_map = {orig: new for new, orig in enumerate(identities)}

    tracks: dict[int, Track] = {}
    for rec in manifest.tracklets:
        frames = []
        for k, rel in enumerate(rec.frames):
            path = root / rel
            if not path.is_file():
                raise FileNotFoundError(f"manifest references a missing file: {path}")
            frames.append(
                Frame(
                    pixels=_load_frame_array(path),
                    identity=identity_map[rec.identity],
                    camera=rec.camera,
                    index=k,
                )
            )
        if len({f.pixels.shape for f in frames}) > 1:
            raise ValueError(f"inconsistent frame sizes within tracklet {rec.tracklet_id}")
        tracks[rec.tracklet_id] = Track(frames=tuple(frames))

    return VideoDataset(root=root, manifest=manifest, tracks=tracks, identity_map=identity_map)


def copy_frame_file(src_root: Path, dst_root: Path, rel: str) -> None:
    """Copy one frame image verbatim, creating parent directories."""
    dst = Path(dst_root) / rel
    dst.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(Path(src_root) / rel, dst)
