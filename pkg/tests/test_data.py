import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.stats import chisquare

from trackmend.data import (
    REGIONS,
    DatasetManifest,
    Frame,
    OcclusionRecord,
    Region,
    RegionMask,
    SynthConfig,
    Track,
    TrackletRecord,
    apply_region_mask,
    generate_synthetic_dataset,
    load_dataset,
    occlusions_from_json,
    occlusions_to_json,
    region_band,
    region_bands,
    sample_track,
)


def make_frame(h=8, w=8, value=None, rng=None, identity=0, camera=0, index=0):
    if value is not None:
        pixels = np.full((3, h, w), value, dtype=np.float32)
    else:
        rng = rng or np.random.default_rng(0)
        pixels = rng.random((3, h, w), dtype=np.float32)
    return Frame(pixels=pixels, identity=identity, camera=camera, index=index)


class TestRegionBands:
    def test_divisible_height(self):
        assert region_bands(48) == ((0, 16), (16, 32), (32, 48))

    def test_remainder_goes_to_lower_band(self):
        assert region_bands(64) == ((0, 21), (21, 42), (42, 64))

    def test_band_lookup_by_region(self):
        assert region_band(Region.MIDDLE, 64) == (21, 42)

    def test_too_small(self):
        with pytest.raises(ValueError):
            region_bands(2)


class TestFrame:
    def test_rejects_non_multiple_of_four(self):
        with pytest.raises(ValueError):
            make_frame(h=6, w=8)

    def test_rejects_bad_channel_count(self):
        with pytest.raises(ValueError):
            Frame(pixels=np.zeros((1, 8, 8), dtype=np.float32), identity=0, camera=0, index=0)


class TestRegionMask:
    def test_banded_masks_partition_the_frame(self):
        total = sum(RegionMask.banded(r, 64, 32).mask for r in REGIONS)
        assert np.array_equal(total, np.ones((64, 32), dtype=np.uint8))

    def test_validate_rejects_off_band_pixels(self):
        m = RegionMask.banded(Region.UPPER, 64, 32)
        bad = m.mask.copy()
        bad[63, 0] = 1
        with pytest.raises(ValueError):
            RegionMask(region=Region.UPPER, mask=bad).validate()


class TestApplyRegionMask:
    def test_zero_mask_is_identity(self):
        frame = make_frame()
        mask = RegionMask(region=Region.UPPER, mask=np.zeros((8, 8), dtype=np.uint8))
        out = apply_region_mask(frame, mask)
        assert np.array_equal(out.pixels, frame.pixels)

    def test_full_mask_zeroes_frame(self):
        frame = make_frame()
        mask = RegionMask(region=Region.UPPER, mask=np.ones((8, 8), dtype=np.uint8))
        out = apply_region_mask(frame, mask)
        assert np.array_equal(out.pixels, np.zeros_like(frame.pixels))

    def test_middle_band_on_constant_frame(self):
        frame = make_frame(h=64, w=32, value=0.5)
        out = apply_region_mask(frame, RegionMask.banded(Region.MIDDLE, 64, 32))
        # band definition: rows 21..41 inclusive for H=64
        for row in range(64):
            expected = 0.0 if 21 <= row < 42 else 0.5
            assert np.all(out.pixels[:, row, :] == expected), row

    def test_input_not_mutated(self):
        frame = make_frame()
        before = frame.pixels.copy()
        apply_region_mask(frame, RegionMask.banded(Region.LOWER, 8, 8))
        assert np.array_equal(frame.pixels, before)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            apply_region_mask(make_frame(h=8, w=8), RegionMask.banded(Region.UPPER, 16, 8))

    @given(
        h=st.sampled_from([8, 12, 16]),
        w=st.sampled_from([8, 12]),
        region=st.sampled_from(list(REGIONS)),
        seed=st.integers(0, 2**31 - 1),
    )
    @settings(max_examples=40, deadline=None)
    def test_masked_output_equals_elementwise_product(self, h, w, region, seed):
        frame = make_frame(h=h, w=w, rng=np.random.default_rng(seed))
        mask = RegionMask.banded(region, h, w)
        out = apply_region_mask(frame, mask)
        expected = frame.pixels * (1 - mask.mask)[None].astype(np.float32)
        assert np.array_equal(out.pixels, expected)


class TestTrack:
    def test_rejects_mixed_identity(self):
        with pytest.raises(ValueError):
            Track(frames=(make_frame(identity=0, index=0), make_frame(identity=1, index=1)))

    def test_rejects_non_increasing_indices(self):
        with pytest.raises(ValueError):
            Track(frames=(make_frame(index=1), make_frame(index=1)))

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Track(frames=())


class TestSampleTrack:
    def _track(self, n):
        return Track(frames=tuple(make_frame(index=i, rng=np.random.default_rng(i)) for i in range(n)))

    def test_exact_length_uses_whole_track(self):
        track = self._track(4)
        out = sample_track(track, 4, np.random.default_rng(0))
        for got, orig in zip(out.frames, track.frames):
            assert np.array_equal(got.pixels, orig.pixels)

    def test_short_track_repeats_cyclically(self):
        track = self._track(2)
        out = sample_track(track, 4, np.random.default_rng(0))
        assert out.length == 4
        for i, src in enumerate([0, 1, 0, 1]):
            assert np.array_equal(out.frames[i].pixels, track.frames[src].pixels)

    def test_rejects_bad_length(self):
        with pytest.raises(ValueError):
            sample_track(self._track(4), 0, np.random.default_rng(0))

    def test_offsets_are_uniform(self):
        # 16-frame track, 4-frame samples: offsets must be uniform on {0..12}
        track = self._track(16)
        rng = np.random.default_rng(123)
        counts = np.zeros(13, dtype=int)
        lookup = {track.frames[i].pixels.tobytes(): i for i in range(16)}
        for _ in range(10_000):
            out = sample_track(track, 4, rng)
            counts[lookup[out.frames[0].pixels.tobytes()]] += 1
        assert counts.sum() == 10_000
        _, p = chisquare(counts)
        assert p > 0.01


class TestSyntheticGeneration:
    def test_empty_config_produces_no_image_files(self, tmp_path):
        manifest = generate_synthetic_dataset(SynthConfig(root=tmp_path / "d", identities=0))
        assert manifest.tracklets == [] and manifest.occlusions == []
        assert list((tmp_path / "d").rglob("*.png")) == []

    def test_rejects_bad_frame_size(self, tmp_path):
        with pytest.raises(ValueError):
            generate_synthetic_dataset(SynthConfig(root=tmp_path, identities=1, height=66))

    def _digest(self, root: Path) -> dict:
        return {
            str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*"))
            if p.is_file()
        }

    def test_deterministic_given_seed(self, tmp_path):
        cfg = dict(identities=3, tracklets_per_identity=2, frames_per_tracklet=6, seed=9)
        generate_synthetic_dataset(SynthConfig(root=tmp_path / "a", **cfg))
        generate_synthetic_dataset(SynthConfig(root=tmp_path / "b", **cfg))
        assert self._digest(tmp_path / "a") == self._digest(tmp_path / "b")

    def test_occlusion_rate_matches_config(self, tmp_path):
        cfg = SynthConfig(
            root=tmp_path / "d",
            identities=20,
            tracklets_per_identity=4,
            frames_per_tracklet=16,
            occlusion_rate=0.25,
            seed=3,
        )
        manifest = generate_synthetic_dataset(cfg)
        total = 20 * 4 * 16
        flagged = {(r.tracklet_id, r.frame_index) for r in manifest.occlusions}
        fraction = len(flagged) / total
        assert 0.20 <= fraction <= 0.30

    def test_occluded_pixels_differ_from_clean_rendering(self, tmp_path):
        cfg = SynthConfig(root=tmp_path / "d", identities=4, tracklets_per_identity=2, seed=5)
        manifest = generate_synthetic_dataset(cfg)
        assert manifest.occlusions, "expected some occlusions at the default rate"
        dataset = load_dataset(tmp_path / "d")
        for rec in manifest.occlusions[:10]:
            clean = dataset.clean_frame(rec.tracklet_id, rec.frame_index)
            assert clean is not None
            occluded = dataset.tracks[rec.tracklet_id].frames[rec.frame_index]
            lo, hi = region_band(rec.region, clean.height)
            band_diff = occluded.pixels[:, lo:hi] != clean.pixels[:, lo:hi]
            assert band_diff.any(axis=0).mean() >= 0.9

    def test_occlusions_are_contiguous_runs(self, tmp_path):
        cfg = SynthConfig(root=tmp_path / "d", identities=6, seed=2)
        manifest = generate_synthetic_dataset(cfg)
        by_track: dict[int, list[int]] = {}
        for r in manifest.occlusions:
            by_track.setdefault(r.tracklet_id, []).append(r.frame_index)
        assert by_track
        for frames in by_track.values():
            frames = sorted(frames)
            run = 1
            runs = []
            for a, b in zip(frames, frames[1:]):
                if b == a + 1:
                    run += 1
                else:
                    runs.append(run)
                    run = 1
            runs.append(run)
            assert all(r >= 2 for r in runs)


class TestLoadDataset:
    def test_round_trip_identity_count(self, tmp_path):
        cfg = SynthConfig(root=tmp_path / "d", identities=5, tracklets_per_identity=2)
        generate_synthetic_dataset(cfg)
        dataset = load_dataset(tmp_path / "d")
        assert dataset.num_identities == 5
        assert len(dataset.tracks) == 10

    def test_missing_file_error_names_the_file(self, tmp_path):
        cfg = SynthConfig(root=tmp_path / "d", identities=2, tracklets_per_identity=1)
        manifest = generate_synthetic_dataset(cfg)
        victim = Path(tmp_path / "d") / manifest.tracklets[0].frames[3]
        victim.unlink()
        with pytest.raises(FileNotFoundError, match="frame_0003.png"):
            load_dataset(tmp_path / "d")

    def test_png_round_trip_is_lossless(self, tmp_path):
        rng = np.random.default_rng(7)
        arr = rng.integers(0, 256, size=(16, 8, 3), dtype=np.uint8)
        root = tmp_path / "d"
        rel = "0000/0_0000/frame_0000.png"
        path = root / rel
        path.parent.mkdir(parents=True)
        Image.fromarray(arr, "RGB").save(path)
        DatasetManifest(
            root=root,
            tracklets=[TrackletRecord(tracklet_id=0, identity=0, camera=0, split="train", frames=[rel])],
        ).save()
        dataset = load_dataset(root)
        decoded = dataset.tracks[0].frames[0].pixels
        expected = arr.astype(np.float32).transpose(2, 0, 1) / 255.0
        assert np.array_equal(decoded, expected)

    def test_loading_is_pure_function_of_disk(self, tmp_path):
        cfg = SynthConfig(root=tmp_path / "d", identities=2, tracklets_per_identity=1, frames_per_tracklet=4)
        generate_synthetic_dataset(cfg)
        a = load_dataset(tmp_path / "d")
        b = load_dataset(tmp_path / "d")
        for tid in a.tracks:
            for fa, fb in zip(a.tracks[tid].frames, b.tracks[tid].frames):
                assert np.array_equal(fa.pixels, fb.pixels)

    def test_split_materialized_from_manifest(self, tmp_path):
        cfg = SynthConfig(root=tmp_path / "d", identities=6, tracklets_per_identity=4, cameras=2)
        generate_synthetic_dataset(cfg)
        dataset = load_dataset(tmp_path / "d")
        train = dataset.split_ids("train")
        query = dataset.split_ids("query")
        gallery = dataset.split_ids("gallery")
        assert len(train) + len(query) + len(gallery) == 24
        train_ids = {dataset.tracks[t].identity for t in train}
        test_ids = {dataset.tracks[t].identity for t in query + gallery}
        assert train_ids.isdisjoint(test_ids)
        # every query identity must have a gallery tracklet somewhere
        gallery_ids = {dataset.tracks[t].identity for t in gallery}
        assert {dataset.tracks[t].identity for t in query} <= gallery_ids


class TestOcclusionSerialization:
    def test_round_trip(self):
        records = [OcclusionRecord(3, 1, Region.LOWER), OcclusionRecord(0, 5, Region.UPPER)]
        triples = occlusions_to_json(records)
        assert triples == [[3, 1, "lower"], [0, 5, "upper"]]
        assert occlusions_from_json(json.loads(json.dumps(triples))) == records
