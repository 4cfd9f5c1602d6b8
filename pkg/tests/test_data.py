import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glovid import data


def _dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestContainer:
    def test_round_trip(self, tmp_path):
        frames = np.random.default_rng(0).integers(
            0, 256, size=(4, 8, 6, 3), dtype=np.uint8)
        path = tmp_path / "clip.glbv"
        data.write_video_container(path, frames, label=5)
        back, label = data.read_video_container(path)
        assert label == 5
        assert np.array_equal(back, frames)

    def test_layout_is_bit_exact(self, tmp_path):
        frames = np.arange(2 * 2 * 2 * 3, dtype=np.uint8).reshape(2, 2, 2, 3)
        path = tmp_path / "clip.glbv"
        data.write_video_container(path, frames, label=7)
        raw = path.read_bytes()
        assert raw[:4] == b"GLBV"
        f, h, w, c, label = np.frombuffer(raw[4:24], dtype="<u4")
        assert (f, h, w, c, label) == (2, 2, 2, 3, 7)
        assert raw[24:] == frames.tobytes()

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.glbv"
        path.write_bytes(b"NOPE" + b"\0" * 40)
        with pytest.raises(data.ContainerError):
            data.read_video_container(path)

    def test_rejects_truncation(self, tmp_path):
        frames = np.zeros((2, 4, 4, 3), dtype=np.uint8)
        path = tmp_path / "clip.glbv"
        data.write_video_container(path, frames, label=0)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(data.ContainerError):
            data.read_video_container(path)

    def test_rejects_trailing_garbage(self, tmp_path):
        frames = np.zeros((1, 4, 4, 3), dtype=np.uint8)
        path = tmp_path / "clip.glbv"
        data.write_video_container(path, frames, label=0)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(data.ContainerError):
            data.read_video_container(path)

    @given(f=st.integers(1, 3), h=st.integers(4, 9), w=st.integers(4, 9),
           label=st.integers(0, 7), seed=st.integers(0, 999))
    @settings(max_examples=25, deadline=None)
    def test_round_trip_property(self, tmp_path_factory, f, h, w, label, seed):
        frames = np.random.default_rng(seed).integers(
            0, 256, size=(f, h, w, 3), dtype=np.uint8)
        path = tmp_path_factory.mktemp("rt") / "clip.glbv"
        data.write_video_container(path, frames, label)
        back, got = data.read_video_container(path)
        assert got == label and np.array_equal(back, frames)


class TestSyntheticDataset:
    def test_same_seed_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        data.synth_dataset(a, 12, 8, 32, seed=9)
        data.synth_dataset(b, 12, 8, 32, seed=9)
        assert _dir_digest(a) == _dir_digest(b)

    def test_different_seed_differs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        data.synth_dataset(a, 4, 8, 32, seed=1)
        data.synth_dataset(b, 4, 8, 32, seed=2)
        assert _dir_digest(a) != _dir_digest(b)

    def test_video_count_and_manifest(self, tmp_path):
        entries = data.synth_dataset(tmp_path, 10, 8, 32, seed=0)
        assert len(entries) == 10
        files = list((tmp_path / "videos").glob("*.glbv"))
        assert len(files) == 10
        manifest = (tmp_path / "manifest.txt").read_text().strip().splitlines()
        assert len(manifest) == 10
        rel, label = manifest[3].rsplit(" ", 1)
        assert rel == "videos/00003.glbv"
        assert 0 <= int(label) < 8

    def test_centroid_direction_matches_label_everywhere(self, tmp_path):
        data.synth_dataset(tmp_path, 24, 16, 64, seed=5)
        ds = data.SpriteDataset(tmp_path)
        for k in range(len(ds)):
            video, label = ds[k]
            assert data.dominant_direction(video) == label

    def test_sprite_grows_over_time(self, tmp_path):
        data.synth_dataset(tmp_path, 6, 16, 64, seed=2)
        ds = data.SpriteDataset(tmp_path)
        for k in range(len(ds)):
            video, _ = ds[k]
            first = (video[0].sum(axis=-1) > 30).sum()
            last = (video[-1].sum(axis=-1) > 30).sum()
            assert last > first * 1.5

    def test_split_is_disjoint_and_total(self, tiny_dataset):
        train, val = tiny_dataset.split(0.25)
        assert sorted(train + val) == list(range(len(tiny_dataset)))
        assert len(val) == round(len(tiny_dataset) * 0.25)


class TestPixelConversion:
    def test_unit_round_trip_is_exact_for_uint8(self):
        frames = np.arange(256, dtype=np.uint8).reshape(1, 8, 8, 4)[..., :3]
        x = data.frames_to_unit(frames)
        assert x.shape == (1, 3, 8, frames.shape[2])
        back = data.unit_to_frames(x)
        assert np.array_equal(back, frames)

    def test_unit_range(self):
        frames = np.array([[[[0, 128, 255]]]], dtype=np.uint8)
        x = data.frames_to_unit(frames)
        assert float(x.min()) == pytest.approx(-1.0)
        assert float(x.max()) == pytest.approx(1.0)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_property(self, seed):
        frames = np.random.default_rng(seed).integers(
            0, 256, size=(2, 4, 4, 3), dtype=np.uint8)
        assert np.array_equal(data.unit_to_frames(data.frames_to_unit(frames)),
                              frames)


class TestCentroidOracle:
    def test_centroid_of_known_square(self):
        frame = np.zeros((32, 32, 3), dtype=np.uint8)
        frame[10:14, 20:24] = 200
        cx, cy = data.sprite_centroid(frame)
        assert cx == pytest.approx(21.5)
        assert cy == pytest.approx(11.5)

    def test_empty_frame_has_no_centroid(self):
        assert data.sprite_centroid(np.zeros((8, 8, 3), dtype=np.uint8)) is None

    @pytest.mark.parametrize("direction", range(8))
    def test_direction_recovery(self, direction):
        spec = data.SpriteVideoSpec(shape="circle", direction=direction,
                                    speed=2.0, color=(200, 80, 80),
                                    start=(32.0, 32.0), size=5.0)
        video = data.make_sprite_video(spec, 12, 64, 64)
        assert data.dominant_direction(video) == direction
