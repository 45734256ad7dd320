import struct

import numpy as np
import pytest

from brushrl.envs import PaintEnv, PaintSpec, SceneSpec, scene_render
from brushrl.data import (
    Dataset,
    gen_circles,
    gen_single_stroke,
    gen_tiny_scenes,
    gen_toy_dataset,
    load_idx,
    replay_paint_program,
)


def write_idx(path, images):
    images = np.asarray(images, np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, h, w))
        fh.write(images.tobytes())


class TestLoadIdx:
    def test_round_trip_values(self, tmp_path):
        imgs = np.zeros((2, 4, 4), np.uint8)
        imgs[0, 1, 2] = 255
        imgs[1, 0, 0] = 51
        path = tmp_path / "t.idx"
        write_idx(path, imgs)
        ds = load_idx(path, size=4)
        assert len(ds) == 2
        assert ds[0].shape == (4, 4, 1)
        assert ds[0][1, 2, 0] == 1.0
        assert ds[1][0, 0, 0] == pytest.approx(0.2)

    def test_resize(self, tmp_path):
        imgs = np.zeros((1, 2, 2), np.uint8)
        imgs[0, 0, 0] = 255
        path = tmp_path / "t.idx"
        write_idx(path, imgs)
        ds = load_idx(path, size=4)
        assert ds[0].shape == (4, 4, 1)
        assert ds[0][:2, :2, 0].min() == 1.0  # nearest-neighbor upsample
        assert ds[0][2:, 2:, 0].max() == 0.0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        path.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 2, 2) + b"\x00" * 4)
        with pytest.raises(ValueError, match="magic"):
            load_idx(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.idx"
        path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 4, 4) + b"\x00" * 10)
        with pytest.raises(ValueError, match="truncated"):
            load_idx(path)


class TestCircles:
    def test_count_and_locations(self):
        ds = gen_circles(spec_size=32, grid=4)
        assert len(ds) == 16
        assert ds.locations[0] == (0, 0)
        assert ds.locations[-1] == (3, 3)

    def test_distinct_images(self):
        ds = gen_circles(spec_size=32, grid=4)
        hashes = {img.tobytes() for img in ds.items}
        assert len(hashes) == 16

    def test_disc_is_painted(self):
        ds = gen_circles(spec_size=32, grid=4)
        for img in ds.items:
            assert img.max() == 1.0 and img.min() == 0.0

    def test_centers_track_grid(self):
        ds = gen_circles(spec_size=64, grid=8)
        for img, (r, c) in zip(ds.items, ds.locations):
            ys, xs = np.nonzero(img[:, :, 0])
            assert abs(ys.mean() - (r + 0.5) * 8) < 1.0
            assert abs(xs.mean() - (c + 0.5) * 8) < 1.0


class TestStrokePrograms:
    def test_program_replay_reproduces_item(self):
        spec = PaintSpec(canvas_size=16, grid_size=16, color=False, episode_len=3)
        ds = gen_single_stroke(spec, 8, seed=1)
        for img, program in zip(ds.items, ds.programs):
            np.testing.assert_array_equal(replay_paint_program(program, spec), img)

    def test_seed_reproducible(self):
        spec = PaintSpec(canvas_size=16, grid_size=16, color=False, episode_len=3)
        a = gen_single_stroke(spec, 4, seed=5)
        b = gen_single_stroke(spec, 4, seed=5)
        for x, y in zip(a.items, b.items):
            np.testing.assert_array_equal(x, y)


class TestSceneData:
    def test_trace_replay_reproduces_item(self):
        spec = SceneSpec(canvas_size=16, grid_size=4, max_objects=3, episode_len=3)
        ds = gen_tiny_scenes(spec, 6, seed=2)
        from brushrl.envs import Scene

        for img, objects in zip(ds.items, ds.programs):
            np.testing.assert_array_equal(scene_render(Scene(spec, list(objects))), img)


class TestDataset:
    def test_sample_respects_rng(self):
        ds = Dataset([np.full((2, 2, 1), i, np.float32) for i in range(5)])
        a = ds.sample(3, np.random.default_rng(0))
        b = ds.sample(3, np.random.default_rng(0))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_toy_dispatcher(self):
        assert gen_toy_dataset("circles", grid=2, spec_size=16).source.startswith("circles")
        with pytest.raises(ValueError):
            gen_toy_dataset("nope")
