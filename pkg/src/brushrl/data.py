"""Dataset ingestion and synthetic dataset generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .envs import (
    PaintAction,
    PaintEnv,
    PaintSpec,
    Scene,
    SceneObject,
    SceneSpec,
    STROKE,
    blank_canvas,
    scene_render,
)

IDX_IMAGES_MAGIC = 0x00000803


@dataclass
class Dataset:
    """Indexed collection of canvases with an origin descriptor."""

    items: list[np.ndarray]
    source: str = ""
    programs: list | None = None  # generating actions/traces, when known
    locations: list | None = None  # grid coordinates for the circles set

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]

    def sample(self, n: int, rng: np.random.Generator) -> list[np.ndarray]:
        idx = rng.integers(len(self.items), size=n)
        return [self.items[i] for i in idx]

    def shuffled_indices(self, rng: np.random.Generator) -> np.ndarray:
        return rng.permutation(len(self.items))


def _nearest_resize(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = (np.arange(size) * h // size).clip(0, h - 1)
    cols = (np.arange(size) * w // size).clip(0, w - 1)
    return img[rows][:, cols]


def load_idx(path, size: int = 64) -> Dataset:
    """Decode an IDX image file into float canvases in [0, 1].

    Images are resized with nearest-neighbor to ``size`` x ``size`` and kept
    single-channel.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise ValueError(f"truncated IDX header in {path}")
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"bad IDX magic 0x{magic:08x} in {path}")
    need = 16 + count * rows * cols
    if len(blob) < need:
        raise ValueError(f"truncated IDX payload in {path}: {len(blob)} < {need}")
    raw = np.frombuffer(blob, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = raw.reshape(count, rows, cols).astype(np.float32) / 255.0
    items = [
        np.ascontiguousarray(_nearest_resize(img, size)[:, :, None]) for img in images
    ]
    return Dataset(items, source=f"idx:{path}")


def gen_circles(spec_size: int = 64, grid: int = 8, radius: float | None = None, channels: int = 1) -> Dataset:
    """One solid disc per location on a grid; a toy set for critic-surface demos."""
    radius = radius if radius is not None else spec_size / (2.5 * grid)
    yy, xx = np.mgrid[0:spec_size, 0:spec_size]
    items, locations = [], []
    cell = spec_size / grid
    for r in range(grid):
        for c in range(grid):
            cy, cx = (r + 0.5) * cell, (c + 0.5) * cell
            mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= radius * radius
            canvas = blank_canvas(spec_size, channels)
            canvas[mask] = 1.0
            items.append(canvas)
            locations.append((r, c))
    return Dataset(items, source=f"circles:{grid}x{grid}", locations=locations)


def random_paint_action(spec: PaintSpec, rng: np.random.Generator, kind: int = STROKE) -> PaintAction:
    return PaintAction(
        control_point=int(rng.integers(spec.locations)),
        end_point=int(rng.integers(spec.locations)),
        pressure=int(rng.integers(spec.pressure_levels)),
        brush_size=int(rng.integers(spec.brush_sizes)),
        red=int(rng.integers(spec.color_bins)) if spec.color else 0,
        green=int(rng.integers(spec.color_bins)) if spec.color else 0,
        blue=int(rng.integers(spec.color_bins)) if spec.color else 0,
        kind=kind,
    )


def gen_single_stroke(spec: PaintSpec, count: int, seed: int = 0) -> Dataset:
    """Renders of one-stroke programs; the program is retained per item."""
    rng = np.random.default_rng(seed)
    items, programs = [], []
    env = PaintEnv(spec)
    for _ in range(count):
        action = random_paint_action(spec, rng, kind=STROKE)
        env.reset()
        canvas = env.step(action)
        items.append(canvas.copy())
        programs.append([action])
    return Dataset(items, source=f"single_stroke:{count}", programs=programs)


def replay_paint_program(program, spec: PaintSpec) -> np.ndarray:
    env = PaintEnv(spec)
    canvas = env.reset()
    for action in program:
        canvas = env.step(action)
    return canvas


def gen_tiny_scenes(spec: SceneSpec, count: int, seed: int = 0, max_objects: int | None = None) -> Dataset:
    """Renders of random scenes with their traces retained."""
    rng = np.random.default_rng(seed)
    cap = max_objects if max_objects is not None else spec.max_objects
    items, programs = [], []
    for _ in range(count):
        n = int(rng.integers(cap + 1))
        objects = [
            SceneObject(
                int(rng.integers(spec.object_types)),
                int(rng.integers(spec.grid_size**2)),
                int(rng.integers(spec.sizes)),
                tuple(int(x) for x in rng.integers(spec.color_bins, size=3)),
            )
            for _ in range(n)
        ]
        scene = Scene(spec, objects)
        items.append(scene_render(scene))
        programs.append(objects)
    return Dataset(items, source=f"tiny_scenes:{count}", programs=programs)


def gen_toy_dataset(kind: str, seed: int = 0, **kwargs) -> Dataset:
    if kind == "circles":
        return gen_circles(**kwargs)
    if kind == "single_stroke":
        spec = kwargs.pop("spec", PaintSpec(canvas_size=16, grid_size=16, color=False, episode_len=3))
        return gen_single_stroke(spec, kwargs.pop("count", 64), seed=seed)
    if kind == "tiny_scenes":
        spec = kwargs.pop("spec", SceneSpec())
        return gen_tiny_scenes(spec, kwargs.pop("count", 64), seed=seed, **kwargs)
    raise ValueError(f"unknown toy dataset kind {kind!r}")
