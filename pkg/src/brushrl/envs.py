"""Deterministic rendering environments.

Two step/reset state machines: a painting environment where each action lays
down (or skips) a quadratic Bezier stroke, and a scene environment where each
action adds, skips or edits a flat-shaded 2-D primitive.  Rendering is pure
and bit-reproducible; golden hashes are SHA-256 of the float buffer.

Canvases are (H, W, C) float32 arrays in [0, 1].
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

STROKE = 0
JUMP = 1

ADD = 0
SKIP = 1
CHANGE_LAST = 2


# ---------------------------------------------------------------------------
# canvases


def blank_canvas(size: int, channels: int, fill: float = 0.0) -> np.ndarray:
    return np.full((size, size, channels), fill, dtype=np.float32)


def canvas_hash(canvas: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(canvas, dtype="<f4").tobytes()).hexdigest()


def save_ppm(canvas: np.ndarray, path) -> None:
    """8-bit binary PPM (P6); grayscale canvases are replicated to RGB."""
    arr = np.clip(canvas, 0.0, 1.0)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"not a P6 PPM: {path}")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    raw = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    return (raw.reshape(h, w, 3).astype(np.float32)) / float(maxval)


def save_raw(canvas: np.ndarray, path) -> None:
    """Loss-free float dump: u32 H, W, C then little-endian float32 pixels."""
    h, w, c = canvas.shape
    with open(path, "wb") as fh:
        fh.write(np.array([h, w, c], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(canvas, dtype="<f4").tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    h, w, c = np.frombuffer(blob[:12], dtype="<u4")
    return np.frombuffer(blob[12:], dtype="<f4").reshape(h, w, c).copy()


# ---------------------------------------------------------------------------
# paint environment


@dataclass(frozen=True)
class PaintSpec:
    canvas_size: int = 64
    grid_size: int = 32
    color: bool = True
    color_bins: int = 20
    pressure_levels: int = 10
    brush_sizes: int = 4
    episode_len: int = 20

    @property
    def channels(self) -> int:
        return 3 if self.color else 1

    @property
    def locations(self) -> int:
        return self.grid_size * self.grid_size

    def sub_action_sizes(self) -> list[int]:
        sizes = [self.locations, self.locations, self.pressure_levels, self.brush_sizes]
        if self.color:
            sizes += [self.color_bins] * 3
        sizes.append(2)
        return sizes

    def cardinality(self) -> int:
        out = 1
        for s in self.sub_action_sizes():
            out *= s
        return out


@dataclass(frozen=True)
class PaintAction:
    control_point: int
    end_point: int
    pressure: int
    brush_size: int
    red: int = 0
    green: int = 0
    blue: int = 0
    kind: int = STROKE

    def to_indices(self, spec: PaintSpec) -> list[int]:
        idx = [self.control_point, self.end_point, self.pressure, self.brush_size]
        if spec.color:
            idx += [self.red, self.green, self.blue]
        idx.append(self.kind)
        return idx

    @staticmethod
    def from_indices(idx, spec: PaintSpec) -> "PaintAction":
        if spec.color:
            cp, ep, pr, bs, r, g, b, k = idx
        else:
            cp, ep, pr, bs, k = idx
            r = g = b = 0
        return PaintAction(cp, ep, pr, bs, r, g, b, k)

    def validate(self, spec: PaintSpec) -> None:
        sizes = spec.sub_action_sizes()
        for value, size in zip(self.to_indices(spec), sizes):
            if not 0 <= value < size:
                raise ValueError(f"sub-action {value} out of range [0,{size})")


def bezier_point(l_t, p_c, l_next, tau: float):
    """Quadratic Bezier interpolation between the brush endpoints."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0,1], got {tau}")
    a = (1.0 - tau) ** 2
    b = 2.0 * (1.0 - tau) * tau
    c = tau**2
    return (
        a * l_t[0] + b * p_c[0] + c * l_next[0],
        a * l_t[1] + b * p_c[1] + c * l_next[1],
    )


@dataclass
class PaintState:
    spec: PaintSpec
    canvas: np.ndarray
    brush_location: int = 0
    step_index: int = 0

    @staticmethod
    def initial(spec: PaintSpec) -> "PaintState":
        return PaintState(spec, blank_canvas(spec.canvas_size, spec.channels))


def _grid_to_pixel(idx: int, spec: PaintSpec) -> tuple[float, float]:
    row, col = divmod(idx, spec.grid_size)
    scale = spec.canvas_size / spec.grid_size
    return ((row + 0.5) * scale, (col + 0.5) * scale)


def _brush_radius(level: int, spec: PaintSpec) -> float:
    # kept above half a pixel so the smallest brush still marks the canvas
    return max((level + 1) * spec.canvas_size / 64.0, 0.71)


def _stroke_color(action: PaintAction, spec: PaintSpec) -> np.ndarray:
    if spec.color:
        bins = spec.color_bins
        return np.array(
            [(action.red + 0.5) / bins, (action.green + 0.5) / bins, (action.blue + 0.5) / bins],
            dtype=np.float32,
        )
    return np.array([1.0], dtype=np.float32)


def render_stroke(state: PaintState, action: PaintAction) -> np.ndarray:
    """Stamp the stroke onto a copy of the canvas and return it."""
    spec = state.spec
    p0 = _grid_to_pixel(state.brush_location, spec)
    pc = _grid_to_pixel(action.control_point, spec)
    p1 = _grid_to_pixel(action.end_point, spec)
    radius = _brush_radius(action.brush_size, spec)

    xs = (p0[0], pc[0], p1[0])
    ys = (p0[1], pc[1], p1[1])
    diag = math.hypot(max(xs) - min(xs), max(ys) - min(ys))
    samples = max(8, int(2 * diag))

    size = spec.canvas_size
    yy, xx = np.mgrid[0:size, 0:size]
    centers_y = np.empty(samples)
    centers_x = np.empty(samples)
    for i in range(samples):
        tau = i / (samples - 1)
        cy, cx = bezier_point(p0, pc, p1, tau)
        centers_y[i] = cy - 0.5
        centers_x[i] = cx - 0.5
    dy = yy[None, :, :] - centers_y[:, None, None]
    dx = xx[None, :, :] - centers_x[:, None, None]
    mask = ((dy * dy + dx * dx) <= radius * radius).any(axis=0)

    alpha = (action.pressure + 1) / 10.0
    color = _stroke_color(action, spec)
    out = state.canvas.copy()
    out[mask] = out[mask] * (1.0 - alpha) + color[None, :] * alpha
    np.clip(out, 0.0, 1.0, out=out)
    return out


class PaintEnv:
    """Stroke-painting environment with step/reset semantics."""

    def __init__(self, spec: PaintSpec):
        self.spec = spec
        self.state = PaintState.initial(spec)

    def reset(self) -> np.ndarray:
        self.state = PaintState.initial(self.spec)
        return self.state.canvas

    def clone(self) -> "PaintEnv":
        out = PaintEnv(self.spec)
        out.state = PaintState(
            self.spec, self.state.canvas.copy(), self.state.brush_location, self.state.step_index
        )
        return out

    def step(self, action: PaintAction) -> np.ndarray:
        st = self.state
        if st.step_index >= self.spec.episode_len:
            raise RuntimeError(
                f"episode already finished (t={st.step_index}, N={self.spec.episode_len})"
            )
        action.validate(self.spec)
        if action.kind == STROKE:
            canvas = render_stroke(st, action)
        else:
            canvas = st.canvas
        self.state = PaintState(self.spec, canvas, action.end_point, st.step_index + 1)
        return canvas

    @property
    def done(self) -> bool:
        return self.state.step_index >= self.spec.episode_len

    def cardinality(self) -> int:
        return self.spec.cardinality()


# ---------------------------------------------------------------------------
# scene environment


@dataclass(frozen=True)
class SceneSpec:
    canvas_size: int = 64
    grid_size: int = 16
    object_types: int = 4
    sizes: int = 3
    color_bins: int = 4
    max_objects: int = 20
    episode_len: int = 20
    background: float = 0.85

    @property
    def channels(self) -> int:
        return 3

    def sub_action_sizes(self) -> list[int]:
        return [
            3,  # verb
            self.object_types,
            self.grid_size * self.grid_size,
            self.sizes,
            self.color_bins,
            self.color_bins,
            self.color_bins,
        ]

    def cardinality(self) -> int:
        out = 1
        for s in self.sub_action_sizes():
            out *= s
        return out

    def trace_count(self) -> int:
        """Total execution traces over one episode (big integer)."""
        return self.cardinality() ** self.episode_len


@dataclass(frozen=True)
class SceneAction:
    verb: int
    object_type: int = 0
    location: int = 0
    size: int = 0
    red: int = 0
    green: int = 0
    blue: int = 0

    def to_indices(self) -> list[int]:
        return [self.verb, self.object_type, self.location, self.size, self.red, self.green, self.blue]

    @staticmethod
    def from_indices(idx) -> "SceneAction":
        return SceneAction(*idx)


@dataclass(frozen=True)
class SceneObject:
    object_type: int
    location: int
    size: int
    color: tuple[int, int, int]


@dataclass
class Scene:
    spec: SceneSpec
    objects: list[SceneObject] = field(default_factory=list)

    def copy(self) -> "Scene":
        return Scene(self.spec, list(self.objects))


def scene_step(scene: Scene, action: SceneAction) -> Scene:
    """Apply one add/skip/change command; always returns a new Scene."""
    out = scene.copy()
    if action.verb == SKIP:
        return out
    obj = SceneObject(
        action.object_type,
        action.location,
        action.size,
        (action.red, action.green, action.blue),
    )
    if action.verb == CHANGE_LAST:
        if out.objects:
            out.objects[-1] = obj
        return out
    if len(out.objects) >= scene.spec.max_objects:
        # saturating: at capacity an Add degrades to Skip
        return out
    out.objects.append(obj)
    return out


def _object_mask(obj: SceneObject, spec: SceneSpec) -> np.ndarray:
    size = spec.canvas_size
    cell = size / spec.grid_size
    row, col = divmod(obj.location, spec.grid_size)
    cy = (row + 0.5) * cell
    cx = (col + 0.5) * cell
    half = 0.5 * cell * (obj.size + 1)
    yy, xx = np.mgrid[0:size, 0:size]
    y = yy + 0.5 - cy
    x = xx + 0.5 - cx
    kind = obj.object_type % 4
    if kind == 0:  # square
        return (np.abs(y) <= half) & (np.abs(x) <= half)
    if kind == 1:  # circle
        return y * y + x * x <= half * half
    if kind == 2:  # triangle (upward)
        return (y <= half) & (y >= -half) & (np.abs(x) <= (y + half) / 2.0)
    # capsule: horizontal stadium
    r = half / 2.0
    dx = np.clip(np.abs(x) - half + r, 0.0, None)
    return dx * dx + y * y <= r * r


def scene_render(scene: Scene) -> np.ndarray:
    """Painter's-algorithm render: later objects cover earlier ones."""
    spec = scene.spec
    canvas = blank_canvas(spec.canvas_size, 3, fill=spec.background)
    bins = spec.color_bins
    for obj in scene.objects:
        mask = _object_mask(obj, spec)
        color = np.array([(c + 0.5) / bins for c in obj.color], dtype=np.float32)
        canvas[mask] = color
    return canvas


class SceneEnv:
    """Primitive-placement environment with step/reset semantics."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        self.scene = Scene(spec)
        self.step_index = 0

    def reset(self) -> np.ndarray:
        self.scene = Scene(self.spec)
        self.step_index = 0
        return scene_render(self.scene)

    def clone(self) -> "SceneEnv":
        out = SceneEnv(self.spec)
        out.scene = self.scene.copy()
        out.step_index = self.step_index
        return out

    def step(self, action: SceneAction) -> np.ndarray:
        if self.step_index >= self.spec.episode_len:
            raise RuntimeError(
                f"episode already finished (t={self.step_index}, N={self.spec.episode_len})"
            )
        self.scene = scene_step(self.scene, action)
        self.step_index += 1
        return scene_render(self.scene)

    @property
    def done(self) -> bool:
        return self.step_index >= self.spec.episode_len

    def cardinality(self) -> int:
        return self.spec.cardinality()


def action_space_cardinality(env) -> int:
    """Product of per-step sub-action cardinalities."""
    return env.cardinality()
