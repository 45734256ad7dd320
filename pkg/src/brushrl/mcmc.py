"""Blocked Metropolis-Hastings scene inference and an exhaustive oracle.

A trace is a fixed number of blocks, one per potential object; a proposal
resamples every attribute of one uniformly chosen block (including its
presence flag), which makes the kernel symmetric.  Acceptance follows a
Gaussian image likelihood with fixed per-pixel variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .envs import Scene, SceneObject, SceneSpec, scene_render


@dataclass(frozen=True)
class Block:
    present: bool
    object_type: int = 0
    location: int = 0
    size: int = 0
    color: tuple[int, int, int] = (0, 0, 0)


def trace_to_scene(trace: list[Block], spec: SceneSpec) -> Scene:
    objects = [
        SceneObject(b.object_type, b.location, b.size, b.color)
        for b in trace
        if b.present
    ]
    return Scene(spec, objects)


def trace_energy(trace: list[Block], target: np.ndarray, spec: SceneSpec) -> float:
    render = scene_render(trace_to_scene(trace, spec))
    diff = render.astype(np.float64) - target.astype(np.float64)
    return float((diff * diff).sum())


@dataclass
class McmcState:
    trace: list[Block]
    energy: float
    best_trace: list[Block] = field(default_factory=list)
    best_energy: float = math.inf

    @staticmethod
    def initial(target: np.ndarray, spec: SceneSpec) -> "McmcState":
        trace = [Block(present=False) for _ in range(spec.max_objects)]
        energy = trace_energy(trace, target, spec)
        return McmcState(trace, energy, list(trace), energy)


def mh_acceptance(e_old: float, e_new: float, sigma2: float) -> float:
    """Acceptance probability under the Gaussian likelihood."""
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    return min(1.0, math.exp((e_old - e_new) / (2.0 * sigma2)))


def _random_block(spec: SceneSpec, rng: np.random.Generator, single_attribute_from: Block | None = None) -> Block:
    if single_attribute_from is not None:
        # alternative kernel: flip one attribute only
        b = single_attribute_from
        which = int(rng.integers(5))
        if which == 0:
            return Block(not b.present, b.object_type, b.location, b.size, b.color)
        if which == 1:
            return Block(b.present, int(rng.integers(spec.object_types)), b.location, b.size, b.color)
        if which == 2:
            return Block(b.present, b.object_type, int(rng.integers(spec.grid_size**2)), b.size, b.color)
        if which == 3:
            return Block(b.present, b.object_type, b.location, int(rng.integers(spec.sizes)), b.color)
        color = tuple(int(x) for x in rng.integers(spec.color_bins, size=3))
        return Block(b.present, b.object_type, b.location, b.size, color)
    return Block(
        present=bool(rng.integers(2)),
        object_type=int(rng.integers(spec.object_types)),
        location=int(rng.integers(spec.grid_size**2)),
        size=int(rng.integers(spec.sizes)),
        color=tuple(int(x) for x in rng.integers(spec.color_bins, size=3)),
    )


def mh_step(
    state: McmcState,
    target: np.ndarray,
    spec: SceneSpec,
    sigma2: float,
    rng: np.random.Generator,
    full_block: bool = True,
) -> McmcState:
    """One blocked proposal + accept/reject.  Rejection leaves state as-is."""
    block_idx = int(rng.integers(len(state.trace)))
    old_block = state.trace[block_idx]
    new_block = _random_block(spec, rng, None if full_block else old_block)
    proposal = list(state.trace)
    proposal[block_idx] = new_block
    e_new = trace_energy(proposal, target, spec)
    if rng.random() < mh_acceptance(state.energy, e_new, sigma2):
        state = McmcState(proposal, e_new, state.best_trace, state.best_energy)
    if state.energy < state.best_energy:
        state = McmcState(state.trace, state.energy, list(state.trace), state.energy)
    return state


def mh_infer(
    target: np.ndarray,
    spec: SceneSpec,
    iters: int,
    sigma2: float = 0.25,
    rng: np.random.Generator | None = None,
    full_block: bool = True,
    stop_at_zero: bool = False,
) -> tuple[list[Block], np.ndarray]:
    """Run the chain; returns (best trace, per-iteration best-energy curve)."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = rng or np.random.default_rng()
    state = McmcState.initial(target, spec)
    history = np.empty(iters, dtype=np.float64)
    for i in range(iters):
        state = mh_step(state, target, spec, sigma2, rng, full_block=full_block)
        history[i] = state.best_energy
        if stop_at_zero and state.best_energy == 0.0:
            history = history[: i + 1]
            break
    return state.best_trace, history


def brute_force_best_trace(
    target: np.ndarray, spec: SceneSpec, limit: int = 10_000_000
) -> tuple[list[Block], float]:
    """Exhaustive minimum-energy trace; ties broken by enumeration order."""
    per_block = 1 + spec.object_types * spec.grid_size**2 * spec.sizes * spec.color_bins**3
    total = per_block**spec.max_objects
    if total > limit:
        raise ValueError(f"search space {total} exceeds limit {limit}")
    options = [Block(present=False)]
    for ot, loc, size in product(
        range(spec.object_types), range(spec.grid_size**2), range(spec.sizes)
    ):
        for color in product(range(spec.color_bins), repeat=3):
            options.append(Block(True, ot, loc, size, color))
    best_trace, best_energy = None, math.inf
    for combo in product(options, repeat=spec.max_objects):
        e = trace_energy(list(combo), target, spec)
        if e < best_energy:
            best_trace, best_energy = list(combo), e
            if best_energy == 0.0:
                break
    return best_trace, best_energy
