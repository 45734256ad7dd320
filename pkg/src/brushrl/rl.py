"""Reward assembly, returns and the advantage actor-critic loss.

The terminal reward is either a critic score of the final render or the
negated Euclidean distance to a target; small auxiliary penalties (stroke
starts, blank canvases, color-histogram transport distance) can be mixed in.
Returns are undiscounted suffix sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .envs import JUMP, STROKE, PaintAction

CRITIC = "critic"
L2 = "l2"


@dataclass
class RewardConfig:
    terminal_source: str = CRITIC
    stroke_start_penalty: float = 0.0
    blank_canvas_penalty: float = 0.0
    color_emd_weight: float = 0.0
    entropy_coefficient: float = 0.0

    def __post_init__(self):
        if self.terminal_source not in (CRITIC, L2):
            raise ValueError(f"unknown terminal source {self.terminal_source!r}")
        if self.stroke_start_penalty > 0 or self.blank_canvas_penalty > 0:
            raise ValueError("penalties must be non-positive")
        if self.color_emd_weight < 0 or self.entropy_coefficient < 0:
            raise ValueError("weights must be non-negative")


@dataclass
class TrajectoryStep:
    action: object
    log_probs: list[float]
    entropy: float
    value: float
    render: np.ndarray


@dataclass
class Trajectory:
    steps: list[TrajectoryStep] = field(default_factory=list)
    final_render: np.ndarray | None = None
    condition: np.ndarray | None = None
    policy_version: int = 0
    seq: int = 0

    def __len__(self):
        return len(self.steps)


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(((a.astype(np.float64) - b.astype(np.float64)) ** 2).sum()))


def color_histogram(canvas: np.ndarray, bins: int = 20) -> np.ndarray:
    """Per-channel histograms over pixel values, rows normalized to 1."""
    channels = canvas.shape[2]
    out = np.zeros((channels, bins), dtype=np.float64)
    for c in range(channels):
        hist, _ = np.histogram(canvas[:, :, c], bins=bins, range=(0.0, 1.0))
        out[c] = hist / max(hist.sum(), 1)
    return out


def emd_1d(hist_a: np.ndarray, hist_b: np.ndarray) -> float:
    """Exact 1-D optimal transport with unit ground distance per bin."""
    a = np.asarray(hist_a, dtype=np.float64)
    b = np.asarray(hist_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"histogram shapes differ: {a.shape} vs {b.shape}")
    sa, sb = a.sum(), b.sum()
    if sa <= 0 or sb <= 0:
        raise ValueError("all-zero histogram")
    a = a / sa
    b = b / sb
    return float(np.abs(np.cumsum(a - b)).sum())


def _stroke_start_count(actions) -> int:
    count = 0
    previous_was_stroke = False
    for action in actions:
        if isinstance(action, PaintAction):
            if action.kind == STROKE and not previous_was_stroke:
                count += 1
            previous_was_stroke = action.kind == STROKE
        else:
            previous_was_stroke = False
    return count


def assemble_rewards(traj: Trajectory, cfg: RewardConfig, critic=None) -> np.ndarray:
    """Per-step rewards: auxiliary penalties plus the terminal score.

    ``critic`` is a callable (final_render, condition) -> float and is
    required when the terminal source is the critic.
    """
    n = len(traj)
    if n == 0 or traj.final_render is None:
        raise ValueError("trajectory incomplete")
    rewards = np.zeros(n, dtype=np.float64)

    if cfg.stroke_start_penalty != 0.0:
        previous_was_stroke = False
        for t, step in enumerate(traj.steps):
            action = step.action
            if isinstance(action, PaintAction):
                if action.kind == STROKE and not previous_was_stroke:
                    rewards[t] += cfg.stroke_start_penalty
                previous_was_stroke = action.kind == STROKE

    if cfg.terminal_source == CRITIC:
        if critic is None:
            raise ValueError("terminal source is the critic but no critic was given")
        rewards[-1] += float(critic(traj.final_render, traj.condition))
    else:
        if traj.condition is None:
            raise ValueError("l2 terminal reward needs a condition image")
        rewards[-1] += -l2_distance(traj.final_render, traj.condition)

    if cfg.blank_canvas_penalty != 0.0:
        if not np.any(traj.final_render != np.zeros_like(traj.final_render)):
            rewards[-1] += cfg.blank_canvas_penalty

    if cfg.color_emd_weight > 0.0 and traj.condition is not None:
        ha = color_histogram(traj.final_render)
        hb = color_histogram(traj.condition)
        dist = float(np.mean([emd_1d(ha[c], hb[c]) for c in range(ha.shape[0])]))
        rewards[-1] -= cfg.color_emd_weight * dist

    return rewards


def compute_returns(rewards: np.ndarray) -> np.ndarray:
    """Undiscounted suffix sums R_t = sum_{k>=t} r_k."""
    return np.cumsum(np.asarray(rewards, dtype=np.float64)[::-1])[::-1].copy()


def a2c_loss(log_probs, values, entropies, returns, cfg: RewardConfig, value_loss_weight: float = 0.5):
    """Policy-gradient loss over one batch of steps.

    ``log_probs`` is a list (per step) of lists of per-sub-action entries,
    ``values`` and ``entropies`` lists of per-step entries.  Entries may be
    scalar or batched, Tensors (gradients flow) or plain arrays.  The
    advantage is treated as a constant.  Returns (policy_loss, value_loss,
    entropy_bonus, total).
    """
    if not (len(log_probs) == len(values) == len(entropies) == len(returns)):
        raise ValueError(
            f"length mismatch: {len(log_probs)} log-probs, {len(values)} values, "
            f"{len(entropies)} entropies, {len(returns)} returns"
        )

    def as_tensor(x):
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    policy_terms = []
    value_terms = []
    entropy_terms = []
    for lps, value, entropy, ret in zip(log_probs, values, entropies, returns):
        v = as_tensor(value)
        ret_arr = np.asarray(ret, dtype=np.float64).reshape(v.data.shape)
        advantage = ret_arr - np.asarray(v.data, dtype=np.float64)  # stop-gradient
        step_lp = None
        for lp in lps:
            lp = as_tensor(lp)
            step_lp = lp if step_lp is None else ad.add(step_lp, lp)
        policy_terms.append(ad.mul(step_lp, Tensor(-advantage.reshape(step_lp.shape))))
        diff = ad.add(v, Tensor(-ret_arr))
        value_terms.append(ad.mul(diff, diff))
        entropy_terms.append(as_tensor(entropy))

    def total_of(terms):
        out = terms[0]
        for t in terms[1:]:
            out = ad.add(out, t)
        return ad.tsum(out)

    policy_loss = total_of(policy_terms)
    value_loss = total_of(value_terms)
    entropy_bonus = ad.mul(total_of(entropy_terms), -cfg.entropy_coefficient)
    total = ad.add(ad.add(policy_loss, ad.mul(value_loss, value_loss_weight)), entropy_bonus)
    return policy_loss, value_loss, entropy_bonus, total
