"""Wasserstein critic objectives and the analytic distance-critic checks.

The critic loss is mean(fake) - mean(real) plus a soft Lipschitz penalty on
interpolates and a zero-centering term that pins the average score of a
mixed real/fake batch near zero.  When the data distribution is a point
mass, the Euclidean distance to the target is itself an optimal critic; the
identity check and the circle-surface demo exercise that fact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .envs import save_ppm

GP_LAMBDA = 10.0
CENTERING_WEIGHT = 1e-3


@dataclass
class CriticLossReport:
    wasserstein_gap: float
    gradient_penalty: float
    centering: float
    total: float


def critic_loss(real_scores, fake_scores, penalty: float = 0.0, center: float = 0.0) -> CriticLossReport:
    real = np.asarray(real_scores, dtype=np.float64)
    fake = np.asarray(fake_scores, dtype=np.float64)
    if real.size == 0 or fake.size == 0:
        raise ValueError("empty score batch")
    gap = float(fake.mean() - real.mean())
    return CriticLossReport(gap, float(penalty), float(center), gap + float(penalty) + float(center))


def generator_objective(fake_scores) -> float:
    fake = np.asarray(fake_scores, dtype=np.float64)
    if fake.size == 0:
        raise ValueError("empty score batch")
    return float(-fake.mean())


def zero_center_penalty(mixed_scores: Tensor, weight: float = CENTERING_WEIGHT) -> Tensor:
    mean = ad.tmean(mixed_scores)
    return ad.mul(ad.mul(mean, mean), weight)


def gradient_penalty(
    disc_fn,
    real_batch: Tensor,
    fake_batch: Tensor,
    lam: float = GP_LAMBDA,
    rng: np.random.Generator | None = None,
    one_sided: bool = False,
) -> Tensor:
    """Soft Lipschitz penalty on interpolates between real and fake batches.

    ``disc_fn`` maps a (B, ...) tensor to (B,) scores through the graph.  The
    returned tensor stays differentiable w.r.t. the critic parameters (the
    input gradient is taken with ``create_graph``).
    """
    if real_batch.shape != fake_batch.shape:
        raise ad.ShapeError(
            f"real/fake batch shapes differ: {real_batch.shape} vs {fake_batch.shape}"
        )
    rng = rng or np.random.default_rng()
    batch = real_batch.shape[0]
    eps_shape = (batch,) + (1,) * (len(real_batch.shape) - 1)
    eps = rng.random(eps_shape)
    mix = eps * real_batch.data + (1.0 - eps) * fake_batch.data
    x_hat = Tensor(np.asarray(mix, dtype=real_batch.dtype), requires_grad=True)
    scores = disc_fn(x_hat)
    (gx,) = ad.grad(scores, [x_hat], grad_output=Tensor(np.ones_like(scores.data)), create_graph=True)
    sq = ad.tsum(ad.reshape(ad.mul(gx, gx), (batch, int(np.prod(gx.shape[1:])))), axis=1)
    norms = ad.sqrt(ad.add(sq, 1e-12))
    excess = ad.add(norms, -1.0)
    if one_sided:
        excess = ad.relu(excess)
    return ad.mul(ad.tmean(ad.mul(excess, excess)), lam)


def l2_reward(final: np.ndarray, target: np.ndarray) -> float:
    """Negated Euclidean pixel distance (larger is better)."""
    if final.shape != target.shape:
        raise ValueError(f"shape mismatch: {final.shape} vs {target.shape}")
    return -float(np.sqrt(((final.astype(np.float64) - target.astype(np.float64)) ** 2).sum()))


def optimal_d_identity_check(target: np.ndarray, fake_batch) -> tuple[float, float, float]:
    """Check that the distance critic attains the known optimal loss value.

    With D(x) = ||x - target||_2, no penalty (distance is 1-Lipschitz) and no
    centering, the critic loss equals the mean distance of the fake batch to
    the target.  Returns (lhs, rhs, abs_diff).
    """
    distances = [
        float(np.sqrt(((x.astype(np.float64) - target.astype(np.float64)) ** 2).sum()))
        for x in fake_batch
    ]
    report = critic_loss([0.0], distances, penalty=0.0, center=0.0)
    lhs = report.total
    rhs = float(np.mean(distances))
    return lhs, rhs, abs(lhs - rhs)


def distance_critic(target: np.ndarray):
    """D(x) = ||x - target||_2 as a graph function over (B, C, H, W) input."""
    flat_target = np.transpose(target, (2, 0, 1))[None]

    def disc_fn(x: Tensor) -> Tensor:
        diff = ad.add(x, Tensor(-flat_target.astype(np.float64)))
        batch = x.shape[0]
        sq = ad.tsum(ad.reshape(ad.mul(diff, diff), (batch, int(np.prod(x.shape[1:])))), axis=1)
        return ad.sqrt(ad.add(sq, 1e-300))

    return disc_fn


def disc_surface_demo(
    circle_images: list[np.ndarray],
    circle_locations: list[tuple[int, int]],
    target_index: int,
    disc_score_fn,
    out_dir,
) -> dict:
    """Emit distance and critic score fields over circle locations.

    ``disc_score_fn(image, target)`` returns the trained critic's scalar.
    Writes ``l2_surface.csv``, ``disc_surface.csv`` and PPM heat maps; returns
    both fields plus the overlap mask against the target circle.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = circle_images[target_index]
    rows = max(r for r, _ in circle_locations) + 1
    cols = max(c for _, c in circle_locations) + 1
    l2_field = np.zeros((rows, cols))
    disc_field = np.zeros((rows, cols))
    overlap = np.zeros((rows, cols), dtype=bool)
    background = float(np.bincount((target.reshape(-1) * 255).astype(int)).argmax()) / 255.0
    target_mask = np.any(np.abs(target - background) > 1e-6, axis=2)
    for img, (r, c) in zip(circle_images, circle_locations):
        l2_field[r, c] = float(np.sqrt(((img.astype(np.float64) - target.astype(np.float64)) ** 2).sum()))
        disc_field[r, c] = float(disc_score_fn(img, target))
        mask = np.any(np.abs(img - background) > 1e-6, axis=2)
        overlap[r, c] = bool(np.any(mask & target_mask))
    for name, fieldv in (("l2_surface", l2_field), ("disc_surface", disc_field)):
        with open(out_dir / f"{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "col", "value"])
            for (r, c), v in np.ndenumerate(fieldv):
                writer.writerow([r, c, f"{v:.9g}"])
        lo, hi = fieldv.min(), fieldv.max()
        norm = (fieldv - lo) / (hi - lo) if hi > lo else np.zeros_like(fieldv)
        save_ppm(norm[:, :, None].astype(np.float32), out_dir / f"{name}.ppm")
    return {"l2": l2_field, "disc": disc_field, "overlap": overlap}
