"""Command-line entry points.

Subcommands: ``train`` (run the pipeline from a config file), ``reconstruct``
(conditional rollouts from a checkpoint with the program trace as text and
renders at native and 4x resolution), ``sample`` (unconditional rollouts),
``mcmc`` (the blocked sampler baseline), ``disc-surface`` (the analytic
critic-surface demo), ``gradcheck`` (finite-difference spot checks) and
``info`` (action-space cardinalities).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as config_mod
from .autodiff import Tensor
from .adversarial import disc_surface_demo, gradient_penalty
from .data import Dataset, gen_circles, gen_single_stroke, gen_tiny_scenes, load_idx
from .envs import (
    PaintAction,
    PaintEnv,
    PaintSpec,
    SceneAction,
    SceneEnv,
    SceneSpec,
    save_ppm,
)
from .mcmc import mh_infer, trace_energy
from .nets import Discriminator, Policy, disc_config, policy_config
from .params import Adam, load_paramset
from .pipeline import (
    Trainer,
    disc_learner_step,
    run_episode,
)
from .rl import CRITIC, RewardConfig


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _load_dataset(cfg: config_mod.RunConfig) -> Dataset:
    spec = cfg.env_spec()
    if cfg.dataset.startswith("idx:"):
        return load_idx(cfg.dataset[4:], size=cfg.canvas_size)
    if cfg.dataset == "circles":
        return gen_circles(spec_size=cfg.canvas_size, grid=max(2, cfg.canvas_size // 8),
                           channels=spec.channels)
    if cfg.dataset == "single_stroke":
        return gen_single_stroke(spec, 64, seed=cfg.seed)
    return gen_tiny_scenes(spec, 64, seed=cfg.seed)


def _prepare_run_dir(path: Path, force: bool) -> str | None:
    if path.exists() and any(path.iterdir()):
        if not force:
            return f"run directory {path} is not empty (use --force to reuse it)"
        return None
    path.mkdir(parents=True, exist_ok=True)
    return None


def _build_trainer(cfg: config_mod.RunConfig, run_dir: Path | None) -> Trainer:
    spec = cfg.env_spec()
    policy = Policy(
        policy_config(spec, cfg.preset, condition=cfg.condition, blind=cfg.blind),
        seed=cfg.seed,
    )
    disc = None
    if cfg.terminal_source == CRITIC:
        disc = Discriminator(disc_config(spec, cfg.preset, condition=cfg.condition), seed=cfg.seed + 1)
    return Trainer(
        spec,
        policy,
        cfg.reward_config(),
        _load_dataset(cfg),
        cfg.train_settings(),
        disc=disc,
        run_dir=run_dir,
        seed=cfg.seed,
    )


def cmd_train(args) -> int:
    try:
        cfg = config_mod.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.run_dir is not None:
            cfg.run_dir = args.run_dir
        if args.steps is not None:
            cfg.steps = args.steps
        cfg.validate()
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    run_dir = Path(cfg.run_dir)
    problem = _prepare_run_dir(run_dir, args.force)
    if problem:
        return _fail(problem)
    trainer = _build_trainer(cfg, run_dir)
    config_mod.save(cfg, run_dir / "config.toml")
    if cfg.threaded:
        trainer.run_threaded(cfg.steps)
    else:
        trainer.run_synchronous(cfg.steps, eval_every=cfg.eval_every)
    from .params import save_paramset

    save_paramset(trainer.policy.params, run_dir / "checkpoints" / "policy_final.ckpt")
    if trainer.disc is not None:
        save_paramset(trainer.disc.params, run_dir / "checkpoints" / "disc_final.ckpt")
    print(f"trained {cfg.steps} learner steps, {trainer.frames_seen} frames -> {run_dir}")
    return 0


def _format_action(action) -> str:
    pairs = [(f.name, getattr(action, f.name)) for f in dataclasses.fields(action)]
    return " ".join(f"{name}={value}" for name, value in pairs)


def _rollout_and_dump(policy, spec, condition, rng, out_dir: Path, stem: str) -> float:
    env = PaintEnv(spec) if isinstance(spec, PaintSpec) else SceneEnv(spec)
    traj = run_episode(policy, env, condition, rng)
    with open(out_dir / f"{stem}_trace.txt", "w") as fh:
        for step in traj.steps:
            fh.write(_format_action(step.action) + "\n")
    save_ppm(traj.final_render, out_dir / f"{stem}.ppm")
    if isinstance(spec, PaintSpec):
        # replay the same program on a 4x canvas; the grid-to-pixel mapping
        # scales with the canvas, so the strokes upsample exactly
        big_spec = dataclasses.replace(spec, canvas_size=spec.canvas_size * 4)
        big = PaintEnv(big_spec)
        big.reset()
        canvas = None
        for step in traj.steps:
            canvas = big.step(step.action)
        save_ppm(canvas, out_dir / f"{stem}_4x.ppm")
    if condition is not None:
        save_ppm(condition, out_dir / f"{stem}_target.ppm")
        return float(np.sqrt(((traj.final_render - condition) ** 2).sum()))
    return float("nan")


def cmd_reconstruct(args) -> int:
    try:
        cfg = config_mod.load(args.config)
        cfg.validate()
        params = load_paramset(args.checkpoint)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    spec = cfg.env_spec()
    policy = Policy(policy_config(spec, cfg.preset, condition=True, blind=cfg.blind), seed=cfg.seed)
    try:
        policy.params.load_values(params)
    except ValueError as exc:
        return _fail(f"checkpoint does not match the configured network: {exc}")
    dataset = _load_dataset(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        target = dataset.items[int(rng.integers(len(dataset)))]
        dist = _rollout_and_dump(policy, spec, target, rng, out_dir, f"recon_{i:03d}")
        print(f"recon_{i:03d}: l2 = {dist:.4f}")
    return 0


def cmd_sample(args) -> int:
    try:
        cfg = config_mod.load(args.config)
        cfg.validate()
        params = load_paramset(args.checkpoint)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    spec = cfg.env_spec()
    policy = Policy(policy_config(spec, cfg.preset, condition=False, blind=cfg.blind), seed=cfg.seed)
    try:
        policy.params.load_values(params)
    except ValueError as exc:
        return _fail(f"checkpoint does not match the configured network: {exc}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        _rollout_and_dump(policy, spec, None, rng, out_dir, f"sample_{i:03d}")
    print(f"wrote {args.count} rollouts to {out_dir}")
    return 0


def cmd_mcmc(args) -> int:
    spec = SceneSpec(
        canvas_size=args.canvas_size,
        grid_size=args.grid_size,
        object_types=args.object_types,
        sizes=args.sizes,
        color_bins=args.color_bins,
        max_objects=args.max_objects,
        episode_len=args.max_objects,
    )
    dataset = gen_tiny_scenes(spec, 1, seed=args.seed)
    target = dataset.items[0]
    rng = np.random.default_rng(args.seed)
    best, history = mh_infer(target, spec, args.iters, sigma2=args.sigma2, rng=rng)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "energy_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "frames", "l2"])
        for i, energy in enumerate(history):
            writer.writerow([i + 1, i + 1, f"{np.sqrt(energy):.9g}"])
    save_ppm(target, out_dir / "target.ppm")
    from .mcmc import trace_to_scene
    from .envs import scene_render

    save_ppm(scene_render(trace_to_scene(best, spec)), out_dir / "best.ppm")
    final = trace_energy(best, target, spec)
    print(f"best energy after {len(history)} iterations: {final:.6g}")
    return 0


def cmd_disc_surface(args) -> int:
    circles = gen_circles(spec_size=args.canvas_size, grid=args.grid)
    target_index = args.target_index
    if not 0 <= target_index < len(circles):
        return _fail(f"target index {target_index} out of range [0,{len(circles)})")
    spec = PaintSpec(canvas_size=args.canvas_size, grid_size=8, color=False, episode_len=1)
    disc = Discriminator(disc_config(spec, "desk", condition=True), seed=args.seed)
    opt = Adam(disc.params, lr=1e-4, beta1=0.5)
    target = circles.items[target_index]
    rng = np.random.default_rng(args.seed)

    from .rl import Trajectory

    for _ in range(args.train_steps):
        fakes = [
            Trajectory(
                final_render=circles.items[int(rng.integers(len(circles)))],
                condition=target,
            )
            for _ in range(8)
        ]
        disc_learner_step(disc, opt, fakes, circles, rng)

    out = disc_surface_demo(
        circles.items,
        circles.locations,
        target_index,
        lambda img, tgt: disc.score(img, tgt),
        args.out,
    )
    distinct_l2 = len(np.unique(np.round(out["l2"][~out["overlap"]], 9)))
    distinct_disc = len(np.unique(np.round(out["disc"][~out["overlap"]], 9)))
    print(f"distinct values off-target: l2 field {distinct_l2}, critic field {distinct_disc}")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    w_mat = Tensor(rng.standard_normal((4, 3)))
    w_conv = Tensor(rng.standard_normal((2, 1, 3, 3)))
    checks = {
        "matmul": lambda x: ad.tsum(ad.matmul(x, w_mat)),
        "tanh": lambda x: ad.tsum(ad.tanh(x)),
        "sigmoid": lambda x: ad.tsum(ad.sigmoid(x)),
        "log_softmax": lambda x: ad.tsum(ad.log_softmax(x)),
        "conv2d": lambda x: ad.tsum(ad.conv2d(ad.reshape(x, (1, 1, 3, 4)), w_conv)),
    }
    for name, fn in checks.items():
        x0 = rng.standard_normal((3, 4))
        x = Tensor(x0, requires_grad=True)
        fn(x).backward()
        num = ad.numeric_gradient(lambda v: float(fn(Tensor(v)).data), x0)
        err = ad.rel_error(x.grad, num)
        worst = max(worst, err)
        print(f"{name:12s} rel err {err:.3e}")
    print(f"worst {worst:.3e}")
    return 0 if worst < 1e-4 else 1


def cmd_info(args) -> int:
    if args.env == "scene":
        spec = SceneSpec()
        env = SceneEnv(spec)
    else:
        spec = PaintSpec()
        env = PaintEnv(spec)
    sizes = spec.sub_action_sizes()
    print(f"environment: {args.env}")
    print(f"sub-action sizes: {sizes}")
    print(f"single-step cardinality M = {env.cardinality()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brushrl")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--force", action="store_true", help="reuse a non-empty run directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reconstruct", help="conditional rollouts from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("sample", help="unconditional rollouts from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("mcmc", help="blocked Metropolis-Hastings baseline")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=50000)
    p.add_argument("--sigma2", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas-size", type=int, default=16)
    p.add_argument("--grid-size", type=int, default=2)
    p.add_argument("--object-types", type=int, default=2)
    p.add_argument("--sizes", type=int, default=1)
    p.add_argument("--color-bins", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=2)
    p.set_defaults(fn=cmd_mcmc)

    p = sub.add_parser("disc-surface", help="critic score field over circle locations")
    p.add_argument("--out", required=True)
    p.add_argument("--canvas-size", type=int, default=16)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--target-index", type=int, default=0)
    p.add_argument("--train-steps", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_disc_surface)

    p = sub.add_parser("gradcheck", help="finite-difference spot checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("info", help="print action-space cardinalities")
    p.add_argument("--env", choices=("paint", "scene"), default="scene")
    p.set_defaults(fn=cmd_info)
    return parser


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return args.fn(args)


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
