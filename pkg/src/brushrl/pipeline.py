"""Actor/learner training pipeline.

Actors roll episodes against environment copies and push trajectories into a
bounded queue; the learner drains the queue into a replay buffer, runs
teacher-forced policy updates, and (in adversarial mode) interleaves critic
updates at a fixed ratio.  Parameter snapshots flow back to actors through a
versioned store; actors refresh only between episodes, so every trajectory
carries a single, well-defined policy version.  A synchronous mode runs the
same loop single-threaded and bit-reproducibly.
"""

from __future__ import annotations

import csv
import itertools
import json
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .adversarial import gradient_penalty, zero_center_penalty
from .data import Dataset
from .envs import (
    PaintAction,
    PaintEnv,
    PaintSpec,
    SceneAction,
    SceneEnv,
    save_ppm,
)
from .nets import Discriminator, Policy, PolicyState, _batch_to_nchw
from .params import Adam, ParamSet, save_paramset
from .rl import (
    CRITIC,
    RewardConfig,
    Trajectory,
    TrajectoryStep,
    a2c_loss,
    assemble_rewards,
    compute_returns,
    l2_distance,
)


# ---------------------------------------------------------------------------
# plumbing


class TrajectoryQueue:
    """Bounded, closeable FIFO connecting actors to the learner."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._closed = threading.Event()
        self._audit_lock = threading.Lock()
        self.accepted_seqs: list[int] = []

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def close(self) -> None:
        self._closed.set()

    def put(self, traj: Trajectory, timeout: float = 0.1) -> bool:
        """Blockingly offer one trajectory; False once the queue is closed."""
        while not self._closed.is_set():
            try:
                self._q.put(traj, timeout=timeout)
                with self._audit_lock:
                    self.accepted_seqs.append(traj.seq)
                return True
            except queue.Full:
                continue
        return False

    def get(self, timeout: float = 0.1) -> Trajectory | None:
        """Pop one trajectory, or None on timeout / closed-and-drained."""
        try:
            return self._q.get(timeout=timeout)
        except queue.Empty:
            return None

    def drain(self) -> list[Trajectory]:
        out = []
        while True:
            try:
                out.append(self._q.get_nowait())
            except queue.Empty:
                return out

    def qsize(self) -> int:
        return self._q.qsize()


class ReplayBuffer:
    """Fixed-capacity FIFO of trajectories with uniform resampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list[Trajectory] = []
        self._lock = threading.Lock()
        self.total_added = 0
        self.total_evicted = 0

    def add(self, traj: Trajectory) -> None:
        with self._lock:
            self._items.append(traj)
            self.total_added += 1
            if len(self._items) > self.capacity:
                self._items.pop(0)
                self.total_evicted += 1

    def sample(self, n: int, rng: np.random.Generator) -> list[Trajectory]:
        """Uniform with replacement; raises when the buffer is empty."""
        with self._lock:
            if not self._items:
                raise ValueError("replay buffer is empty")
            idx = rng.integers(len(self._items), size=n)
            return [self._items[i] for i in idx]

    def __len__(self):
        with self._lock:
            return len(self._items)

    def snapshot_seqs(self) -> list[int]:
        with self._lock:
            return [t.seq for t in self._items]


class SnapshotStore:
    """Latest-wins published copy of a parameter set."""

    def __init__(self):
        self._lock = threading.Lock()
        self._params: ParamSet | None = None

    def publish(self, params: ParamSet) -> None:
        copy = params.copy()
        with self._lock:
            self._params = copy

    def latest(self) -> ParamSet | None:
        with self._lock:
            return self._params

    @property
    def version(self) -> int:
        with self._lock:
            return -1 if self._params is None else self._params.version


class SeqCounter:
    """Thread-safe monotone id source for trajectory audit trails."""

    def __init__(self):
        self._lock = threading.Lock()
        self._it = itertools.count()

    def next(self) -> int:
        with self._lock:
            return next(self._it)


# ---------------------------------------------------------------------------
# actors


def _env_action(env, indices):
    if isinstance(env, PaintEnv):
        return PaintAction.from_indices(indices, env.spec)
    if isinstance(env, SceneEnv):
        return SceneAction.from_indices(indices)
    raise TypeError(f"unsupported environment {type(env).__name__}")


def run_episode(policy: Policy, env, condition: np.ndarray | None, rng) -> Trajectory:
    """Roll one full episode and package it as a trajectory."""
    obs = env.reset()
    state = PolicyState.initial(policy.config.hidden)
    traj = Trajectory(condition=condition, policy_version=policy.params.version)
    # the trajectory always carries the reward target; the policy only sees
    # it when it was built as a conditional network
    policy_cond = condition if policy.config.condition else None
    while not env.done:
        indices, log_probs, entropy, value, state = policy.step(obs, policy_cond, state, rng)
        action = _env_action(env, indices)
        obs = env.step(action)
        traj.steps.append(TrajectoryStep(action, log_probs, entropy, value, obs.copy()))
    traj.final_render = obs.copy()
    return traj


def refresh_policy(policy: Policy, snapshots: SnapshotStore) -> bool:
    """Pull the newest published parameters if they are ahead of ours."""
    latest = snapshots.latest()
    if latest is not None and latest.version != policy.params.version:
        policy.params.load_values(latest)
        return True
    return False


def actor_loop(
    policy: Policy,
    env,
    dataset: Dataset | None,
    out_queue: TrajectoryQueue,
    snapshots: SnapshotStore,
    seq: SeqCounter,
    seed: int,
    stop: threading.Event,
    max_episodes: int | None = None,
) -> int:
    """Produce episodes until stopped; returns the number delivered."""
    rng = np.random.default_rng(seed)
    delivered = 0
    while not stop.is_set() and (max_episodes is None or delivered < max_episodes):
        refresh_policy(policy, snapshots)
        condition = None
        if dataset is not None:
            condition = dataset.items[int(rng.integers(len(dataset)))]
        traj = run_episode(policy, env, condition, rng)
        traj.seq = seq.next()
        if not out_queue.put(traj):
            break
        delivered += 1
    return delivered


# ---------------------------------------------------------------------------
# learners


def _action_indices(action, env_spec) -> list[int]:
    if isinstance(action, SceneAction):
        return action.to_indices()
    return action.to_indices(env_spec)


def make_batch(trajs: list[Trajectory], env_spec, blank: np.ndarray):
    """Observations/conditions/action-index arrays for Policy.replay."""
    if not trajs:
        raise ValueError("empty trajectory batch")
    length = len(trajs[0])
    if any(len(t) != length for t in trajs):
        raise ValueError("trajectories of unequal length in one batch")
    observations = [
        np.stack([blank if t == 0 else traj.steps[t - 1].render for traj in trajs])
        for t in range(length)
    ]
    conditions = None
    if trajs[0].condition is not None:
        conditions = np.stack([t.condition for t in trajs])
    actions = [
        np.array([_action_indices(traj.steps[t].action, env_spec) for traj in trajs], dtype=np.int64)
        for t in range(length)
    ]
    return observations, conditions, actions


@dataclass
class LearnerMetrics:
    step: int = 0
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    total_loss: float = 0.0
    mean_terminal_reward: float = 0.0
    mean_l2: float = 0.0
    mean_staleness: float = 0.0
    skipped_nonfinite: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def policy_learner_step(
    policy: Policy,
    optimizer: Adam,
    trajs: list[Trajectory],
    env_spec,
    reward_cfg: RewardConfig,
    critic=None,
    value_loss_weight: float = 0.5,
) -> LearnerMetrics:
    """One A2C update from a replayed batch of trajectories."""
    blank = np.zeros_like(trajs[0].final_render)
    observations, conditions, actions = make_batch(trajs, env_spec, blank)
    if not policy.config.condition:
        conditions = None

    returns_rows = []
    terminal = []
    for traj in trajs:
        rewards = assemble_rewards(traj, reward_cfg, critic=critic)
        returns_rows.append(compute_returns(rewards))
        terminal.append(rewards[-1])
    returns_matrix = np.stack(returns_rows)  # (B, T)

    out = policy.replay(observations, conditions, actions)
    log_probs = [step_out[0] for step_out in out]
    values = [step_out[1] for step_out in out]
    entropies = [step_out[2] for step_out in out]
    returns = [returns_matrix[:, t] for t in range(returns_matrix.shape[1])]

    policy_loss, value_loss, entropy_bonus, total = a2c_loss(
        log_probs, values, entropies, returns, reward_cfg, value_loss_weight=value_loss_weight
    )

    metrics = LearnerMetrics(
        policy_loss=float(policy_loss.data),
        value_loss=float(value_loss.data),
        entropy=float(np.mean([e.data.mean() for e in entropies])),
        total_loss=float(total.data),
        mean_terminal_reward=float(np.mean(terminal)),
        mean_staleness=float(np.mean([policy.params.version - t.policy_version for t in trajs])),
    )
    if trajs[0].condition is not None:
        metrics.mean_l2 = float(
            np.mean([l2_distance(t.final_render, t.condition) for t in trajs])
        )

    policy.params.zero_grad()
    total.backward()
    try:
        optimizer.step()
    except ValueError:
        metrics.skipped_nonfinite = 1
    return metrics


@dataclass
class CriticMetrics:
    step: int = 0
    wasserstein_gap: float = 0.0
    gradient_penalty: float = 0.0
    centering: float = 0.0
    total_loss: float = 0.0
    skipped_nonfinite: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def disc_learner_step(
    disc: Discriminator,
    optimizer: Adam,
    trajs: list[Trajectory],
    dataset: Dataset,
    rng: np.random.Generator,
    gp_lambda: float = 10.0,
    centering_weight: float = 1e-3,
) -> CriticMetrics | None:
    """One Wasserstein critic update; None when no trajectories were given.

    Fakes are the rolled-out final renders; reals come from the dataset.  In
    conditional mode the real pair is the target image presented alongside
    itself, matching the fake pair (render, target).
    """
    if not trajs:
        return None
    conditional = disc.config.condition
    fake = _batch_to_nchw(np.stack([t.final_render for t in trajs]))
    if conditional:
        if any(t.condition is None for t in trajs):
            raise ValueError("conditional critic requires conditioned trajectories")
        fake_cond = _batch_to_nchw(np.stack([t.condition for t in trajs]))
        real_images = np.stack([t.condition for t in trajs])
        real = _batch_to_nchw(real_images)
        real_cond = real
    else:
        real = _batch_to_nchw(np.stack(dataset.sample(len(trajs), rng)))
        fake_cond = real_cond = None

    fake_t, real_t = Tensor(fake), Tensor(real)
    if conditional:
        fake_scores = disc.forward(fake_t, Tensor(fake_cond))
        real_scores = disc.forward(real_t, Tensor(real_cond))
        mix_cond = Tensor(fake_cond)

        def disc_fn(x):
            return disc.forward(x, mix_cond)

    else:
        fake_scores = disc.forward(fake_t)
        real_scores = disc.forward(real_t)
        disc_fn = disc.forward

    gap = ad.add(ad.tmean(fake_scores), ad.mul(ad.tmean(real_scores), -1.0))
    gp = gradient_penalty(disc_fn, real_t, fake_t, lam=gp_lambda, rng=rng)
    center = zero_center_penalty(ad.concat([real_scores, fake_scores], axis=0), centering_weight)
    total = ad.add(ad.add(gap, gp), center)

    metrics = CriticMetrics(
        wasserstein_gap=float(gap.data),
        gradient_penalty=float(gp.data),
        centering=float(center.data),
        total_loss=float(total.data),
    )
    disc.params.zero_grad()
    total.backward()
    try:
        optimizer.step()
    except ValueError:
        metrics.skipped_nonfinite = 1
    return metrics


# ---------------------------------------------------------------------------
# population-based tuning


@dataclass
class Member:
    policy: Policy
    disc: Discriminator | None
    policy_opt: Adam
    disc_opt: Adam | None
    hypers: dict = field(default_factory=dict)
    score: float = -np.inf


def pbt_exploit_explore(
    members: list[Member],
    rng: np.random.Generator,
    quantile: float = 0.25,
    factors: tuple[float, float] = (0.8, 1.25),
) -> list[tuple[int, int]]:
    """Bottom-quantile members copy a top-quantile peer, then jitter hypers.

    Both parameter sets and the listed hyperparameters are copied; each
    hyperparameter is independently multiplied by one of ``factors``.
    Returns the (loser, winner) index pairs that were applied.
    """
    n = len(members)
    if n < 2:
        return []
    k = max(1, int(np.floor(n * quantile)))
    order = sorted(range(n), key=lambda i: members[i].score)
    losers, winners = order[:k], order[-k:]
    applied = []
    for loser in losers:
        winner = int(winners[int(rng.integers(len(winners)))])
        if winner == loser:
            continue
        dst, src = members[loser], members[winner]
        dst.policy.params.load_values(src.policy.params)
        if dst.disc is not None and src.disc is not None:
            dst.disc.params.load_values(src.disc.params)
        dst.hypers = dict(src.hypers)
        for key in dst.hypers:
            factor = factors[int(rng.integers(len(factors)))]
            dst.hypers[key] = dst.hypers[key] * factor
        dst.policy_opt.lr = dst.hypers.get("lr", dst.policy_opt.lr)
        if dst.disc_opt is not None:
            dst.disc_opt.lr = dst.hypers.get("disc_lr", dst.disc_opt.lr)
        applied.append((loser, winner))
    return applied


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainSettings:
    batch_size: int = 16
    replay_batches: int = 20
    disc_steps_per_policy_step: int = 4
    policy_lr: float = 1e-4
    disc_lr: float = 1e-4
    adam_beta1: float = 0.5
    entropy_coefficient: float = 0.0
    value_loss_weight: float = 0.5
    episodes_per_iteration: int | None = None  # defaults to batch_size
    checkpoint_every: int = 200
    sample_every: int = 0  # 0 disables sample dumps
    queue_capacity: int = 64
    n_actors: int = 2


class Trainer:
    """Single-machine trainer with synchronous and threaded modes.

    The synchronous mode interleaves acting and learning in one thread with
    one seeded RNG chain, so two runs with the same seed produce identical
    metrics bit for bit.  The threaded mode runs the actors concurrently and
    relaxes nothing else.
    """

    def __init__(
        self,
        env_spec,
        policy: Policy,
        reward_cfg: RewardConfig,
        dataset: Dataset | None,
        settings: TrainSettings,
        disc: Discriminator | None = None,
        run_dir: str | Path | None = None,
        seed: int = 0,
    ):
        if reward_cfg.terminal_source == CRITIC and disc is None:
            raise ValueError("critic reward requires a discriminator")
        self.env_spec = env_spec
        self.policy = policy
        self.disc = disc
        self.reward_cfg = reward_cfg
        self.dataset = dataset
        self.settings = settings
        self.seed = seed
        self.policy_opt = Adam(policy.params, lr=settings.policy_lr, beta1=settings.adam_beta1)
        self.disc_opt = (
            Adam(disc.params, lr=settings.disc_lr, beta1=settings.adam_beta1) if disc else None
        )
        self.replay = ReplayBuffer(settings.replay_batches * settings.batch_size)
        self.snapshots = SnapshotStore()
        self.snapshots.publish(policy.params)
        self.seq = SeqCounter()
        self.metrics_log: list[dict] = []
        self.frames_seen = 0
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "checkpoints").mkdir(exist_ok=True)
            (self.run_dir / "samples").mkdir(exist_ok=True)

    # -- shared pieces ----------------------------------------------------

    def make_env(self):
        if isinstance(self.env_spec, PaintSpec):
            return PaintEnv(self.env_spec)
        return SceneEnv(self.env_spec)

    def _critic_fn(self):
        if self.reward_cfg.terminal_source != CRITIC:
            return None
        disc = self.disc

        def critic(final, condition):
            return disc.score(final, condition if disc.config.condition else None)

        return critic

    def _learn_once(self, step: int, rng: np.random.Generator) -> LearnerMetrics:
        s = self.settings
        trajs = self.replay.sample(s.batch_size, rng)
        if self.disc is not None and self.reward_cfg.terminal_source == CRITIC:
            for _ in range(s.disc_steps_per_policy_step):
                disc_trajs = self.replay.sample(s.batch_size, rng)
                dm = disc_learner_step(self.disc, self.disc_opt, disc_trajs, self.dataset, rng)
                if dm is not None:
                    dm.step = step
                    self._record({"kind": "critic", **dm.as_dict()})
        metrics = policy_learner_step(
            self.policy,
            self.policy_opt,
            trajs,
            self.env_spec,
            self.reward_cfg,
            critic=self._critic_fn(),
            value_loss_weight=s.value_loss_weight,
        )
        metrics.step = step
        self.snapshots.publish(self.policy.params)
        self._record({"kind": "policy", "frames": self.frames_seen, **metrics.as_dict()})
        self._maybe_checkpoint(step)
        return metrics

    def _record(self, row: dict) -> None:
        self.metrics_log.append(row)
        if self.run_dir is not None:
            with open(self.run_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(row) + "\n")

    def _maybe_checkpoint(self, step: int) -> None:
        if self.run_dir is None or step % self.settings.checkpoint_every:
            return
        save_paramset(self.policy.params, self.run_dir / "checkpoints" / f"policy_{step:06d}.ckpt")
        if self.disc is not None:
            save_paramset(self.disc.params, self.run_dir / "checkpoints" / f"disc_{step:06d}.ckpt")

    def _maybe_dump_samples(self, step: int, trajs: list[Trajectory]) -> None:
        s = self.settings
        if self.run_dir is None or not s.sample_every or step % s.sample_every:
            return
        for i, traj in enumerate(trajs[:4]):
            img = traj.final_render
            if img.shape[2] == 1:
                img = np.repeat(img, 3, axis=2)
            save_ppm(img, self.run_dir / "samples" / f"step{step:06d}_{i}.ppm")

    def eval_l2(self, n_episodes: int = 8, seed: int = 12345) -> float:
        """Mean final distance to fresh targets under the current policy."""
        if self.dataset is None:
            raise ValueError("evaluation needs a target dataset")
        rng = np.random.default_rng(seed)
        env = self.make_env()
        dists = []
        for _ in range(n_episodes):
            target = self.dataset.items[int(rng.integers(len(self.dataset)))]
            traj = run_episode(self.policy, env, target, rng)
            dists.append(l2_distance(traj.final_render, target))
        return float(np.mean(dists))

    # -- synchronous mode -------------------------------------------------

    def run_synchronous(
        self,
        n_steps: int,
        stop_when=None,
        eval_every: int = 0,
    ) -> list[dict]:
        """Round-robin act/learn loop with one RNG chain; reproducible.

        ``stop_when`` is an optional callable (step, LearnerMetrics) -> bool
        checked after every policy update.
        """
        s = self.settings
        rng = np.random.default_rng(self.seed)
        env = self.make_env()
        episodes_per_iter = s.episodes_per_iteration or s.batch_size
        eval_rows = []
        for step in range(1, n_steps + 1):
            for _ in range(episodes_per_iter):
                refresh_policy(self.policy, self.snapshots)
                condition = None
                if self.dataset is not None:
                    condition = self.dataset.items[int(rng.integers(len(self.dataset)))]
                traj = run_episode(self.policy, env, condition, rng)
                traj.seq = self.seq.next()
                self.replay.add(traj)
                self.frames_seen += len(traj)
            metrics = self._learn_once(step, rng)
            self._maybe_dump_samples(step, self.replay.sample(4, np.random.default_rng(step)))
            if eval_every and step % eval_every == 0:
                eval_rows.append({"step": step, "frames": self.frames_seen, "l2": self.eval_l2()})
            if stop_when is not None and stop_when(step, metrics):
                break
        if self.run_dir is not None and eval_rows:
            with open(self.run_dir / "eval_l2.csv", "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=["step", "frames", "l2"])
                writer.writeheader()
                writer.writerows(eval_rows)
        return self.metrics_log

    # -- threaded mode ----------------------------------------------------

    def run_threaded(
        self,
        n_steps: int,
        stop_when=None,
        deadline_s: float | None = None,
    ) -> list[dict]:
        """Concurrent actors feeding a learner thread through the queue."""
        s = self.settings
        stop = threading.Event()
        out_queue = TrajectoryQueue(s.queue_capacity)
        self.last_queue = out_queue
        threads = []
        for i in range(s.n_actors):
            actor_policy = Policy(self.policy.config, seed=0)
            actor_policy.params.load_values(self.policy.params)
            thread = threading.Thread(
                target=actor_loop,
                args=(
                    actor_policy,
                    self.make_env(),
                    self.dataset,
                    out_queue,
                    self.snapshots,
                    self.seq,
                    self.seed + 1000 + i,
                    stop,
                ),
                daemon=True,
            )
            thread.start()
            threads.append(thread)

        rng = np.random.default_rng(self.seed)
        started = time.monotonic()
        step = 0
        try:
            while step < n_steps:
                if deadline_s is not None and time.monotonic() - started > deadline_s:
                    break
                traj = out_queue.get(timeout=0.2)
                if traj is not None:
                    self.replay.add(traj)
                    self.frames_seen += len(traj)
                if len(self.replay) < s.batch_size:
                    continue
                step += 1
                metrics = self._learn_once(step, rng)
                if stop_when is not None and stop_when(step, metrics):
                    break
        finally:
            stop.set()
            out_queue.close()
            for thread in threads:
                thread.join(timeout=5.0)
            for traj in out_queue.drain():
                self.replay.add(traj)
                self.frames_seen += len(traj)
        return self.metrics_log
