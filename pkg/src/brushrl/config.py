"""Run configuration: a flat key-value file with a strict round trip.

The on-disk format is a plain TOML table of scalars, parsed with the
standard library's TOML reader (or its backport on older interpreters).  Every field of :class:`RunConfig` maps to one key;
unknown keys and type mismatches are rejected so a run directory's config
file always describes exactly the run that produced it.
"""

from __future__ import annotations

import dataclasses
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass

from .envs import PaintSpec, SceneSpec
from .nets import PRESETS
from .rl import CRITIC, L2, RewardConfig
from .pipeline import TrainSettings


@dataclass
class RunConfig:
    # environment
    environment: str = "paint"  # paint | scene
    canvas_size: int = 64
    grid_size: int = 32
    color: bool = True
    episode_len: int = 20
    # networks
    preset: str = "desk"
    condition: bool = True
    blind: bool = False
    # reward
    terminal_source: str = CRITIC
    stroke_start_penalty: float = 0.0
    blank_canvas_penalty: float = 0.0
    color_emd_weight: float = 0.0
    entropy_coefficient: float = 0.0
    # pipeline
    batch_size: int = 16
    replay_batches: int = 20
    disc_steps_per_policy_step: int = 4
    n_actors: int = 2
    queue_capacity: int = 64
    policy_lr: float = 1e-4
    disc_lr: float = 1e-4
    adam_beta1: float = 0.5
    value_loss_weight: float = 0.5
    threaded: bool = False
    steps: int = 100
    # population-based tuning
    pbt: bool = False
    population: int = 4
    # data / bookkeeping
    dataset: str = "circles"  # circles | single_stroke | tiny_scenes | idx:<path>
    seed: int = 0
    run_dir: str = "runs/default"
    eval_every: int = 0
    checkpoint_every: int = 200
    sample_every: int = 0

    # -- derived objects --------------------------------------------------

    def env_spec(self):
        if self.environment == "paint":
            return PaintSpec(
                canvas_size=self.canvas_size,
                grid_size=self.grid_size,
                color=self.color,
                episode_len=self.episode_len,
            )
        if self.environment == "scene":
            return SceneSpec(canvas_size=self.canvas_size, episode_len=self.episode_len)
        raise ValueError(f"unknown environment {self.environment!r}")

    def reward_config(self) -> RewardConfig:
        return RewardConfig(
            terminal_source=self.terminal_source,
            stroke_start_penalty=self.stroke_start_penalty,
            blank_canvas_penalty=self.blank_canvas_penalty,
            color_emd_weight=self.color_emd_weight,
            entropy_coefficient=self.entropy_coefficient,
        )

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            batch_size=self.batch_size,
            replay_batches=self.replay_batches,
            disc_steps_per_policy_step=self.disc_steps_per_policy_step,
            policy_lr=self.policy_lr,
            disc_lr=self.disc_lr,
            adam_beta1=self.adam_beta1,
            entropy_coefficient=self.entropy_coefficient,
            value_loss_weight=self.value_loss_weight,
            queue_capacity=self.queue_capacity,
            n_actors=self.n_actors,
            checkpoint_every=self.checkpoint_every,
            sample_every=self.sample_every,
        )

    def validate(self) -> None:
        spec = self.env_spec()  # raises on unknown environment
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r} (have {sorted(PRESETS)})")
        if self.terminal_source not in (CRITIC, L2):
            raise ValueError(f"unknown terminal source {self.terminal_source!r}")
        if self.canvas_size % 8:
            raise ValueError(f"canvas_size must be a multiple of 8, got {self.canvas_size}")
        for name in ("batch_size", "replay_batches", "n_actors", "queue_capacity", "steps", "episode_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pbt and self.population < 2:
            raise ValueError("pbt needs a population of at least 2")
        known = ("circles", "single_stroke", "tiny_scenes")
        if self.dataset not in known and not self.dataset.startswith("idx:"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        # the decoder's sub-action branches must multiply out to exactly the
        # environment's single-step cardinality
        sizes = spec.sub_action_sizes()
        product = 1
        for s in sizes:
            product *= s
        if product != spec.cardinality():
            raise ValueError(
                f"decoder branch product {product} != env cardinality {spec.cardinality()}"
            )


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(config: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"


def parse(text: str) -> RunConfig:
    """Strict inverse of :func:`serialize` (unknown keys, bad types rejected)."""
    try:
        table = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValueError(f"malformed config: {exc}") from exc
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for key, value in table.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        want = fields[key].type
        expect = {"int": int, "float": float, "bool": bool, "str": str}[want]
        if expect is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if not isinstance(value, expect) or (expect is not bool and isinstance(value, bool)):
            raise ValueError(f"config key {key!r} expects {want}, got {type(value).__name__}")
        values[key] = value
    return RunConfig(**values)


def load(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse(fh.read())


def save(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(config))
