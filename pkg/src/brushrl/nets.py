"""Policy and critic networks.

The policy is a convolutional canvas encoder fused with an embedding of the
previous action, an LSTM, and an autoregressive decoder that samples one
sub-action at a time through scalar or spatial (location-map) branches.  The
critic is a plain strided CNN emitting one unbounded score.

Presets: "paper" uses the full reference sizes (32 channels, 8 residual
blocks, 256 hidden); "desk" halves everything for laptop-scale runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamSet, he_uniform, zeros

PRESETS = {
    "paper": dict(channels=32, n_resblocks=8, hidden=256, embed_dim=16, seed_channels=16),
    "desk": dict(channels=16, n_resblocks=2, hidden=128, embed_dim=8, seed_channels=8),
}


@dataclass(frozen=True)
class PolicyConfig:
    canvas_size: int
    in_channels: int
    grid_size: int
    branches: tuple  # of ("location", grid_size) | ("scalar", K)
    channels: int = 16
    n_resblocks: int = 2
    hidden: int = 128
    embed_dim: int = 8
    seed_channels: int = 8
    condition: bool = False
    blind: bool = False

    def __post_init__(self):
        for kind, k in self.branches:
            if kind == "location" and k != self.grid_size * self.grid_size:
                raise ValueError(
                    f"location branch size {k} does not match grid {self.grid_size}"
                )

    def sub_action_sizes(self) -> list[int]:
        return [k for _, k in self.branches]


def policy_config(env_spec, preset: str = "desk", condition: bool = False, blind: bool = False) -> PolicyConfig:
    """Derive a PolicyConfig from a Paint/Scene spec."""
    sizes = env_spec.sub_action_sizes()
    locations = env_spec.grid_size * env_spec.grid_size
    branches = tuple(
        ("location", k) if k == locations and k >= 16 else ("scalar", k) for k in sizes
    )
    return PolicyConfig(
        canvas_size=env_spec.canvas_size,
        in_channels=env_spec.channels,
        grid_size=env_spec.grid_size,
        branches=branches,
        condition=condition,
        blind=blind,
        **PRESETS[preset],
    )


@dataclass
class PolicyState:
    h: Tensor
    c: Tensor
    last_action: list | None = None

    @staticmethod
    def initial(hidden: int, batch: int = 1) -> "PolicyState":
        return PolicyState(
            Tensor(np.zeros((batch, hidden), dtype=np.float32)),
            Tensor(np.zeros((batch, hidden), dtype=np.float32)),
            None,
        )


def _conv_param(params: ParamSet, name, oc, ic, k, rng):
    params.add(name + ".w", he_uniform((oc, ic, k, k), ic * k * k, rng))
    params.add(name + ".b", zeros((oc, 1, 1)))


def _deconv_param(params: ParamSet, name, ic, oc, k, rng):
    params.add(name + ".w", he_uniform((ic, oc, k, k), ic * k * k, rng))
    params.add(name + ".b", zeros((oc, 1, 1)))


def _fc_param(params: ParamSet, name, d, k, rng):
    params.add(name + ".w", he_uniform((d, k), d, rng))
    params.add(name + ".b", zeros(k))


def _conv(params, name, x, stride=1, transpose_op=False, act=True):
    out = ad.conv2d(x, params[name + ".w"], stride=stride, transpose_op=transpose_op)
    out = ad.add(out, params[name + ".b"])
    return ad.relu(out) if act else out


def _fc(params, name, x, act=False):
    out = ad.fc(x, params[name + ".w"], params[name + ".b"])
    return ad.relu(out) if act else out


def _resblock(params, name, x):
    out = _conv(params, name + ".c1", x, act=True)
    out = _conv(params, name + ".c2", out, act=False)
    return ad.relu(ad.add(out, x))


def _one_hot(idx, k, dtype=np.float32) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((idx.shape[0], k), dtype=dtype)
    out[np.arange(idx.shape[0]), idx] = 1.0
    return Tensor(out)


class Policy:
    """Recurrent stroke/scene policy with value head."""

    def __init__(self, config: PolicyConfig, seed: int = 0):
        self.config = config
        self.params = ParamSet()
        self._build(np.random.default_rng(seed))

    # -- parameters --------------------------------------------------------
    def _build(self, rng):
        cfg = self.config
        p = self.params
        in_c = cfg.in_channels * (2 if cfg.condition else 1)
        _conv_param(p, "enc.pre", cfg.channels, in_c, 5, rng)
        # previous-action embeddings; one extra row encodes "episode start"
        embed_total = 0
        for i, (_, k) in enumerate(cfg.branches):
            p.add(f"embed.{i}", he_uniform((k + 1, cfg.embed_dim), k + 1, rng))
            embed_total += cfg.embed_dim
        _fc_param(p, "enc.fuse", embed_total, cfg.channels, rng)
        for i in range(3):
            _conv_param(p, f"enc.down{i}", cfg.channels, cfg.channels, 4, rng)
        for i in range(cfg.n_resblocks):
            _conv_param(p, f"enc.res{i}.c1", cfg.channels, cfg.channels, 3, rng)
            _conv_param(p, f"enc.res{i}.c2", cfg.channels, cfg.channels, 3, rng)
        spatial = cfg.canvas_size // 8
        _fc_param(p, "enc.out", cfg.channels * spatial * spatial, cfg.hidden, rng)
        for gate in ("i", "f", "g", "o"):
            p.add(f"lstm.wx{gate}", he_uniform((cfg.hidden, cfg.hidden), cfg.hidden, rng))
            p.add(f"lstm.wh{gate}", he_uniform((cfg.hidden, cfg.hidden), cfg.hidden, rng))
            p.add(f"lstm.b{gate}", zeros(cfg.hidden))
        _fc_param(p, "value", cfg.hidden, 1, rng)
        for i, (kind, k) in enumerate(cfg.branches):
            if kind == "scalar":
                _fc_param(p, f"dec.{i}.fc", cfg.hidden, k, rng)
            else:
                self._build_location_branch(p, i, rng)
            _fc_param(p, f"dec.{i}.next", cfg.hidden + cfg.embed_dim, cfg.hidden, rng)

    def _build_location_branch(self, p, i, rng):
        cfg = self.config
        sc, lc = cfg.seed_channels, cfg.channels
        _fc_param(p, f"dec.{i}.seed", cfg.hidden, sc * 16, rng)
        _conv_param(p, f"dec.{i}.lift", lc, sc, 3, rng)
        _deconv_param(p, f"dec.{i}.up0", lc, lc, 4, rng)
        for j in range(cfg.n_resblocks):
            _conv_param(p, f"dec.{i}.res{j}.c1", lc, lc, 3, rng)
            _conv_param(p, f"dec.{i}.res{j}.c2", lc, lc, 3, rng)
        size = 8
        j = 1
        while size < cfg.grid_size:
            _deconv_param(p, f"dec.{i}.up{j}", lc, lc, 4, rng)
            size *= 2
            j += 1
        _conv_param(p, f"dec.{i}.final", 1, lc, 3, rng)

    # -- forward -----------------------------------------------------------
    def lstm_params(self):
        return {
            key: self.params["lstm." + key]
            for key in (
                "wxi", "whi", "wxf", "whf", "wxg", "whg", "wxo", "who",
                "bi", "bf", "bg", "bo",
            )
        }

    def encode(self, obs: Tensor, condition, state: PolicyState) -> tuple:
        cfg = self.config
        p = self.params
        batch = obs.shape[0]
        if cfg.blind:
            obs = Tensor(np.zeros_like(obs.data))
        if cfg.condition:
            if condition is None:
                raise ValueError("conditional policy called without a condition image")
            obs = ad.concat([obs, condition], axis=1)
        elif condition is not None:
            raise ValueError("unconditional policy given a condition image")
        feat = _conv(p, "enc.pre", obs, act=True)
        embeds = []
        for i, (_, k) in enumerate(cfg.branches):
            if state.last_action is None:
                idx = np.full(batch, k, dtype=np.int64)  # episode-start row
            else:
                idx = np.asarray(state.last_action[i]).reshape(batch)
            embeds.append(ad.matmul(_one_hot(idx, k + 1, feat.dtype), p[f"embed.{i}"]))
        fused = _fc(p, "enc.fuse", ad.concat(embeds, axis=1), act=True)
        fused = ad.reshape(fused, (batch, cfg.channels, 1, 1))
        feat = ad.add(feat, broadcast_spatial(fused, feat.shape))
        for i in range(3):
            feat = _conv(p, f"enc.down{i}", feat, stride=2, act=True)
        for i in range(cfg.n_resblocks):
            feat = _resblock(p, f"enc.res{i}", feat)
        flat = ad.reshape(feat, (batch, int(np.prod(feat.shape[1:]))))
        z = _fc(p, "enc.out", flat, act=True)
        h, c = ad.lstm_step(z, (state.h, state.c), self.lstm_params())
        return h, c

    def branch_logits(self, i: int, z: Tensor) -> Tensor:
        cfg = self.config
        p = self.params
        kind, k = cfg.branches[i]
        if kind == "scalar":
            return _fc(p, f"dec.{i}.fc", z)
        batch = z.shape[0]
        seed = _fc(p, f"dec.{i}.seed", z, act=True)
        feat = ad.reshape(seed, (batch, cfg.seed_channels, 4, 4))
        feat = _conv(p, f"dec.{i}.lift", feat, act=True)
        feat = _conv(p, f"dec.{i}.up0", feat, stride=2, transpose_op=True, act=True)
        for j in range(cfg.n_resblocks):
            feat = _resblock(p, f"dec.{i}.res{j}", feat)
        size, j = 8, 1
        while size < cfg.grid_size:
            feat = _conv(p, f"dec.{i}.up{j}", feat, stride=2, transpose_op=True, act=True)
            size *= 2
            j += 1
        logits = _conv(p, f"dec.{i}.final", feat, act=False)
        return ad.reshape(logits, (batch, cfg.grid_size * cfg.grid_size))

    def decode(self, h: Tensor, rng=None, forced_actions=None):
        """Autoregressively sample (or force) each sub-action.

        Returns (samples per branch, log_probs per branch, entropies per
        branch) where the latter two are graph tensors of shape (batch,).
        """
        cfg = self.config
        p = self.params
        z = h
        samples, log_probs, entropies = [], [], []
        for i, (_, k) in enumerate(cfg.branches):
            logits = self.branch_logits(i, z)
            ls = ad.log_softmax(logits, axis=-1)
            probs = ad.exp(ls)
            if forced_actions is not None:
                idx = np.asarray(forced_actions[i], dtype=np.int64).reshape(z.shape[0])
            else:
                pdata = probs.data / probs.data.sum(axis=-1, keepdims=True)
                u = rng.random(z.shape[0])
                cdf = np.cumsum(pdata, axis=-1)
                idx = (u[:, None] > cdf[:, :-1]).sum(axis=-1).astype(np.int64)
            lp = ad.gather_cols(ls, idx)
            ent = ad.mul(ad.tsum(ad.mul(probs, ls), axis=-1), -1.0)
            samples.append(idx)
            log_probs.append(lp)
            entropies.append(ent)
            embed = ad.matmul(_one_hot(idx, k + 1, z.dtype), p[f"embed.{i}"])
            z = _fc(p, f"dec.{i}.next", ad.concat([z, embed], axis=1))
        return samples, log_probs, entropies

    def step(self, obs: np.ndarray, condition, state: PolicyState, rng):
        """Sample one action tuple for a single canvas (no gradients).

        ``obs``/``condition`` are (H, W, C) canvases.  Returns (samples,
        log_probs, entropy, value, new_state).
        """
        with ad.no_grad():
            obs_t = Tensor(_to_nchw(obs))
            cond_t = Tensor(_to_nchw(condition)) if condition is not None else None
            h, c = self.encode(obs_t, cond_t, state)
            samples, lps, ents = self.decode(h, rng=rng)
            value = float(_fc(self.params, "value", h).data[0, 0])
        entropy = float(sum(e.data[0] for e in ents))
        log_probs = [float(lp.data[0]) for lp in lps]
        action = [int(s[0]) for s in samples]
        new_state = PolicyState(h.detach(), c.detach(), action)
        if not all(np.isfinite(lp) for lp in log_probs) or not np.isfinite(value):
            raise FloatingPointError("non-finite policy activations")
        return action, log_probs, entropy, value, new_state

    def replay(self, observations, conditions, actions):
        """Teacher-forced batched forward over a whole episode (with graph).

        ``observations`` is a list over time of (B, H, W, C) arrays; ``actions``
        a list over time of (B, n_sub) index arrays.  Returns per-step lists of
        (log_probs per branch, value tensor, entropy tensor).
        """
        batch = observations[0].shape[0]
        state = PolicyState.initial(self.config.hidden, batch)
        out = []
        for t, obs in enumerate(observations):
            obs_t = Tensor(_batch_to_nchw(obs))
            cond_t = Tensor(_batch_to_nchw(conditions)) if conditions is not None else None
            h, c = self.encode(obs_t, cond_t, state)
            forced = [actions[t][:, i] for i in range(actions[t].shape[1])]
            _, lps, ents = self.decode(h, forced_actions=forced)
            value = ad.reshape(_fc(self.params, "value", h), (batch,))
            entropy = ents[0]
            for e in ents[1:]:
                entropy = ad.add(entropy, e)
            out.append((lps, value, entropy))
            state = PolicyState(h, c, forced)
        return out


def broadcast_spatial(x: Tensor, shape) -> Tensor:
    return ad.broadcast_to(x, shape)


def _to_nchw(canvas: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(canvas, (2, 0, 1))[None], dtype=np.float32)


def _batch_to_nchw(canvases: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(canvases, (0, 3, 1, 2)), dtype=np.float32)


# ---------------------------------------------------------------------------
# critic


@dataclass(frozen=True)
class DiscConfig:
    canvas_size: int
    in_channels: int
    base_channels: int = 16
    condition: bool = False


def disc_config(env_spec, preset: str = "desk", condition: bool = False) -> DiscConfig:
    base = 64 if preset == "paper" else 16
    return DiscConfig(env_spec.canvas_size, env_spec.channels, base, condition)


class Discriminator:
    """Strided CNN critic; the final layer has no output nonlinearity."""

    def __init__(self, config: DiscConfig, seed: int = 0):
        self.config = config
        self.params = ParamSet()
        rng = np.random.default_rng(seed)
        in_c = config.in_channels * (2 if config.condition else 1)
        ch = config.base_channels
        size = config.canvas_size
        self.layers = []
        i = 0
        while size > 4:
            _conv_param(self.params, f"d{i}", ch, in_c, 4, rng)
            self.layers.append((f"d{i}", ch))
            in_c, ch = ch, min(ch * 2, 8 * config.base_channels)
            size //= 2
            i += 1
        _fc_param(self.params, "out", in_c * size * size, 1, rng)

    def forward(self, images: Tensor, condition: Tensor | None = None) -> Tensor:
        """Score a (B, C, H, W) batch; returns a (B,) tensor."""
        cfg = self.config
        if images.shape[2] != cfg.canvas_size or images.shape[3] != cfg.canvas_size:
            raise ad.ShapeError(
                f"critic expects {cfg.canvas_size}x{cfg.canvas_size} inputs, got {images.shape}"
            )
        if cfg.condition:
            if condition is None:
                raise ValueError("conditional critic called without a condition image")
            x = ad.concat([images, condition], axis=1)
        else:
            if condition is not None:
                raise ValueError("unconditional critic given a condition image")
            x = images
        for name, _ in self.layers:
            x = _conv(self.params, name, x, stride=2, act=True)
        batch = x.shape[0]
        flat = ad.reshape(x, (batch, int(np.prod(x.shape[1:]))))
        return ad.reshape(_fc(self.params, "out", flat), (batch,))

    def score(self, canvas: np.ndarray, condition: np.ndarray | None = None) -> float:
        """Convenience scalar score of one (H, W, C) canvas, no gradients."""
        with ad.no_grad():
            cond = Tensor(_to_nchw(condition)) if condition is not None else None
            return float(self.forward(Tensor(_to_nchw(canvas)), cond).data[0])
