"""Representation probes run outside the RL loop.

``collapse_probe`` trains only the encoder and the auxiliary heads on a fixed
buffer of random-policy transitions (no critic coupling) and tracks the
latent variance of a held-out probe batch.
"""

from __future__ import annotations

import dataclasses
from typing import List

import numpy as np
import torch

from replab import aux_losses as AL
from replab.agent import Encoder, ema_update, obs_to_tensor
from replab.env import EmissionConfig, make_env
from replab.replay import ReplayBuffer, TransitionRecord


def probe_variance(encoder, probe_obs) -> float:
    """Mean over latent dims of the across-batch variance."""
    with torch.no_grad():
        z = encoder(probe_obs)
    return float(z.var(dim=0, unbiased=False).mean())


def collect_random(env, n, seed) -> ReplayBuffer:
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(n, env.observation_shape, env.action_dim)
    episode = 0
    obs, _ = env.reset(seed * 1000 + episode)
    while len(buf) < n and not buf.full:
        action = rng.uniform(-1.0, 1.0, env.action_dim)
        res = env.step(action)
        buf.push(
            TransitionRecord(
                obs, action.astype(np.float32), res.reward, res.observation, res.info["terminal"], res.info["truncated"]
            )
        )
        obs = res.observation
        if res.done:
            episode += 1
            obs, _ = env.reset(seed * 1000 + episode)
    return buf


@dataclasses.dataclass
class CollapseResult:
    seed: int
    include_reward: bool
    initial_variance: float
    final_variance: float
    trace: List[float]

    @property
    def ratio(self):
        return self.final_variance / self.initial_variance


def collapse_probe(
    seed: int,
    include_reward: bool,
    updates: int = 2000,
    task: str = "point_mass",
    distractor_mode: str = "procedural",
    render_size: int = 64,
    latent_dim: int = 16,
    strides=(2, 2, 2, 1),
    num_filters: int = 32,
    batch_size: int = 32,
    buffer_transitions: int = 1000,
    probe_size: int = 256,
    lr: float = 1e-3,
    tau: float = 0.005,
    target: str = "online",
    target_update_freq: int = 2,
    trace_every: int = 100,
    transition_hidden: int = 128,
    reward_hidden: int = 512,
) -> CollapseResult:
    torch.manual_seed(seed)
    env = make_env(task, EmissionConfig(distractor_mode=distractor_mode, render_size=render_size))
    buf = collect_random(env, buffer_transitions, seed)
    probe_buf = collect_random(env, probe_size, seed + 10_000)
    probe = obs_to_tensor(probe_buf.obs[:probe_size])

    encoder = Encoder(env.observation_shape, latent_dim, len(strides), num_filters, list(strides))
    ema = Encoder(env.observation_shape, latent_dim, len(strides), num_filters, list(strides))
    ema.load_state_dict(encoder.state_dict())
    for p in ema.parameters():
        p.requires_grad_(False)
    transition = AL.TransitionModel(latent_dim, env.action_dim, transition_hidden)
    reward_model = AL.RewardModel(latent_dim, reward_hidden)
    params = list(encoder.parameters()) + list(transition.parameters())
    if include_reward:
        params += list(reward_model.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    cfg = AL.BaselineConfig(include_transition=True, include_reward=include_reward, target=target)
    rng = np.random.default_rng(seed)

    initial = probe_variance(encoder, probe)
    trace = [initial]
    for step in range(updates):
        b = buf.sample(batch_size, rng)
        tb = AL.TensorBatch(
            obs=obs_to_tensor(b.obs),
            action=torch.as_tensor(b.action),
            reward=torch.as_tensor(b.reward),
            next_obs=obs_to_tensor(b.next_obs),
            done=torch.as_tensor(b.done).float(),
        )
        report = AL.baseline_loss(tb, encoder, ema, transition, reward_model, cfg)
        opt.zero_grad(set_to_none=True)
        report.total.backward()
        opt.step()
        if step % target_update_freq == 0:
            ema_update(ema, encoder, tau)
        if (step + 1) % trace_every == 0:
            trace.append(probe_variance(encoder, probe))
    return CollapseResult(seed, include_reward, initial, probe_variance(encoder, probe), trace)
