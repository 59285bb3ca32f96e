"""Training loop, evaluation and checkpoints.

One decision step = one environment ``step`` (``action_repeat`` inner steps).
Step counters in the config (``total_steps``, ``init_steps``, ``eval_every``)
count inner environment steps, the usual convention for pixel-control
benchmarks.  After the initial random-action phase every decision step runs
one gradient phase:

1. critic update (the encoder receives critic gradients),
2. actor + temperature update every ``actor_update_freq`` steps on detached
   latents,
3. auxiliary update (the encoder receives auxiliary gradients),
4. EMA of critic, encoder (and SPR projector) every ``target_update_freq``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import pickle
import time
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch
import torch.nn as nn

from replab import aux_losses as AL
from replab.agent import SACAgent, ema_update, obs_to_tensor
from replab.augment import apply_all, augmented_size, evaluation_view
from replab.bench import EnvSpec, RunRecord, normalize_score, write_records
from replab.config import ExperimentConfig, config_from_dict
from replab.env import EmissionConfig, PixelEnv, make_env
from replab.errors import ConfigError, TrainingAbort, UsageError
from replab.replay import ReplayBuffer, TransitionRecord

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}
REWARD_STRUCTURE = {"point_mass": "dense", "catch": "sparse"}


def build_env(cfg: ExperimentConfig) -> PixelEnv:
    e = cfg.env
    emission = EmissionConfig(
        distractor_mode=e.distractor_mode,
        layout=e.layout,
        render_size=e.render_size,
        agent_scale=e.agent_scale,
        action_repeat=e.action_repeat,
        frame_stack=e.frame_stack,
        frame_dir=e.frame_dir,
        procedural_frames=e.procedural_frames,
    )
    return make_env(e.task, emission, e.episode_length)


class AuxModules(nn.Module):
    """Parameters of the configured auxiliary objective."""

    def __init__(self, cfg: ExperimentConfig, action_dim: int, encoder):
        super().__init__()
        x = cfg.aux
        d = cfg.agent.latent_dim
        obj = x.objective
        if obj in ("baseline", "rollout", "contrastive", "spr", "value_aware", "reconstruction"):
            self.transition = AL.TransitionModel(d, action_dim, x.transition_hidden, x.transition_layers)
        if obj == "dbc":
            self.transition = AL.GaussianTransitionModel(d, action_dim, x.transition_hidden, x.transition_layers)
        if obj in ("baseline", "rollout", "dbc", "value_aware", "reconstruction"):
            self.reward = AL.RewardModel(d, x.reward_hidden, x.reward_layers, linear=x.decoder == "linear")
        if obj == "curl":
            self.bilinear = AL.Bilinear(d)
        if obj == "spr":
            self.heads = AL.ProjectionHeads(d, x.projection_dim)
        if obj == "reconstruction":
            self.decoder = AL.Decoder(encoder)


@dataclasses.dataclass
class TrainState:
    cfg: ExperimentConfig
    agent: SACAgent
    aux: AuxModules
    optimizers: dict
    buffer: ReplayBuffer
    env: PixelEnv
    np_rng: np.random.Generator
    torch_gen: torch.Generator
    env_steps: int = 0
    decision_steps: int = 0
    updates: int = 0
    actor_updates: int = 0
    ema_updates: int = 0
    episode: int = 0
    episode_return: float = 0.0
    obs: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None
    last_losses: dict = dataclasses.field(default_factory=dict)
    records: list = dataclasses.field(default_factory=list)

    @property
    def dtype(self):
        return DTYPES[self.cfg.agent.precision]


def init_state(cfg: ExperimentConfig) -> TrainState:
    seed = cfg.run.seed
    torch.manual_seed(seed)
    env = build_env(cfg)
    e = env
    size = augmented_size(cfg.augmentation, cfg.env.render_size)
    enc_shape = (size, size, 3 * cfg.env.frame_stack)
    a = cfg.agent
    dtype = DTYPES[a.precision]
    agent = SACAgent(
        enc_shape,
        e.action_dim,
        latent_dim=a.latent_dim,
        num_layers=a.num_layers,
        num_filters=a.num_filters,
        strides=a.strides,
        hidden_dim=a.hidden_dim,
        init_temperature=a.init_temperature,
    ).to(dtype)
    aux = AuxModules(cfg, e.action_dim, agent.encoder).to(dtype)
    aux_lr = cfg.aux.lr if cfg.aux.lr is not None else a.lr
    betas = (a.beta1, 0.999)
    optimizers = {
        "critic": torch.optim.Adam(list(agent.encoder.parameters()) + list(agent.critic.parameters()), lr=a.lr, betas=betas),
        "actor": torch.optim.Adam(agent.actor.parameters(), lr=a.lr, betas=betas),
        "alpha": torch.optim.Adam([agent.log_alpha], lr=a.alpha_lr, betas=(a.alpha_beta1, 0.999)),
    }
    aux_params = [p for p in aux.parameters() if p.requires_grad]
    if cfg.aux.objective != "none":
        optimizers["aux"] = torch.optim.Adam(list(agent.encoder.parameters()) + aux_params, lr=aux_lr, betas=betas)
    store_masks = cfg.aux.objective == "reconstruction" and cfg.aux.mode == "partial"
    if store_masks and any(s.kind != "intensity" for s in cfg.augmentation):
        raise ConfigError("partial reconstruction cannot be combined with geometric augmentations")
    buffer = ReplayBuffer(a.buffer_size, e.observation_shape, e.action_dim, store_masks=store_masks)
    gen = torch.Generator().manual_seed(seed)
    state = TrainState(cfg, agent, aux, optimizers, buffer, env, np.random.default_rng(seed), gen)
    _start_episode(state)
    return state


def _episode_seed(cfg, episode):
    return cfg.run.seed * 1_000_003 + episode


def _start_episode(state: TrainState):
    state.obs, _ = state.env.reset(_episode_seed(state.cfg, state.episode))
    state.mask = state.env.mask_stack()
    state.episode_return = 0.0


def _to_batch(state, batch, augment=True):
    cfg = state.cfg
    obs, next_obs = batch.obs, batch.next_obs
    if augment and cfg.augmentation:
        obs = apply_all(cfg.augmentation, obs, state.np_rng)
        next_obs = apply_all(cfg.augmentation, next_obs, state.np_rng)
    dt = state.dtype
    masks = None
    if batch.mask is not None:
        masks = torch.as_tensor(np.ascontiguousarray(batch.mask)).permute(0, 3, 1, 2).to(dt)
    return AL.TensorBatch(
        obs=obs_to_tensor(obs, dtype=dt),
        action=torch.as_tensor(batch.action).to(dt),
        reward=torch.as_tensor(batch.reward).to(dt),
        next_obs=obs_to_tensor(next_obs, dtype=dt),
        done=torch.as_tensor(batch.done).to(dt),
        mask=masks,
    )


def _seq_to_tensors(state, seq):
    dt = state.dtype
    b, t = seq.obs.shape[:2]
    obs = obs_to_tensor(seq.obs.reshape(b * t, *seq.obs.shape[2:]), dtype=dt)
    return dataclasses.replace(
        seq,
        obs=obs.reshape(b, t, *obs.shape[1:]),
        action=torch.as_tensor(seq.action).to(dt),
        reward=torch.as_tensor(seq.reward).to(dt),
    )


def _noise(state, n):
    return torch.randn((n, state.agent.action_dim), generator=state.torch_gen, dtype=state.dtype)


def aux_report(state: TrainState, tb: AL.TensorBatch):
    """Loss of the configured auxiliary objective on one batch."""
    cfg, agent, aux = state.cfg, state.agent, state.aux
    x = cfg.aux
    enc, ema = agent.encoder, agent.encoder_target
    obj = x.objective
    bcfg = AL.BaselineConfig(x.include_transition, x.include_reward, x.arrangement, x.target)
    if obj == "baseline":
        return AL.baseline_loss(tb, enc, ema, aux.transition, aux.reward, bcfg)
    if obj in ("rollout", "spr"):
        seq = state.buffer.sample_sequences(cfg.agent.batch_size, x.horizon, state.np_rng)
        seq = _seq_to_tensors(state, seq)
        if obj == "rollout":
            return AL.rollout_loss(seq, enc, ema, aux.transition, aux.reward, x.horizon, x.target, x.include_reward)
        return AL.spr_cosine_loss(seq, enc, ema, aux.transition, aux.heads, x.horizon)
    if obj == "contrastive":
        return AL.contrastive_transition_loss(tb, enc, ema, aux.transition, x.temperature, x.target)
    if obj == "curl":
        raw = state._raw_batch
        v1 = apply_all(cfg.augmentation, raw.obs, state.np_rng) if cfg.augmentation else raw.obs
        v2 = apply_all(cfg.augmentation, raw.obs, state.np_rng) if cfg.augmentation else raw.obs
        return AL.curl_loss(obs_to_tensor(v1, dtype=state.dtype), obs_to_tensor(v2, dtype=state.dtype), enc, ema, aux.bilinear)
    if obj == "dbc":
        gen = torch.Generator().manual_seed(int(state.np_rng.integers(2**31)))
        bisim = AL.dbc_loss(tb, enc, aux.transition, cfg.agent.gamma, generator=gen)
        nll = AL.gaussian_transition_nll(tb, enc, ema, aux.transition, x.target)
        mu, _ = aux.transition(enc(tb.obs), tb.action)
        rew = (tb.reward - aux.reward(mu)).pow(2).mean()
        comps = {**bisim.components, **nll.components, "reward_mse": float(rew.detach())}
        return AL.AuxLossReport(bisim.total + nll.total + rew, comps, bisim.diagnostics)
    if obj == "value_aware":
        return AL.value_aware_loss(
            tb, enc, aux.transition, agent.critic, agent.actor, agent.alpha, x.with_reward, getattr(aux, "reward", None), noise=_noise(state, len(tb))
        )
    if obj == "reconstruction":
        rec = AL.reconstruction_loss(tb, enc, aux.decoder, x.mode)
        if not x.with_baseline:
            return rec
        base = AL.baseline_loss(tb, enc, ema, aux.transition, aux.reward, bcfg)
        return AL.AuxLossReport(rec.total + base.total, {**rec.components, **base.components}, rec.diagnostics)
    raise ConfigError(f"unknown objective {obj!r}")


def _check_finite(state, name, loss, tb):
    if torch.isfinite(loss).all():
        return
    diag = {
        "step": state.env_steps,
        "loss": name,
        "obs_mean": float(tb.obs.mean()),
        "obs_std": float(tb.obs.std()),
        "reward_min": float(tb.reward.min()),
        "reward_max": float(tb.reward.max()),
        "action_abs_max": float(tb.action.abs().max()),
    }
    raise TrainingAbort(f"non-finite {name} loss at env step {state.env_steps}: {diag}", diag)


def update(state: TrainState):
    cfg, agent = state.cfg, state.agent
    a = cfg.agent
    raw = state.buffer.sample(a.batch_size, state.np_rng)
    state._raw_batch = raw
    tb = _to_batch(state, raw)
    opt = state.optimizers
    losses = {}

    with torch.no_grad():
        next_latent_target = agent.encoder_target(tb.next_obs)
    c_loss, c_diag = agent.critic_terms(
        tb.obs,
        tb.action,
        tb.reward,
        tb.next_obs,
        tb.done,
        a.gamma,
        next_latent_target=next_latent_target,
        noise=_noise(state, len(tb)),
        detach_encoder=not a.critic_trains_encoder,
    )
    _check_finite(state, "critic", c_loss, tb)
    opt["critic"].zero_grad(set_to_none=True)
    c_loss.backward()
    opt["critic"].step()
    losses["critic"] = float(c_loss.detach())
    losses.update(c_diag)

    if state.updates % a.actor_update_freq == 0:
        a_loss, t_loss, a_diag = agent.actor_terms(tb.obs, noise=_noise(state, len(tb)))
        _check_finite(state, "actor", a_loss, tb)
        opt["actor"].zero_grad(set_to_none=True)
        a_loss.backward()
        opt["actor"].step()
        opt["alpha"].zero_grad(set_to_none=True)
        t_loss.backward()
        opt["alpha"].step()
        state.actor_updates += 1
        losses.update(actor=float(a_loss.detach()), temperature=float(t_loss.detach()), alpha=float(agent.alpha.detach()))
        losses.update(a_diag)

    if "aux" in opt:
        report = aux_report(state, tb)
        _check_finite(state, "aux", report.total, tb)
        opt["aux"].zero_grad(set_to_none=True)
        report.total.backward()
        opt["aux"].step()
        losses.update(report.as_record())
        losses.update({f"diag_{k}": v for k, v in report.diagnostics.items()})

    if state.updates % a.target_update_freq == 0:
        agent.soft_update_targets(a.critic_tau, a.encoder_tau)
        if hasattr(state.aux, "heads"):
            ema_update(state.aux.heads.target, state.aux.heads.online, a.encoder_tau)
        state.ema_updates += 1
    state.updates += 1
    del state._raw_batch
    state.last_losses = losses
    return losses


def policy_action(agent: SACAgent, cfg: ExperimentConfig, obs, deterministic=True, generator=None):
    view = evaluation_view(cfg.augmentation, np.asarray(obs)[None])[0]
    return agent.act(view, deterministic=deterministic, generator=generator)


def env_spec(cfg: ExperimentConfig, env: PixelEnv) -> EnvSpec:
    return EnvSpec(name=cfg.env.task, family="synthetic", max_return=env.max_return)


def run_episodes(policy: Callable, cfg: ExperimentConfig, episodes: int, seed: int):
    """Roll out ``policy(obs) -> action`` on fresh env instances."""
    env = build_env(cfg)
    returns = []
    for i in range(episodes):
        obs, _ = env.reset(seed * 1_000_003 + 7919 * (i + 1))
        total, done = 0.0, False
        while not done:
            res = env.step(policy(obs))
            total += res.reward
            obs, done = res.observation, res.done
        returns.append(total)
    return returns, env


def evaluate_agent(agent, cfg, episodes, seed):
    returns, env = run_episodes(lambda o: policy_action(agent, cfg, o), cfg, episodes, seed)
    spec = env_spec(cfg, env)
    return {
        "returns": returns,
        "mean_return": float(np.mean(returns)),
        "normalized": [normalize_score(r, spec) for r in returns],
        "mean_normalized": float(np.mean([normalize_score(r, spec) for r in returns])),
    }


def random_policy_return(cfg, episodes, seed):
    env = build_env(cfg)
    rng = np.random.default_rng(seed + 12345)
    returns, _ = run_episodes(lambda o: rng.uniform(-1, 1, env.action_dim), cfg, episodes, seed)
    return float(np.mean(returns))


def make_record(state: TrainState, summary):
    cfg = state.cfg
    return RunRecord(
        run_id=f"{cfg.method_name}-{cfg.env.task}-{cfg.config_hash()}-s{cfg.run.seed}",
        method=cfg.method_name,
        env=f"{cfg.env.task}/{cfg.env.distractor_mode}/{cfg.env.layout}",
        seed=cfg.run.seed,
        step=state.env_steps,
        episode_return=summary["mean_return"],
        normalized_score=summary["mean_normalized"],
        losses={k: v for k, v in sorted(state.last_losses.items()) if isinstance(v, float) and math.isfinite(v)},
        timestamp=time.time() if cfg.run.record_wallclock else 0.0,
        config_hash=cfg.config_hash(),
        env_family="synthetic",
        reward_structure=REWARD_STRUCTURE.get(cfg.env.task, "dense"),
        distractors=cfg.env.distractor_mode != "none",
        augmentations=sorted({s.kind for s in cfg.augmentation}),
        preset=cfg.run.preset,
    )


def train(cfg: ExperimentConfig, callbacks=(), state: Optional[TrainState] = None) -> TrainState:
    """Run until ``cfg.run.total_steps`` environment steps.

    ``callbacks`` receive ``(event, state, payload)`` with event ``"update"``
    (payload: loss dict) or ``"eval"`` (payload: RunRecord).  Passing a
    loaded ``state`` resumes it.
    """
    if state is None:
        state = init_state(cfg)
    elif state.cfg.model_hash() != cfg.model_hash():
        raise ConfigError(f"checkpoint model hash {state.cfg.model_hash()} != config {cfg.model_hash()}")
    else:
        state.cfg = cfg
    torch.set_num_threads(1)
    out_file = None
    if cfg.run.output_dir:
        out_file = Path(cfg.run.output_dir) / f"records-{cfg.method_name}-s{cfg.run.seed}.jsonl"
    a = cfg.agent
    repeat = cfg.env.action_repeat
    while state.env_steps < cfg.run.total_steps:
        if state.env_steps < a.init_steps:
            action = state.np_rng.uniform(-1.0, 1.0, size=state.agent.action_dim)
        else:
            action = policy_action(state.agent, cfg, state.obs, deterministic=False, generator=state.torch_gen)
        res = state.env.step(action)
        next_mask = res.info["mask_stack"]
        terminal = bool(res.info["terminal"])
        state.buffer.push(
            TransitionRecord(
                obs=state.obs,
                action=np.asarray(action, dtype=np.float32),
                reward=res.reward,
                next_obs=res.observation,
                done=terminal,
                truncated=bool(res.info["truncated"]),
                mask=state.mask if state.buffer.store_masks else None,
                next_mask=next_mask if state.buffer.store_masks else None,
            )
        )
        state.obs, state.mask = res.observation, next_mask
        state.episode_return += res.reward
        prev = state.env_steps
        state.env_steps += repeat
        state.decision_steps += 1
        if res.done:
            state.episode += 1
            _start_episode(state)
        if state.env_steps > a.init_steps and len(state.buffer) > 0:
            losses = update(state)
            for cb in callbacks:
                cb("update", state, losses)
        if state.env_steps // cfg.run.eval_every > prev // cfg.run.eval_every or state.env_steps >= cfg.run.total_steps:
            summary = evaluate_agent(state.agent, cfg, cfg.run.eval_episodes, cfg.run.seed)
            rec = make_record(state, summary)
            state.records.append(rec)
            if out_file is not None:
                write_records([rec], out_file)
            for cb in callbacks:
                cb("eval", state, rec)
    return state


# -- checkpoints ---------------------------------------------------------------

MANIFEST = "manifest.json"


def _blob_bytes(obj) -> bytes:
    import io

    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _manifest_digest(manifest) -> str:
    body = {k: v for k, v in manifest.items() if k != "digest"}
    return _sha(json.dumps(body, sort_keys=True).encode())


def _buffer_state(buf: ReplayBuffer):
    n = len(buf)
    d = {
        "capacity": buf.capacity,
        "obs_shape": list(buf.obs_shape),
        "action_dim": buf.action_dim,
        "store_masks": buf.store_masks,
        "idx": buf.idx,
        "full": buf.full,
    }
    arrays = {
        "obs": buf.obs[:n],
        "next_obs": buf.next_obs[:n],
        "actions": buf.actions[:n],
        "rewards": buf.rewards[:n],
        "dones": buf.dones[:n],
        "truncs": buf.truncs[:n],
    }
    if buf.store_masks:
        arrays.update(masks=buf.masks[:n], next_masks=buf.next_masks[:n])
    return d, arrays


def save_checkpoint(state: TrainState, directory) -> Path:
    """Directory with ``manifest.json`` plus one blob per parameter group."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs = {
        "agent": state.agent.state_dict(),
        "aux": state.aux.state_dict(),
        **{f"optim_{k}": v.state_dict() for k, v in sorted(state.optimizers.items())},
        "rng": {"numpy": state.np_rng.bit_generator.state, "torch": state.torch_gen.get_state()},
        "env": pickle.dumps(state.env, protocol=4),
    }
    meta, arrays = _buffer_state(state.buffer)
    blobs["buffer"] = {"meta": meta, **{k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}}
    groups = {}
    for name, obj in blobs.items():
        data = _blob_bytes(obj)
        (directory / f"{name}.pt").write_bytes(data)
        groups[name] = _sha(data)
    manifest = {
        "format": 1,
        "config": state.cfg.to_dict(),
        "config_hash": state.cfg.config_hash(),
        "model_hash": state.cfg.model_hash(),
        "counters": {
            "env_steps": state.env_steps,
            "decision_steps": state.decision_steps,
            "updates": state.updates,
            "actor_updates": state.actor_updates,
            "ema_updates": state.ema_updates,
            "episode": state.episode,
            "episode_return": state.episode_return,
        },
        "last_losses": state.last_losses,
        "obs": _sha(np.ascontiguousarray(state.obs).tobytes()),
        "groups": groups,
    }
    manifest["digest"] = _manifest_digest(manifest)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    # obs/mask of the running episode are pickled with the env wrapper state
    (directory / "episode.pt").write_bytes(_blob_bytes({"obs": state.obs, "mask": state.mask}))
    return directory


def read_manifest(directory):
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise UsageError(f"{directory} has no {MANIFEST}")
    manifest = json.loads(path.read_text())
    if manifest.get("digest") != _manifest_digest(manifest):
        raise UsageError(f"{path}: manifest digest mismatch; refusing to load a tampered checkpoint")
    return manifest


def _load_blob(directory, name, expected):
    path = Path(directory) / f"{name}.pt"
    if not path.exists():
        raise UsageError(f"checkpoint is missing the blob for parameter group '{name}'")
    data = path.read_bytes()
    if _sha(data) != expected:
        raise UsageError(f"checkpoint blob for parameter group '{name}' does not match its manifest hash")
    import io

    return torch.load(io.BytesIO(data), weights_only=False)


def load_checkpoint(directory) -> TrainState:
    directory = Path(directory)
    manifest = read_manifest(directory)
    cfg = config_from_dict(manifest["config"])
    if cfg.config_hash() != manifest["config_hash"]:
        raise UsageError(f"config hash {cfg.config_hash()} does not match manifest {manifest['config_hash']}")
    groups = manifest["groups"]
    for name in ("agent", "aux", "rng", "env", "buffer"):
        if name not in groups:
            raise UsageError(f"manifest lists no blob for parameter group '{name}'")
    state = init_state(cfg)
    state.agent.load_state_dict(_load_blob(directory, "agent", groups["agent"]))
    state.aux.load_state_dict(_load_blob(directory, "aux", groups["aux"]))
    for k, opt in state.optimizers.items():
        name = f"optim_{k}"
        if name not in groups:
            raise UsageError(f"manifest lists no blob for parameter group '{name}'")
        opt.load_state_dict(_load_blob(directory, name, groups[name]))
    rng = _load_blob(directory, "rng", groups["rng"])
    state.np_rng.bit_generator.state = rng["numpy"]
    state.torch_gen.set_state(rng["torch"])
    state.env = pickle.loads(_load_blob(directory, "env", groups["env"]))
    buf = _load_blob(directory, "buffer", groups["buffer"])
    meta = buf.pop("meta")
    b = state.buffer
    n = len(buf["rewards"])
    for k, v in buf.items():
        getattr(b, k)[:n] = v.numpy()
    b.idx, b.full = meta["idx"], meta["full"]
    c = manifest["counters"]
    for k, v in c.items():
        setattr(state, k, v)
    state.last_losses = manifest["last_losses"]
    ep_path = directory / "episode.pt"
    if not ep_path.exists():
        raise UsageError("checkpoint is missing the blob for parameter group 'episode'")
    import io

    ep = torch.load(io.BytesIO(ep_path.read_bytes()), weights_only=False)
    state.obs, state.mask = ep["obs"], ep["mask"]
    if _sha(np.ascontiguousarray(state.obs).tobytes()) != manifest["obs"]:
        raise UsageError("checkpoint episode blob does not match its manifest hash")
    return state


def evaluate(checkpoint, episodes: int, seed: int, cfg: Optional[ExperimentConfig] = None):
    """Deterministic mean-action rollouts of a saved agent."""
    manifest = read_manifest(checkpoint)
    if cfg is not None and cfg.model_hash() != manifest["model_hash"]:
        raise ConfigError(f"checkpoint model hash {manifest['model_hash']} differs from config hash {cfg.model_hash()}")
    state = load_checkpoint(checkpoint)
    summary = evaluate_agent(state.agent, state.cfg, episodes, seed)
    summary["env_steps"] = state.env_steps
    return summary
