"""Auxiliary representation objectives.

Every loss is a function of a batch of tensors plus the modules it needs and
returns an :class:`AuxLossReport`.  ``report.total`` keeps the autograd graph;
components and diagnostics are detached floats keyed in snake_case.

Next-state targets come from ``target_latent`` which supports three modes:

``ema``        EMA encoder under stop-gradient (default)
``online_sg``  online encoder under stop-gradient
``online``     online encoder with gradients flowing into the target side
"""

from __future__ import annotations

import dataclasses
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from replab.agent import Encoder, conv_out, mlp, weight_init
from replab.errors import UsageError, ValidationError

TARGET_MODES = ("ema", "online_sg", "online")


@dataclasses.dataclass
class AuxLossReport:
    total: torch.Tensor
    components: Dict[str, float]
    diagnostics: Dict[str, float] = dataclasses.field(default_factory=dict)

    def as_record(self, prefix="aux_"):
        out = {f"{prefix}total": float(self.total.detach())}
        out.update({f"{prefix}{k}": v for k, v in self.components.items()})
        return out


@dataclasses.dataclass
class TensorBatch:
    """Torch view of a replay batch; pixels stay in [0, 255], NCHW."""

    obs: torch.Tensor
    action: torch.Tensor
    reward: torch.Tensor
    next_obs: torch.Tensor
    done: torch.Tensor
    mask: Optional[torch.Tensor] = None
    next_mask: Optional[torch.Tensor] = None

    def __len__(self):
        return self.reward.shape[0]


# -- model parameters ----------------------------------------------------------


class TransitionModel(nn.Module):
    """Deterministic latent dynamics ``(s, a) -> s'``."""

    def __init__(self, latent_dim, action_dim, hidden=128, n_layers=6):
        super().__init__()
        self.net = mlp(latent_dim + action_dim, hidden, latent_dim, n_layers)
        self.apply(weight_init)

    def forward(self, latent, action):
        return self.net(torch.cat([latent, action], dim=-1))


class GaussianTransitionModel(nn.Module):
    """Diagonal-Gaussian latent dynamics; returns ``(mean, std)`` with std > 0."""

    min_std = 1e-4

    def __init__(self, latent_dim, action_dim, hidden=128, n_layers=6):
        super().__init__()
        self.net = mlp(latent_dim + action_dim, hidden, 2 * latent_dim, n_layers)
        self.apply(weight_init)

    def forward(self, latent, action):
        mean, raw = self.net(torch.cat([latent, action], dim=-1)).chunk(2, dim=-1)
        return mean, F.softplus(raw) + self.min_std


class RewardModel(nn.Module):
    """Latent -> scalar reward; ``linear=True`` gives a single affine map."""

    def __init__(self, latent_dim, hidden=512, n_layers=3, linear=False):
        super().__init__()
        self.net = nn.Linear(latent_dim, 1) if linear else mlp(latent_dim, hidden, 1, n_layers)
        self.apply(weight_init)

    def forward(self, latent):
        return self.net(latent).squeeze(-1)


class ProjectionHeads(nn.Module):
    """Online projector, EMA target projector and predictor."""

    def __init__(self, latent_dim, proj_dim=64, hidden=128):
        super().__init__()
        self.online = nn.Sequential(nn.Linear(latent_dim, hidden), nn.ReLU(), nn.Linear(hidden, proj_dim))
        self.target = nn.Sequential(nn.Linear(latent_dim, hidden), nn.ReLU(), nn.Linear(hidden, proj_dim))
        self.predictor = nn.Sequential(nn.Linear(proj_dim, hidden), nn.ReLU(), nn.Linear(hidden, proj_dim))
        self.apply(weight_init)
        self.target.load_state_dict(self.online.state_dict())
        for p in self.target.parameters():
            p.requires_grad_(False)


class Bilinear(nn.Module):
    def __init__(self, latent_dim):
        super().__init__()
        self.W = nn.Parameter(torch.rand(latent_dim, latent_dim))


class Decoder(nn.Module):
    """Affine map plus transposed convolutions mirroring an :class:`Encoder`."""

    def __init__(self, encoder: Encoder):
        super().__init__()
        h, w, c = encoder.obs_shape
        sizes = [(h, w)]
        for s in encoder.strides:
            sizes.append((conv_out(sizes[-1][0], s), conv_out(sizes[-1][1], s)))
        self.nf = encoder.num_filters
        self.spatial = sizes[-1]
        self.fc = nn.Linear(encoder.latent_dim, self.nf * sizes[-1][0] * sizes[-1][1])
        layers = []
        for i in range(len(encoder.strides) - 1, -1, -1):
            s = encoder.strides[i]
            hi, wi = sizes[i + 1]
            ho, wo = sizes[i]
            pad = (ho - ((hi - 1) * s + 3), wo - ((wi - 1) * s + 3))
            out_ch = c if i == 0 else self.nf
            layers.append(nn.ConvTranspose2d(self.nf, out_ch, 3, stride=s, output_padding=pad))
        self.deconvs = nn.ModuleList(layers)
        self.apply(weight_init)

    def forward(self, latent):
        x = F.relu(self.fc(latent)).view(-1, self.nf, *self.spatial)
        for i, deconv in enumerate(self.deconvs):
            x = deconv(x)
            if i < len(self.deconvs) - 1:
                x = F.relu(x)
        return x


# -- helpers -------------------------------------------------------------------


def target_latent(obs, encoder, ema_encoder=None, mode="ema"):
    if mode == "ema":
        if ema_encoder is None:
            raise UsageError("target mode 'ema' needs an EMA encoder")
        with torch.no_grad():
            return ema_encoder(obs)
    if mode == "online_sg":
        return encoder(obs).detach()
    if mode == "online":
        return encoder(obs)
    raise ValidationError(f"unknown target mode {mode!r}; choose from {TARGET_MODES}")


def latent_diagnostics(latent):
    latent = latent.detach()
    return {
        "latent_variance": float(latent.var(dim=0, unbiased=False).mean()) if latent.shape[0] > 1 else 0.0,
        "latent_norm": float(latent.norm(dim=-1).mean()),
    }


def _scalar(t):
    return float(t.detach())


def _frozen(module):
    """Parameters detached: gradients reach inputs but never the module."""
    return {k: v.detach() for k, v in module.named_parameters()}


# -- objectives ----------------------------------------------------------------


@dataclasses.dataclass
class BaselineConfig:
    include_transition: bool = True
    include_reward: bool = True
    arrangement: str = "through_transition"  # or "independent"
    target: str = "ema"


def baseline_loss(batch: TensorBatch, encoder, ema_encoder, transition, reward_model, cfg: BaselineConfig = None):
    """Transition and reward prediction, equally weighted."""
    cfg = cfg or BaselineConfig()
    if not (cfg.include_transition or cfg.include_reward):
        raise UsageError("baseline_loss needs at least one of include_transition / include_reward")
    if cfg.arrangement not in ("through_transition", "independent"):
        raise ValidationError(f"unknown arrangement {cfg.arrangement!r}")
    s = encoder(batch.obs)
    pred = transition(s, batch.action)
    target = target_latent(batch.next_obs, encoder, ema_encoder, cfg.target)
    components = {}
    total = s.new_zeros(())
    if cfg.include_transition:
        trans = (target - pred).pow(2).mean()
        components["transition_mse"] = _scalar(trans)
        total = total + trans
    if cfg.include_reward:
        reward_in = pred if cfg.arrangement == "through_transition" else target.detach()
        rew = (batch.reward - reward_model(reward_in)).pow(2).mean()
        components["reward_mse"] = _scalar(rew)
        total = total + rew
    diag = latent_diagnostics(s)
    diag["target_norm"] = float(target.detach().norm(dim=-1).mean())
    return AuxLossReport(total, components, diag)


def rollout_loss(seq, encoder, ema_encoder, transition, reward_model, horizon, target="ema", include_reward=True):
    """Open-loop latent rollout over ``horizon`` steps, averaged over steps.

    ``seq`` is a :class:`SequenceTensors`-like object with ``obs`` (B, H+1,
    C, H, W), ``action`` (B, H, A) and ``reward`` (B, H).
    """
    if horizon < 1:
        raise ValidationError("horizon must be >= 1")
    if horizon > seq.action.shape[1]:
        raise UsageError(f"horizon {horizon} exceeds window length {seq.action.shape[1]}")
    s = encoder(seq.obs[:, 0])
    pred = s
    trans_sum = s.new_zeros(())
    rew_sum = s.new_zeros(())
    for h in range(1, horizon + 1):
        pred = transition(pred, seq.action[:, h - 1])
        tgt = target_latent(seq.obs[:, h], encoder, ema_encoder, target)
        trans_sum = trans_sum + (tgt - pred).pow(2).mean()
        if include_reward:
            rew_sum = rew_sum + (seq.reward[:, h - 1] - reward_model(pred)).pow(2).mean()
    total = (trans_sum + rew_sum) / horizon
    components = {"transition_mse": _scalar(trans_sum) / horizon}
    if include_reward:
        components["reward_mse"] = _scalar(rew_sum) / horizon
    return AuxLossReport(total, components, latent_diagnostics(s))


def info_nce(logits):
    """Cross-entropy of each row against its diagonal entry, averaged."""
    labels = torch.arange(logits.shape[0], device=logits.device)
    return F.cross_entropy(logits, labels)


def contrastive_transition_loss(batch, encoder, ema_encoder, transition, temperature=0.1, target="ema"):
    if temperature <= 0:
        raise ValidationError("temperature must be > 0")
    anchors = transition(encoder(batch.obs), batch.action)
    positives = target_latent(batch.next_obs, encoder, ema_encoder, target).detach()
    logits = anchors @ positives.T / temperature
    loss = info_nce(logits)
    return AuxLossReport(loss, {"info_nce": _scalar(loss)}, latent_diagnostics(anchors))


def curl_loss(view_q, view_k, encoder, ema_encoder, bilinear: Bilinear):
    """Bilinear contrastive loss between two augmented views."""
    if view_q.shape != view_k.shape:
        raise ValidationError(f"augmented views differ in shape: {tuple(view_q.shape)} vs {tuple(view_k.shape)}")
    q = encoder(view_q)
    with torch.no_grad():
        k = ema_encoder(view_k)
    logits = q @ bilinear.W @ k.T
    logits = logits - logits.max(dim=1, keepdim=True).values
    loss = info_nce(logits)
    return AuxLossReport(loss, {"curl": _scalar(loss)}, latent_diagnostics(q))


def safe_cosine(a, b):
    """Row-wise cosine; rows with a zero-norm vector get cosine 0."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    ok = (na > 0) & (nb > 0)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    cos = (a * b).sum(-1) / denom
    return torch.where(ok, cos, torch.zeros_like(cos)), ~ok


def spr_cosine_loss(seq, encoder, ema_encoder, transition, heads: ProjectionHeads, horizon):
    """Negative summed cosine between predicted and target projections."""
    if horizon < 1:
        raise ValidationError("horizon must be >= 1")
    if horizon > seq.action.shape[1]:
        raise UsageError(f"horizon {horizon} exceeds window length {seq.action.shape[1]}")
    s = encoder(seq.obs[:, 0])
    pred = s
    total = s.new_zeros(())
    degenerate = 0
    for h in range(1, horizon + 1):
        pred = transition(pred, seq.action[:, h - 1])
        y_hat = heads.predictor(heads.online(pred))
        with torch.no_grad():
            y = heads.target(ema_encoder(seq.obs[:, h]))
        cos, bad = safe_cosine(y_hat, y)
        degenerate += int(bad.sum())
        total = total - cos.mean()
    diag = latent_diagnostics(s)
    diag["zero_norm_count"] = float(degenerate)
    return AuxLossReport(total, {"cosine": _scalar(total)}, diag)


def w2_diag_gaussian(mu1, sigma1, mu2, sigma2):
    """2-Wasserstein distance between diagonal Gaussians (last axis = dims)."""
    if isinstance(mu1, torch.Tensor):
        if (sigma1 <= 0).any() or (sigma2 <= 0).any():
            raise ValidationError("standard deviations must be > 0")
        sq = (mu1 - mu2).pow(2).sum(-1) + (sigma1 - sigma2).pow(2).sum(-1)
        return sq.sqrt()
    mu1, sigma1, mu2, sigma2 = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (mu1, sigma1, mu2, sigma2))
    if np.any(sigma1 <= 0) or np.any(sigma2 <= 0):
        raise ValidationError("standard deviations must be > 0")
    return np.sqrt(((mu1 - mu2) ** 2).sum(-1) + ((sigma1 - sigma2) ** 2).sum(-1))


def derangement(n, generator=None):
    """Random permutation without fixed points (a single random n-cycle)."""
    if n < 2:
        raise UsageError("a derangement needs at least 2 elements")
    order = torch.randperm(n, generator=generator)
    perm = torch.empty(n, dtype=torch.long)
    perm[order] = order.roll(-1)
    return perm


def dbc_loss(batch, encoder, transition: GaussianTransitionModel, gamma=0.99, pairing=None, generator=None, sg_encoder=None):
    """Bisimulation loss over pairs ``(i, pairing[i])``.

    The W2 term uses stop-gradient latents from ``sg_encoder`` (default: the
    online encoder itself).
    """
    n = len(batch)
    if n < 2:
        raise UsageError("dbc_loss needs a batch of at least 2")
    if pairing is None:
        pairing = derangement(n, generator)
    s = encoder(batch.obs)
    with torch.no_grad():
        s_bar = s.detach() if sg_encoder is None else sg_encoder(batch.obs)
        mu, sigma = transition(s_bar, batch.action)
        w2 = w2_diag_gaussian(mu, sigma, mu[pairing], sigma[pairing])
    z_dist = (s - s[pairing]).abs().sum(-1)
    r_dist = (batch.reward - batch.reward[pairing]).abs()
    loss = (z_dist - r_dist - gamma * w2).pow(2).mean()
    diag = latent_diagnostics(s)
    diag["w2_mean"] = float(w2.mean())
    return AuxLossReport(loss, {"bisim": _scalar(loss)}, diag)


def gaussian_transition_nll(batch, encoder, ema_encoder, transition: GaussianTransitionModel, target="ema"):
    """Trains the Gaussian dynamics used by :func:`dbc_loss`."""
    mu, sigma = transition(encoder(batch.obs), batch.action)
    tgt = target_latent(batch.next_obs, encoder, ema_encoder, target)
    nll = (0.5 * ((tgt - mu) / sigma).pow(2) + sigma.log()).mean()
    return AuxLossReport(nll, {"transition_nll": _scalar(nll)})


def value_aware_loss(
    batch, encoder, transition, critic, actor, alpha, with_reward=False, reward_model=None, noise=None, sg_encoder=None
):
    """Match soft values at the predicted and the encoded next latent.

    One pre-squash policy sample ``u`` drawn at the encoded next latent is
    shared by both values.  Critic and actor parameters get no gradient.  The
    stop-gradient next latent comes from ``sg_encoder`` (default: ``encoder``).
    """
    if with_reward and reward_model is None:
        raise UsageError("with_reward=True needs a reward model")
    alpha = alpha.detach() if isinstance(alpha, torch.Tensor) else alpha
    critic_p = _frozen(critic)
    actor_p = _frozen(actor)
    s = encoder(batch.obs)
    pred = transition(s, batch.action)
    with torch.no_grad():
        s_next = (sg_encoder or encoder)(batch.next_obs)
        action, log_pi, u, _ = functional_call(actor, actor_p, (s_next,), {"noise": noise})
        q1, q2 = functional_call(critic, critic_p, (s_next, action))
        v = torch.min(q1, q2) - alpha * log_pi
    _, log_pi_hat, _, _ = functional_call(actor, actor_p, (pred,), {"pre_tanh": u})
    q1h, q2h = functional_call(critic, critic_p, (pred, action))
    v_hat = torch.min(q1h, q2h) - alpha * log_pi_hat
    va = (v - v_hat).pow(2).mean()
    components = {"value_mse": _scalar(va)}
    total = va
    if with_reward:
        rew = (batch.reward - reward_model(pred)).pow(2).mean()
        components["reward_mse"] = _scalar(rew)
        total = total + rew
    return AuxLossReport(total, components, latent_diagnostics(s))


def reconstruction_loss(batch, encoder, decoder, mode="full"):
    """Pixel MSE in [0, 1]; ``partial`` blacks out everything off the masks.

    ``batch.mask`` holds one relevance mask per stacked frame, shape
    (B, k, H, W), oldest first.
    """
    if mode not in ("full", "partial"):
        raise ValidationError(f"unknown reconstruction mode {mode!r}")
    pixels = batch.obs / 255.0
    if mode == "partial":
        if batch.mask is None:
            raise UsageError("partial reconstruction needs relevance masks in the batch")
        per_channel = batch.mask.to(pixels.dtype).repeat_interleave(3, dim=1)
        pixels = pixels * per_channel
    s = encoder(batch.obs)
    recon = decoder(s)
    if recon.shape != pixels.shape:
        raise ValidationError(f"decoder output {tuple(recon.shape)} != observation {tuple(pixels.shape)}")
    loss = (recon - pixels).pow(2).mean()
    return AuxLossReport(loss, {f"reconstruction_{mode}": _scalar(loss)}, latent_diagnostics(s))

