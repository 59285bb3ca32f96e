"""Pixel encoder and soft actor-critic with a shared encoder.

The critic and the auxiliary objectives train the encoder.  The actor reads
detached latents so its gradients never reach the encoder.
"""

from __future__ import annotations

import copy
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from replab.errors import ValidationError

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0


def conv_out(size: int, stride: int, kernel: int = 3) -> int:
    return (size - kernel) // stride + 1


def obs_to_tensor(obs, device=None, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W, C) uint8 array -> (B, C, H, W) float tensor in [0, 255]."""
    t = torch.as_tensor(np.ascontiguousarray(obs), device=device)
    return t.permute(0, 3, 1, 2).to(dtype)


def weight_init(m):
    """Orthogonal linear weights; delta-orthogonal convs (centre tap only)."""
    if isinstance(m, nn.Linear):
        nn.init.orthogonal_(m.weight.data)
        m.bias.data.fill_(0.0)
    elif isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        m.weight.data.fill_(0.0)
        m.bias.data.fill_(0.0)
        mid = m.weight.size(2) // 2
        nn.init.orthogonal_(m.weight.data[:, :, mid, mid], gain=nn.init.calculate_gain("relu"))


class Encoder(nn.Module):
    """Conv stack (3x3 kernels, ReLU) followed by an affine map to the latent.

    Pixels are divided by 255 before the first convolution.
    """

    def __init__(self, obs_shape, latent_dim=50, num_layers=4, num_filters=32, strides=None):
        super().__init__()
        h, w, c = obs_shape
        if strides is None:
            strides = (2,) + (1,) * (num_layers - 1)
        if len(strides) != num_layers:
            raise ValidationError("need one stride per conv layer")
        self.obs_shape = tuple(obs_shape)
        self.latent_dim = latent_dim
        self.strides = tuple(strides)
        layers = []
        in_ch = c
        for s in strides:
            layers.append(nn.Conv2d(in_ch, num_filters, 3, stride=s))
            in_ch = num_filters
            h, w = conv_out(h, s), conv_out(w, s)
            if h < 1 or w < 1:
                raise ValidationError(f"observation {obs_shape} is too small for strides {tuple(strides)}")
        self.convs = nn.ModuleList(layers)
        self.spatial = (h, w)
        self.num_filters = num_filters
        self.fc = nn.Linear(num_filters * h * w, latent_dim)
        self.apply(weight_init)

    def forward_conv(self, obs):
        x = obs / 255.0
        for conv in self.convs:
            x = F.relu(conv(x))
        return x.flatten(1)

    def forward(self, obs):
        if obs.dim() != 4 or tuple(obs.shape[1:]) != (self.obs_shape[2], *self.obs_shape[:2]):
            raise ValidationError(f"observation batch shape {tuple(obs.shape)} does not match encoder input {self.obs_shape}")
        return self.fc(self.forward_conv(obs))


def encode(encoder: Encoder, obs) -> torch.Tensor:
    """Encode a single HWC observation or an NHWC batch of uint8 pixels."""
    arr = np.asarray(obs)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.shape[1:] != encoder.obs_shape:
        raise ValidationError(f"observation shape {arr.shape[1:]} does not match encoder input {encoder.obs_shape}")
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        z = encoder(obs_to_tensor(arr, dtype=dtype))
    return z[0] if single else z


def mlp(in_dim, hidden, out_dim, n_layers):
    """``n_layers`` linear layers with ReLU between them."""
    if n_layers == 1:
        return nn.Linear(in_dim, out_dim)
    layers = [nn.Linear(in_dim, hidden), nn.ReLU()]
    for _ in range(n_layers - 2):
        layers += [nn.Linear(hidden, hidden), nn.ReLU()]
    layers.append(nn.Linear(hidden, out_dim))
    return nn.Sequential(*layers)


class Actor(nn.Module):
    """Tanh-squashed diagonal Gaussian policy over latents."""

    def __init__(self, latent_dim, action_dim, hidden=1024):
        super().__init__()
        self.action_dim = action_dim
        self.trunk = mlp(latent_dim, hidden, 2 * action_dim, 3)
        self.apply(weight_init)

    def dist_params(self, latent):
        mu, log_std = self.trunk(latent).chunk(2, dim=-1)
        log_std = torch.tanh(log_std)
        log_std = LOG_STD_MIN + 0.5 * (LOG_STD_MAX - LOG_STD_MIN) * (log_std + 1)
        return mu, log_std

    def forward(self, latent, noise=None, deterministic=False, pre_tanh=None):
        """Returns ``(action, log_prob, pre_tanh, mean_action)``.

        Passing ``pre_tanh`` evaluates the log-density of that given sample.
        """
        mu, log_std = self.dist_params(latent)
        if pre_tanh is not None:
            u = pre_tanh
        elif deterministic:
            u = mu
        else:
            if noise is None:
                noise = torch.randn_like(mu)
            u = mu + noise * log_std.exp()
        log_gauss = (-0.5 * ((u - mu) / log_std.exp()).pow(2) - log_std).sum(-1) - 0.5 * math.log(2 * math.pi) * self.action_dim
        log_pi = log_gauss - squash_correction(u)
        return torch.tanh(u), log_pi, u, torch.tanh(mu)


def squash_correction(pre_tanh):
    # log(1 - tanh(u)^2), written stably
    return (2.0 * (math.log(2.0) - pre_tanh - F.softplus(-2.0 * pre_tanh))).sum(-1)


class Critic(nn.Module):
    """Twin Q heads over (latent, action)."""

    def __init__(self, latent_dim, action_dim, hidden=1024):
        super().__init__()
        self.q1 = mlp(latent_dim + action_dim, hidden, 1, 3)
        self.q2 = mlp(latent_dim + action_dim, hidden, 1, 3)
        self.apply(weight_init)

    def forward(self, latent, action):
        x = torch.cat([latent, action], dim=-1)
        return self.q1(x).squeeze(-1), self.q2(x).squeeze(-1)


# -- losses ------------------------------------------------------------------


def soft_value(q1_target, q2_target, log_pi, alpha):
    """One-sample soft value: ``min(Q1, Q2) - alpha * log pi``."""
    return torch.min(q1_target, q2_target) - alpha * log_pi


def td_target(reward, done, next_value, gamma=0.99):
    return reward + gamma * (1.0 - done) * next_value


def critic_loss(q1, q2, target):
    """Mean over batch and both heads of the squared TD error."""
    target = target.detach()
    return 0.5 * ((q1 - target).pow(2).mean() + (q2 - target).pow(2).mean())


def actor_loss(alpha, log_pi, q1, q2):
    return (alpha * log_pi - torch.min(q1, q2)).mean()


def temperature_loss(alpha, log_pi, target_entropy):
    return (-alpha * (log_pi.detach() + target_entropy)).mean()


def ema_update(target, online, tau: float):
    """In-place Polyak averaging ``target <- (1 - tau) target + tau online``.

    Accepts two modules, two tensors, or two name->tensor mappings.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    if isinstance(target, nn.Module):
        pairs = list(zip(target.parameters(), online.parameters()))
        if len(pairs) != len(list(target.parameters())) or len(pairs) != len(list(online.parameters())):
            raise ValidationError("target and online modules have different parameter counts")
    elif isinstance(target, torch.Tensor):
        pairs = [(target, online)]
    else:
        if set(target) != set(online):
            raise ValidationError("target and online parameter names differ")
        pairs = [(target[k], online[k]) for k in target]
    with torch.no_grad():
        for t, o in pairs:
            if t.shape != o.shape:
                raise ValidationError(f"shape mismatch in EMA update: {tuple(t.shape)} vs {tuple(o.shape)}")
        for t, o in pairs:
            t.mul_(1.0 - tau).add_(o, alpha=tau)
    return target


class SACAgent(nn.Module):
    """Encoder + twin critic + actor + temperature, with EMA targets."""

    def __init__(
        self,
        obs_shape,
        action_dim,
        latent_dim=50,
        num_layers=4,
        num_filters=32,
        strides=None,
        hidden_dim=1024,
        init_temperature=0.1,
    ):
        super().__init__()
        self.action_dim = action_dim
        self.encoder = Encoder(obs_shape, latent_dim, num_layers, num_filters, strides)
        self.critic = Critic(latent_dim, action_dim, hidden_dim)
        self.actor = Actor(latent_dim, action_dim, hidden_dim)
        self.log_alpha = nn.Parameter(torch.tensor(math.log(init_temperature)))
        self.encoder_target = copy.deepcopy(self.encoder)
        self.critic_target = copy.deepcopy(self.critic)
        for p in list(self.encoder_target.parameters()) + list(self.critic_target.parameters()):
            p.requires_grad_(False)
        self.target_entropy = -float(action_dim)

    @property
    def alpha(self):
        return self.log_alpha.exp()

    def act(self, obs, deterministic=True, generator=None):
        dtype = self.log_alpha.dtype
        with torch.no_grad():
            z = self.encoder(obs_to_tensor(np.asarray(obs)[None], dtype=dtype))
            mu, log_std = self.actor.dist_params(z)
            if deterministic:
                u = mu
            else:
                noise = torch.randn(mu.shape, generator=generator, dtype=dtype)
                u = mu + noise * log_std.exp()
        return torch.tanh(u)[0].double().numpy()

    def critic_terms(
        self, obs, action, reward, next_obs, done, gamma, next_latent_target=None, noise=None, detach_encoder=False
    ):
        """Returns (loss, diagnostics). ``next_latent_target`` may be precomputed.

        ``detach_encoder`` stops critic gradients at the encoder output.
        """
        with torch.no_grad():
            if next_latent_target is None:
                next_latent_target = self.encoder_target(next_obs)
            next_action, next_log_pi, _, _ = self.actor(next_latent_target, noise=noise)
            tq1, tq2 = self.critic_target(next_latent_target, next_action)
            v = soft_value(tq1, tq2, next_log_pi, self.alpha)
            target = td_target(reward, done, v, gamma)
        latent = self.encoder(obs)
        if detach_encoder:
            latent = latent.detach()
        q1, q2 = self.critic(latent, action)
        loss = critic_loss(q1, q2, target)
        return loss, {"q_mean": float(q1.detach().mean()), "target_mean": float(target.mean())}

    def actor_terms(self, obs, noise=None, latent=None):
        if latent is None:
            with torch.no_grad():
                latent = self.encoder(obs)
        latent = latent.detach()
        action, log_pi, _, _ = self.actor(latent, noise=noise)
        q1, q2 = self.critic(latent, action)
        a_loss = actor_loss(self.alpha.detach(), log_pi, q1, q2)
        t_loss = temperature_loss(self.alpha, log_pi, self.target_entropy)
        return a_loss, t_loss, {"entropy": float(-log_pi.detach().mean())}

    def soft_update_targets(self, tau_critic, tau_encoder):
        ema_update(self.critic_target, self.critic, tau_critic)
        ema_update(self.encoder_target, self.encoder, tau_encoder)
