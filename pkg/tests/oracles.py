"""Independent numerical oracles and float64 toy models shared by the tests."""

from __future__ import annotations

import copy

import numpy as np
import torch

from replab import aux_losses as AL
from replab.agent import SACAgent

D = 4  # toy latent dim
A = 2  # toy action dim
OBS = (8, 8, 3)


def central_diff_grad(fn, params, eps=1e-6):
    """Numerical gradient of scalar ``fn()`` w.r.t. each tensor in ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = float(fn())
                flat[i] = old - eps
                down = float(fn())
                flat[i] = old
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def autograd_grad(fn, params):
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def grad_rel_error(fn, params, eps=1e-6):
    """``|g_auto - g_num| / max(|g_auto|, |g_num|)`` over the concatenation."""
    ga = torch.cat([g.reshape(-1) for g in autograd_grad(fn, params)])
    gn = torch.cat([g.reshape(-1) for g in central_diff_grad(fn, params, eps)])
    scale = max(ga.norm().item(), gn.norm().item())
    if scale == 0.0:
        return 0.0, 0.0
    return (ga - gn).norm().item() / scale, scale


def toy_batch(b=6, seed=0, obs=OBS):
    g = torch.Generator().manual_seed(seed)
    c = obs[2]
    return AL.TensorBatch(
        obs=torch.rand((b, c, obs[0], obs[1]), generator=g, dtype=torch.float64) * 255,
        action=torch.rand((b, A), generator=g, dtype=torch.float64) * 2 - 1,
        reward=torch.rand((b,), generator=g, dtype=torch.float64),
        next_obs=torch.rand((b, c, obs[0], obs[1]), generator=g, dtype=torch.float64) * 255,
        done=torch.zeros(b, dtype=torch.float64),
    )


def toy_seq(b=4, horizon=3, seed=0, obs=OBS):
    g = torch.Generator().manual_seed(seed)

    class Seq:
        pass

    s = Seq()
    s.obs = torch.rand((b, horizon + 1, obs[2], obs[0], obs[1]), generator=g, dtype=torch.float64) * 255
    s.action = torch.rand((b, horizon, A), generator=g, dtype=torch.float64) * 2 - 1
    s.reward = torch.rand((b, horizon), generator=g, dtype=torch.float64)
    return s


def toy_agent(seed=0):
    torch.manual_seed(seed)
    agent = SACAgent(OBS, A, latent_dim=D, num_layers=1, num_filters=2, strides=[2], hidden_dim=8).double()
    # move targets away from the online copies so both paths are exercised
    with torch.no_grad():
        for p in list(agent.encoder_target.parameters()) + list(agent.critic_target.parameters()):
            p.add_(0.05 * torch.randn_like(p))
    return agent


def toy_aux(agent, seed=0):
    torch.manual_seed(seed + 1)
    mods = {
        "transition": AL.TransitionModel(D, A, hidden=8, n_layers=3).double(),
        "gaussian": AL.GaussianTransitionModel(D, A, hidden=8, n_layers=3).double(),
        "reward": AL.RewardModel(D, hidden=8, n_layers=3).double(),
        "heads": AL.ProjectionHeads(D, proj_dim=3, hidden=5).double(),
        "bilinear": AL.Bilinear(D).double(),
        "decoder": AL.Decoder(agent.encoder).double(),
    }
    with torch.no_grad():
        for p in mods["heads"].target.parameters():
            p.add_(0.05 * torch.randn_like(p))
    return mods


def params(*modules):
    out = []
    for m in modules:
        if isinstance(m, torch.Tensor):
            out.append(m)
        else:
            out += [p for p in m.parameters() if p.requires_grad]
    return out


def gradient_cases():
    """(name, loss_fn, params) for every loss; stop-gradient paths are frozen."""
    agent = toy_agent()
    m = toy_aux(agent)
    enc, ema = agent.encoder, agent.encoder_target
    batch = toy_batch()
    seq = toy_seq()
    noise = torch.randn((len(batch), A), generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    frozen_enc = copy.deepcopy(enc)
    for p in frozen_enc.parameters():
        p.requires_grad_(False)
    views = toy_batch(seed=5)
    gen_pairing = AL.derangement(len(batch), torch.Generator().manual_seed(0))

    def critic():
        return agent.critic_terms(batch.obs, batch.action, batch.reward, batch.next_obs, batch.done, 0.99, noise=noise)[0]

    def actor():
        return agent.actor_terms(batch.obs, noise=noise)[0]

    def temperature():
        return agent.actor_terms(batch.obs, noise=noise)[1]

    return [
        ("critic", critic, params(enc, agent.critic)),
        ("actor", actor, params(agent.actor)),
        ("temperature", temperature, [agent.log_alpha]),
        (
            "baseline",
            lambda: AL.baseline_loss(batch, enc, ema, m["transition"], m["reward"]).total,
            params(enc, m["transition"], m["reward"]),
        ),
        (
            "rollout",
            lambda: AL.rollout_loss(seq, enc, ema, m["transition"], m["reward"], 3).total,
            params(enc, m["transition"], m["reward"]),
        ),
        (
            "info_nce",
            lambda: AL.contrastive_transition_loss(batch, enc, ema, m["transition"], 0.5).total,
            params(enc, m["transition"]),
        ),
        ("curl", lambda: AL.curl_loss(batch.obs, views.obs, enc, ema, m["bilinear"]).total, params(enc, m["bilinear"])),
        (
            "spr_cosine",
            lambda: AL.spr_cosine_loss(seq, enc, ema, m["transition"], m["heads"], 3).total,
            params(enc, m["transition"], m["heads"].online, m["heads"].predictor),
        ),
        (
            "dbc",
            lambda: AL.dbc_loss(batch, enc, m["gaussian"], 0.99, pairing=gen_pairing, sg_encoder=frozen_enc).total,
            params(enc),
        ),
        (
            "value_aware",
            lambda: AL.value_aware_loss(
                batch, enc, m["transition"], agent.critic, agent.actor, agent.alpha, True, m["reward"], noise, frozen_enc
            ).total,
            params(enc, m["transition"], m["reward"]),
        ),
        (
            "reconstruction",
            lambda: AL.reconstruction_loss(batch, enc, m["decoder"]).total,
            params(enc, m["decoder"]),
        ),
    ]


def w2_monte_carlo(mu1, s1, mu2, s2, n=1_000_000, seed=0):
    """W2 estimate from the optimal (comonotone) coupling of samples.

    For product measures the squared distance is the sum over dims; in each
    dim the optimal coupling pairs sorted samples (quantile coupling).
    """
    rng = np.random.default_rng(seed)
    total = 0.0
    for a, b, c, d in zip(np.atleast_1d(mu1), np.atleast_1d(s1), np.atleast_1d(mu2), np.atleast_1d(s2)):
        x = np.sort(rng.normal(a, b, n))
        y = np.sort(rng.normal(c, d, n))
        total += np.mean((x - y) ** 2)
    return float(np.sqrt(total))
