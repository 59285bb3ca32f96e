import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from replab import aux_losses as AL
from replab.errors import UsageError, ValidationError

import oracles


@pytest.fixture(autouse=True, scope="module")
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


class Fixed(torch.nn.Module):
    """Callable returning a fixed tensor regardless of its input."""

    def __init__(self, value):
        super().__init__()
        self.value = torch.as_tensor(value, dtype=torch.float64)

    def forward(self, *args, **kwargs):
        return self.value


def batch(b=1, reward=None):
    return AL.TensorBatch(
        obs=torch.zeros(b, 1),
        action=torch.zeros(b, 1),
        reward=torch.as_tensor(reward if reward is not None else [0.0] * b, dtype=torch.float64),
        next_obs=torch.zeros(b, 1),
        done=torch.zeros(b),
    )


# -- baseline ----------------------------------------------------------------


def test_baseline_hand_arithmetic():
    rep = AL.baseline_loss(
        batch(1, [1.0]),
        Fixed([[0.0, 0.0]]),
        Fixed([[1.0, 0.0]]),
        Fixed([[0.5, 0.5]]),
        Fixed([0.5]),
        AL.BaselineConfig(arrangement="through_transition"),
    )
    assert float(rep.total.detach()) == pytest.approx(0.5, abs=1e-15)
    assert rep.components == {"transition_mse": 0.25, "reward_mse": 0.25}


def test_baseline_perfect_prediction():
    target = [[0.3, -0.2]]
    rep = AL.baseline_loss(batch(1, [0.7]), Fixed([[0.0, 0.0]]), Fixed(target), Fixed(target), Fixed([0.7]))
    assert float(rep.total.detach()) == 0.0


def test_baseline_independent_reads_target():
    seen = {}

    class Rec(torch.nn.Module):
        def forward(self, z):
            seen["z"] = z
            return z.sum(-1)

    AL.baseline_loss(
        batch(1, [0.0]), Fixed([[0.0, 0.0]]), Fixed([[1.0, 2.0]]), Fixed([[5.0, 5.0]]), Rec(), AL.BaselineConfig(arrangement="independent")
    )
    assert seen["z"].tolist() == [[1.0, 2.0]]


def test_baseline_flags():
    with pytest.raises(UsageError):
        AL.baseline_loss(batch(), Fixed([[0.0]]), Fixed([[0.0]]), Fixed([[0.0]]), Fixed([0.0]), AL.BaselineConfig(False, False))
    rep = AL.baseline_loss(
        batch(1, [1.0]), Fixed([[0.0]]), Fixed([[1.0]]), Fixed([[0.0]]), Fixed([0.0]), AL.BaselineConfig(include_reward=False)
    )
    assert set(rep.components) == {"transition_mse"} and float(rep.total.detach()) == 1.0


def constant_encoder():
    agent = oracles.toy_agent()
    enc = agent.encoder
    with torch.no_grad():
        enc.fc.weight.zero_()
        enc.fc.bias.copy_(torch.tensor([0.3, -0.1, 0.2, 0.5]))
    return enc


class IdentityOnLatent(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.scale = torch.nn.Parameter(torch.ones(()))

    def forward(self, s, a):
        return self.scale * s


def test_collapse_geometry():
    enc = constant_encoder()
    b = oracles.toy_batch()
    trans = IdentityOnLatent()
    rew = AL.RewardModel(4, hidden=8, n_layers=2).double()
    cfg = AL.BaselineConfig(include_reward=False, target="online")
    rep = AL.baseline_loss(b, enc, enc, trans, rew, cfg)
    assert float(rep.total.detach()) == 0.0
    grads = torch.autograd.grad(rep.total, list(enc.parameters()), allow_unused=True)
    assert all(g is None or float(g.abs().max()) == 0.0 for g in grads)

    cfg = AL.BaselineConfig(include_reward=True, target="online")
    rep = AL.baseline_loss(b, enc, enc, trans, rew, cfg)
    grads = torch.autograd.grad(rep.total, list(enc.parameters()), allow_unused=True)
    assert sum(float(g.abs().sum()) for g in grads if g is not None) > 0.0


# -- rollout -----------------------------------------------------------------


def test_rollout_h1_equals_baseline():
    agent = oracles.toy_agent()
    m = oracles.toy_aux(agent)
    seq = oracles.toy_seq(horizon=1)
    b = AL.TensorBatch(seq.obs[:, 0], seq.action[:, 0], seq.reward[:, 0], seq.obs[:, 1], torch.zeros(4))
    r1 = AL.rollout_loss(seq, agent.encoder, agent.encoder_target, m["transition"], m["reward"], 1).total.detach()
    r0 = AL.baseline_loss(b, agent.encoder, agent.encoder_target, m["transition"], m["reward"]).total.detach()
    assert abs(float(r1) - float(r0)) <= 1e-12 * abs(float(r0))


def test_rollout_manual_two_steps():
    # latent: s0 from obs index, P(s, a) = s + a, R(s) = sum(s)
    class Enc(torch.nn.Module):
        def forward(self, obs):
            return obs.reshape(obs.shape[0], -1)[:, :2]

    class Seq:
        obs = torch.tensor([[[0.0, 0.0], [1.0, 0.0], [1.0, 2.0]]])
        action = torch.tensor([[[1.0, 0.5], [0.0, 1.0]]])
        reward = torch.tensor([[1.0, 3.0]])

    trans = lambda s, a: s + a  # noqa: E731
    rew = lambda s: s.sum(-1)  # noqa: E731
    rep = AL.rollout_loss(Seq, Enc(), Enc(), trans, rew, 2)
    # step 1: pred (1, .5) vs (1, 0) -> .125; reward 1.5 vs 1 -> .25
    # step 2: pred (1, 1.5) vs (1, 2) -> .125; reward 2.5 vs 3 -> .25
    assert float(rep.total.detach()) == pytest.approx((0.125 + 0.25 + 0.125 + 0.25) / 2, abs=1e-15)


def test_rollout_perfect_model_zero():
    class Enc(torch.nn.Module):
        def forward(self, obs):
            return obs.reshape(obs.shape[0], -1)[:, :2]

    class Seq:
        obs = torch.tensor([[[0.0, 0.0], [1.0, 0.5], [1.0, 1.5], [2.0, 1.5]]])
        action = torch.tensor([[[1.0, 0.5], [0.0, 1.0], [1.0, 0.0]]])
        reward = torch.tensor([[1.5, 2.5, 3.5]])

    rep = AL.rollout_loss(Seq, Enc(), Enc(), lambda s, a: s + a, lambda s: s.sum(-1), 3)
    assert float(rep.total.detach()) == 0.0


def test_rollout_horizon_too_long():
    seq = oracles.toy_seq(horizon=2)
    with pytest.raises(UsageError):
        AL.rollout_loss(seq, None, None, None, None, 3)


# -- contrastive -------------------------------------------------------------


def test_info_nce_values():
    assert float(AL.info_nce(torch.tensor([[3.0]]))) == 0.0
    assert float(AL.info_nce(torch.tensor([[2.0, 0.0], [0.0, 2.0]]))) == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    assert math.log(1 + math.exp(-2)) == pytest.approx(0.12693, abs=1e-5)
    for b in (2, 7, 64):
        assert abs(float(AL.info_nce(torch.full((b, b), 1.7))) - math.log(b)) < 1e-10


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_info_nce_bounds(b, seed):
    logits = torch.randn((b, b), generator=torch.Generator().manual_seed(seed)) * 3
    loss = float(AL.info_nce(logits))
    assert loss >= 0.0
    # the log B upper bound holds when each positive beats its row's log-mean-exp
    lme = torch.logsumexp(logits, 1) - math.log(b)
    if bool((logits.diag() >= lme).all()):
        assert loss <= math.log(b) + 1e-12


def test_contrastive_lone_positive():
    rep = AL.contrastive_transition_loss(batch(1), Fixed([[1.0, 2.0]]), Fixed([[0.5, 0.1]]), Fixed([[3.0, 1.0]]))
    assert float(rep.total.detach()) == 0.0


def test_contrastive_uses_scaled_dot_products():
    anchors = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    positives = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    rep = AL.contrastive_transition_loss(batch(2), Fixed(anchors), Fixed(positives), Fixed(anchors), temperature=0.5)
    assert float(rep.total.detach()) == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    with pytest.raises(ValidationError):
        AL.contrastive_transition_loss(batch(2), Fixed(anchors), Fixed(positives), Fixed(anchors), temperature=0.0)


def curl_with(q, k, w):
    bil = AL.Bilinear(q.shape[1]).double()
    with torch.no_grad():
        bil.W.copy_(w)
    x = torch.zeros(q.shape[0], 1)
    return float(AL.curl_loss(x, x, Fixed(q), Fixed(k), bil).total.detach())


def test_curl_closed_forms():
    b = 5
    eye = torch.eye(b)
    assert curl_with(eye, eye, torch.eye(b)) == pytest.approx(-math.log(math.e / (math.e + b - 1)), abs=1e-12)
    z = torch.randn(b, 3)
    assert curl_with(z, z, torch.zeros(3, 3)) == pytest.approx(math.log(b), abs=1e-12)
    assert curl_with(z[:1], z[:1], torch.eye(3)) == 0.0


def test_curl_view_mismatch():
    bil = AL.Bilinear(2).double()
    with pytest.raises(ValidationError):
        AL.curl_loss(torch.zeros(2, 3), torch.zeros(2, 4), Fixed(0), Fixed(0), bil)


def test_curl_max_subtraction_is_stable():
    q = torch.eye(3) * 1e4
    assert math.isfinite(curl_with(q, torch.eye(3), torch.eye(3)))


# -- SPR cosine --------------------------------------------------------------


class Heads:
    def __init__(self, y_hat, y):
        self.online = lambda z: z
        self.predictor = lambda z: torch.as_tensor(y_hat, dtype=torch.float64)
        self.target = lambda z: torch.as_tensor(y, dtype=torch.float64)


class OneStepSeq:
    obs = torch.zeros(1, 2, 1)
    action = torch.zeros(1, 1, 1)
    reward = torch.zeros(1, 1)


@pytest.mark.parametrize(
    "y_hat,y,expected",
    [([[3.0, 4.0]], [[3.0, 4.0]], -1.0), ([[1.0, 0.0]], [[0.0, 2.0]], 0.0), ([[1.0, 0.0]], [[1.0, 1.0]], -1 / math.sqrt(2))],
)
def test_spr_cosine_values(y_hat, y, expected):
    rep = AL.spr_cosine_loss(OneStepSeq, Fixed([[0.0]]), Fixed([[0.0]]), lambda s, a: s, Heads(y_hat, y), 1)
    assert float(rep.total.detach()) == pytest.approx(expected, abs=1e-12)


def test_spr_zero_norm_flagged():
    rep = AL.spr_cosine_loss(OneStepSeq, Fixed([[0.0]]), Fixed([[0.0]]), lambda s, a: s, Heads([[0.0, 0.0]], [[1.0, 0.0]]), 1)
    assert float(rep.total.detach()) == 0.0
    assert rep.diagnostics["zero_norm_count"] == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(0, 1000))
def test_spr_range(h, seed):
    agent = oracles.toy_agent(seed % 7)
    m = oracles.toy_aux(agent, seed)
    seq = oracles.toy_seq(horizon=h, seed=seed)
    val = float(AL.spr_cosine_loss(seq, agent.encoder, agent.encoder_target, m["transition"], m["heads"], h).total.detach())
    assert -h - 1e-12 <= val <= h + 1e-12


# -- W2 / DBC ----------------------------------------------------------------


def test_w2_closed_form():
    assert AL.w2_diag_gaussian([0.0], [1.0], [3.0], [2.0]) == pytest.approx(math.sqrt(10), abs=1e-12)
    assert AL.w2_diag_gaussian([1.0, 2.0], [0.5, 0.5], [1.0, 2.0], [0.5, 0.5]) == 0.0
    t = AL.w2_diag_gaussian(torch.tensor([0.0]), torch.tensor([1.0]), torch.tensor([3.0]), torch.tensor([2.0]))
    assert float(t) == pytest.approx(math.sqrt(10), abs=1e-12)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_w2_rejects_nonpositive_sigma(bad):
    with pytest.raises(ValidationError):
        AL.w2_diag_gaussian([0.0], [bad], [0.0], [1.0])
    with pytest.raises(ValidationError):
        AL.w2_diag_gaussian(torch.zeros(1), torch.ones(1), torch.zeros(1), torch.tensor([bad]))


def test_w2_monte_carlo_small():
    mc = oracles.w2_monte_carlo([0.0, 1.0], [1.0, 0.5], [0.5, -1.0], [2.0, 0.7], n=200_000, seed=1)
    cf = AL.w2_diag_gaussian([0.0, 1.0], [1.0, 0.5], [0.5, -1.0], [2.0, 0.7])
    assert abs(mc - cf) / cf < 0.02


class GaussFixed(torch.nn.Module):
    def __init__(self, mu, sigma):
        super().__init__()
        self.mu, self.sigma = torch.as_tensor(mu), torch.as_tensor(sigma)

    def forward(self, s, a):
        return self.mu, self.sigma


def test_dbc_hand_arithmetic_and_scale():
    s = torch.tensor([[0.0, 0.0], [1.0, 1.0]])
    b = batch(2, [1.0, 0.0])
    g = GaussFixed(torch.zeros(2, 2), torch.ones(2, 2))
    pair = torch.tensor([1, 0])
    assert float(AL.dbc_loss(b, Fixed(s), g, 0.99, pairing=pair).total.detach()) == pytest.approx(1.0, abs=1e-15)
    # scaling latents by 2: (4 - 1)^2 = 9
    assert float(AL.dbc_loss(b, Fixed(2 * s), g, 0.99, pairing=pair).total.detach()) == pytest.approx(9.0, abs=1e-15)


def test_dbc_identical_pairs_zero():
    s = torch.tensor([[0.4, 0.2], [0.4, 0.2]])
    g = GaussFixed(torch.ones(2, 2), torch.ones(2, 2))
    assert float(AL.dbc_loss(batch(2, [0.5, 0.5]), Fixed(s), g, pairing=torch.tensor([1, 0])).total.detach()) == 0.0


def test_dbc_batch_of_one():
    with pytest.raises(UsageError):
        AL.dbc_loss(batch(1), Fixed([[0.0]]), GaussFixed([[0.0]], [[1.0]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.integers(0, 10_000))
def test_derangement_has_no_fixed_points(n, seed):
    perm = AL.derangement(n, torch.Generator().manual_seed(seed))
    assert sorted(perm.tolist()) == list(range(n))
    assert all(perm[i] != i for i in range(n))


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_dbc_permutation_covariant(n, seed):
    g = torch.Generator().manual_seed(seed)
    s = torch.randn(n, 3, generator=g)
    r = torch.rand(n, generator=g)
    mu, sigma = torch.randn(n, 3, generator=g), torch.rand(n, 3, generator=g) + 0.1
    pairing = AL.derangement(n, g)
    base = float(AL.dbc_loss(batch(n, r), Fixed(s), GaussFixed(mu, sigma), pairing=pairing).total.detach())
    relabel = torch.randperm(n, generator=g)  # new index j holds old relabel[j]
    inv = torch.empty_like(relabel)
    inv[relabel] = torch.arange(n)
    new_pairing = inv[pairing[relabel]]
    moved = float(AL.dbc_loss(batch(n, r[relabel]), Fixed(s[relabel]), GaussFixed(mu[relabel], sigma[relabel]), pairing=new_pairing).total.detach())
    assert moved == pytest.approx(base, rel=1e-12, abs=1e-15)


def test_gaussian_transition_std_positive():
    model = AL.GaussianTransitionModel(4, 2, hidden=8, n_layers=3).double()
    with torch.no_grad():
        model.net[-1].bias.fill_(-1e4)
    _, sigma = model(torch.randn(5, 4), torch.randn(5, 2))
    assert (sigma > 0).all()


# -- value aware -------------------------------------------------------------


def test_value_aware_zero_when_prediction_matches():
    agent = oracles.toy_agent()
    b = oracles.toy_batch()
    enc = agent.encoder
    s_next = enc(b.next_obs).detach()
    rep = AL.value_aware_loss(b, enc, Fixed(s_next), agent.critic, agent.actor, agent.alpha)
    assert float(rep.total.detach()) == 0.0


def test_value_aware_hand_arithmetic():
    class Critic(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.ones(()))

        def forward(self, s, a):
            q = self.w * s[:, 0]
            return q, q + 1.0

    class Actor(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.w = torch.nn.Parameter(torch.ones(()))

        def forward(self, s, noise=None, pre_tanh=None):
            u = torch.zeros(s.shape[0], 1) if pre_tanh is None else pre_tanh
            return torch.tanh(u), torch.zeros(s.shape[0]), u, torch.tanh(u)

    b = batch(1)
    rep = AL.value_aware_loss(b, Fixed([[1.5]]), Fixed([[1.0]]), Critic(), Actor(), torch.tensor(0.2))
    # sg(V) = 1.5 from the encoder, V_hat = 1.0 from the prediction
    assert float(rep.total.detach()) == pytest.approx(0.25, abs=1e-15)


def test_value_aware_leaves_critic_untouched():
    agent = oracles.toy_agent()
    m = oracles.toy_aux(agent)
    b = oracles.toy_batch()
    before = [p.detach().clone() for p in agent.critic.parameters()]
    opt = torch.optim.SGD(list(agent.encoder.parameters()) + list(m["transition"].parameters()) + list(agent.critic.parameters()), lr=0.1)
    rep = AL.value_aware_loss(b, agent.encoder, m["transition"], agent.critic, agent.actor, agent.alpha)
    opt.zero_grad()
    rep.total.backward()
    assert all(p.grad is None for p in agent.critic.parameters())
    assert all(p.grad is None for p in agent.actor.parameters())
    opt.step()
    assert all(torch.equal(a, p) for a, p in zip(before, agent.critic.parameters()))


def test_value_aware_with_reward_needs_model():
    agent = oracles.toy_agent()
    with pytest.raises(UsageError):
        AL.value_aware_loss(oracles.toy_batch(), agent.encoder, None, agent.critic, agent.actor, agent.alpha, with_reward=True)


# -- reconstruction ----------------------------------------------------------


def test_reconstruction_constant_mse():
    b = batch(2)
    b.obs = torch.zeros(2, 3, 4, 4)
    rep = AL.reconstruction_loss(b, Fixed([[0.0]]), Fixed(torch.full((2, 3, 4, 4), 0.5)))
    assert float(rep.total.detach()) == pytest.approx(0.25, abs=1e-15)
    b.obs = torch.full((2, 3, 4, 4), 255.0)
    assert float(AL.reconstruction_loss(b, Fixed([[0.0]]), Fixed(torch.ones(2, 3, 4, 4))).total.detach()) == 0.0


def test_reconstruction_partial_needs_masks():
    b = batch(1)
    b.obs = torch.zeros(1, 3, 4, 4)
    with pytest.raises(UsageError):
        AL.reconstruction_loss(b, Fixed([[0.0]]), Fixed(torch.zeros(1, 3, 4, 4)), "partial")


def test_reconstruction_shape_mismatch():
    b = batch(1)
    b.obs = torch.zeros(1, 3, 4, 4)
    with pytest.raises(ValidationError):
        AL.reconstruction_loss(b, Fixed([[0.0]]), Fixed(torch.zeros(1, 3, 5, 5)))


def test_partial_reconstruction_ignores_distractors():
    from replab.env import DistractorStream, EmissionConfig, GroundState, relevance_mask, render

    emission = EmissionConfig(render_size=16)
    ground = GroundState(np.array([0.1, 0.2]), np.array([-0.4, 0.3]))
    mask = relevance_mask(ground, emission)
    recon = Fixed(torch.rand(1, 3, 16, 16))
    losses = []
    for seed in (0, 1, 2):
        img = render(ground, emission, DistractorStream(16, seed).frame(0))
        b = batch(1)
        b.obs = torch.as_tensor(img, dtype=torch.float64).permute(2, 0, 1)[None]
        b.mask = torch.as_tensor(mask, dtype=torch.float64)[None, None]
        losses.append(float(AL.reconstruction_loss(b, Fixed([[0.0]]), recon, "partial").total.detach()))
    assert losses[0] == losses[1] == losses[2]


def test_decoder_matches_encoder_shape():
    from replab.agent import Encoder

    for shape, strides in [((64, 64, 9), [2, 2, 2, 1]), ((84, 84, 9), [2, 1, 1, 1]), ((33, 33, 3), [2, 2])]:
        enc = Encoder(shape, 5, len(strides), 4, strides)
        dec = AL.Decoder(enc)
        assert tuple(dec(torch.zeros(2, 5)).shape) == (2, shape[2], shape[0], shape[1])


# -- gradient suite ----------------------------------------------------------


@pytest.mark.parametrize("case", oracles.gradient_cases(), ids=lambda c: c[0])
def test_gradient_matches_central_differences(case):
    name, fn, params = case
    err, scale = oracles.grad_rel_error(fn, params)
    assert scale > 0, f"{name}: gradient is identically zero"
    assert err < 1e-4, f"{name}: relative error {err:.3g}"


def test_reports_are_finite_and_snake_case():
    agent = oracles.toy_agent()
    m = oracles.toy_aux(agent)
    rep = AL.baseline_loss(oracles.toy_batch(), agent.encoder, agent.encoder_target, m["transition"], m["reward"])
    record = rep.as_record()
    assert all(k == k.lower() and " " not in k for k in record)
    assert all(math.isfinite(v) for v in record.values())
    assert record["aux_total"] == pytest.approx(record["aux_transition_mse"] + record["aux_reward_mse"], rel=1e-12)
