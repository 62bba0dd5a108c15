"""Small random instances of the differentiable losses, shared by the unit and acceptance tests.

Every case returns ``(expression, parameters)`` for ``finite_difference_check``.
Checks use the five-point stencil at ``STEP``: the losses pass through
terms with sigma at the 1e-4 floor, and a larger step with a fourth-order
stencil keeps cancellation noise below the tolerance. Timesteps are drawn
from 2..T by default; ``low=1`` brings in the floor step.
"""

import numpy as np

from tdpor.critic import TemporalCritic, critic_loss
from tdpor.diffusion import Denoiser, MixtureData, attach_adapter, denoise_step, make_schedule, pretrain_loss
from tdpor.diffusion import transition_log_prob
from tdpor.rewards import Encoder
from tdpor.trainer import policy_loss_at_timestep

STEP, ORDER = 3e-4, 4
T, N, GUIDANCE = 5, 4, 5.0


def _policy(rng, seed):
    m = attach_adapter(Denoiser(T, rng, hidden=(6, 6, 6), context_dim=3, time_dim=4), rank=2, seed=seed)
    for ad in m.adapters.values():
        ad.B.data = rng.normal(scale=0.3, size=ad.B.shape)
    return m


def _transition_inputs(seed, low=2):
    rng = np.random.default_rng(seed)
    schedule = make_schedule(T)
    m = _policy(rng, seed)
    c = MixtureData().contexts()[:N]
    x_t = rng.normal(size=(N, 2))
    t = rng.integers(low, T + 1, size=N)
    x_prev, _, old = denoise_step(m, x_t, t, c, schedule, GUIDANCE, rng)
    return rng, schedule, m, c, x_t, t, x_prev, old


def pretrain_case(seed):
    rng = np.random.default_rng(seed)
    m = Denoiser(T, rng, hidden=(6, 6, 6), context_dim=3, time_dim=4)
    schedule = make_schedule(T)
    x0, c, eps = rng.normal(size=(N, 2)), rng.normal(size=(N, 2)), rng.normal(size=(N, 2))
    t = rng.integers(1, T + 1, size=N)
    return (lambda: pretrain_loss(m, x0, c, t, eps, schedule)), m.base_parameters()


def transition_case(seed, low=2):
    _, schedule, m, c, x_t, t, x_prev, _ = _transition_inputs(seed, low)
    return (lambda: transition_log_prob(m, x_prev, x_t, t, c, schedule, GUIDANCE).mean()), m.adapter_parameters()


def policy_case(seed):
    rng, schedule, m, c, x_t, t, x_prev, old = _transition_inputs(seed)
    weights = rng.normal(size=N)
    old = old + rng.normal(scale=0.05, size=N)

    def expression():
        return policy_loss_at_timestep(m, x_prev, x_t, t, c, old, weights, 0.2, schedule, GUIDANCE)[0]

    return expression, m.adapter_parameters()


def critic_case(seed):
    rng = np.random.default_rng(seed)
    c = MixtureData().contexts()[:N]
    x_t, t = rng.normal(size=(N, 2)), rng.integers(1, T + 1, size=N)
    critic = TemporalCritic(Encoder(seed, T, width=8, hidden=8), rng, widths=(8, 6, 5, 4, 1))
    for layer in critic.layers:
        # zero-initialised biases would put dead units exactly on a ReLU kink
        layer.bias.data = rng.normal(scale=0.1, size=layer.bias.shape)
    final, prev = rng.normal(size=N), rng.normal(scale=0.3, size=N)
    return (lambda: critic_loss(critic, x_t, t, c, final, prev)), critic.parameters()


CASES = {
    "pretrain_loss": pretrain_case,
    "transition_log_prob": transition_case,
    "critic_loss": critic_case,
    "policy_loss_at_timestep": policy_case,
}
