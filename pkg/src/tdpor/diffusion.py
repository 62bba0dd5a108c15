"""Conditional DDPM on 2-D points with a low-rank adapted denoiser.

The denoiser predicts noise from ``x_t``, a sinusoidal step embedding and a
learned linear embedding of the context vector. A zero context vector is the
null token used for classifier-free guidance. Everything is batched: ``x`` is
(N, 2), ``t`` is an int array of shape (N,) (or an int) and ``c`` is (N, 2).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    AdamW,
    InitSpec,
    Linear,
    Tensor,
    concat,
    gaussian_log_density,
    no_grad,
)

SIGMA_FLOOR = 1e-4
DATA_DIM = 2


# -- schedule ---------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients, stored with index 0 as the clean-data convention.

    ``betas[t]`` for t = 1..T (``betas[0] = 0``), ``alpha_bars[0] = 1``,
    ``sigmas[t]`` is the sampler standard deviation of the step t -> t-1.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    sigma_floor: float = SIGMA_FLOOR


def make_schedule(T: int, beta_min: float = 1e-3, beta_max: float = 0.6,
                  sigma_floor: float = SIGMA_FLOOR) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    return schedule_from_betas(betas[1:], sigma_floor)


def schedule_from_betas(betas, sigma_floor: float = SIGMA_FLOOR) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1 or np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("betas must be a non-empty vector in (0, 1)")
    T = betas.size
    b = np.concatenate([[0.0], betas])
    alphas = 1.0 - b
    alpha_bars = np.cumprod(alphas)
    var = np.zeros(T + 1)
    var[1:] = b[1:] * (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:])
    sigmas = np.maximum(np.sqrt(var), sigma_floor)
    sigmas[0] = sigma_floor
    return NoiseSchedule(T, b, alphas, alpha_bars, sigmas, sigma_floor)


def _check_steps(t, schedule: NoiseSchedule, lo: int = 1) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < lo) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of range [{lo}, {schedule.T}]")
    return t


def forward_noise(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form q(x_t | x_0): sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t = _check_steps(t, schedule)
    ab = schedule.alpha_bars[t]
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def timestep_embedding(t, num_steps: int, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding of integer steps, rescaled to a 0..1000 range."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * (1000.0 / num_steps)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# -- data -------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureData:
    """Gaussian modes placed evenly on a circle; contexts are the mode directions."""

    n_modes: int = 8
    radius: float = 4.0
    std: float = 0.3

    def angles(self) -> np.ndarray:
        return 2.0 * math.pi * np.arange(self.n_modes) / self.n_modes

    def unseen_angles(self) -> np.ndarray:
        return self.angles() + math.pi / self.n_modes

    def contexts(self, angles=None) -> np.ndarray:
        a = self.angles() if angles is None else np.asarray(angles)
        return np.stack([np.cos(a), np.sin(a)], axis=1)

    def sample(self, n: int, rng: np.random.Generator, angles=None) -> tuple[np.ndarray, np.ndarray]:
        ctx = self.contexts(angles)
        idx = rng.integers(0, len(ctx), size=n)
        c = ctx[idx]
        x0 = self.radius * c + self.std * rng.standard_normal((n, DATA_DIM))
        return x0, c


# -- denoiser ---------------------------------------------------------------


class LowRankAdapter:
    """Trainable ``scale * A @ B`` added to a frozen layer's weight."""

    def __init__(self, layer: Linear, rank: int, scale: float, rng: np.random.Generator):
        if rank < 1 or rank > min(layer.n_in, layer.n_out):
            raise ValueError(f"rank {rank} invalid for a {layer.n_in}x{layer.n_out} layer")
        self.rank, self.scale = rank, scale
        self.a_init = InitSpec("uniform_fan_in", fan_in=layer.n_in, stream=layer.name + ".lora_a")
        self.b_init = InitSpec("zeros", stream=layer.name + ".lora_b")
        self.A = Tensor(self.a_init.sample((layer.n_in, rank), rng), requires_grad=True,
                        name=layer.name + ".lora_a")
        self.B = Tensor(self.b_init.sample((rank, layer.n_out), rng), requires_grad=True,
                        name=layer.name + ".lora_b")

    def bottleneck(self, x: Tensor) -> Tensor:
        return x @ self.A

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def num_parameters(self) -> int:
        return self.A.size + self.B.size


class Denoiser:
    """MLP noise predictor eps_theta(x_t, t, c) with optional adapters on hidden layers."""

    def __init__(self, num_steps: int, rng: np.random.Generator, hidden=(64, 64, 64),
                 time_dim: int = 16, context_dim: int = 16):
        self.num_steps = num_steps
        self.time_dim = time_dim
        self.context = Linear(DATA_DIM, context_dim, rng, name="context")
        widths = [DATA_DIM + time_dim + context_dim, *hidden]
        self.hidden = [Linear(widths[i], widths[i + 1], rng, name=f"hidden{i}") for i in range(len(hidden))]
        self.out = Linear(widths[-1], DATA_DIM, rng, name="out")
        self.adapters: dict[int, LowRankAdapter] = {}
        self.adapter_enabled = True

    def base_parameters(self) -> list[Tensor]:
        params = self.context.parameters()
        for layer in self.hidden:
            params += layer.parameters()
        return params + self.out.parameters()

    def adapter_parameters(self) -> list[Tensor]:
        return [p for k in sorted(self.adapters) for p in self.adapters[k].parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.base_parameters() + self.adapter_parameters() if p.requires_grad]

    def __call__(self, x, t, c, *, return_hidden: bool = False):
        x = x if isinstance(x, Tensor) else Tensor(x)
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        temb = Tensor(timestep_embedding(t, self.num_steps, self.time_dim))
        c = c if isinstance(c, Tensor) else Tensor(np.broadcast_to(np.asarray(c, dtype=np.float64), (n, DATA_DIM)))
        h = concat([x, temb, self.context(c)], axis=1)
        bottlenecks = []
        for i, layer in enumerate(self.hidden):
            pre = layer(h)
            adapter = self.adapters.get(i) if self.adapter_enabled else None
            if adapter is not None and adapter.scale != 0:
                z = adapter.bottleneck(h)
                bottlenecks.append(z)
                pre = pre + (z @ adapter.B) * adapter.scale
            h = pre.silu()
        out = self.out(h)
        return (out, bottlenecks) if return_hidden else out

    def copy(self) -> "Denoiser":
        return copy.deepcopy(self)

    def state_dict(self, prefix: str = "denoiser/") -> dict[str, np.ndarray]:
        state = {}
        for layer in [self.context, *self.hidden, self.out]:
            state[f"{prefix}{layer.name}.weight"] = layer.weight.data
            state[f"{prefix}{layer.name}.bias"] = layer.bias.data
        for i, ad in self.adapters.items():
            state[f"{prefix}hidden{i}.lora_a"] = ad.A.data
            state[f"{prefix}hidden{i}.lora_b"] = ad.B.data
            state[f"{prefix}hidden{i}.lora_meta"] = np.array([ad.rank, ad.scale])
        return state

    def load_state_dict(self, state, prefix: str = "denoiser/") -> None:
        for layer in [self.context, *self.hidden, self.out]:
            layer.weight.data = np.array(state[f"{prefix}{layer.name}.weight"], dtype=np.float64)
            layer.bias.data = np.array(state[f"{prefix}{layer.name}.bias"], dtype=np.float64)
        for i, ad in self.adapters.items():
            ad.A.data = np.array(state[f"{prefix}hidden{i}.lora_a"], dtype=np.float64)
            ad.B.data = np.array(state[f"{prefix}hidden{i}.lora_b"], dtype=np.float64)


def attach_adapter(model: Denoiser, rank: int = 4, scale: float = 1.0, seed: int = 0) -> Denoiser:
    """Return a copy of ``model`` with frozen base weights and fresh adapters on every hidden layer."""
    adapted = model.copy()
    for p in adapted.base_parameters():
        p.requires_grad = False
    rng = np.random.default_rng(seed)
    adapted.adapters = {i: LowRankAdapter(layer, rank, scale, rng) for i, layer in enumerate(adapted.hidden)}
    return adapted


# -- training and sampling ----------------------------------------------------


def pretrain_loss(model: Denoiser, x0, c, t, eps, schedule: NoiseSchedule) -> Tensor:
    """Mean over the batch of ||eps - eps_theta(x_t, t, c)||^2."""
    xt = forward_noise(x0, t, eps, schedule)
    pred = model(xt, t, c)
    return (Tensor(eps) - pred).square().sum(axis=1).mean()


def pretrain_step(model: Denoiser, optimizer: AdamW, x0, c, schedule: NoiseSchedule,
                  rng: np.random.Generator, p_drop: float = 0.1) -> float:
    x0 = np.asarray(x0, dtype=np.float64)
    if len(x0) == 0:
        raise ValueError("empty batch")
    c = np.array(c, dtype=np.float64)
    n = len(x0)
    drop = rng.random(n) < p_drop
    c[drop] = 0.0
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(x0.shape)
    optimizer.zero_grad()
    loss = pretrain_loss(model, x0, c, t, eps, schedule)
    loss.backward()
    optimizer.step()
    return loss.item()


def pretrain(model: Denoiser, data: MixtureData, schedule: NoiseSchedule, rng: np.random.Generator,
             steps: int = 6000, batch_size: int = 512, lr: float = 2e-3, p_drop: float = 0.1,
             log_every: int = 0) -> list[float]:
    """Fit the base denoiser to the mixture with a cosine-decayed AdamW schedule."""
    opt = AdamW(model.base_parameters(), lr=lr, weight_decay=0.0, max_grad_norm=1.0)
    losses = []
    for step in range(steps):
        opt.lr = lr * 0.5 * (1.0 + math.cos(math.pi * step / steps))
        x0, c = data.sample(batch_size, rng)
        losses.append(pretrain_step(model, opt, x0, c, schedule, rng, p_drop))
        if log_every and step % log_every == 0:
            print(f"pretrain step {step}: loss {np.mean(losses[-log_every:]):.4f}")
    return losses


def guided_eps(model: Denoiser, x_t, t, c, guidance_scale: float) -> Tensor:
    """Classifier-free guided noise estimate eps_u + s (eps_c - eps_u)."""
    if guidance_scale == 1.0:
        return model(x_t, t, c)
    n = x_t.shape[0] if not isinstance(x_t, Tensor) else x_t.shape[0]
    null = np.zeros((n, DATA_DIM))
    if guidance_scale == 0.0:
        return model(x_t, t, null)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), (n, DATA_DIM))
    both = model(np.concatenate([x_t, x_t]), np.concatenate([np.broadcast_to(t, (n,))] * 2),
                 np.concatenate([c, null]))
    cond, uncond = both[:n], both[n:]
    return uncond + (cond - uncond) * guidance_scale


def posterior_mean(model: Denoiser, x_t, t, c, schedule: NoiseSchedule, guidance_scale: float) -> Tensor:
    t = np.broadcast_to(_check_steps(t, schedule), (x_t.shape[0],))
    eps = guided_eps(model, x_t, t, c, guidance_scale)
    coef_eps = (schedule.betas[t] / np.sqrt(1.0 - schedule.alpha_bars[t]))[:, None]
    inv_sqrt_alpha = (1.0 / np.sqrt(schedule.alphas[t]))[:, None]
    return (Tensor(x_t) - eps * coef_eps) * inv_sqrt_alpha


def denoise_step(model: Denoiser, x_t, t, c, schedule: NoiseSchedule, guidance_scale: float,
                 rng: np.random.Generator):
    """One ancestral step; returns (x_{t-1}, mean, per-row log density)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    t_arr = np.broadcast_to(_check_steps(t, schedule), (x_t.shape[0],))
    with no_grad():
        mean = posterior_mean(model, x_t, t_arr, c, schedule, guidance_scale).data
    sigma = schedule.sigmas[t_arr][:, None]
    x_prev = mean + sigma * rng.standard_normal(x_t.shape)
    with no_grad():
        logp = gaussian_log_density(x_prev, mean, np.broadcast_to(sigma, x_prev.shape), axis=1).data
    return x_prev, mean, logp


def transition_log_prob(model: Denoiser, x_prev, x_t, t, c, schedule: NoiseSchedule,
                        guidance_scale: float) -> Tensor:
    """Differentiable per-row log p_theta(x_prev | x_t, c)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    t_arr = np.broadcast_to(_check_steps(t, schedule), (x_t.shape[0],))
    mean = posterior_mean(model, x_t, t_arr, c, schedule, guidance_scale)
    sigma = np.broadcast_to(schedule.sigmas[t_arr][:, None], x_t.shape)
    return gaussian_log_density(np.asarray(x_prev, dtype=np.float64), mean, sigma, axis=1)


@dataclass
class Trajectory:
    """A single denoising rollout, states indexed by diffusion step (``states[t] = x_t``)."""

    context: np.ndarray
    states: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    log_probs: np.ndarray
    reward: float = float("nan")
    temporal_rewards: np.ndarray | None = None
    seed: int | None = None

    @property
    def num_transitions(self) -> int:
        return len(self.log_probs) - 1


@dataclass
class TrajectoryBatch:
    """N rollouts stored step-major.

    ``states[t]`` is x_t with shape (N, 2) for t = 0..T. ``means[t]``,
    ``log_probs[t]`` describe the transition x_t -> x_{t-1} (index 0 unused).
    """

    contexts: np.ndarray
    states: np.ndarray
    means: np.ndarray
    log_probs: np.ndarray
    stds: np.ndarray
    guidance_scale: float
    seed: int | None = None
    rewards: np.ndarray | None = None
    temporal_rewards: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1

    def __len__(self) -> int:
        return self.contexts.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.states[0]

    def __getitem__(self, i: int) -> Trajectory:
        tr = None if self.temporal_rewards is None else self.temporal_rewards[:, i]
        return Trajectory(
            context=self.contexts[i], states=self.states[:, i], means=self.means[:, i],
            stds=self.stds, log_probs=self.log_probs[:, i],
            reward=float("nan") if self.rewards is None else float(self.rewards[i]),
            temporal_rewards=tr, seed=self.seed)

    def state_dict(self, prefix: str = "trajectory/") -> dict[str, np.ndarray]:
        out = {f"{prefix}contexts": self.contexts, f"{prefix}states": self.states,
               f"{prefix}means": self.means, f"{prefix}log_probs": self.log_probs,
               f"{prefix}stds": self.stds}
        if self.rewards is not None:
            out[f"{prefix}rewards"] = self.rewards
        if self.temporal_rewards is not None:
            out[f"{prefix}temporal_rewards"] = self.temporal_rewards
        return out


def sample_trajectories(model: Denoiser, contexts, schedule: NoiseSchedule, guidance_scale: float,
                        rng: np.random.Generator, seed: int | None = None) -> TrajectoryBatch:
    """Run the reverse chain from x_T ~ N(0, I) for every context row."""
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    n, T = len(contexts), schedule.T
    states = np.zeros((T + 1, n, DATA_DIM))
    means = np.zeros((T + 1, n, DATA_DIM))
    log_probs = np.zeros((T + 1, n))
    states[T] = rng.standard_normal((n, DATA_DIM))
    for t in range(T, 0, -1):
        states[t - 1], means[t], log_probs[t] = denoise_step(
            model, states[t], t, contexts, schedule, guidance_scale, rng)
    return TrajectoryBatch(contexts, states, means, log_probs, schedule.sigmas.copy(),
                           guidance_scale, seed)


def sample_trajectory(model: Denoiser, c, schedule: NoiseSchedule, guidance_scale: float,
                      rng: np.random.Generator) -> Trajectory:
    return sample_trajectories(model, np.asarray(c)[None, :], schedule, guidance_scale, rng)[0]


def sample(model: Denoiser, contexts, schedule: NoiseSchedule, guidance_scale: float,
           rng: np.random.Generator) -> np.ndarray:
    """Final samples x_0 only."""
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    x = rng.standard_normal((len(contexts), DATA_DIM))
    for t in range(schedule.T, 0, -1):
        x, _, _ = denoise_step(model, x, t, contexts, schedule, guidance_scale, rng)
    return x


def rbf_mmd(x: np.ndarray, y: np.ndarray, bandwidth: float = 1.0) -> float:
    """Biased (V-statistic) RBF-kernel MMD between two point sets."""
    def k(a, b):
        d2 = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
        return np.exp(-np.maximum(d2, 0.0) / (2.0 * bandwidth ** 2))
    mmd2 = k(x, x).mean() + k(y, y).mean() - 2.0 * k(x, y).mean()
    return float(np.sqrt(max(mmd2, 0.0)))
