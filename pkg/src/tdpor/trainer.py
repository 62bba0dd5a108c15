"""Policy-gradient finetuning of the adapter: TDPO, TDPO-R and DDPO-style baselines.

One epoch samples trajectories under the current (old) policy, scores the
final samples with the fitted reward model, turns them into per-step
weights and then sweeps the stored transitions:

* ``tdpo`` / ``tdpo-r``: for t = T..1, the minibatches of step t are split
  into accumulation spans and each span yields one AdamW step for the adapter
  and one for the critic. Weights are temporal rewards R(x0) - R_phi(x_{t-1}).
* ``ddpo-batch`` / ``ddpo-highfreq``: (minibatch, step) pairs are visited
  minibatch-major and chunked into spans of ``accumulation * T`` or
  ``accumulation`` pairs. Weights are the standardised final rewards.

``tdpo-r`` additionally resets critic neurons every ``reset_frequency`` epochs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neurons
from .autodiff import AdamW, Tensor, minimum, no_grad
from .critic import TemporalCritic, clipped_value_loss, head_widths
from .diffusion import (
    Denoiser,
    NoiseSchedule,
    TrajectoryBatch,
    attach_adapter,
    sample_trajectories,
    transition_log_prob,
)
from .rewards import RewardModel, encode

MODES = ("tdpo", "tdpo-r", "ddpo-batch", "ddpo-highfreq")
METRIC_FIELDS = ("epoch", "step", "timestep", "mode", "reward_mean", "reward_std", "temporal_reward_mean",
                 "policy_loss", "critic_loss", "ratio_mean", "dormant_pct", "reset_fired")
DDPO_BATCH_LR = 3e-4


class TrainingAbort(RuntimeError):
    pass


@dataclass
class TrainerConfig:
    mode: str = "tdpo-r"
    epochs: int = 40
    batch_size: int = 8
    batches_per_timestep: int = 32
    accumulation: int = 16
    policy_lr: float | None = None
    policy_clip: float = 0.2
    critic_lr: float = 1e-4
    critic_clip: float = 0.2
    critic_width_divisor: int = 4
    reset_frequency: int = 10
    reset_strategy: str = "active"
    reset_target: str = "critic"
    dormant_threshold: float = 0.0
    kl_coef: float = 0.0
    guidance_scale: float = 1.0
    standardize: bool = True
    weight_post_action: bool = True
    fuse_minibatches: bool = True
    adapter_rank: int = 4
    adapter_scale: float = 1.0
    max_grad_norm: float = 1.0
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    probe_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "tdpo-r" and self.reset_frequency < 1:
            raise ValueError("reset_frequency must be >= 1 for tdpo-r")
        if self.kl_coef < 0:
            raise ValueError("kl_coef must be >= 0")
        if self.batches_per_timestep % self.accumulation:
            raise ValueError("batches_per_timestep must be a multiple of accumulation")
        if self.reset_strategy not in neurons.STRATEGIES:
            raise ValueError(f"unknown reset strategy {self.reset_strategy!r}")
        if self.reset_target not in ("critic", "policy"):
            raise ValueError(f"unknown reset target {self.reset_target!r}")

    @property
    def samples_per_epoch(self) -> int:
        return self.batch_size * self.batches_per_timestep

    @property
    def resolved_policy_lr(self) -> float:
        if self.policy_lr is not None:
            return self.policy_lr
        return DDPO_BATCH_LR if self.mode == "ddpo-batch" else 1e-4

    @property
    def uses_critic(self) -> bool:
        return self.mode in ("tdpo", "tdpo-r")

    def updates_per_epoch(self, T: int) -> int:
        if self.mode in ("tdpo", "tdpo-r"):
            return (self.batches_per_timestep // self.accumulation) * T
        span = self.accumulation * T if self.mode == "ddpo-batch" else self.accumulation
        return math.ceil(self.batches_per_timestep * T / span)


@dataclass
class EpochBatch:
    trajectories: TrajectoryBatch
    rewards: np.ndarray
    weights: np.ndarray            # (T+1, N) policy-gradient weight of transition t (row 0 unused)
    raw_temporal: np.ndarray       # (T+1, N) unstandardised weights
    critic_features: np.ndarray | None = None   # (T+1, N, width) encoder features of x_t
    old_predictions: np.ndarray | None = None   # (T+1, N) critic predictions at epoch start
    old_policy: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.trajectories.T

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class TrainState:
    config: TrainerConfig
    policy: Denoiser
    reward_model: RewardModel
    schedule: NoiseSchedule
    contexts: np.ndarray
    critic: TemporalCritic | None = None
    optimizer: AdamW | None = None
    rng: np.random.Generator | None = None
    reset_rng: np.random.Generator | None = None
    policy_steps: int = 0
    critic_steps: int = 0
    reward_queries: int = 0
    epoch: int = 0
    rows: list = field(default_factory=list)
    neuron_log: list = field(default_factory=list)
    last_reports: list | None = None

    def __post_init__(self):
        cfg = self.config
        if self.optimizer is None:
            self.optimizer = AdamW(self.policy.adapter_parameters(), lr=cfg.resolved_policy_lr,
                                   betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps,
                                   weight_decay=cfg.weight_decay, max_grad_norm=cfg.max_grad_norm)
        seeds = np.random.SeedSequence(cfg.seed).spawn(2)
        if self.rng is None:
            self.rng = np.random.default_rng(seeds[0])
        if self.reset_rng is None:
            self.reset_rng = np.random.default_rng(seeds[1])

    @property
    def T(self) -> int:
        return self.schedule.T


# -- collection ---------------------------------------------------------------


def standardize(values: np.ndarray, axis=None, eps: float = 1e-8) -> np.ndarray:
    mean = values.mean(axis=axis, keepdims=True)
    std = values.std(axis=axis, keepdims=True)
    return (values - mean) / (std + eps)


def critic_features(critic: TemporalCritic, states: np.ndarray, contexts: np.ndarray) -> np.ndarray:
    T1, n, _ = states.shape
    t = np.repeat(np.arange(T1), n)
    feats = encode(critic.encoder, states.reshape(-1, 2), t, np.tile(contexts, (T1, 1)))
    return feats.reshape(T1, n, -1)


def collect_epoch(state: TrainState, count: int | None = None, rng: np.random.Generator | None = None) -> EpochBatch:
    """Sample ``count`` trajectories under the current policy and attach rewards and weights."""
    cfg = state.config
    count = cfg.samples_per_epoch if count is None else count
    if count % cfg.batch_size:
        raise ValueError("sample count must be divisible by the batch size")
    rng = rng or state.rng
    ctx = state.contexts[rng.integers(0, len(state.contexts), size=count)]
    traj = sample_trajectories(state.policy, ctx, state.schedule, cfg.guidance_scale, rng)
    rewards = state.reward_model(traj.final, ctx)
    state.reward_queries += count
    traj.rewards = rewards
    T = traj.T
    feats = preds = None
    if cfg.uses_critic:
        feats = critic_features(state.critic, traj.states, ctx)
        with no_grad():
            preds = state.critic.head(feats.reshape(-1, feats.shape[-1])).data.reshape(T + 1, count)
        raw = np.zeros((T + 1, count))
        for t in range(1, T + 1):
            s = t - 1 if cfg.weight_post_action else t
            raw[t] = rewards - preds[s]
        weights = raw.copy()
        if cfg.standardize:
            weights[1:] = standardize(raw[1:], axis=1)
    else:
        raw = np.tile(rewards, (T + 1, 1))
        raw[0] = 0.0
        weights = raw.copy()
        if cfg.standardize:
            weights[1:] = np.tile(standardize(rewards), (T, 1))
    traj.temporal_rewards = raw
    old = {k: v.copy() for k, v in state.policy.state_dict().items()}
    return EpochBatch(traj, rewards, weights, raw, feats, preds, old)


# -- losses -------------------------------------------------------------------


def policy_loss_at_timestep(policy: Denoiser, x_prev, x_t, t, c, old_log_probs, weights, clip: float,
                            schedule: NoiseSchedule, guidance_scale: float, kl_coef: float = 0.0,
                            pre_log_probs=None):
    """Clipped importance-weighted surrogate; returns (loss, ratio array)."""
    logp = transition_log_prob(policy, x_prev, x_t, t, c, schedule, guidance_scale)
    log_ratio = logp - Tensor(np.asarray(old_log_probs, dtype=np.float64))
    ratio = log_ratio.exp()
    if not np.all(np.isfinite(ratio.data)):
        raise TrainingAbort(f"non-finite importance ratio at timestep {t}")
    w = Tensor(np.asarray(weights, dtype=np.float64))
    surrogate = minimum(ratio * w, ratio.clamp(1.0 - clip, 1.0 + clip) * w)
    loss = -surrogate.mean()
    if kl_coef > 0:
        if pre_log_probs is None:
            raise ValueError("KL penalty needs reference log-probabilities")
        loss = loss + (logp - Tensor(np.asarray(pre_log_probs))).mean() * kl_coef
    return loss, ratio.data


def _pre_log_probs(state: TrainState, x_prev, x_t, t, c) -> np.ndarray | None:
    if state.config.kl_coef <= 0:
        return None
    policy = state.policy
    policy.adapter_enabled = False
    try:
        with no_grad():
            return transition_log_prob(policy, x_prev, x_t, t, c, state.schedule,
                                       state.config.guidance_scale).data
    finally:
        policy.adapter_enabled = True


def _span_losses(state: TrainState, batch: EpochBatch, items: np.ndarray, steps: np.ndarray):
    """Policy (and critic) losses averaged over rows (item, step)."""
    cfg = state.config
    traj = batch.trajectories
    x_t = traj.states[steps, items]
    x_prev = traj.states[steps - 1, items]
    c = traj.contexts[items]
    pre = _pre_log_probs(state, x_prev, x_t, steps, c)
    p_loss, ratio = policy_loss_at_timestep(
        state.policy, x_prev, x_t, steps, c, traj.log_probs[steps, items], batch.weights[steps, items],
        cfg.policy_clip, state.schedule, cfg.guidance_scale, cfg.kl_coef, pre)
    c_loss = None
    if cfg.uses_critic:
        s = steps - 1 if cfg.weight_post_action else steps
        feats = batch.critic_features[s, items]
        c_loss = clipped_value_loss(state.critic.head(feats), batch.rewards[items],
                                    batch.old_predictions[s, items], cfg.critic_clip)
    return p_loss, c_loss, ratio


def _apply_span(state: TrainState, batch: EpochBatch, spans: list[tuple[np.ndarray, np.ndarray]]):
    """Accumulate gradients over the minibatches in ``spans`` and take one step each."""
    cfg = state.config
    critic_opt = state.critic.optimizer if cfg.uses_critic else None
    state.optimizer.zero_grad()
    if critic_opt:
        critic_opt.zero_grad()
    if cfg.fuse_minibatches:
        items = np.concatenate([s[0] for s in spans])
        steps = np.concatenate([s[1] for s in spans])
        p_loss, c_loss, ratio = _span_losses(state, batch, items, steps)
        p_loss.backward()
        if c_loss is not None:
            c_loss.backward()
        p_val = p_loss.item()
        c_val = c_loss.item() if c_loss is not None else float("nan")
        ratios = [ratio]
    else:
        k = len(spans)
        p_val = c_val = 0.0
        ratios = []
        for items, steps in spans:
            p_loss, c_loss, ratio = _span_losses(state, batch, items, steps)
            (p_loss * (1.0 / k)).backward()
            p_val += p_loss.item() / k
            if c_loss is not None:
                (c_loss * (1.0 / k)).backward()
                c_val += c_loss.item() / k
            ratios.append(ratio)
        if not cfg.uses_critic:
            c_val = float("nan")
    state.optimizer.step()
    state.policy_steps += 1
    if critic_opt:
        critic_opt.step()
        state.critic_steps += 1
    return p_val, c_val, float(np.mean(np.concatenate(ratios)))


def _minibatches(state: TrainState, n: int) -> list[np.ndarray]:
    perm = state.rng.permutation(n)
    return [perm[i:i + state.config.batch_size] for i in range(0, n, state.config.batch_size)]


def per_timestep_update(state: TrainState, batch: EpochBatch, t: int, minibatches=None) -> list[dict]:
    """All optimizer steps for diffusion step ``t``; returns one metrics dict per step."""
    cfg = state.config
    if not 1 <= t <= batch.T:
        raise ValueError(f"timestep {t} out of range")
    minibatches = minibatches if minibatches is not None else _minibatches(state, len(batch))
    out = []
    for u in range(0, len(minibatches), cfg.accumulation):
        spans = [(mb, np.full(mb.size, t)) for mb in minibatches[u:u + cfg.accumulation]]
        p_val, c_val, r_mean = _apply_span(state, batch, spans)
        out.append({"timestep": t, "policy_loss": p_val, "critic_loss": c_val, "ratio_mean": r_mean,
                    "temporal_reward_mean": float(batch.raw_temporal[t].mean())})
    return out


def ddpo_updates(state: TrainState, batch: EpochBatch) -> list[dict]:
    """Timestep-agnostic updates over (minibatch, step) pairs."""
    cfg = state.config
    T = batch.T
    pairs = []
    for mb in _minibatches(state, len(batch)):
        for t in state.rng.permutation(np.arange(1, T + 1)):
            pairs.append((mb, np.full(mb.size, t)))
    span = cfg.accumulation * T if cfg.mode == "ddpo-batch" else cfg.accumulation
    out = []
    for u in range(0, len(pairs), span):
        p_val, c_val, r_mean = _apply_span(state, batch, pairs[u:u + span])
        out.append({"timestep": 0, "policy_loss": p_val, "critic_loss": c_val, "ratio_mean": r_mean,
                    "temporal_reward_mean": float(batch.rewards.mean())})
    return out


# -- neuron bookkeeping --------------------------------------------------------------


def _probe_features(state: TrainState, batch: EpochBatch) -> np.ndarray:
    feats = batch.critic_features
    flat = feats.reshape(-1, feats.shape[-1])
    idx = state.reset_rng.choice(flat.shape[0], size=min(state.config.probe_size, flat.shape[0]), replace=False)
    return flat[np.sort(idx)]


def critic_reports(critic: TemporalCritic, probe: np.ndarray, tau: float) -> list[neurons.NeuronReport]:
    acts = critic.hidden_activations(probe)
    return [neurons.neuron_report(layer.name, a, tau) for layer, a in zip(critic.layers, acts)]


def policy_reports(policy: Denoiser, batch: EpochBatch, state: TrainState, tau: float) -> list[neurons.NeuronReport]:
    traj = batch.trajectories
    T1, n = traj.states.shape[:2]
    rows = state.reset_rng.choice((T1 - 1) * n, size=min(state.config.probe_size, (T1 - 1) * n), replace=False)
    steps = 1 + rows // n
    items = rows % n
    with no_grad():
        _, bottlenecks = policy(traj.states[steps, items], steps, traj.contexts[items], return_hidden=True)
    names = [f"hidden{i}.lora" for i in sorted(policy.adapters)]
    return [neurons.neuron_report(name, z.data, tau) for name, z in zip(names, bottlenecks)]


def maybe_reset(state: TrainState, batch: EpochBatch, epoch: int, events_path=None) -> dict:
    """Measure neuron states and, on reset epochs of tdpo-r, redraw the selected neurons."""
    cfg = state.config
    info = {"dormant_pct": float("nan"), "overlap_pct": None, "reset_fired": 0}
    if not cfg.uses_critic:
        return info
    tau = cfg.dormant_threshold
    if cfg.reset_target == "critic":
        probe = _probe_features(state, batch)
        reports = critic_reports(state.critic, probe, tau)
    else:
        reports = policy_reports(state.policy, batch, state, tau)
    pct, overlap = neurons.network_dormant_stats(reports, state.last_reports)
    info.update(dormant_pct=pct, overlap_pct=overlap)
    fire = cfg.mode == "tdpo-r" and epoch % cfg.reset_frequency == 0
    if fire:
        if cfg.reset_target == "critic":
            modules, opt = neurons.critic_modules(state.critic), state.critic.optimizer
        else:
            modules, opt = neurons.adapter_modules(state.policy), state.optimizer
        masks = {r.module: neurons.select_neurons(r, cfg.reset_strategy) for r in reports}
        event = neurons.reset_parameters(modules, masks, state.reset_rng, opt, epoch=epoch,
                                         target=cfg.reset_target, strategy=cfg.reset_strategy,
                                         stream=f"reset/{cfg.seed}/{epoch}")
        after = critic_reports(state.critic, probe, tau) if cfg.reset_target == "critic" \
            else policy_reports(state.policy, batch, state, tau)
        pct_after, _ = neurons.network_dormant_stats(after)
        info["reset_fired"] = 1
        record = {"epoch": epoch, "target": cfg.reset_target, "strategy": cfg.reset_strategy,
                  "counts": event.counts, "dormant_pct_before": pct, "dormant_pct_after": pct_after,
                  "overlap_pct": overlap}
        state.neuron_log.append(record)
        if events_path is not None:
            neurons.append_event(events_path, event, dormant_pct_before=pct, dormant_pct_after=pct_after,
                                 overlap_pct=overlap)
        reports = after
    state.last_reports = reports
    return info


# -- epochs ---------------------------------------------------------------------


def run_epoch(state: TrainState, epoch: int, events_path=None) -> dict:
    """Collect, sweep t = T..1 (or DDPO spans), then measure/reset neurons."""
    cfg = state.config
    batch = collect_epoch(state)
    if cfg.mode in ("tdpo", "tdpo-r"):
        step_rows = []
        for t in range(batch.T, 0, -1):
            step_rows += per_timestep_update(state, batch, t)
    else:
        step_rows = ddpo_updates(state, batch)
    r_mean, r_std = float(batch.rewards.mean()), float(batch.rewards.std())
    global_step = state.policy_steps - len(step_rows)
    for i, row in enumerate(step_rows):
        row.update(epoch=epoch, step=global_step + i + 1, mode=cfg.mode, reward_mean=r_mean,
                   reward_std=r_std, dormant_pct=float("nan"), reset_fired=0)
        state.rows.append(row)
    info = maybe_reset(state, batch, epoch, events_path)
    summary = {"epoch": epoch, "step": state.policy_steps, "timestep": -1, "mode": cfg.mode,
               "reward_mean": r_mean, "reward_std": r_std,
               "temporal_reward_mean": float(batch.raw_temporal[1:].mean()),
               "policy_loss": float(np.mean([r["policy_loss"] for r in step_rows])),
               "critic_loss": float(np.nanmean([r["critic_loss"] for r in step_rows]))
               if cfg.uses_critic else float("nan"),
               "ratio_mean": float(np.mean([r["ratio_mean"] for r in step_rows])),
               "dormant_pct": info["dormant_pct"], "reset_fired": info["reset_fired"]}
    state.rows.append(summary)
    state.epoch = epoch
    return {**summary, "overlap_pct": info["overlap_pct"], "updates": len(step_rows),
            "temporal_reward_by_t": batch.raw_temporal[1:].mean(axis=1)}


def format_value(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return f"{v:.10g}"
    return str(v)


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in rows:
        writer.writerow([format_value(row[k]) for k in METRIC_FIELDS])
    return buf.getvalue()


def train(state: TrainState, epochs: int | None = None, metrics_path=None, events_path=None,
          callback=None) -> list[dict]:
    """Run ``epochs`` epochs (default: config.epochs), writing metrics rows as it goes."""
    epochs = state.config.epochs if epochs is None else epochs
    history = []
    for e in range(state.epoch + 1, state.epoch + epochs + 1):
        history.append(run_epoch(state, e, events_path))
        if callback is not None:
            callback(e, state)
    if metrics_path is not None:
        Path(metrics_path).write_text(metrics_csv(state.rows))
    return history


def build_state(config: TrainerConfig, pretrained: Denoiser, reward_model: RewardModel,
                schedule: NoiseSchedule, contexts, critic_encoder=None) -> TrainState:
    """Attach a fresh adapter (and critic) to a pretrained denoiser."""
    seeds = np.random.SeedSequence([config.seed, 7]).generate_state(2)
    policy = attach_adapter(pretrained, config.adapter_rank, config.adapter_scale, seed=int(seeds[0]))
    critic = None
    if config.uses_critic:
        encoder = critic_encoder if critic_encoder is not None else reward_model.encoder
        critic = TemporalCritic(encoder, np.random.default_rng(int(seeds[1])),
                                widths=head_widths(config.critic_width_divisor), lr=config.critic_lr,
                                clip_range=config.critic_clip, weight_decay=config.weight_decay,
                                max_grad_norm=config.max_grad_norm)
    return TrainState(config, policy, reward_model, schedule, np.asarray(contexts, dtype=np.float64), critic)
