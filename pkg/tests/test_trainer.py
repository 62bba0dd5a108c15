import math

import numpy as np
import pytest

from tdpor.autodiff import Tensor, gradient
from tdpor.diffusion import Denoiser, MixtureData, make_schedule, transition_log_prob
from tdpor.rewards import Encoder, fit_reward_head, reward_dataset
from tdpor.trainer import (
    TrainerConfig,
    TrainingAbort,
    _apply_span,
    build_state,
    collect_epoch,
    per_timestep_update,
    policy_loss_at_timestep,
    train,
)

T = 5
DATA = MixtureData()
SCHEDULE = make_schedule(T)


@pytest.fixture(scope="module")
def base():
    return Denoiser(T, np.random.default_rng(0), hidden=(16, 16, 16))


@pytest.fixture(scope="module")
def reward_model():
    rng = np.random.default_rng(1)
    x, c = DATA.sample(512, rng)
    ds = reward_dataset(x, c, DATA.contexts(), 512, rng)
    return fit_reward_head(Encoder(1, T, width=32, hidden=32), "direction", ds, 0, steps=300,
                           direction_offset=math.pi / 2, raise_on_failure=False)


def tiny(**kw):
    defaults = dict(batch_size=2, batches_per_timestep=4, accumulation=2, critic_width_divisor=16,
                    probe_size=32, seed=0)
    return TrainerConfig(**{**defaults, **kw})


def make_state(base, reward_model, **kw):
    return build_state(tiny(**kw), base, reward_model, SCHEDULE, DATA.contexts())


def _randomise_adapter(state, rng):
    for ad in state.policy.adapters.values():
        ad.B.data = rng.normal(scale=0.1, size=ad.B.shape)


def _slice(state, t=3):
    batch = collect_epoch(state, rng=np.random.default_rng(5))
    tr = batch.trajectories
    return batch, tr.states[t - 1], tr.states[t], t, tr.contexts, tr.log_probs[t]


# -- policy loss ----------------------------------------------------------------


def test_ratio_identity_matches_score_function(base, reward_model):
    state = make_state(base, reward_model)
    _randomise_adapter(state, np.random.default_rng(2))
    batch, x_prev, x_t, t, c, old = _slice(state)
    w = batch.weights[t]
    params = state.policy.adapter_parameters()
    loss, ratio = policy_loss_at_timestep(state.policy, x_prev, x_t, t, c, old, w, 0.2, SCHEDULE, 1.0)
    assert np.allclose(ratio, 1.0, atol=1e-12)
    assert loss.item() == pytest.approx(-w.mean(), abs=1e-12)
    g_loss = [g.copy() for g in gradient(loss, params)]
    logp = transition_log_prob(state.policy, x_prev, x_t, t, c, SCHEDULE, 1.0)
    g_sf = gradient(-(logp * Tensor(w)).mean(), params)
    for a, b in zip(g_loss, g_sf):
        assert np.max(np.abs(a - b)) <= 1e-8


def test_clipping_deadzone_has_zero_gradient(base, reward_model):
    state = make_state(base, reward_model)
    _randomise_adapter(state, np.random.default_rng(2))
    _, x_prev, x_t, t, c, old = _slice(state)
    params = state.policy.adapter_parameters()
    w = np.abs(np.random.default_rng(3).normal(size=len(old))) + 0.1
    loss, ratio = policy_loss_at_timestep(state.policy, x_prev, x_t, t, c, old - 0.5, w, 0.2, SCHEDULE, 1.0)
    assert np.all(ratio > 1.2)
    assert all(not g.any() for g in gradient(loss, params))
    loss, ratio = policy_loss_at_timestep(state.policy, x_prev, x_t, t, c, old + 0.5, -w, 0.2, SCHEDULE, 1.0)
    assert np.all(ratio < 0.8)
    assert all(not g.any() for g in gradient(loss, params))


def test_zero_weights_give_zero_loss_and_gradient(base, reward_model):
    state = make_state(base, reward_model)
    _randomise_adapter(state, np.random.default_rng(2))
    _, x_prev, x_t, t, c, old = _slice(state)
    loss, _ = policy_loss_at_timestep(state.policy, x_prev, x_t, t, c, old, np.zeros(len(old)), 0.2, SCHEDULE, 1.0)
    assert loss.item() == 0.0
    assert all(not g.any() for g in gradient(loss, state.policy.adapter_parameters()))


def test_narrow_clip_caps_the_ratio(base, reward_model):
    state = make_state(base, reward_model)
    _, x_prev, x_t, t, c, old = _slice(state)
    ones = np.ones(len(old))
    loss, ratio = policy_loss_at_timestep(state.policy, x_prev, x_t, t, c, old - math.log(1.01), ones, 1e-4,
                                          SCHEDULE, 1.0)
    assert np.allclose(ratio, 1.01)
    assert loss.item() == pytest.approx(-1.0001, abs=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_ratio_aborts(base, reward_model):
    state = make_state(base, reward_model)
    _, x_prev, x_t, t, c, old = _slice(state)
    with pytest.raises(TrainingAbort):
        policy_loss_at_timestep(state.policy, x_prev, x_t, t, c, old - 1e4, np.ones(len(old)), 0.2, SCHEDULE, 1.0)


def test_kl_term_vanishes_at_the_pretrained_policy(base, reward_model):
    state = make_state(base, reward_model)
    _, x_prev, x_t, t, c, old = _slice(state)
    w = np.linspace(-1, 1, len(old))
    plain, _ = policy_loss_at_timestep(state.policy, x_prev, x_t, t, c, old, w, 0.2, SCHEDULE, 1.0)
    kl, _ = policy_loss_at_timestep(state.policy, x_prev, x_t, t, c, old, w, 0.2, SCHEDULE, 1.0,
                                    kl_coef=0.01, pre_log_probs=old)
    assert kl.item() == pytest.approx(plain.item(), abs=1e-12)


# -- collection and updates -----------------------------------------------------------


def test_collect_epoch_contract(base, reward_model):
    state = make_state(base, reward_model)
    batch = collect_epoch(state, count=4, rng=np.random.default_rng(0))
    assert len(batch) == 4 and batch.trajectories.states.shape == (T + 1, 4, 2)
    again = collect_epoch(state, count=4, rng=np.random.default_rng(0))
    assert np.array_equal(batch.trajectories.states, again.trajectories.states)
    assert np.array_equal(batch.rewards, again.rewards)
    train_set = {tuple(c) for c in DATA.contexts()}
    assert all(tuple(c) in train_set for c in batch.trajectories.contexts)
    with pytest.raises(ValueError):
        collect_epoch(state, count=3)


def test_temporal_weights_use_post_action_state(base, reward_model):
    state = make_state(base, reward_model, standardize=False)
    batch = collect_epoch(state, rng=np.random.default_rng(1))
    for t in range(1, T + 1):
        assert np.allclose(batch.weights[t], batch.rewards - batch.old_predictions[t - 1])


def test_constant_baseline_shift_leaves_weights_unchanged(base, reward_model):
    state = make_state(base, reward_model)
    before = collect_epoch(state, rng=np.random.default_rng(4))
    state.critic.layers[-1].bias.data += 0.7
    after = collect_epoch(state, rng=np.random.default_rng(4))
    assert np.allclose(after.raw_temporal[1:], before.raw_temporal[1:] - 0.7)
    assert np.max(np.abs(after.weights - before.weights)) <= 1e-10


def test_zero_learning_rates_leave_parameters_bit_identical(base, reward_model):
    state = make_state(base, reward_model, policy_lr=0.0, critic_lr=0.0)
    _randomise_adapter(state, np.random.default_rng(2))
    params = state.policy.adapter_parameters() + state.critic.parameters()
    before = [p.data.copy() for p in params]
    batch = collect_epoch(state)
    rows = per_timestep_update(state, batch, T)
    assert len(rows) == 2
    assert all(np.array_equal(a, p.data) for a, p in zip(before, params))
    with pytest.raises(ValueError):
        per_timestep_update(state, batch, 0)


def _span_grads(state, batch, spans):
    _apply_span(state, batch, spans)
    return [p.grad.copy() for p in state.policy.adapter_parameters() + state.critic.parameters()]


@pytest.mark.parametrize("repeat", [False, True])
def test_fused_and_accumulated_gradients_agree(base, reward_model, repeat):
    grads = []
    for fuse in (True, False):
        state = make_state(base, reward_model, policy_lr=0.0, critic_lr=0.0, fuse_minibatches=fuse)
        _randomise_adapter(state, np.random.default_rng(2))
        batch = collect_epoch(state, rng=np.random.default_rng(6))
        mb = [np.array([0, 1]), np.array([0, 1]) if repeat else np.array([2, 3]), np.array([4, 5])]
        grads.append(_span_grads(state, batch, [(m, np.full(2, 2)) for m in mb]))
    for a, b in zip(*grads):
        assert np.max(np.abs(a - b)) <= 1e-10


def test_identical_minibatches_match_a_single_one(base, reward_model):
    state = make_state(base, reward_model, policy_lr=0.0, critic_lr=0.0, fuse_minibatches=False)
    _randomise_adapter(state, np.random.default_rng(2))
    batch = collect_epoch(state, rng=np.random.default_rng(6))
    span = (np.array([1, 4]), np.full(2, 3))
    one = _span_grads(state, batch, [span])
    many = _span_grads(state, batch, [span] * 4)
    for a, b in zip(one, many):
        assert np.max(np.abs(a - b)) <= 1e-10


def test_update_counts_at_table_ratios():
    assert TrainerConfig(mode="tdpo").updates_per_epoch(50) == 100
    assert TrainerConfig(mode="ddpo-batch").updates_per_epoch(50) == 2
    assert TrainerConfig(mode="ddpo-highfreq").updates_per_epoch(50) == 100


@pytest.mark.parametrize("mode,expected", [("tdpo", 2 * T), ("tdpo-r", 2 * T), ("ddpo-batch", 2),
                                           ("ddpo-highfreq", 2 * T)])
def test_update_counters(base, reward_model, mode, expected):
    state = make_state(base, reward_model, mode=mode)
    assert state.config.updates_per_epoch(T) == expected
    hist = train(state, epochs=2)
    assert [h["updates"] for h in hist] == [expected, expected]
    assert state.policy_steps == 2 * expected
    assert state.critic_steps == (2 * expected if mode.startswith("tdpo") else 0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainerConfig(mode="ppo")
    with pytest.raises(ValueError):
        TrainerConfig(reset_frequency=0)
    with pytest.raises(ValueError):
        TrainerConfig(kl_coef=-1.0)
    with pytest.raises(ValueError):
        TrainerConfig(batches_per_timestep=5, accumulation=2)
    assert TrainerConfig(mode="ddpo-batch").resolved_policy_lr == 3e-4
    assert TrainerConfig().resolved_policy_lr == 1e-4


# -- runs ----------------------------------------------------------------------


def _numeric(rows):
    return [{k: v for k, v in r.items() if k != "mode"} for r in rows]


def test_tdpo_and_tdpo_r_agree_until_the_first_reset(base, reward_model):
    runs = {}
    for mode in ("tdpo", "tdpo-r"):
        state = make_state(base, reward_model, mode=mode, reset_frequency=10)
        hist = train(state, epochs=11)
        runs[mode] = (state, hist)
    (s0, h0), (s1, h1) = runs["tdpo"], runs["tdpo-r"]
    through9 = [r for r in s0.rows if r["epoch"] <= 9], [r for r in s1.rows if r["epoch"] <= 9]
    a, b = _numeric(through9[0]), _numeric(through9[1])
    assert len(a) == len(b)
    for ra, rb in zip(a, b):
        for k in ra:
            va, vb = ra[k], rb[k]
            assert va == vb or (isinstance(va, float) and math.isnan(va) and math.isnan(vb)), k
    assert [h["reset_fired"] for h in h1] == [0] * 9 + [1, 0]
    assert all(h["reset_fired"] == 0 for h in h0)
    assert h0[10]["reward_mean"] != h1[10]["reward_mean"] or h0[10]["policy_loss"] != h1[10]["policy_loss"]


def test_resets_follow_the_frequency(base, reward_model, tmp_path):
    state = make_state(base, reward_model, mode="tdpo-r", reset_frequency=3)
    events = tmp_path / "events.jsonl"
    hist = train(state, epochs=7, events_path=events)
    assert [h["epoch"] for h in hist if h["reset_fired"]] == [3, 6]
    assert [r["epoch"] for r in state.neuron_log] == [3, 6]
    assert len(events.read_text().splitlines()) == 2


def test_zero_epochs_changes_nothing(base, reward_model, tmp_path):
    state = make_state(base, reward_model)
    before = [p.data.copy() for p in state.policy.adapter_parameters() + state.critic.parameters()]
    path = tmp_path / "metrics.csv"
    assert train(state, epochs=0, metrics_path=path) == []
    assert path.read_text().splitlines() == [",".join(
        ["epoch", "step", "timestep", "mode", "reward_mean", "reward_std", "temporal_reward_mean",
         "policy_loss", "critic_loss", "ratio_mean", "dormant_pct", "reset_fired"])]
    after = state.policy.adapter_parameters() + state.critic.parameters()
    assert all(np.array_equal(a, p.data) for a, p in zip(before, after))


def test_training_is_deterministic(base, reward_model, tmp_path):
    texts = []
    for i in range(2):
        state = make_state(base, reward_model, mode="tdpo-r", reset_frequency=2)
        train(state, epochs=3, metrics_path=tmp_path / f"m{i}.csv")
        texts.append((tmp_path / f"m{i}.csv").read_bytes())
    assert texts[0] == texts[1]
    body = texts[0].decode().splitlines()
    assert len(body) == 1 + 3 * (2 * T + 1)
    assert sum(line.split(",")[2] == "-1" for line in body[1:]) == 3
