"""Experiment plumbing: config files, staged runs, evaluation and plot data.

A run directory looks like::

    <output_dir>/<run_name>/
        config.txt
        seed_<s>/metrics.csv, eval.csv, neurons.csv, neuron_events.jsonl,
                 checkpoints/final.tdpr, manifest.json

Pretrained denoisers and fitted reward heads are cached under
``<output_dir>/cache`` keyed by a hash of the settings that produced them, so
an ablation grid pays for them once.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import types
import typing
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .diffusion import (
    Denoiser,
    MixtureData,
    make_schedule,
    pretrain,
    rbf_mmd,
    sample,
)
from .rewards import REWARD_KINDS, Encoder, RewardFitError, RewardModel, analytic_reward, fit_reward_head, \
    reward_dataset
from .trainer import MODES, TrainerConfig, TrainingAbort, build_state, format_value, metrics_csv, run_epoch

EVAL_FIELDS = ("epoch", "queries", "context_set", "reward_kind", "mean", "std", "n")
PLOT_FIELDS = ("run", "seed", "epoch", "queries", "metric", "value")
SUMMARY_METRICS = ("reward_mean", "temporal_reward_mean", "policy_loss", "critic_loss", "dormant_pct")
NEURON_FIELDS = ("epoch", "dormant_pct", "overlap_pct", "reset_fired")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    """Everything a run needs. Field names double as config-file keys."""

    run_name: str = "tdpor"
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"
    # trainer
    mode: str = "tdpo-r"
    epochs: int = 40
    denoising_timesteps: int = 20
    guidance_scale: float = 1.0
    policy_learning_rate: float | None = None
    policy_clipping_range: float = 0.2
    maximum_gradient_norm: float = 1.0
    optimizer_weight_decay: float = 1e-4
    optimizer_beta1: float = 0.9
    optimizer_beta2: float = 0.999
    optimizer_epsilon: float = 1e-8
    training_batch_size: int = 8
    batches_per_timestep: int = 32
    gradient_accumulation_steps: int = 16
    critic_learning_rate: float = 1e-4
    critic_clipping_range: float = 0.2
    critic_width_divisor: int = 4
    neuron_dormant_threshold: float = 0.0
    neuron_reset_frequency: int = 10
    reset_strategy: str = "active"
    reset_target: str = "critic"
    probe_size: int = 256
    kl_coefficient: float = 0.0
    adapter_rank: int = 4
    adapter_scale: float = 1.0
    # data and rewards
    n_modes: int = 8
    mode_radius: float = 4.0
    mode_std: float = 0.3
    train_reward: str = "direction"
    eval_rewards: tuple[str, ...] = ("direction", "fidelity", "radius")
    direction_offset_deg: float = 90.0
    eval_every: int = 5
    eval_samples: int = 512
    # pretraining
    pretrain_steps: int = 4000
    pretrain_batch_size: int = 512
    pretrain_learning_rate: float = 2e-3
    pretrain_seed: int = 0
    # reward heads
    reward_encoder_seed: int = 1
    reward_encoder_width: int = 128
    reward_fit_samples: int = 2048
    reward_box_points: int = 2048
    reward_fit_steps: int = 8000
    reward_fit_seed: int = 5
    # critic encoder; unset means "share the reward encoder"
    critic_encoder_seed: int | None = None
    critic_encoder_width: int | None = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.eval_rewards = tuple(self.eval_rewards)
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.train_reward not in REWARD_KINDS:
            raise ConfigError(f"train_reward must be one of {REWARD_KINDS}")
        if len(set(self.eval_rewards)) != len(self.eval_rewards):
            raise ConfigError("eval_rewards lists a kind twice")
        for kind in self.eval_rewards:
            if kind not in REWARD_KINDS:
                raise ConfigError(f"unknown evaluation reward {kind!r}")
        if self.eval_every < 1 or self.eval_samples < 1:
            raise ConfigError("eval_every and eval_samples must be >= 1")
        if self.denoising_timesteps < 1 or self.epochs < 0:
            raise ConfigError("denoising_timesteps must be >= 1 and epochs >= 0")
        data = self.data
        train = np.round(np.mod(data.angles(), 2 * math.pi), 12)
        unseen = np.round(np.mod(data.unseen_angles(), 2 * math.pi), 12)
        if set(train) & set(unseen):
            raise ConfigError("held-out angles overlap the training angles")
        try:
            self.trainer_config(self.seeds[0])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def data(self) -> MixtureData:
        return MixtureData(self.n_modes, self.mode_radius, self.mode_std)

    @property
    def direction_offset(self) -> float:
        return math.radians(self.direction_offset_deg)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_name

    def trainer_config(self, seed: int) -> TrainerConfig:
        return TrainerConfig(
            mode=self.mode, epochs=self.epochs, batch_size=self.training_batch_size,
            batches_per_timestep=self.batches_per_timestep, accumulation=self.gradient_accumulation_steps,
            policy_lr=self.policy_learning_rate, policy_clip=self.policy_clipping_range,
            critic_lr=self.critic_learning_rate, critic_clip=self.critic_clipping_range,
            critic_width_divisor=self.critic_width_divisor, reset_frequency=self.neuron_reset_frequency,
            reset_strategy=self.reset_strategy, reset_target=self.reset_target,
            dormant_threshold=self.neuron_dormant_threshold, kl_coef=self.kl_coefficient,
            guidance_scale=self.guidance_scale, adapter_rank=self.adapter_rank,
            adapter_scale=self.adapter_scale, max_grad_norm=self.maximum_gradient_norm,
            weight_decay=self.optimizer_weight_decay, adam_beta1=self.optimizer_beta1,
            adam_beta2=self.optimizer_beta2, adam_eps=self.optimizer_epsilon, probe_size=self.probe_size,
            seed=seed)

    def replace(self, **changes) -> "ExperimentConfig":
        values = asdict(self)
        unknown = set(changes) - set(values)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        values.update(changes)
        return ExperimentConfig(**values)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif v is None:
                v = "none"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


# -- config parsing ---------------------------------------------------------------

_TYPES = typing.get_type_hints(ExperimentConfig)


def _parse_value(key: str, raw: str):
    hint = _TYPES[key]
    optional = False
    args = typing.get_args(hint)
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        optional = type(None) in args
        hint = next(a for a in args if a is not type(None))
        args = typing.get_args(hint)
    raw = raw.strip()
    if optional and raw.lower() in ("none", "auto", ""):
        return None
    if typing.get_origin(hint) is tuple:
        item = args[0]
        return tuple(item(part.strip()) for part in raw.split(",") if part.strip())
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return hint(raw)


def parse_overrides(pairs: dict[str, str], where: dict[str, str] | None = None) -> dict:
    """Convert raw ``key -> text`` pairs to typed values; ``where`` labels errors."""
    out = {}
    for key, raw in pairs.items():
        label = (where or {}).get(key, key)
        if key not in _TYPES:
            raise ConfigError(f"{label}: unknown config key {key!r}")
        try:
            out[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{label}: bad value for {key!r}: {exc}") from exc
    return out


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    pairs, where = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key], where[key] = raw, f"line {lineno}"
    for key, raw in (overrides or {}).items():
        pairs[key], where[key] = raw, f"--{key}"
    values = parse_overrides(pairs, where)
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Read a flat ``key=value`` file; ``path=None`` gives the defaults."""
    if path is None:
        return parse_config_text("", overrides)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), overrides)


# -- hashing ------------------------------------------------------------------------


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _settings_hash(config: ExperimentConfig, keys) -> str:
    text = "\n".join(f"{k}={getattr(config, k)!r}" for k in keys)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


_PRETRAIN_KEYS = ("denoising_timesteps", "n_modes", "mode_radius", "mode_std", "pretrain_steps",
                  "pretrain_batch_size", "pretrain_learning_rate", "pretrain_seed")
_REWARD_KEYS = _PRETRAIN_KEYS + ("train_reward", "direction_offset_deg", "guidance_scale", "reward_encoder_seed",
                                 "reward_encoder_width", "reward_fit_samples", "reward_box_points",
                                 "reward_fit_steps", "reward_fit_seed")


def pretrained_path(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / "cache" / f"pretrained-{_settings_hash(config, _PRETRAIN_KEYS)}.tdpr"


def reward_path(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / "cache" / f"reward-{_settings_hash(config, _REWARD_KEYS)}.tdpr"


# -- stages ---------------------------------------------------------------------------


def new_denoiser(config: ExperimentConfig, seed: int = 0) -> Denoiser:
    return Denoiser(config.denoising_timesteps, np.random.default_rng(seed))


def pretrain_stage(config: ExperimentConfig, force: bool = False) -> Denoiser:
    """Train (or load the cached) base denoiser."""
    path = pretrained_path(config)
    model = new_denoiser(config, config.pretrain_seed)
    if path.exists() and not force:
        model.load_state_dict(checkpoint.load(path))
        return model
    schedule = make_schedule(config.denoising_timesteps)
    try:
        pretrain(model, config.data, schedule, np.random.default_rng(config.pretrain_seed),
                 steps=config.pretrain_steps, batch_size=config.pretrain_batch_size,
                 lr=config.pretrain_learning_rate)
    except (ValueError, FloatingPointError) as exc:
        raise StageError("pretrain", str(exc)) from exc
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, model.state_dict())
    return model


def load_pretrained(config: ExperimentConfig) -> Denoiser:
    path = pretrained_path(config)
    if not path.exists():
        raise StageError("pretrain", f"no pretrained checkpoint at {path}; run the pretrain stage first")
    model = new_denoiser(config, config.pretrain_seed)
    model.load_state_dict(checkpoint.load(path))
    return model


def mmd_threshold(data: MixtureData, n: int = 2048, factor: float = 3.0, seed: int = 0) -> float:
    """``factor`` times the MMD between two independent draws from the data."""
    a, _ = data.sample(n, np.random.default_rng([seed, 1]))
    b, _ = data.sample(n, np.random.default_rng([seed, 2]))
    return factor * rbf_mmd(a, b)


def pretrain_quality(model: Denoiser, config: ExperimentConfig, n: int = 2048, seed: int = 0) -> dict:
    """MMD between model samples and fresh data, next to its acceptance threshold."""
    data = config.data
    schedule = make_schedule(config.denoising_timesteps)
    rng = np.random.default_rng([seed, 3])
    real, ctx = data.sample(n, rng)
    fake = sample(model, ctx, schedule, 1.0, rng)
    return {"mmd": rbf_mmd(fake, real), "threshold": mmd_threshold(data, n, seed=seed)}


def fit_rewards_stage(config: ExperimentConfig, model: Denoiser | None = None, force: bool = False) -> RewardModel:
    """Fit (or load the cached) head for the training reward.

    The direction head sees model samples plus uniform box points; the other
    kinds are fitted on model samples only since their targets explode off
    the data manifold.
    """
    path = reward_path(config)
    T = config.denoising_timesteps
    if path.exists() and not force:
        return RewardModel.from_state_dict(checkpoint.load(path), config.train_reward, T)
    model = model if model is not None else load_pretrained(config)
    data = config.data
    rng = np.random.default_rng(config.reward_fit_seed)
    ctx = data.contexts()[rng.integers(0, config.n_modes, size=config.reward_fit_samples)]
    xs = sample(model, ctx, make_schedule(T), config.guidance_scale, rng)
    if config.train_reward == "direction":
        dataset = reward_dataset(xs, ctx, data.contexts(), config.reward_box_points, rng)
    else:
        dataset = (xs, ctx)
    encoder = Encoder(config.reward_encoder_seed, T, width=config.reward_encoder_width)
    try:
        rm = fit_reward_head(encoder, config.train_reward, dataset, config.reward_fit_seed, data=data,
                             direction_offset=config.direction_offset, steps=config.reward_fit_steps)
    except RewardFitError as exc:
        raise StageError("fit-rewards", str(exc)) from exc
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(path, rm.state_dict())
    return rm


def load_reward(config: ExperimentConfig) -> RewardModel:
    path = reward_path(config)
    if not path.exists():
        raise StageError("fit-rewards", f"no fitted reward at {path}; run the fit-rewards stage first")
    return RewardModel.from_state_dict(checkpoint.load(path), config.train_reward, config.denoising_timesteps)


def critic_encoder(config: ExperimentConfig, reward_model: RewardModel) -> Encoder | None:
    if config.critic_encoder_seed is None and config.critic_encoder_width is None:
        return None
    seed = reward_model.encoder.seed if config.critic_encoder_seed is None else config.critic_encoder_seed
    width = config.critic_encoder_width or reward_model.encoder.width
    return Encoder(seed, config.denoising_timesteps, width=width)


# -- evaluation -----------------------------------------------------------------------


@dataclass
class EvalRow:
    epoch: int
    queries: int
    context_set: str
    n: int
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)

    def mean(self, kind: str) -> float:
        return self.stats[kind][0]

    def csv_rows(self) -> list[list[str]]:
        return [[str(self.epoch), str(self.queries), self.context_set, kind, format_value(m), format_value(s),
                 str(self.n)] for kind, (m, s) in self.stats.items()]


def context_set(config: ExperimentConfig, name: str) -> np.ndarray:
    data = config.data
    if name == "train":
        return data.contexts()
    if name == "unseen":
        return data.contexts(data.unseen_angles())
    raise ValueError(f"unknown context set {name!r}")


def cross_reward_eval(policy: Denoiser, kinds, contexts, n: int, rng: np.random.Generator, *,
                      config: ExperimentConfig, epoch: int = 0, queries: int = 0,
                      tag: str = "train") -> EvalRow:
    """Score ``n`` fresh samples with the analytic rewards. Touches no parameters or counters."""
    if n < 1:
        raise ValueError("need at least one evaluation sample")
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    ctx = contexts[rng.integers(0, len(contexts), size=n)]
    x0 = sample(policy, ctx, make_schedule(config.denoising_timesteps), config.guidance_scale, rng)
    row = EvalRow(epoch, queries, tag, n)
    for kind in kinds:
        r = analytic_reward(kind, x0, ctx, data=config.data, direction_offset=config.direction_offset)
        row.stats[kind] = (float(r.mean()), float(r.std()))
    return row


def evaluate_policy(policy: Denoiser, config: ExperimentConfig, seed: int, epoch: int, queries: int) -> list[EvalRow]:
    """Train- and unseen-context rows; the stream depends only on (seed, epoch)."""
    rows = []
    for i, name in enumerate(("train", "unseen")):
        rng = np.random.default_rng([seed, 1000 + i, epoch])
        rows.append(cross_reward_eval(policy, config.eval_rewards, context_set(config, name), config.eval_samples,
                                      rng, config=config, epoch=epoch, queries=queries, tag=name))
    return rows


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def read_neurons(path) -> list[dict]:
    """Per-epoch dormant and overlap percentages; missing values come back as None."""
    with Path(path).open(newline="") as fh:
        return [{"epoch": int(r["epoch"]), "reset_fired": int(r["reset_fired"]),
                 "dormant_pct": float(r["dormant_pct"]) if r["dormant_pct"] else None,
                 "overlap_pct": float(r["overlap_pct"]) if r["overlap_pct"] else None}
                for r in csv.DictReader(fh)]


def eval_csv(rows: list[EvalRow]) -> str:
    return _csv_text(EVAL_FIELDS, [r for row in rows for r in row.csv_rows()])


def read_eval(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        out = []
        for rec in csv.DictReader(fh):
            rec["epoch"], rec["queries"], rec["n"] = int(rec["epoch"]), int(rec["queries"]), int(rec["n"])
            rec["mean"] = float(rec["mean"]) if rec["mean"] else math.nan
            rec["std"] = float(rec["std"]) if rec["std"] else math.nan
            out.append(rec)
        return out


def eval_curve(records: list[dict], kind: str, context: str = "train") -> list[tuple[int, int, float]]:
    """(epoch, queries, mean) for one reward kind, ordered by epoch."""
    pts = [(r["epoch"], r["queries"], r["mean"]) for r in records
           if r["reward_kind"] == kind and r["context_set"] == context]
    return sorted(pts)


def first_reaching(curve, level: float):
    """First (epoch, queries, mean) point with mean >= level, or None."""
    return next((p for p in curve if p[2] >= level), None)


# -- runs -------------------------------------------------------------------------------


def _seed_dir(config: ExperimentConfig, seed: int) -> Path:
    return config.run_dir / f"seed_{seed}"


def finetune_seed(config: ExperimentConfig, seed: int, pretrained: Denoiser, reward_model: RewardModel) -> Path:
    """Finetune one seed and write its artifacts; returns the seed directory."""
    out = _seed_dir(config, seed)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    events = out / "neuron_events.jsonl"
    events.write_text("")
    tcfg = config.trainer_config(seed)
    state = build_state(tcfg, pretrained, reward_model, make_schedule(config.denoising_timesteps),
                        config.data.contexts(), critic_encoder(config, reward_model))
    evals = evaluate_policy(state.policy, config, seed, 0, 0)
    neuron_rows = []
    try:
        for epoch in range(1, config.epochs + 1):
            info = run_epoch(state, epoch, events)
            neuron_rows.append([format_value(info[k]) if info[k] is not None else "" for k in NEURON_FIELDS])
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                evals += evaluate_policy(state.policy, config, seed, epoch, state.reward_queries)
    except TrainingAbort as exc:
        raise StageError("finetune", f"seed {seed}: {exc}") from exc
    (out / "metrics.csv").write_text(metrics_csv(state.rows))
    (out / "eval.csv").write_text(eval_csv(evals))
    (out / "neurons.csv").write_text(_csv_text(NEURON_FIELDS, neuron_rows))
    ckpt = dict(state.policy.state_dict())
    if state.critic is not None:
        ckpt.update(state.critic.state_dict())
    ckpt["meta/counters"] = np.array([state.epoch, state.reward_queries, state.policy_steps, state.critic_steps],
                                     dtype=np.int64)
    checkpoint.save(out / "checkpoints" / "final.tdpr", ckpt)
    write_manifest(config, seed, out)
    return out


def write_manifest(config: ExperimentConfig, seed: int, out: Path) -> None:
    files = {}
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"):
        files[path.relative_to(out).as_posix()] = git_blob_hash(path.read_bytes())
    manifest = {
        "config": config.to_text().splitlines(),
        "seed": seed,
        "samples_per_epoch": config.trainer_config(seed).samples_per_epoch,
        "inputs": {"pretrained": git_blob_hash(pretrained_path(config).read_bytes()),
                   "reward": git_blob_hash(reward_path(config).read_bytes())},
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_experiment(config: ExperimentConfig, stages=("pretrain", "fit-rewards", "finetune")) -> Path:
    """Run the requested stages for every seed; returns the run directory.

    Without the ``pretrain`` / ``fit-rewards`` stages the cached artifacts
    must already exist.
    """
    run_dir = config.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(config.to_text())
    pretrained = pretrain_stage(config) if "pretrain" in stages else load_pretrained(config)
    reward_model = fit_rewards_stage(config, pretrained) if "fit-rewards" in stages else load_reward(config)
    if "finetune" in stages:
        for seed in config.seeds:
            finetune_seed(config, seed, pretrained, reward_model)
    return run_dir


def load_finetuned(config: ExperimentConfig, seed: int):
    """Rebuild the policy (and critic) saved by :func:`finetune_seed`."""
    path = _seed_dir(config, seed) / "checkpoints" / "final.tdpr"
    if not path.exists():
        raise StageError("eval", f"no finetuned checkpoint at {path}")
    state = checkpoint.load(path)
    reward_model = load_reward(config)
    tstate = build_state(config.trainer_config(seed), load_pretrained(config), reward_model,
                         make_schedule(config.denoising_timesteps), config.data.contexts(),
                         critic_encoder(config, reward_model))
    tstate.policy.load_state_dict(state)
    if tstate.critic is not None:
        tstate.critic.load_state_dict(state)
    tstate.epoch, tstate.reward_queries, tstate.policy_steps, tstate.critic_steps = \
        (int(v) for v in state["meta/counters"])
    return tstate


# -- plot data and ablations --------------------------------------------------------


def _summary_rows(seed_dir: Path, samples_per_epoch: int):
    with (seed_dir / "metrics.csv").open(newline="") as fh:
        for rec in csv.DictReader(fh):
            if rec["timestep"] != "-1":
                continue
            epoch = int(rec["epoch"])
            for metric in SUMMARY_METRICS:
                if rec[metric] != "":
                    yield epoch, epoch * samples_per_epoch, f"train/{metric}", float(rec[metric])


def _seed_rows(seed_dir: Path):
    manifest = json.loads((seed_dir / "manifest.json").read_text())
    rows = list(_summary_rows(seed_dir, manifest["samples_per_epoch"]))
    for rec in read_eval(seed_dir / "eval.csv"):
        rows.append((rec["epoch"], rec["queries"], f"eval/{rec['context_set']}/{rec['reward_kind']}", rec["mean"]))
    spe = manifest["samples_per_epoch"]
    for rec in read_neurons(seed_dir / "neurons.csv"):
        if rec["overlap_pct"] is not None:
            rows.append((rec["epoch"], rec["epoch"] * spe, "neurons/overlap_pct", rec["overlap_pct"]))
    return manifest["seed"], rows


def emit_plot_data(run_dirs) -> str:
    """Long-format CSV over runs and seeds, plus per-(epoch, metric) mean and std rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PLOT_FIELDS)
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        seed_dirs = sorted((d for d in run_dir.glob("seed_*") if (d / "manifest.json").exists()),
                           key=lambda d: int(d.name.split("_", 1)[1])) if run_dir.is_dir() else []
        if not seed_dirs:
            warnings.warn(f"skipping {run_dir}: no completed seeds", stacklevel=2)
            continue
        grouped: dict[tuple[int, int, str], list[float]] = {}
        for seed_dir in seed_dirs:
            seed, rows = _seed_rows(seed_dir)
            for epoch, queries, metric, value in sorted(rows):
                writer.writerow([run_dir.name, seed, epoch, queries, metric, format_value(value)])
                grouped.setdefault((epoch, queries, metric), []).append(value)
        for (epoch, queries, metric), values in sorted(grouped.items()):
            arr = np.asarray(values)
            writer.writerow([run_dir.name, "mean", epoch, queries, metric, format_value(float(arr.mean()))])
            writer.writerow([run_dir.name, "std", epoch, queries, metric, format_value(float(arr.std()))])
    return buf.getvalue()


ABLATION_FIELDS = ("run", "mode", "reset_strategy", "seed", "epochs", "queries", "milestone_epoch",
                   "milestone_queries")


def ablation_cells(config: ExperimentConfig, modes=MODES, strategies=("active",)) -> list[ExperimentConfig]:
    cells = []
    for mode in modes:
        for strategy in (strategies if mode == "tdpo-r" else (config.reset_strategy,)):
            name = f"{config.run_name}-{mode}" + (f"-{strategy}" if mode == "tdpo-r" and len(strategies) > 1 else "")
            cells.append(config.replace(mode=mode, reset_strategy=strategy, run_name=name))
    return cells


def ablate(config: ExperimentConfig, modes=MODES, strategies=("active",), milestone: float = 0.8) -> Path:
    """Run the grid ``modes x seeds`` and write ``ablation.csv`` next to the runs."""
    pretrained = pretrain_stage(config)
    reward_model = fit_rewards_stage(config, pretrained)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    kinds = [f"{ctx}_{k}" for ctx in ("train", "unseen") for k in config.eval_rewards]
    writer.writerow(ABLATION_FIELDS + tuple(kinds))
    for cell in ablation_cells(config, modes, strategies):
        cell.run_dir.mkdir(parents=True, exist_ok=True)
        (cell.run_dir / "config.txt").write_text(cell.to_text())
        for seed in cell.seeds:
            out = finetune_seed(cell, seed, pretrained, reward_model)
            records = read_eval(out / "eval.csv")
            hit = first_reaching(eval_curve(records, cell.train_reward), milestone)
            last = max(r["epoch"] for r in records)
            finals = {f"{r['context_set']}_{r['reward_kind']}": r["mean"] for r in records if r["epoch"] == last}
            last_q = max(r["queries"] for r in records)
            writer.writerow([cell.run_name, cell.mode, cell.reset_strategy if cell.mode == "tdpo-r" else "", seed,
                             last, last_q, "" if hit is None else hit[0], "" if hit is None else hit[1]]
                            + [format_value(finals[k]) for k in kinds])
    path = Path(config.output_dir) / f"{config.run_name}-ablation.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path
