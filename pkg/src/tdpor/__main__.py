"""Command line: ``python3 -m tdpor <command> [config] [--key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness
from .checkpoint import CheckpointError
from .trainer import MODES, collect_epoch, critic_reports, policy_reports

EXIT_CONFIG, EXIT_STAGE = 2, 3


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise harness.ConfigError(f"unrecognised argument {arg!r}; overrides look like --key=value")
        key, value = arg[2:].split("=", 1)
        out[key.replace("-", "_")] = value
    return out


def _config(args, extra) -> harness.ExperimentConfig:
    return harness.load_config(args.config, _split_overrides(extra))


def cmd_pretrain(args, config):
    model = harness.pretrain_stage(config, force=args.force)
    q = harness.pretrain_quality(model, config)
    print(f"pretrained -> {harness.pretrained_path(config)}")
    print(f"mmd {q['mmd']:.5f} threshold {q['threshold']:.5f}")


def cmd_fit_rewards(args, config):
    model = harness.pretrain_stage(config) if args.pretrain else harness.load_pretrained(config)
    rm = harness.fit_rewards_stage(config, model, force=args.force)
    print(f"{rm.kind} head -> {harness.reward_path(config)} (held-out rmse {rm.rmse:.4f})")


def cmd_finetune(args, config):
    stages = ("pretrain", "fit-rewards", "finetune") if args.pretrain else ("finetune",)
    print(harness.run_experiment(config, stages))


def cmd_eval(args, config):
    rows = []
    for seed in config.seeds:
        state = harness.load_finetuned(config, seed)
        rows += harness.evaluate_policy(state.policy, config, seed, state.epoch, state.reward_queries)
    sys.stdout.write(harness.eval_csv(rows))


def cmd_neuron_report(args, config):
    print("seed,module,neurons,dormant,dormant_pct")
    for seed in config.seeds:
        state = harness.load_finetuned(config, seed)
        rng = np.random.default_rng([seed, 77])
        batch = collect_epoch(state, count=state.config.samples_per_epoch, rng=rng)
        tau = state.config.dormant_threshold
        if state.config.reset_target == "critic" and state.critic is not None:
            feats = batch.critic_features.reshape(-1, batch.critic_features.shape[-1])
            probe = feats[rng.choice(len(feats), size=min(state.config.probe_size, len(feats)), replace=False)]
            reports = critic_reports(state.critic, probe, tau)
        else:
            reports = policy_reports(state.policy, batch, state, tau)
        for r in reports:
            print(f"{seed},{r.module},{r.n},{len(r.dormant)},{r.dormant_pct:.4f}")


def cmd_plot_data(args, _config_unused):
    text = harness.emit_plot_data(args.runs)
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_ablate(args, config):
    modes = tuple(args.modes.split(",")) if args.modes else MODES
    strategies = tuple(args.strategies.split(","))
    print(harness.ablate(config, modes, strategies, milestone=args.milestone))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdpor", description="Temporal diffusion policy optimisation lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("config", nargs="?", help="key=value config file (defaults if omitted)")
        p.set_defaults(func=func)
        return p

    p = add("pretrain", cmd_pretrain, "train the base denoiser")
    p.add_argument("--force", action="store_true", help="retrain even if a cached checkpoint exists")
    p = add("fit-rewards", cmd_fit_rewards, "fit the training reward head")
    p.add_argument("--force", action="store_true")
    p.add_argument("--pretrain", action="store_true", help="run the pretrain stage first if needed")
    p = add("finetune", cmd_finetune, "finetune every seed of the config")
    p.add_argument("--pretrain", action="store_true", help="also run the pretrain and fit-rewards stages")
    add("eval", cmd_eval, "evaluate finetuned checkpoints on train and unseen contexts")
    add("neuron-report", cmd_neuron_report, "dormant neurons of finetuned checkpoints")
    p = add("plot-data", cmd_plot_data, "tidy CSV over run directories", config=False)
    p.add_argument("runs", nargs="+")
    p.add_argument("-o", "--output")
    p = add("ablate", cmd_ablate, "run the mode x seed grid")
    p.add_argument("--modes", help=f"comma-separated subset of {','.join(MODES)}")
    p.add_argument("--strategies", default="active", help="reset strategies for tdpo-r cells")
    p.add_argument("--milestone", type=float, default=0.8)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        config = None if args.command == "plot-data" else _config(args, extra)
        if args.command == "plot-data" and extra:
            raise harness.ConfigError(f"unrecognised arguments: {' '.join(extra)}")
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args.func(args, config)
    except (harness.StageError, CheckpointError, OSError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
