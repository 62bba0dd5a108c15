"""TDPO against batch-level DDPO on the direction reward.

Both methods see 256 trajectories per epoch. TDPO updates once per timestep
slice (40 optimizer steps an epoch at T=20); ddpo-batch accumulates a whole
epoch into 2 steps. Expect TDPO at direction 0.8 within ~35 epochs while
ddpo-batch has barely moved. Takes a few minutes on one core.

    python3 demos/02_finetune_race.py [output_dir] [epochs]
"""

import sys

from tdpor import harness as H

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
epochs = sys.argv[2] if len(sys.argv) > 2 else "40"
base = H.load_config(None, {"output_dir": out, "epochs": epochs, "eval_every": "5", "seeds": "0"})
pre = H.pretrain_stage(base)
rm = H.fit_rewards_stage(base, pre)

curves = {}
for mode in ("tdpo", "ddpo-batch"):
    cfg = base.replace(run_name=f"race-{mode}", mode=mode)
    seed_dir = H.finetune_seed(cfg, 0, pre, rm)
    records = H.read_eval(seed_dir / "eval.csv")
    curves[mode] = (H.eval_curve(records, "direction"), dict((e, m) for e, _, m in H.eval_curve(records, "fidelity")))

print(f"{'epoch':>5} {'queries':>8} | {'tdpo dir':>9} {'fid':>7} | {'ddpo dir':>9} {'fid':>7}")
for (e, q, d_t), (_, _, d_b) in zip(curves["tdpo"][0], curves["ddpo-batch"][0]):
    print(f"{e:5d} {q:8d} | {d_t:9.3f} {curves['tdpo'][1][e]:7.3f} | {d_b:9.3f} {curves['ddpo-batch'][1][e]:7.3f}")

# The fidelity column is the out-of-domain view: it falls as direction rises,
# the toy's picture of a model trading sample quality for reward.
