"""Watching critic neurons go dormant, and resetting them.

A TDPO-R run resets critic neurons every 10 epochs. The per-epoch
dormant percentage and the overlap of consecutive dormant sets end up in
neurons.csv; each reset is one line of neuron_events.jsonl.

    python3 demos/03_dormant_neurons.py [output_dir] [strategy]
"""

import json
import sys

from tdpor import harness as H

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
strategy = sys.argv[2] if len(sys.argv) > 2 else "active"
cfg = H.load_config(None, {"output_dir": out, "epochs": "30", "eval_every": "10", "seeds": "0",
                           "mode": "tdpo-r", "reset_strategy": strategy, "run_name": f"neurons-{strategy}"})
pre = H.pretrain_stage(cfg)
rm = H.fit_rewards_stage(cfg, pre)
seed_dir = H.finetune_seed(cfg, 0, pre, rm)

for row in H.read_neurons(seed_dir / "neurons.csv"):
    overlap = "   -" if row["overlap_pct"] is None else f"{row['overlap_pct']:5.1f}"
    mark = "  <- reset" if row["reset_fired"] else ""
    print(f"epoch {row['epoch']:3d}  dormant {row['dormant_pct']:5.2f}%  overlap {overlap}{mark}")

# With tau = 0 a neuron is dormant only when it is silent on the whole probe
# batch, so at this width the dormant set is a handful of units and flickers
# from epoch to epoch.
for line in (seed_dir / "neuron_events.jsonl").read_text().splitlines():
    ev = json.loads(line)
    print(f"reset at epoch {ev['epoch']}: {sum(ev['counts'].values())} neurons ({ev['strategy']}), "
          f"dormant {ev['dormant_pct_before']:.2f}% -> {ev['dormant_pct_after']:.2f}%")
