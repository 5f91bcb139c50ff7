"""Train the desk-scale network on five synthetic pairs and register unseen ones.

Run: python3 demos/02_train_and_register.py [iterations] [out_dir]

The default 500 iterations take roughly ten minutes on one CPU core.
Training writes train_log.csv and final.dmrc into out_dir; the per-pair
metrics land in out_dir/held_out.csv.
"""
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from dmreg import desk_config
from dmreg.metrics import dice
from dmreg.synthetic import gen_synthetic_pair
from dmreg.trainer import PairDataset, evaluate_pair, mean_ncc, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 500
out = Path(sys.argv[2] if len(sys.argv) > 2 else "desk_run")

train_pairs = [gen_synthetic_pair(s) for s in range(5)]
held_out = [gen_synthetic_pair(s) for s in range(100, 105)]
cfg = desk_config(iterations=iterations)

result = train(cfg, PairDataset.from_synthetic(train_pairs), out_dir=out)
print(f"model: {result.model}")
print(f"main NCC on training pairs after training: "
      f"{mean_ncc(result.model, [(p.moving, p.fixed) for p in train_pairs]):.3f}")

rows = []
for p in held_out:
    row = evaluate_pair(result.model, p.moving, p.fixed, p.moving_labels, p.fixed_labels)
    row["identity_dice"] = dice(p.moving_labels, p.fixed_labels)[1]
    row["pair_id"] = f"seed{p.seed}"
    rows.append(row)
    print(f"{row['pair_id']}: Dice {row['identity_dice']:.3f} -> {row['mean_dice']:.3f}, "
          f"non-positive Jacobian {row['pct_nonpos_jac']:.2f}%, {row['wall_time_s']:.2f} s")

cols = ["pair_id", "identity_dice", "mean_dice", "pct_nonpos_jac", "std_jac", "wall_time_s"]
with open(out / "held_out.csv", "w", newline="") as fh:
    w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
print(f"mean held-out Dice {np.mean([r['identity_dice'] for r in rows]):.3f} -> "
      f"{np.mean([r['mean_dice'] for r in rows]):.3f}")
