"""End-to-end: train briefly on phantoms, then run the 15-combination sweep.

Takes a minute or two on CPU.  Run:  python3 demos/04_train_and_sweep.py
"""

import numpy as np

from adamm import TrainConfig, eval_sweep, init_state, make_synthetic_dataset, train
from adamm.metrics import table_to_text

# The desk-scale recipe: 8 training phantoms of 24^3, 200 steps.
cfg = TrainConfig(
    epochs=25, patch_size=24, seed=7, base_channels=8, K=8,
    lr_init=3e-3, lr_final=3e-4,
)
dataset = make_synthetic_dataset(9, (24, 24, 24), seed=50)
train_set, held_out = dataset[:8], dataset[8:]

state = init_state(cfg, len(train_set))
print(f"training for {state.total_steps} steps ...")
history = train(state, train_set)

totals = [h["total"] for h in history]
print("joint loss: first 5 =", np.round(totals[:5], 3).tolist())
print("            last  5 =", np.round(totals[-5:], 3).tolist())

# The sweep masks the held-out case to each of the 15 combinations, runs the
# student with existence gating, and aggregates the four metrics per region.
table, per_case = eval_sweep(state.model, held_out)
print()
print(table_to_text(table))
print(f"per-case rows: {len(per_case)} (15 combinations x {len(held_out)} case(s) x 3 regions)")
