# %% [markdown]
# # Error against model size: accordion training versus a plain network
#
# A conventionally trained network falls apart when its last units are
# dropped.  A network trained with randomly truncated depth degrades
# gracefully.  This script trains both on a few seeds and writes the curves
# as a tidy CSV (no plotting, any spreadsheet will do).

# %%
import sys

from accordion import ArchSpec, SpiralSpec, TrainConfig, build, build_table, make_splits
from accordion import named_policy, train
from accordion.cli import CURVE_COLUMNS, aggregate_curves

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 2)
epochs = 30
data = make_splits(SpiralSpec())
spec = ArchSpec()

# %%
runs = []
for policy in ("baseline", "coml-05"):
    for seed in seeds:
        model = build(spec, seed)
        cfg = TrainConfig(named_policy(policy, spec.total_units), epochs=epochs, seed=seed,
                          lr_schedule=((15, 10.0), (23, 10.0)))
        train(model, data["train"], cfg)
        runs.append((policy, build_table(model, ["coml"], data["test"], f"{policy}-{seed}")))
        print(f"trained {policy} seed {seed}")

# %%
rows = aggregate_curves(runs)
print(f"{'n':>2} {'size_bits':>10}  baseline        coml-05")
by = {(r["policy"], r["n"]): r for r in rows}
for n in range(1, spec.total_units + 1):
    b, a = by["baseline", n], by["coml-05", n]
    print(f"{n:2d} {b['size_bits']:10d}  {b['error_mean']:.3f}+-{b['error_std']:.3f}"
          f"    {a['error_mean']:.3f}+-{a['error_std']:.3f}")

# %%
with open("depth_curves.csv", "w") as fh:
    fh.write(",".join(CURVE_COLUMNS) + "\n")
    for r in rows:
        fh.write(",".join(str(r[k]) for k in CURVE_COLUMNS) + "\n")
print("wrote depth_curves.csv;", rows[0]["runs"], "runs per point")
