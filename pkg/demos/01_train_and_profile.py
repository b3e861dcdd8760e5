# %% [markdown]
# # Training a depth-elastic residual MLP
#
# A small residual MLP learns the three-arm spiral task.  Every mini-batch
# trains a randomly chosen prefix of its residual units (the ``coml-05``
# policy: the full network half the time, otherwise a uniform depth), so any
# prefix of units is a usable model afterwards.

# %%
import numpy as np

from accordion import ArchSpec, DepthConfig, Scheme, SpiralSpec, TrainConfig, build, make_splits
from accordion import build_table, evaluate, named_policy, train

data = make_splits(SpiralSpec())
print({name: len(ds) for name, ds in data.items()})
print("class counts (train):", np.bincount(data["train"].y))

# %%
# Three blocks of six units, width 64.  Twenty epochs keeps this demo under a
# minute; the desk recipe uses sixty.
spec = ArchSpec()
model = build(spec, seed=0)
cfg = TrainConfig(named_policy("coml-05", spec.total_units), epochs=20,
                  lr_schedule=((10, 10.0), (15, 10.0)))
report = train(model, data["train"], cfg, data["val"])
for rec in report.epochs[::5] + report.epochs[-1:]:
    print(f"epoch {rec.epoch:2d}  lr {rec.lr:.4f}  loss {rec.loss:.4f}  "
          f"full error {rec.full_error:.3f}")
print(f"{report.iterations} iterations, {report.unit_backward_passes} unit backward passes "
      f"(full depth would be {report.iterations * spec.total_units})")

# %%
# The look-up table: size, compute and validation error of every prefix.
table = build_table(model, [Scheme.COML, Scheme.BLOCKCOML], data["val"], "demo")
print(" n   coml bits   coml err   blockcoml err")
for n in range(1, spec.total_units + 1):
    a, b = table.entry("coml", n), table.entry("blockcoml", n)
    print(f"{n:2d} {a.size_bits:11d} {a.error_rate:10.3f} {b.error_rate:15.3f}")

# %%
# Truncated models stay useful: test error at a third, two thirds and full depth.
for n in (6, 12, 18):
    print(n, "units:", evaluate(model, DepthConfig(Scheme.COML, n), data["test"]))
