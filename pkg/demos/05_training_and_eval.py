# coding: utf-8

# # Training and evaluation at toy scale
#
# A short run on small volumes, enough to watch the loss fall and to see
# the evaluation outputs. The acceptance suite runs the full desk-scale
# recipe on 16^3 volumes.

# In[1]:

import numpy as np

from diffkt3d.any2any import Any2AnyDiT, DitConfig
from diffkt3d.phantom import PhantomConfig, generate_dataset, split_dataset
from diffkt3d.pipeline import TrainConfig, baseline_dose, constant_baseline, evaluate, mae_thresholded, train

cases = generate_dataset(40, seed=500, config=PhantomConfig(shape=(8, 12, 12), n_oars=2))
tr, va, te = split_dataset(cases)
model = Any2AnyDiT(DitConfig(volume_shape=(8, 12, 12), d_model=32, n_heads=2, n_blocks=2), seed=0)


# Stage A trains on random any-to-any tasks, stage B on dose only.

# In[2]:

common = dict(lr=1e-3, warmup_steps=20, clip_norm=1.0, batch_size=8)
res_a = train(model, tr, TrainConfig(stage="A", steps=100, seed=0, **common))
res_b = train(model, tr, TrainConfig(stage="B", steps=150, seed=1, **common))
for name, res in (("A", res_a), ("B", res_b)):
    losses = np.array([row[1] for row in res.curve])
    print(f"stage {name}: loss {losses[:10].mean():.3f} -> {losses[-10:].mean():.3f} in {res.seconds:.0f} s")


# Held-out evaluation next to a constant-dose baseline.

# In[3]:

level = constant_baseline(tr)
base = np.mean([mae_thresholded(baseline_dose(c, level), c.volumes["dose"].values, c.mask("body")) for c in te])
rep = evaluate(model, te, steps=10, compare_steps=(1,))
print(f"baseline MAE {base:.2f} Gy")
print(f"10-step MAE {rep.summary['mean_mae_gy']:.2f} Gy, 1-step {rep.summary['mean_mae_gy_1step']:.2f} Gy")
print(f"mean score {rep.summary['mean_score']:.2f}")
