# coding: utf-8

# # The any-to-any transformer
#
# Each modality is patchified into its own token block. Blocks for the
# conditions and the target share one sequence; a role embedding tells the
# two apart and a four-axis rotary embedding (slot, H, W, D) encodes where
# each token sits.

# In[1]:

import numpy as np

from diffkt3d.any2any import Any2AnyDiT, DitConfig, TaskAssignment, sample_task
from diffkt3d.inference import case_conditioning
from diffkt3d.numcore import stream
from diffkt3d.phantom import PhantomConfig, generate_case

cfg = DitConfig()
model = Any2AnyDiT(cfg, seed=0)
print("volume", cfg.volume_shape, "patch", cfg.patch_size, "token grid", cfg.token_grid)
print("width", cfg.d_model, "heads", cfg.n_heads, "blocks", cfg.n_blocks)
print("parameters:", model.n_params)


# Training draws a random task per step: a target modality and a random
# subset of the others as conditions.

# In[2]:

rng = stream(0, "demo")
for _ in range(4):
    task = sample_task(rng, "any2any")
    print(f"target {task.target:6s} <- {', '.join(task.conditions)}")


# A forward pass predicts v for the target slot only. A fresh model has a
# zero output head, so its first prediction is exactly zero.

# In[3]:

case = generate_case(3, PhantomConfig())
task = TaskAssignment("ptv", ("ct", "body"))
cond = case_conditioning(case, task)
x_t = np.random.default_rng(0).standard_normal((1,) + cfg.volume_shape)
v = model(x_t, np.array([0.5]), cond)
print("output", v.shape, "all zero:", bool(np.all(v == 0)))
