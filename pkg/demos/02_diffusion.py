# coding: utf-8

# # Noise schedule, v-parameterization and the deterministic sampler

# In[1]:

import numpy as np

from diffkt3d.diffusion import (
    NoiseSchedule,
    forward_diffuse,
    recover_x0_eps,
    sample_ode,
    schedule,
    shift_time,
    v_target,
)

sched = NoiseSchedule("vp", flow_shift=3.0)
t = np.linspace(0, 1, 6)
a, s = schedule(t, sched)
print("t      ", t)
print("shifted", np.round(shift_time(t, 3.0), 3))
print("alpha  ", np.round(a, 3))
print("sigma  ", np.round(s, 3))
print("max |alpha^2 + sigma^2 - 1| =", np.max(np.abs(a**2 + s**2 - 1)))


# Given a noisy sample and its v target, both the clean signal and the
# noise come back exactly.

# In[2]:

rng = np.random.default_rng(0)
x0 = rng.uniform(-1, 1, (4, 8))
eps = rng.standard_normal(x0.shape)
tt = rng.uniform(0, 1, 4)
xt = forward_diffuse(x0, eps, tt, sched)
x0_hat, eps_hat = recover_x0_eps(xt, v_target(x0, eps, tt, sched), tt, sched)
print("recovery error:", np.abs(x0_hat - x0).max(), np.abs(eps_hat - eps).max())


# The sampler with an oracle model that knows the true clean signal lands on
# it for any number of steps.

# In[3]:

target = rng.uniform(-1, 1, (8, 8, 8))


def oracle(x, t, cond):
    # the v that maps x back to target at time t
    a, s = schedule(t, sched)
    a, s = a[:, None, None, None], s[:, None, None, None]
    eps = (x - a * target) / np.where(s == 0, 1, s)
    return a * eps - s * target


for steps in (1, 3, 10):
    out = sample_ode(oracle, None, steps, sched, seed=5, shape=target.shape)
    print(f"{steps:2d} steps: max error {np.abs(out - target).max():.2e}")
