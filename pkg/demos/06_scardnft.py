# coding: utf-8

# # Scorecard-aligned post-training
#
# A frozen snapshot proposes K candidate doses per case. Each candidate is
# scored, the scores become optimality probabilities in [0, 1], and these
# weight two implicit velocity targets built around the snapshot.

# In[1]:

import numpy as np

from diffkt3d.scardnft import implicit_targets, nft_loss, optimality_probability

rewards = np.array([30.0, 34.0, 38.0, 50.0])
r = optimality_probability(rewards, rewards.mean(), z=np.mean(np.abs(rewards - rewards.mean())))
print("rewards", rewards, "->", np.round(r, 3))
v_pos, v_neg = implicit_targets(np.array(2.0), np.array(4.0), 0.5)
print("targets", float(v_pos.data), float(v_neg.data))
print("loss", float(nft_loss(np.array(4.0), np.array(2.0), np.array(2.0), 0.75, 0.5).data))


# A couple of rounds on a toy model.

# In[2]:

from diffkt3d.any2any import Any2AnyDiT, DitConfig
from diffkt3d.optim import Adam, AdamConfig
from diffkt3d.phantom import PhantomConfig, generate_dataset
from diffkt3d.scardnft import NftConfig, post_train_round
from diffkt3d.scorecard import default_spec

cases = generate_dataset(4, seed=900, config=PhantomConfig(shape=(8, 12, 12), n_oars=2))
model = Any2AnyDiT(DitConfig(volume_shape=(8, 12, 12), d_model=16, n_heads=1, n_blocks=1), seed=0)
opt = Adam(AdamConfig(lr=1e-3, warmup_steps=0, clip_norm=1.0))
stats = None
for rnd in range(2):
    snapshot = model.copy()
    rep, stats = post_train_round(model, snapshot, cases, lambda c: default_spec(c.site),
                                  NftConfig(k=4, steps=4), opt, seed=0, round_index=rnd, stats=stats)
    print(f"round {rnd}: reward {rep.reward_before:.2f} -> {rep.reward_after:.2f}, loss {rep.loss:.4f}")
