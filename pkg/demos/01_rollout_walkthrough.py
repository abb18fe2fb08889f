#!/usr/bin/env python3
# A walk through one NCA forward pass on a synthetic cell image, step by step.

import numpy as np

from cellnca import NcaConfig, count_params, init_params
from cellnca.data import synth_blobs
from cellnca.model import classify, draw_masks, make_seed, nca_step, perceive

# the standard model: 128 channels, 128 hidden units in both MLPs, 13 classes
print("standard parameters:", count_params(NcaConfig()))  # 86285

# something smaller to look at
config = NcaConfig(channels=16, steps=24, update_hidden=32, classifier_hidden=32, num_classes=3)
rng = np.random.default_rng(0)
params = init_params(config, rng)
print("toy parameters:", count_params(config))

# one 64x64 RGB image with a coloured disk on a grey background
image = synth_blobs(seed=1, per_class=1).images[0]
print(image.shape, image.dtype, image.min().round(3), image.max().round(3))

# the seed grid puts RGB in channels 0..2 and zeros in the hidden channels
state = make_seed(image, config.channels)
state.shape                    # (64, 64, 16)
np.abs(state[..., 3:]).max()   # 0.0

# perception: the cell itself plus two depthwise 3x3 filter responses
p = perceive(state, params.k1, params.k2)
p.shape                        # (64, 64, 48)

# freshly initialised, the update MLP's output layer is zero, so a step is a no-op
mask = draw_masks(rng, 1, 64, 64, config.fire_rate)[0]
print("cells firing:", mask.mean())
print("state changed:", not np.array_equal(nca_step(state, params, mask), state))

# give it something to do and watch the hidden channels fill up
params.W2[...] = rng.normal(0, 0.05, params.W2.shape)
for t in range(config.steps):
    mask = draw_masks(rng, 1, 64, 64, config.fire_rate)[0]
    state = nca_step(state, params, mask)
    if t % 8 == 7:
        print(f"step {t + 1:2d}: mean |hidden| = {np.abs(state[..., 3:]).mean():.4f}")

# channel-wise max over the grid gives one feature per channel
features = state.reshape(-1, config.channels).max(axis=0)
out = classify(features, params)
print("logits", out.logits.round(4))
print("probs ", out.probs.round(4), "-> class", out.predicted)
