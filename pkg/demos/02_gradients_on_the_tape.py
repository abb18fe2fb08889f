#!/usr/bin/env python3
# The tape records whole-grid ops during the rollout and replays them backwards.
# Here we check it against brute-force finite differences on a tiny grid.

import numpy as np

from cellnca import autodiff as ad
from cellnca.model import NcaConfig, draw_masks, forward, init_params

config = NcaConfig(channels=8, steps=3, update_hidden=8, classifier_hidden=8, num_classes=3)
rng = np.random.default_rng(3)
params = init_params(config, rng, dtype=np.float64)
for arr in params.as_dict().values():
    arr[...] = rng.normal(0, 0.3, arr.shape)   # make every group matter, W2 included

image = rng.random((6, 6, 3))
masks = draw_masks(rng, config.steps, 6, 6, 0.5)   # fix the stochastic updates
label = 1

fw = forward(image, params, config, masks=masks)
loss = ad.softmax_cross_entropy(fw.logits, label)
grads = fw.tape.backward(loss)
print("loss", float(loss.value))
print("ops on the tape:", len(fw.tape.nodes))


def loss_value():
    out = forward(image, params, config, masks=masks, tape=ad.Tape(enabled=False))
    return float(ad.softmax_cross_entropy(out.logits, label).value)


# central differences, one scalar at a time
h = 1e-5
for name in ("k1", "W1", "W2", "W4"):
    arr = getattr(params, name).reshape(-1)
    fd = np.empty(arr.size)
    for i in range(arr.size):
        old = arr[i]
        arr[i] = old + h
        up = loss_value()
        arr[i] = old - h
        down = loss_value()
        arr[i] = old
        fd[i] = (up - down) / (2 * h)
    g = grads[name].reshape(-1)
    print(f"{name:3s} relative error {np.linalg.norm(g - fd) / np.linalg.norm(fd):.2e}")

# cells whose mask is off never see the update MLP, and neither does the gradient
off = forward(rng.random((1, 1, 3)), params, config, masks=np.zeros((3, 1, 1), bool))
g = off.tape.backward(ad.softmax_cross_entropy(off.logits, 0))
print("gradient of W1 with every update gated off:", g["W1"] is None or not np.any(g["W1"]))
