"""
Training a small U-Net on one disc
==================================

A depth-2 U-Net with 4 base features, Adam, one 16x16 slice. The loss
should collapse within a couple of hundred updates.
"""
from types import SimpleNamespace

import numpy as np

from aaaseg import optim, unet
from aaaseg.evalkit import dsc_slice

spec = unet.UNetSpec(depth=2, base_features=4)
print("counted layers:", spec.counted_layers, "(6 * depth + 4)")
for name in ("u34", "u28", "desk"):
    print(f"  preset {name}: {unet.PRESETS[name].counted_layers} layers")

yy, xx = np.mgrid[:16, :16]
label = ((yy - 7.5) ** 2 + (xx - 7.5) ** 2 <= 4.5 ** 2).astype(np.uint8)
sample = SimpleNamespace(image=label * 0.8 + 0.1, label=label)

params = unet.build(spec, seed=0)
print("parameters:", params.num_parameters())
params, trace = optim.train(params, [sample], optim.AdamState(lr=0.01),
                            optim.TrainLoopConfig(max_iterations=200))
losses = trace.losses
print(f"loss: first {losses[0]:.2f}, last {losses[-1]:.4f}")

probs = unet.forward(params, sample.image[None, None].astype(np.float32))
print("training DSC:", round(dsc_slice(probs[0, 1] > 0.5, label), 4))

# checkpoints are a small self-describing binary format
unet.save(params, "/tmp/disc.unet")
again = unet.load("/tmp/disc.unet")
print("reloaded spec:", again.spec)
