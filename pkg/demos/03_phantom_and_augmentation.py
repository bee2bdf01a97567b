"""
Phantoms and the two augmentation policies
==========================================

The phantom is a bright aortic disc whose radius bulges along z, plus a
very bright spine disc and a dimmer vena cava disc. Each subject gets its
own contrast map ``a * v + b`` and in-plane offset.

``gt`` augmentation crosses gray-value maps with translated windows;
``rm`` produces the eight rotations/mirrorings of the centre window.
"""
import numpy as np

from aaaseg import augment, volio

image, mask = volio.make_phantom(volio.PhantomSpec(n_slices=16, seed=1))
print("image", image.data.shape, image.data.dtype, "spacing", image.spacing)
print("aorta area per slice:", mask.data.sum(axis=(1, 2)))

shifted, _ = volio.make_phantom(volio.PhantomSpec(n_slices=16, seed=1, a=1.15, b=-60, offset=(12, -8)))
k = 8
print("mean aorta intensity: base", image.data[k][mask.data[k] == 1].mean().round(1),
      "shifted", shifted.data[k][np.roll(mask.data[k], (-8, 12), axis=(0, 1)) == 1].mean().round(1))

# window enumeration on a full-size CT slice
grid = augment.WindowGrid(512, 64)
print("640x640 windows:", len(augment.enumerate_windows((640, 640), grid)))
print("576x512 windows:", augment.enumerate_windows((576, 512), grid))

pair = augment.SlicePair(image.data[k], mask.data[k], ("A", k, ""))
gt = augment.expand(pair, augment.AugPolicy(kind="gt", n_gray=8, window=64, stride=8, seed=3), key=k)
rm = augment.expand(pair, augment.AugPolicy(kind="rm", window=64))
print(f"gt: {len(gt)} pairs, e.g. {gt[10].descriptor}")
print(f"rm: {len(rm)} pairs: {[p.descriptor for p in rm]}")

# a descriptor is enough to rebuild the sample
img, lab = augment.apply_descriptor(pair.image, pair.label, gt[10].descriptor, 64)
print("rebuilt matches:", np.array_equal(img, gt[10].image) and np.array_equal(lab, gt[10].label))

# physical resampling to the unified 0.645 mm grid
coarse = volio.Volume(image.data, (0.8, 0.8, 1.0))
print("0.8 mm ->", volio.resample_xy(coarse).data.shape)
