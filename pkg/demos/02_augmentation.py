"""Compose augmentations from config-style strings.

Each transform fires with its own probability. The number of random draws
per transform is fixed, so a seed fully determines the output.

    python demos/02_augmentation.py
"""

import numpy as np

from alnmil.augment import affine, compose, hflip, parse_spec, posterize, solarize

rng = np.random.default_rng(1)
img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)

spec = parse_spec(["rotation(10)", "vflip(0.5)", "color_jitter(0.2, 0.2, 0.2, 0.05)", "erase(0.02, 0.2, 0.3)"])
for t in spec:
    print(f"{t.name:13s} p={t.p:<4} {t.params}")

a = compose(spec, np.random.default_rng(7), img)
b = compose(spec, np.random.default_rng(7), img)
print("same seed, same bytes:", a.tobytes() == b.tobytes())

print("rotate 0 is identity:", np.array_equal(affine(img, rotate_deg=0), img))
print("rotate 180 equals both flips:", np.array_equal(affine(img, rotate_deg=180), hflip(img[::-1])))
print("solarize 200 at 128 ->", solarize(np.array([200], np.uint8), 128)[0])
print("posterize 0b10110111 to 3 bits ->", bin(posterize(np.array([0b10110111], np.uint8), 3)[0]))
