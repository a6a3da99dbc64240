"""Dense scanning with the converted network equals cropping by hand.

A randomly initialised CNN is re-laid out as a fully convolutional model,
scanned once over a volume, and compared cell by cell with explicit crops
at stride 16.

    python3 demos/fcn_equivalence.py
"""
import itertools
import time

import numpy as np

from spinemark import net

arch = net.CnnArch(channels=(8, 16, 32, 32), fc5=256)
params = net.build_cnn(0, arch)
rng = np.random.default_rng(0)
volume = rng.standard_normal((1, 64, 160, 128))

t0 = time.perf_counter()
maps = net.fcn_forward(net.convert_to_fcn(params), volume)
t_scan = time.perf_counter() - t0
print(f"score-map grid {maps.grid} from one scan in {t_scan:.2f} s")

worst = 0.0
t0 = time.perf_counter()
for g in itertools.product(*map(range, maps.grid)):
    o = [16 * v for v in g]
    crop = volume[:, o[0]:o[0] + 32, o[1]:o[1] + 112, o[2]:o[2] + 96]
    logits, offset, _ = net.cnn_forward(params, crop)
    cell = (slice(None),) + g
    worst = max(worst, np.abs(maps.id_scores[cell] - logits).max(), np.abs(maps.loc_scores[cell] - offset).max())
print(f"explicit crops took {time.perf_counter() - t0:.2f} s; largest difference {worst:.1e}")

# a cell's offset prediction maps back to image voxels by the stride
print("grid (2,3,1) with offset (4,10,7) ->", net.map_to_image((2, 3, 1), (4, 10, 7)))
