"""Generate one phantom, print its annotations and a coarse side view.

    python3 demos/phantom_tour.py [seed]
"""
import sys

import numpy as np

from spinemark import data as D
from spinemark.pipeline import PHANTOM_DEFAULTS

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
spec = D.PhantomSpec(seed=seed, vertebra_count=7, first_label=15, **PHANTOM_DEFAULTS)
vol, ann = D.synth_phantom(spec)
print(f"volume dims {vol.dims}, spacing {vol.spacing_mm} mm")
for name, mm in ann.entries:
    print(f"  {name:>3}  centroid (mm) {np.round(mm, 1)}")

# sagittal projection through the spine: brighter means denser
side = vol.intensities[0].max(axis=2)[::8, ::4]
ramp = " .:-=+*#%@"
lo, hi = side.min(), side.max()
for row in side:
    print("".join(ramp[int((v - lo) / (hi - lo + 1e-12) * (len(ramp) - 1))] for v in row))

samples = D.generate_cnn_samples([(vol, ann)], per_vertebra=2, seed=seed)
print(f"{len(samples)} training crops of shape {samples[0].tensor.shape[1:]}")
for s in samples[:4]:
    print(f"  origin {tuple(s.origin)} label {D.decode_label(s.target.label)}")
