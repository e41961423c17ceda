# %% [markdown]
# # From beat signal to Range-Angle map
#
# One person scene pushed through the physical chain (ADC cube, range and
# Doppler FFTs, per-range-cell Capon beamformer), next to the cheap
# image-level renderer that the training data uses by default.
# Run top to bottom with `python notebooks/01_signal_chain.py`; images land
# in `runs/signal_chain/`.

# %%
from pathlib import Path

import numpy as np

from gla.frames import apply_colormap, normalize_frame, write_png
from gla.rf_synth import (RadarParams, SceneDistribution, mvdr_angle_spectrum, range_doppler_fft, render_ra_image,
                          sample_scene, signal_chain_ra, simulate_adc)

out = Path("runs/signal_chain")
out.mkdir(parents=True, exist_ok=True)
params = RadarParams()
scene = sample_scene("person", params, SceneDistribution(), seed=3)
gt = scene.ground_truth(params)
print("person at (range bin, angle bin):", tuple(round(v, 2) for v in gt.blob_center))

# %% [markdown]
# The ADC cube is `[rx, chirps, samples]`. After both FFTs, static clutter
# sits in Doppler bin 0 while the person, which carries a little
# micro-motion, spreads over a few nonzero bins.

# %%
cube = simulate_adc(scene, params)
rd = range_doppler_fft(cube, params)
power = (np.abs(rd) ** 2).sum(axis=0)[:, : params.range_bins]
print("cube", cube.shape, "range-Doppler", rd.shape)
write_png(out / "range_doppler.png", apply_colormap(normalize_frame(np.log1p(power)[None]), "lut").transpose(1, 2, 0))

# %% [markdown]
# The Capon spectrum for the person's range cell alone. Its snapshots are
# that cell's Doppler bins.

# %%
cell = int(round(gt.blob_center[0]))
spectrum = mvdr_angle_spectrum(rd[:, :, cell], params)
print("angle argmax bin:", int(np.argmax(spectrum)), "truth:", round(gt.blob_center[1], 2))

# %% [markdown]
# The full maps. Both are min-max normalised before they are written.

# %%
physical = normalize_frame(signal_chain_ra(scene, params)[None])
rendered = normalize_frame(render_ra_image(scene, params)[None])
for name, img in (("signal_chain", physical), ("image_level", rendered)):
    peak = tuple(int(v) for v in np.unravel_index(np.argmax(img[0]), img[0].shape))
    print(f"{name:>12}: peak at {peak}")
    write_png(out / f"{name}.png", apply_colormap(img, "lut").transpose(1, 2, 0))
