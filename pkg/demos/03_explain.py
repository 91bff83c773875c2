"""Grad-CAM, Otsu binarization and the three explanation metrics.

Run: python3 demos/03_explain.py
"""

import numpy as np

from kanseg.data import channel_statistics, normalize, synth_channel_roles, synth_generate
from kanseg.explain import channel_relevance, grad_cam, otsu_threshold, plausibility, sufficiency
from kanseg.models import ModelConfig, build_model
from kanseg.training import TrainConfig, train

tiles = synth_generate(100, size=32, channels=4, seed=1)
stats = channel_statistics(tiles[:80])
tiles = [normalize(t, stats) for t in tiles]
cfg = ModelConfig(in_channels=4, stage_channels=(8, 16))
model = train(build_model(cfg), tiles[:80], tiles[80:90], TrainConfig(epochs=10, learning_rate=1e-3)).best_model

sample = tiles[95]
sal = grad_cam(model, sample)
otsu = otsu_threshold(sal)
print(f"target layer {sal.target_layer}, Otsu threshold {otsu.threshold}, {otsu.binary.mean():.0%} pixels important")

# plausibility: does the important region line up with the crop mask?
print("plausibility:", {k: round(v, 3) for k, v in plausibility(sal, sample.mask).scores().items()})

# sufficiency: keep only the important pixels and see how the prediction changes
suff = sufficiency(model, sample, sal)
print("sufficiency deltas:", {k: round(v, 3) for k, v in suff.deltas.items()})

# relevance: occlude one channel at a time; a low IoU with the full map means the channel matters
rel = np.mean([channel_relevance(model, s) for s in tiles[90:] if not otsu_threshold(grad_cam(model, s)).degenerate],
              axis=0)
for role, value in zip(synth_channel_roles(4), rel):
    print(f"  {role:6s} mean IoU {value:.3f}")
