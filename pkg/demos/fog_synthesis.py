"""Synthesize fog on a toy scene, then invert it with the known parameters."""
import sys
from pathlib import Path

import numpy as np

from fogdet.datakit import SceneConfig, generate_toy_scene
from fogdet.weathersim import FogParams, apply_fog, compute_depth, compute_transmission, invert_fog, save_image

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/fog")
out.mkdir(parents=True, exist_ok=True)

scene = generate_toy_scene(np.random.default_rng(0), SceneConfig(), "demo")
clean = scene.image
print("scene", clean.shape, "objects", len(scene.annotation.boxes))

# depth grows away from the image center, so fog is thickest in the middle
depth = compute_depth(clean.shape[2], clean.shape[1])
print("depth center / corner: %.2f / %.2f" % (depth[80, 80], depth[0, 0]))

for beta in (0.0, 0.05, 0.1, 0.14):
    t = compute_transmission(depth, beta)
    foggy = apply_fog(clean, FogParams(0.5, beta))
    restored, trusted = invert_fog(foggy, FogParams(0.5, beta))
    err = np.abs(restored - clean)[:, trusted].max()
    print("beta %.2f  t in [%.3f, %.3f]  contrast %.3f  inversion error %.1e"
          % (beta, t.min(), t.max(), foggy.std(), err))
    save_image(foggy, out / ("foggy_beta%.2f.png" % beta))

save_image(clean, out / "clean.png")
print("images written to", out)
