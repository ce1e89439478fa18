"""What the frozen patch prior sees: PCA renderings of its features.

Run: python3 demos/03_prior_features.py [out_dir]
Writes image/feature pixmap pairs for a handful of synthetic images.
"""

import sys
from pathlib import Path

import numpy as np

from sgalab.alignment import gram, row_l2_normalize
from sgalab.harness.data import SHAPE_KINDS, generate_dataset
from sgalab.harness.viz import emit_pca_visualization, images_to_uint8, write_ppm
from sgalab.prior import FoundationPrior

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_prior")
out.mkdir(exist_ok=True)

ds = generate_dataset(seed=0, n=6, size=128)
prior = FoundationPrior(seed=0, channels=32)
feats = prior.extract_features(ds.images)  # native 8x8 grid at 128 px
print("features", feats.shape)

for i, (img, f) in enumerate(zip(ds.images, feats)):
    write_ppm(out / f"img_{i}.ppm", images_to_uint8(img))
    emit_pca_visualization(f, (8, 8), out / f"pca_{i}.ppm", upscale=16)
    g = gram(row_l2_normalize(f))
    off = g[~np.eye(len(g), dtype=bool)]
    print(f"{i}: {SHAPE_KINDS[ds.labels[i]]:<9} mean cos {off.mean():.3f}  spread {off.std():.3f}")

print("wrote", out)
