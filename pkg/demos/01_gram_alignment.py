"""Gram alignment versus patchwise matching on hand-made feature sets.

Run: python3 demos/01_gram_alignment.py
"""

import numpy as np

from sgalab.alignment import gram, repa_loss, row_l2_normalize, sga_loss
from sgalab.numerics import RngState
from sgalab.theory import minimum_displacement_gap, random_orthogonal

rng = RngState(0)

# 16 patches with 8 channels each, standing in for a frozen prior
h_f = rng.normal((16, 8))
print("prior features", h_f.shape)

# Rows are unit-normalized first, so the Gram matrix holds cosine similarities
u = row_l2_normalize(h_f)
g = gram(u)
print("diag(G) min/max:", g.diagonal().min(), g.diagonal().max())
print("G symmetric:", np.allclose(g, g.T))

# Rotating the channels changes every feature but no pairwise angle
q = random_orthogonal(8, rng.split(1))
rotated = u @ q
print()
print("after a random channel rotation")
print("  sga  =", f"{sga_loss(rotated, h_f):.3e}")
print("  repa =", f"{repa_loss(rotated, h_f):.4f}")

# The sign flip is the extreme case: no patch matches, yet the geometry is intact
print()
print("after negation")
print("  sga  =", f"{sga_loss(-h_f, h_f):.3e}")
print("  repa =", f"{repa_loss(-h_f, h_f):.4f}")

# Scrambling which patch is which does change the geometry
shuffled = h_f[rng.split(2).permutation(16)]
print()
print("after shuffling patches")
print("  sga  =", f"{sga_loss(shuffled, h_f):.4f}")
print("  repa =", f"{repa_loss(shuffled, h_f):.4f}")

# How far must a feature set move to reach each zero-loss set?
h_g = u @ q + 0.05 * rng.split(3).normal((16, 8))
direct, orbit = minimum_displacement_gap(h_g, h_f)
print()
print(f"distance to the patchwise target {direct:.4f}")
print(f"distance to the nearest rotated copy {orbit:.4f}")

# the losses as a function of rotation angle in one channel plane
print()
print("angle   sga        repa")
for theta in np.linspace(0, np.pi, 5):
    r = np.eye(8)
    r[:2, :2] = [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    print(f"{theta:5.2f}   {sga_loss(u @ r, h_f):.2e}   {repa_loss(u @ r, h_f):.4f}")
