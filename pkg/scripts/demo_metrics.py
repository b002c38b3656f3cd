"""
The evaluation metrics on hand-made inputs
==========================================

Map accuracy, Frechet distance and attention IoU, each on inputs simple
enough that the answer can be checked by eye.
"""
import numpy as np

from regattn.evaluation import GaussianStats, attention_iou, fid, map_accuracy

rng = np.random.default_rng(0)

###############################################################################
# Map accuracy
# ------------
# A pixel counts as correct when its RGB channels differ from the target by
# at most 12 in total. Nudging every channel by 4 sits exactly on the edge.

gt = rng.integers(0, 250, size=(32, 32, 3), dtype=np.uint8)
for step in (0, 4, 5):
    pred = gt + np.uint8(step)
    print(f"every channel +{step}: sum rule {map_accuracy(pred, gt):.2f}, "
          f"max rule {map_accuracy(pred, gt, rule='max'):.2f}")

###############################################################################
# Frechet distance
# ----------------
# Between two Gaussians with diagonal covariances the distance has a closed
# form, so the general routine can be compared against it directly.

va, vb = np.array([1.0, 2.0, 0.5]), np.array([4.0, 2.0, 0.5])
mu_a, mu_b = np.zeros(3), np.array([1.0, 0.0, 0.0])
closed = np.sum((mu_a - mu_b) ** 2) + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2)
got = fid(GaussianStats(mu_a, np.diag(va)), GaussianStats(mu_b, np.diag(vb)))
print(f"FID {got:.6f}, closed form {closed:.6f}")

feats = rng.normal(size=(500, 8))
near = GaussianStats.from_features(feats[:250])
far = GaussianStats.from_features(feats[250:] + 1.0)
print(f"same distribution {fid(near, GaussianStats.from_features(feats[250:])):.3f}, "
      f"shifted by 1 per dim {fid(near, far):.3f}")

###############################################################################
# Attention IoU
# -------------
# A soft map covering the object plus a thin halo, thresholded at 0.5.

mask = np.zeros((16, 16), bool)
mask[4:12, 4:12] = True
attn = np.where(mask, 0.9, 0.1)
attn[3, 4:12] = 0.6  # one row of halo above
print(f"IoU {attention_iou(attn, mask):.3f} (expected {64 / 72:.3f})")
