"""Warping and the local-CC similarity, with a gradient check."""
import numpy as np

from morphflow.diffops import finite_diff_check
from morphflow.loss import LossConfig, local_cc, total_loss
from morphflow.warp import sample_linear, sample_linear_vjp

rng = np.random.default_rng(0)
yy, xx = np.mgrid[:48, :48]
image = np.exp(-((yy - 24) ** 2 + (xx - 20) ** 2) / 60.0)

# Offsets say where each output voxel reads from: +3 along x shifts content left.
shift = np.zeros((2, 48, 48))
shift[1] = 3.0
moved = sample_linear(image, shift)
peak = lambda a: tuple(int(i) for i in np.unravel_index(a.argmax(), a.shape))
print("bump centre before/after:", peak(image), peak(moved))

# CC ignores affine intensity changes; the loss is its negative plus smoothness.
cc_same, _ = local_cc(image, 4 * image - 1)
cc_moved, _ = local_cc(image, moved)
print(f"local CC summed over voxels ({image.size}): rescaled copy {cc_same:.3f}, shifted copy {cc_moved:.3f}")

zero = np.zeros_like(shift)
loss0, _ = total_loss(image, moved, zero, LossConfig(lam=1.0))
loss1, _ = total_loss(image, moved, -shift, LossConfig(lam=1.0))
print(f"loss with zero field {loss0:.1f}, with the undoing field {loss1:.1f}")

u = rng.uniform(-2, 2, (2, 48, 48))
check = finite_diff_check(lambda v: sample_linear(image, v),
                          lambda v, g: [sample_linear_vjp(image, v, g)], [u])
print(f"warp gradient vs finite differences: max rel error {check.max_error:.1e}")
