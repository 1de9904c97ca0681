"""Walk through one progressive-sampling pass on a small random feature map."""

import numpy as np

from psvit.autograd import Tensor
from psvit.sampling import GridSpec, SamplerParams, bilinear_sample, init_grid, progressive_sample

rng = np.random.default_rng(0)

# A 56x56 map with 14 samples per axis gives a step of 4 pixels and
# centres at 2, 6, 10, ...
spec = GridSpec(56, 56, 14)
p1 = init_grid(spec)
print("step", spec.s_h, "first centres (y, x):", p1[:, :3].T.tolist())

# Bilinear sampling reads a weighted mix of the four surrounding pixels.
# At integer locations it returns the pixel itself.
F = rng.standard_normal((4, 8, 8)).astype(np.float32)
p = np.array([[3.0, 3.5], [5.0, 5.25]], dtype=np.float32)
tokens = bilinear_sample(Tensor(F), Tensor(p)).data
print("integer location matches pixel:", np.allclose(tokens[:, 0], F[:, 3, 5]))
manual = (0.5 * 0.75 * F[:, 3, 5] + 0.5 * 0.25 * F[:, 3, 6]
          + 0.5 * 0.75 * F[:, 4, 5] + 0.5 * 0.25 * F[:, 4, 6])
print("fractional location matches hand mix:", np.allclose(tokens[:, 1], manual, atol=1e-6))

# Offset heads start at zero, so a fresh sampler leaves the grid in place.
spec = GridSpec(8, 8, 3)
sampler = SamplerParams.init(dim=4, heads=2, N=4, rng=rng, dropout=0.0)
F = Tensor(rng.standard_normal((4, 8, 8)))
_, log = progressive_sample(F, sampler, spec, N=4)
print("fresh sampler moved points:", not np.allclose(log.raw[0], log.raw[-1]))

# Give the heads some weight and the points start to wander. Anything that
# leaves the map is clamped before sampling; the raw sum is kept in the log.
for head in sampler.offset_heads:
    head.data[:] = rng.standard_normal(head.shape)
_, log = progressive_sample(F, sampler, spec, N=4)
moved = np.linalg.norm(log.raw[-1] - log.raw[0], axis=0)
print("mean displacement after 4 rounds: %.3f px" % moved.mean())
print("clamped range:", log.clamped[-1].min(), "to", log.clamped[-1].max())
