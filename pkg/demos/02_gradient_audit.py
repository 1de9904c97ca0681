"""Check the hand-written adjoints against central differences."""

import numpy as np

from psvit import audits, ops
from psvit.gradcheck import finite_diff_audit

rng = np.random.default_rng(1)

# A single op: bilinear sampling, with gradients for both the map and the
# locations. Locations are kept away from integer coordinates where the
# kernel has a kink.
F = rng.standard_normal((3, 6, 6))
p = rng.integers(0, 5, size=(2, 7)) + rng.uniform(0.1, 0.9, size=(2, 7))
print(finite_diff_audit(ops.bilinear_sample, [F, p], name="bilinear_sample").line())

# The registered suite covers every op plus the composed pipeline. A short
# run over two seeds of a few scopes:
for scope in ("softmax_rows", "layer_norm", "mha", "residual_block"):
    for rep in audits.run(scope, seeds=range(2)):
        print(rep.line())

# The full toy model: loss gradient with respect to a random subset of every
# parameter tensor, at the looser composed tolerance.
(rep,) = audits.run("model", seeds=[0])
print(rep.line())
