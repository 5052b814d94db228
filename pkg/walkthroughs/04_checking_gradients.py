"""Walkthrough 4: trusting the gradients.

Everything is trained with a small reverse-mode autodiff engine written in
numpy.  This script compares its gradients with central finite differences,
first on a single op, then through the whole gated model (about 20 s).

Run:  python walkthroughs/04_checking_gradients.py
"""

import numpy as np

from gxlstm import numerics as nx
from gxlstm.harness import model_grad_check

# A single op: d/dx sum(gelu(x) * w).
rng = np.random.default_rng(0)
x = nx.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = rng.standard_normal((3, 4))
report = nx.finite_diff_grad_check(lambda: nx.tsum(nx.gelu(x) * w), {"x": x})
print(f"gelu: max relative error {report.max_rel_error:.2e} over {report.n_coords} coordinates")

# The full model: input projection, xLSTM blocks, gates, head and loss.
report = model_grad_check()
print(f"gated model: max relative error {report.max_rel_error:.2e} over {report.n_coords} coordinates "
      f"-> {'PASS' if report.passed else 'FAIL'}")
