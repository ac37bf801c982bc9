"""Finite-difference gradient checking.

The checker re-evaluates the user function with the leaves temporarily cast
to float64 (the 64-bit shadow path) and compares analytic gradients from
``backward`` against central differences with step 1e-3. The numeric side
never consults the graph, so it is an independent oracle for every
differentiable op and for whole-model losses.

Leaves are mutated in place during the check and restored afterwards, which
lets `fn` close over a model whose parameters are exactly `leaves`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag

FD_STEP = 1e-3
REL_TOL = 1e-4
# Central differences at step h carry O(h^2) truncation error; 2e-6 is that
# bound for unit-scale curvatures. Coordinates whose |analytic - numeric| sits
# under this floor are fd noise, not gradient bugs; 1e-4 relative governs the
# rest.
ABS_TOL = 2e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradients(fn, leaves, step=FD_STEP, rel_tol=REL_TOL, abs_tol=ABS_TOL,
                    max_elements_per_leaf=None, rng=None) -> GradCheckResult:
    """Compare analytic d(fn)/d(leaf) against central finite differences.

    fn maps the list of leaf tensors to a scalar Tensor (it may ignore the
    argument and close over them). When a leaf is large,
    `max_elements_per_leaf` limits the check to that many randomly chosen
    coordinates (rng required).
    """
    saved = [(l.data, l.grad) for l in leaves]
    try:
        for l in leaves:
            l.data = l.data.astype(np.float64)
            l.grad = None

        loss = fn(leaves)
        ag.backward(loss)
        analytic = [l.grad.copy() if l.requires_grad and l.grad is not None else None for l in leaves]

        result = GradCheckResult(max_rel_error=0.0, checked=0)
        for li, leaf in enumerate(leaves):
            if not leaf.requires_grad:
                continue
            if analytic[li] is None:
                analytic[li] = np.zeros_like(leaf.data)
            flat_indices = np.arange(leaf.size)
            if max_elements_per_leaf is not None and leaf.size > max_elements_per_leaf:
                picks = rng.choice(leaf.size, size=max_elements_per_leaf, replace=False)
                flat_indices = np.sort(np.asarray(picks))
            base = leaf.data.reshape(-1)
            for idx in flat_indices:
                orig = base[idx]
                with ag.no_grad():
                    base[idx] = orig + step
                    f_plus = float(fn(leaves).data)
                    base[idx] = orig - step
                    f_minus = float(fn(leaves).data)
                base[idx] = orig
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(analytic[li].reshape(-1)[idx])
                denom = max(abs(a), abs(numeric))
                err = abs(a - numeric)
                result.checked += 1
                if err > abs_tol:
                    result.max_rel_error = max(result.max_rel_error, err / denom if denom > 0 else np.inf)
                if err > abs_tol + rel_tol * denom:
                    result.failures.append((li, int(idx), a, numeric))
        return result
    finally:
        for l, (data, grad) in zip(leaves, saved):
            l.data = data
            l.grad = grad
