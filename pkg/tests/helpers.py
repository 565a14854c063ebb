"""Shared test utilities: relative-error metric and gradient-vs-FD checks."""

import numpy as np

from sfmamba.tensor import GradTape, backward, finite_difference, tape_scope

FD_STEP = 1e-5
GRAD_TOL = 1e-5
# floor keeps the ratio meaningful when both gradients are near zero; with
# h=1e-5 central differences in float64 the FD noise sits around 1e-10
REL_FLOOR = 1e-4


def rel_err(analytic, numeric, floor=REL_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0


def swap_data(tensor, values):
    """Context-free data swap for probing parameters with finite differences."""
    old = tensor.data
    tensor.data = values
    return old


def check_gradients(run, wrt, h=FD_STEP, tol=GRAD_TOL):
    """`run()` builds a scalar loss from the tensors in `wrt` (list of
    (name, Tensor)); compares tape gradients against central differences.
    Returns the worst relative error seen."""
    tape = GradTape()
    with tape_scope(tape):
        tape.watch(*[t for _, t in wrt])
        loss = run()
    grads = backward(loss, tape)
    worst = 0.0
    for name, t in wrt:
        def probe(candidate, _t=t):
            old = swap_data(_t, candidate.data)
            try:
                return run()
            finally:
                _t.data = old

        fd = finite_difference(probe, t, h=h)
        err = rel_err(grads[t.tid].data, fd.data)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3e}"
        worst = max(worst, err)
    return worst
