"""Central finite-difference gradient verification (float64, step 1e-5).

Coordinates where both analytic and numeric gradients are below 1e-6 in
magnitude are compared absolutely (1e-9); everything else relatively.
"""

from __future__ import annotations

import torch

FD_STEP = 1e-5
REL_TOL = 1e-4
NEGLIGIBLE = 1e-6
ABS_TOL_NEGLIGIBLE = 1e-9


def finite_difference_grad(fn, tensor: torch.Tensor) -> torch.Tensor:
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + FD_STEP
        hi = float(fn())
        flat[i] = orig - FD_STEP
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * FD_STEP)
    return grad


def assert_grads_match(fn, tensors: list[torch.Tensor]) -> float:
    """fn() -> scalar loss tensor built from `tensors` (float64 leaves)."""
    for t in tensors:
        assert t.dtype == torch.float64 and t.requires_grad
        t.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
        with torch.no_grad():
            numeric = finite_difference_grad(fn, t.data)
        a, n = analytic.reshape(-1), numeric.reshape(-1)
        for i in range(a.numel()):
            av, nv = float(a[i]), float(n[i])
            scale = max(abs(av), abs(nv))
            if scale < NEGLIGIBLE:
                assert abs(av - nv) < ABS_TOL_NEGLIGIBLE, (av, nv)
            else:
                rel = abs(av - nv) / scale
                assert rel < REL_TOL, f"rel err {rel} at coord {i}: {av} vs {nv}"
                worst = max(worst, rel)
    return worst
