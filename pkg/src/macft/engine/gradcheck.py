"""Central-difference verification of hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    worst: str = ""
    failures: list = field(default_factory=list)
    error: str = ""

    @property
    def passed(self):
        return not self.error and self.max_rel_error <= self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        if self.error:
            return f"{status} ({self.error})"
        return (f"{status} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.0e} "
                f"coords={self.n_checked} worst={self.worst}")


def rel_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
    turning rounding noise into huge relative errors."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(f, params, h=1e-5, tol=1e-4, max_coords=None, seed=0, floor=1e-6):
    """Compare analytic gradients against central differences.

    ``f(compute_grad)`` evaluates the scalar loss from the current contents of
    ``params`` (a list of :class:`Tensor` or a name->Tensor dict); when
    ``compute_grad`` is true it must also run backward so each tensor's
    ``grad`` is filled. ``max_coords`` caps the number of coordinates probed
    per tensor (sampled without replacement).
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(p.name or f"p{i}", p) for i, p in enumerate(params)]
    rng = np.random.default_rng(seed)
    for _, p in named:
        p.zero_grad()
    try:
        base = float(f(True))
    except NonFiniteError as exc:
        return GradCheckReport(float("inf"), tol, 0, error=str(exc))
    if not np.isfinite(base):
        return GradCheckReport(float("inf"), tol, 0, error="non-finite loss")
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in named}

    worst, worst_name, n = 0.0, "", 0
    failures = []
    for name, p in named:
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        g = analytic[name].reshape(-1)
        for i in coords:
            old = flat[i]
            try:
                flat[i] = old + h
                fp = float(f(False))
                flat[i] = old - h
                fm = float(f(False))
            except NonFiniteError as exc:
                flat[i] = old
                return GradCheckReport(float("inf"), tol, n, error=str(exc))
            finally:
                flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(float("inf"), tol, n, error=f"non-finite loss probing {name}[{i}]")
            num = (fp - fm) / (2 * h)
            err = rel_error(g[i], num, floor)
            n += 1
            if err > tol:
                failures.append((name, int(i), float(g[i]), num))
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    return GradCheckReport(worst, tol, n, worst_name, failures)
