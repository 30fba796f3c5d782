"""Central finite-difference verification of reverse-mode gradients."""

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DeterminismError
from .tensor import backward, no_grad


@contextlib.contextmanager
def float64_shadow(tensors):
    """Temporarily promote every tensor in ``tensors`` to float64.

    The original arrays are restored on exit, so float32 model state is never
    touched by the shadow evaluation.
    """
    saved = [(t, t.data, t.grad) for t in tensors]
    try:
        for t in tensors:
            t.data = t.data.astype(np.float64)
            t.grad = None
        yield
    finally:
        for t, data, grad in saved:
            t.data, t.grad = data, grad


@dataclass
class GradCheckReport:
    eps: float
    tol: float
    errors: dict = field(default_factory=dict)
    checked_elements: int = 0

    @property
    def passed(self):
        return all(e < self.tol for e in self.errors.values())

    @property
    def failing(self):
        return sorted(n for n, e in self.errors.items() if not e < self.tol)

    @property
    def worst(self):
        if not self.errors:
            return None, 0.0
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def summary(self):
        name, err = self.worst
        status = "pass" if self.passed else "FAIL " + ",".join(self.failing)
        return (f"gradcheck {status}: {len(self.errors)} tensors, "
                f"{self.checked_elements} elements, worst {name} {err:.3g} (tol {self.tol:g})")


def relative_error(g_ad, g_fd):
    """max |g_ad - g_fd| scaled by the larger of the two gradients' max magnitude."""
    scale = max(float(np.abs(g_ad).max(initial=0.0)), float(np.abs(g_fd).max(initial=0.0)), 1e-8)
    return float(np.abs(g_ad - g_fd).max(initial=0.0)) / scale


def _central(closure, flat, idx, step, eps):
    """Central difference of ``closure`` along ``step`` placed at ``idx`` of ``flat``."""
    orig = flat[idx].copy()
    with no_grad():
        flat[idx] = orig + eps * step
        up = float(closure().data)
        flat[idx] = orig - eps * step
        down = float(closure().data)
    flat[idx] = orig
    return (up - down) / (2 * eps)


def grad_check(closure, params, eps=1e-3, tol=1e-4, shadow=(), max_elements=None, seed=0,
               directions=0):
    """Compare autodiff gradients of ``closure()`` against central differences.

    ``params`` maps names to tensors whose gradients are checked.  Everything
    in ``params`` and ``shadow`` is evaluated in float64 for the duration of the
    check.  ``max_elements`` caps the number of probed entries per tensor
    (chosen with a seeded RNG); ``None`` probes every entry.  ``directions``
    adds that many whole-tensor checks per tensor: the directional derivative
    along a random unit vector, compared as ``|a - b| / max(|grad|, |b|)``.  A
    tensor's error is the worse of the two measures.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    named = list(params.items())
    everything = {t._id: t for _, t in named}
    everything.update((t._id, t) for t in shadow)
    report = GradCheckReport(eps=eps, tol=tol)
    rng = np.random.default_rng(seed)
    with float64_shadow(list(everything.values())):
        first = closure()
        second = closure()
        if first.data.tobytes() != second.data.tobytes():
            raise DeterminismError(
                f"grad_check: closure returned {first.item()!r} then {second.item()!r}")
        for _, t in named:
            t.grad = None
        backward(second)
        for name, t in named:
            g_ad = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            g_fd = np.array([_central(closure, flat, i, 1.0, eps) for i in idx])
            err = relative_error(g_ad.reshape(-1)[idx], g_fd)
            everywhere = np.arange(flat.size)
            for _ in range(directions):
                v = rng.standard_normal(flat.size)
                v /= np.linalg.norm(v)
                a = float(g_ad.reshape(-1) @ v)
                b = _central(closure, flat, everywhere, v, eps)
                scale = max(float(np.linalg.norm(g_ad)), abs(b), 1e-8)
                err = max(err, abs(a - b) / scale)
            report.errors[name] = err
            report.checked_elements += idx.size
        for _, t in named:
            t.grad = None
    return report
