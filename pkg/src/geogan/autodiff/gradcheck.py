"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor, backward, no_grad, record_kinks

KINK_MARGIN = 10.0


@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    checked: int
    skipped: int
    worst_index: Optional[Tuple[int, ...]] = None
    size: int = 0


@dataclass
class GradCheckReport:
    checks: List[TensorCheck] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        errs = [c.max_rel_err for c in self.checks if c.checked]
        return max(errs) if errs else 0.0

    @property
    def passed(self) -> bool:
        return all(c.max_rel_err < self.tol for c in self.checks)

    def by_name(self) -> Dict[str, TensorCheck]:
        return {c.name: c for c in self.checks}


def _near_kink(base: List[np.ndarray], plus: List[np.ndarray], minus: List[np.ndarray],
               step: float) -> bool:
    if not (len(base) == len(plus) == len(minus)):
        return True
    for k0, kp, km in zip(base, plus, minus):
        delta = np.maximum(np.abs(kp - k0), np.abs(km - k0))
        moved = delta > 0
        if not moved.any():
            continue
        margin = KINK_MARGIN * np.maximum(delta[moved], step)
        if np.any(np.abs(k0[moved]) <= margin):
            return True
    return False


def crosses_kink(base: List[np.ndarray], plus: List[np.ndarray], minus: List[np.ndarray]) -> bool:
    """True if any piecewise-linear input changes sign between the three evaluations.

    Piecewise-linear primitives are exactly linear between kinks, so this is
    the precise condition for a central difference to straddle one.
    """
    if not (len(base) == len(plus) == len(minus)):
        return True
    for k0, kp, km in zip(base, plus, minus):
        s0 = np.sign(k0)
        if np.any(s0 != np.sign(kp)) or np.any(s0 != np.sign(km)):
            return True
    return False


def finite_diff_check(fn: Callable[[], Tensor], tensors: Mapping[str, Tensor], h: float = 1e-5,
                      n_coords: int = 64, seed: int = 0, tol: float = 1e-4,
                      floor: float = 1e-7) -> GradCheckReport:
    """Compare backprop gradients of ``fn()`` against central differences.

    ``fn`` must be deterministic and rebuild its graph from ``tensors`` on every
    call. The step for coordinate x is ``h * (1 + |x|)``. Coordinates whose
    perturbation brings any ReLU/leaky-ReLU/abs input within ten steps of zero
    are skipped and counted. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.grad = None
    with record_kinks() as base_kinks:
        loss = fn()
    backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}

    report = GradCheckReport(tol=tol)
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        if flat.size <= n_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=n_coords, replace=False))
        worst, worst_idx, checked, skipped = 0.0, None, 0, 0
        for c in coords:
            orig = flat[c]
            step = h * (1.0 + abs(orig))
            with no_grad():
                flat[c] = orig + step
                with record_kinks() as kp:
                    fp = float(fn().data)
                flat[c] = orig - step
                with record_kinks() as km:
                    fm = float(fn().data)
                flat[c] = orig
            if _near_kink(base_kinks, kp, km, step):
                skipped += 1
                continue
            numeric = (fp - fm) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            if err > worst:
                worst, worst_idx = err, tuple(int(i) for i in np.unravel_index(c, t.shape))
        report.checks.append(TensorCheck(name, worst, checked, skipped, worst_idx, int(flat.size)))
    return report


def _leaf(rng: np.random.Generator, shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def primitive_cases(seed: int = 0) -> Dict[str, Tuple[Callable[[], Tensor], Dict[str, Tensor]]]:
    """One randomized, 64-bit test case per primitive."""
    rng = np.random.default_rng(seed)

    def dims(lo=2, hi=5):
        return int(rng.integers(lo, hi + 1))

    cases = {}

    def weighted(out_fn, *args):
        w = rng.standard_normal(out_fn(*[a.detach() for a in args]).shape)
        return lambda: F.sum(F.mul(out_fn(*args), w))

    shape = (dims(), dims(), dims(3, 6), dims(3, 6))
    a, b = _leaf(rng, shape), _leaf(rng, (1, shape[1], 1, 1))
    cases["add"] = (weighted(F.add, a, b), {"a": a, "b": b})
    a, b = _leaf(rng, shape), _leaf(rng, shape)
    cases["sub"] = (weighted(F.sub, a, b), {"a": a, "b": b})
    a, b = _leaf(rng, shape), _leaf(rng, (shape[-1],))
    cases["mul"] = (weighted(F.mul, a, b), {"a": a, "b": b})
    a = _leaf(rng, shape)
    c = float(rng.uniform(-3, 3))
    cases["scale"] = (weighted(lambda x: F.scale(x, c), a), {"x": a})
    a = _leaf(rng, shape)
    cases["sum"] = (weighted(lambda x: F.sum(x, axis=(2, 3)), a), {"x": a})
    a = _leaf(rng, shape)
    cases["mean"] = (weighted(lambda x: F.mean(x, axis=1, keepdims=True), a), {"x": a})
    a = _leaf(rng, shape)
    cases["reshape"] = (weighted(lambda x: F.reshape(x, (shape[0], -1)), a), {"x": a})
    a, b = _leaf(rng, shape), _leaf(rng, (shape[0], dims(1, 3)) + shape[2:])
    cases["concat"] = (weighted(lambda x, y: F.concat([x, y], axis=1), a, b), {"a": a, "b": b})
    for name, fn in (("abs", F.abs), ("relu", F.relu), ("leaky_relu", F.leaky_relu),
                     ("sigmoid", F.sigmoid), ("tanh", F.tanh), ("instance_norm", F.instance_norm)):
        a = _leaf(rng, shape)
        cases[name] = (weighted(fn, a), {"x": a})

    a = _leaf(rng, shape)
    mask_seed = int(rng.integers(1 << 31))
    cases["dropout"] = (
        weighted(lambda x: F.dropout(x, 0.3, np.random.default_rng(mask_seed), True), a), {"x": a})

    n, cin, cout = dims(1, 3), dims(1, 4), dims(1, 4)
    k, stride = int(rng.choice([1, 3, 4])), int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k // 2 + 1))
    hw = dims(5, 9)
    x, w, bias = _leaf(rng, (n, cin, hw, hw)), _leaf(rng, (cout, cin, k, k), 0.5), _leaf(rng, (cout,))
    cases["conv2d"] = (weighted(lambda x_, w_, b_, s=stride, p=pad: F.conv2d(x_, w_, b_, s, p), x, w, bias),
                       {"x": x, "w": w, "b": bias})
    k, stride = int(rng.choice([2, 3, 4])), int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k // 2))
    hw = dims(3, 6)
    x, w, bias = _leaf(rng, (n, cin, hw, hw)), _leaf(rng, (cin, cout, k, k), 0.5), _leaf(rng, (cout,))
    cases["conv_transpose2d"] = (
        weighted(lambda x_, w_, b_, s=stride, p=pad: F.conv_transpose2d(x_, w_, b_, s, p), x, w, bias),
        {"x": x, "w": w, "b": bias})

    z = _leaf(rng, shape, 2.0)
    target = (rng.random(shape) > 0.5).astype(np.float64)
    cases["bce_with_logits"] = (lambda: F.bce_with_logits(z, target), {"logits": z})
    a, b = _leaf(rng, shape), _leaf(rng, shape)
    cases["l1_loss"] = (lambda: F.l1_loss(a, b), {"a": a, "b": b})
    return cases


def check_primitives(seed: int = 0, n_coords: int = 64, h: float = 1e-5,
                     tol: float = 1e-4) -> Dict[str, GradCheckReport]:
    results = {}
    for name, (fn, tensors) in primitive_cases(seed).items():
        results[name] = finite_diff_check(fn, tensors, h=h, n_coords=n_coords, seed=seed, tol=tol)
    return results
