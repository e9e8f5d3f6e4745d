"""Finite-difference audit of the backward rules in :mod:`ops`."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .tensor import Tensor, Tape, backward, no_grad

FD_STEP = 1e-6


@dataclass
class GradcheckCase:
    make_inputs: Callable[[np.random.Generator], list]
    fn: Callable[..., Tensor]


@dataclass
class GradcheckReport:
    op: str
    tolerance: float
    errors: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return bool(self.errors) and all(np.isfinite(e) and e < self.tolerance for e in self.errors)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op}: trials={len(self.errors)} max_rel_err={self.max_error:.3e} tol={self.tolerance:g}"


def _randn(*shape):
    return lambda rng: rng.standard_normal(shape)


def _away_from_zero(*shape):
    # keeps inputs off the relu kink so finite differences stay one-sided-safe
    def make(rng):
        x = rng.standard_normal(shape)
        return np.where(np.abs(x) < 0.05, x + np.sign(x + 1e-12) * 0.1, x)
    return make


def _dropout(x):
    return ops.dropout(x, 0.5, np.random.default_rng(1234), training=True)


def _batchnorm(x, gamma, beta):
    return ops.batchnorm(x, gamma, beta, None, training=True)


def _batchnorm_eval(x, gamma, beta):
    c = x.shape[-1]
    state = ops.BatchNormState(gamma, beta, np.linspace(-0.5, 0.5, c), np.linspace(0.5, 2.0, c))
    return ops.batchnorm(x, gamma, beta, state, training=False)


REGISTRY: dict[str, GradcheckCase] = {
    "add": GradcheckCase(lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))], ops.add),
    "subtract": GradcheckCase(lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 1))], ops.subtract),
    "multiply": GradcheckCase(lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((3, 4))], ops.multiply),
    "matmul": GradcheckCase(lambda r: [r.standard_normal((3, 5)), r.standard_normal((5, 4))], ops.matmul),
    "concat": GradcheckCase(lambda r: [r.standard_normal((3, 2)), r.standard_normal((3, 4))],
                            lambda a, b: ops.concat([a, b], axis=1)),
    "broadcast": GradcheckCase(_randn(3, 1, 4), lambda a: ops.broadcast_to(a, (2, 3, 5, 4))),
    "reshape": GradcheckCase(_randn(3, 4), lambda a: ops.reshape(a, (2, 6))),
    "gather_rows": GradcheckCase(_randn(5, 3), lambda a: ops.gather_rows(a, np.array([0, 2, 2, 4, 1, 0]))),
    "relu": GradcheckCase(_away_from_zero(4, 5), ops.relu),
    "leaky_relu": GradcheckCase(_away_from_zero(4, 5), lambda a: ops.leaky_relu(a, 0.2)),
    "max_over_axis": GradcheckCase(_randn(4, 3, 5), lambda a: ops.max_over_axis(a, 1)[0]),
    "mean_over_axis": GradcheckCase(_randn(4, 3, 5), lambda a: ops.mean_over_axis(a, 1)),
    "sum_over_axis": GradcheckCase(_randn(4, 3), lambda a: ops.sum_over_axis(a, 0)),
    "batchnorm": GradcheckCase(lambda r: [r.standard_normal((8, 3)) * 2 + 1,
                                          1 + 0.3 * r.standard_normal(3), r.standard_normal(3)], _batchnorm),
    "batchnorm_eval": GradcheckCase(lambda r: [r.standard_normal((6, 3)), 1 + 0.3 * r.standard_normal(3),
                                               r.standard_normal(3)], _batchnorm_eval),
    "dropout": GradcheckCase(_randn(5, 4), _dropout),
    "log_softmax": GradcheckCase(_randn(4, 5), lambda a: ops.log_softmax(a, 1)),
}


def register(name: str, make_inputs: Callable[[np.random.Generator], list], fn: Callable[..., Tensor]) -> None:
    REGISTRY[name] = GradcheckCase(make_inputs, fn)


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 0.0) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``; 0 when both vanish.

    A positive ``floor`` keeps gradients that are identically zero (a bias feeding
    batchnorm, say) from turning finite-difference noise into a relative error of 1.
    """
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place, then restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def check_function(fn: Callable[..., Tensor], inputs: list, rng: np.random.Generator,
                   step: float = FD_STEP) -> float:
    """Max relative error between backprop and finite differences for one input set."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    with no_grad():
        probe = fn(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe.shape)

    def scalar() -> float:
        with no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * weights))

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        out = fn(*leaves)
        backward(ops.sum_over_axis(ops.multiply(out, weights)))

    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        numeric = numeric_gradient(scalar, arr, step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def gradcheck(op_name: str, trials: int = 10, tolerance: float = 1e-4, seed: int = 0) -> GradcheckReport:
    if op_name not in REGISTRY:
        raise KeyError(f"gradcheck: unknown op {op_name!r}; known: {', '.join(sorted(REGISTRY))}")
    case = REGISTRY[op_name]
    rng = np.random.default_rng(seed)
    report = GradcheckReport(op_name, tolerance)
    for _ in range(trials):
        inputs = _as_list(case.make_inputs(rng))
        report.errors.append(check_function(case.fn, inputs, rng))
    return report


def gradcheck_all(trials: int = 10, tolerance: float = 1e-4, seed: int = 0) -> list[GradcheckReport]:
    return [gradcheck(name, trials, tolerance, seed) for name in sorted(REGISTRY)]
