"""Numerical self-checks exposed through ``svdkd verify``.

Each group returns a :class:`CheckResult` with the worst error seen, so a
report can show how close every check came to its tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from .autograd import ops
from .autograd.gradcheck import check_gradients, relative_error
from .autograd.tensor import Tensor
from .distill import select_alignment
from .linalg import svd_backward, truncated_svd, jacobi_svd
from .training import clip_transfer_gradient, gate_factor

FD_TOL = 1e-3
EY_TOL = 1e-6


@dataclass
class CheckResult:
    group: str
    passed: bool
    worst: float
    tolerance: float
    cases: int
    detail: Dict[str, float] = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.group}: worst {self.worst:.3e} (tol {self.tolerance:.0e}, {self.cases} cases)"


def spaced_values(rng: np.random.Generator, shape, gap: float = 0.02, avoid_zero: bool = True) -> np.ndarray:
    """Distinct values at least ``gap`` apart and away from 0, in random order."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2.0 + 0.5) * gap
    if avoid_zero:
        vals = vals + np.where(vals >= 0, 1.0, -1.0) * 0.05
    vals = vals * rng.uniform(0.8, 1.2) + 0.0
    return rng.permutation(vals).reshape(shape).astype(np.float32)


def _op_cases(rng: np.random.Generator) -> Dict[str, Callable[[], float]]:
    def t(shape, scale=1.0):
        return Tensor(rng.standard_normal(shape).astype(np.float32) * scale, requires_grad=True)

    def conv_case(stride, padding):
        x = Tensor(spaced_values(rng, (2, 5, 5, 2), 0.05), requires_grad=True)
        w = t((3, 3, 2, 3), 0.5)
        return check_gradients(lambda a, b: ops.conv2d(a, b, stride=stride, padding=padding), [x, w], seed=1)

    labels = rng.integers(0, 4, size=5)
    mask = rng.random(5) < 0.7
    mask[0] = True
    return {
        "matmul": lambda: check_gradients(ops.matmul, [t((3, 4)), t((4, 2))]),
        "conv2d_same_s1": lambda: conv_case(1, "same"),
        "conv2d_valid_s2": lambda: conv_case(2, "valid"),
        "maxpool2d": lambda: check_gradients(lambda a: ops.maxpool2d(a, 2),
                                             [Tensor(spaced_values(rng, (2, 4, 6, 2)), requires_grad=True)]),
        "relu": lambda: check_gradients(ops.relu, [Tensor(spaced_values(rng, (3, 5)), requires_grad=True)]),
        "add": lambda: check_gradients(ops.add, [t((3, 4)), t((4,))]),
        "sub": lambda: check_gradients(ops.sub, [t((3, 1)), t((1, 4))]),
        "mul": lambda: check_gradients(ops.mul, [t((2, 3)), t((2, 3))]),
        "reshape": lambda: check_gradients(lambda a: ops.reshape(a, (6, 2)), [t((3, 4))]),
        "softmax_cross_entropy": lambda: check_gradients(
            lambda a: ops.softmax_cross_entropy(a, labels, mask), [t((5, 4))]),
        "l2_norm": lambda: check_gradients(ops.l2_norm, [t((3, 3))]),
        "exp": lambda: check_gradients(ops.exp, [t((4,), 0.5)]),
        "scale": lambda: check_gradients(lambda a: ops.scale(a, -2.5), [t((3,))]),
        "sum": lambda: check_gradients(lambda a: ops.sum(a, axis=1), [t((3, 4))]),
        "take": lambda: check_gradients(lambda a: ops.take(a, [2, 0, 2], axis=0), [t((3, 4))]),
    }


def check_autograd(seeds: int = 100) -> CheckResult:
    """Finite differences (float32, h=1e-3) for every differentiable op."""
    per_op: Dict[str, float] = {}
    for s in range(seeds):
        rng = np.random.default_rng(s)
        for name, case in _op_cases(rng).items():
            per_op[name] = max(per_op.get(name, 0.0), case())
    worst = max(per_op.values())
    return CheckResult("autograd_fd", worst < FD_TOL, worst, FD_TOL, seeds * len(per_op), per_op)


def well_conditioned(rng: np.random.Generator, n: int, d: int, min_gap: float = 0.1) -> np.ndarray:
    """Random ``n x d`` matrix whose singular values are at least ``min_gap`` apart."""
    r = min(n, d)
    gaps = rng.uniform(min_gap * 1.5, 1.0, size=r)
    sigma = np.cumsum(gaps)[::-1] + 0.2
    U, _ = np.linalg.qr(rng.standard_normal((n, r)))
    V, _ = np.linalg.qr(rng.standard_normal((d, r)))
    return (U * sigma) @ V.T


def svd_fd_error(M: np.ndarray, k: int, rng: np.random.Generator, h: float = 1e-6,
                 backward_sign: float = 1.0) -> float:
    """Relative error between ``svd_backward`` and central differences of ``sum(W * V)``.

    Perturbed decompositions are sign-matched to the unperturbed ``V`` so the
    functional is smooth in ``M``.
    """
    base = truncated_svd(M, k)
    W = rng.standard_normal(base.V.shape)

    def functional(Mp):
        V = truncated_svd(Mp, k).V
        signs = np.where(np.sum(V * base.V, axis=1) < 0, -1.0, 1.0)
        return float(np.sum(W * V * signs[:, None]))

    analytic = backward_sign * svd_backward(base, W)
    numeric = np.zeros_like(M)
    for idx in np.ndindex(M.shape):
        E = np.zeros_like(M)
        E[idx] = h
        numeric[idx] = (functional(M + E) - functional(M - E)) / (2 * h)
    return relative_error(analytic, numeric)


def check_svd_backward(cases: int = 50, seed: int = 0, backward_sign: float = 1.0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = {"tall": 0.0, "wide": 0.0}
    for branch in ("tall", "wide"):
        for _ in range(cases):
            a, b = sorted(rng.integers(2, 17, size=2))
            if a == b:
                b = min(a + 1, 16) if a < 16 else a
                a = b - 1
            n, d = (b, a) if branch == "tall" else (a, b)
            k = int(rng.integers(1, min(n, d) + 1))
            M = well_conditioned(rng, n, d)
            worst[branch] = max(worst[branch], svd_fd_error(M, k, rng, backward_sign=backward_sign))
    w = max(worst.values())
    return CheckResult("svd_backward", w < FD_TOL, w, FD_TOL, 2 * cases, worst)


def check_eckart_young(cases: int = 100, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        n, d = rng.integers(2, 17, size=2)
        k = int(rng.integers(1, min(n, d))) if min(n, d) > 1 else 1
        M = rng.standard_normal((n, d))
        s = truncated_svd(M, k)
        recon = (s.U_cache * s.sigma) @ s.V
        err = float(np.sum((M - recon) ** 2))
        _, sig_full, _ = jacobi_svd(M)
        tail = float(np.sum(sig_full[k:] ** 2))
        rel = abs(err - tail) / max(tail, 1e-300) if tail > 0 else abs(err)
        worst = max(worst, rel)
    return CheckResult("eckart_young", worst < EY_TOL, worst, EY_TOL, cases)


def _random_unit_rows(rng, rows, d):
    X = rng.standard_normal((rows, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def brute_force_alignment(T: np.ndarray, S: np.ndarray):
    """Greedy argmax of |cos| by explicit loops over every candidate."""
    k = len(T)
    chosen, signs = [], []
    for i in range(k):
        best_j, best = None, -1.0
        for j in range(len(S)):
            if j in chosen:
                continue
            num = float(np.dot(T[i], S[j]))
            den = float(np.linalg.norm(T[i]) * np.linalg.norm(S[j]))
            score = abs(num) / den if den > 0 else 0.0
            if score > best:
                best_j, best = j, score
        chosen.append(best_j)
        signs.append(-1.0 if np.dot(T[i], S[best_j]) < 0 else 1.0)
    return chosen, signs


def check_alignment(cases: int = 1000, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    violations = {"brute_force": 0, "permutation": 0, "sign": 0}
    for _ in range(cases):
        k = int(rng.integers(1, 5))
        d = int(rng.integers(k + 1, 12))
        T = _random_unit_rows(rng, k, d)
        S = _random_unit_rows(rng, k + 1, d)
        sel, sg = select_alignment(T, S)
        aligned = S[sel] * sg[:, None]
        ref_sel, ref_sg = brute_force_alignment(T, S)
        if list(sel) != ref_sel or list(sg) != ref_sg:
            violations["brute_force"] += 1
        perm = rng.permutation(k + 1)
        sel_p, sg_p = select_alignment(T, S[perm])
        if not np.allclose(S[perm][sel_p] * sg_p[:, None], aligned):
            violations["permutation"] += 1
        flips = np.where(rng.random(k + 1) < 0.5, -1.0, 1.0)
        sel_f, sg_f = select_alignment(T, S * flips[:, None])
        if not np.allclose((S * flips[:, None])[sel_f] * sg_f[:, None], aligned):
            violations["sign"] += 1
    total = sum(violations.values())
    return CheckResult("alignment", total == 0, float(total), 0.0, cases,
                       {k: float(v) for k, v in violations.items()})


def check_clipping(cases: int = 200, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    ok = True
    for _ in range(cases):
        gm = [rng.standard_normal((3, 4)), rng.standard_normal(5)]
        gt = [rng.standard_normal((3, 4)) * 0.3, rng.standard_normal(5) * 0.3]
        p = int(rng.integers(0, 10))
        mn = math.sqrt(sum(float(np.sum(g * g)) for g in gm))
        tn = math.sqrt(sum(float(np.sum(g * g)) for g in gt))
        out, info = clip_transfer_gradient(gm, gt, p, "literal")
        expected = 1.0 / (1.0 + math.exp(-(mn / tn) + p)) if tn < mn else 1.0
        worst = max(worst, abs(info.scale - expected))
        ok &= 0.0 < info.scale <= 1.0
    ok &= gate_factor(3.0, 3) == 0.5
    return CheckResult("clipping", ok and worst < 1e-6, worst, 1e-6, cases)


def run_all(quick: bool = False, inject_fault: str = "") -> List[CheckResult]:
    sign = -1.0 if inject_fault == "svd-sign" else 1.0
    scale = 0.2 if quick else 1.0
    return [
        check_autograd(seeds=max(5, int(100 * scale))),
        check_svd_backward(cases=max(10, int(50 * scale)), backward_sign=sign),
        check_eckart_young(cases=100),
        check_alignment(cases=1000),
        check_clipping(),
    ]


def format_report(results: List[CheckResult]) -> str:
    lines = []
    for r in results:
        lines.append(r.line())
        for name, val in sorted(r.detail.items()):
            lines.append(f"    {name:<24s} {val:.3e}")
    failed = [r.group for r in results if not r.passed]
    lines.append("ALL PASS" if not failed else f"FAILED: {', '.join(failed)}")
    return "\n".join(lines)


__all__ = [
    "CheckResult", "brute_force_alignment", "check_alignment", "check_autograd", "check_clipping",
    "check_eckart_young", "check_svd_backward", "format_report", "run_all", "spaced_values",
    "svd_fd_error", "well_conditioned",
]
