"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError
from .tensor import Tensor


@dataclass
class InputReport:
    index: int
    max_abs_err: float
    max_rel_err: float
    passed: bool
    checked: int


@dataclass
class GradCheckReport:
    inputs: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.inputs)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.inputs), default=0.0)

    def __str__(self):
        lines = []
        for r in self.inputs:
            status = "ok" if r.passed else "FAIL"
            lines.append(
                f"input[{r.index}] {status}: max_abs={r.max_abs_err:.3e}"
                f" max_rel={r.max_rel_err:.3e} ({r.checked} elements)"
            )
        return "\n".join(lines)


def gradcheck(fn, inputs, h: float = 1e-3, rtol: float = 1e-2,
              atol: float = 1e-3, max_elements: int | None = None,
              seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of a scalar-valued graph to central
    finite differences.

    ``fn`` maps the given Tensors to a scalar Tensor and must be
    deterministic; that is verified by evaluating it twice.  Each input with
    ``requires_grad`` is perturbed elementwise (optionally a random subset of
    ``max_elements`` per input).  An element passes when
    ``|analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)``.
    """
    v1 = fn(*inputs)
    v2 = fn(*inputs)
    if v1.data.size != 1:
        raise GraphError("gradcheck: fn must return a scalar tensor")
    if not np.array_equal(v1.data, v2.data):
        raise GraphError("gradcheck: fn is not deterministic")

    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    loss.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        for t in inputs
    ]

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        n = flat.size
        if max_elements is not None and max_elements < n:
            idxs = rng.choice(n, size=max_elements, replace=False)
        else:
            idxs = np.arange(n)
        a_flat = analytic[i].reshape(-1)
        max_abs = 0.0
        max_rel = 0.0
        ok = True
        for k in idxs:
            orig = flat[k]
            flat[k] = orig + h
            fp = fn(*inputs).item()
            flat[k] = orig - h
            fm = fn(*inputs).item()
            flat[k] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(a_flat[k])
            diff = abs(a - numeric)
            denom = max(abs(a), abs(numeric))
            rel = diff / denom if denom > 0 else 0.0
            max_abs = max(max_abs, diff)
            if denom > atol:
                max_rel = max(max_rel, rel)
            if diff > atol + rtol * denom:
                ok = False
        report.inputs.append(
            InputReport(i, max_abs, max_rel, ok, len(idxs))
        )
    return report
