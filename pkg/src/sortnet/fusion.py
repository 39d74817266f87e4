"""Two-branch response fusion: linear sum, max and the second-order product term.

A fused output is the plain sum of whichever terms a :class:`FusionSpec`
activates::

    sum  -> f1 + f2
    max  -> max(f1, f2)
    prod -> wrap(gate(f1) * gate(f2))

with ``wrap`` either the identity or ``sqrt(. + eps)`` and ``gate`` either
the identity or a ReLU on both operands. The residual variant
``x + F(x) + sqrt(relu(x) * relu(F(x)) + eps)`` is the spec
``{sum, prod}`` with the sqrt wrapper and the ReLU gate.

Each fusion is recorded as a single tape node with a hand-written backward,
so the gradient of the product term with respect to one branch is scaled by
the (gated) response of the other branch.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from itertools import product as _cartesian
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from sortnet.autodiff import DTYPE, Tensor, make_output
from sortnet.errors import EmptyGrid, EmptySpec, NegativeInput, ShapeMismatch
from sortnet.ops import note_pattern, recording_pattern

DEFAULT_EPS = 1e-4

Wrapper = Literal["identity", "sqrt_eps"]
Gate = Literal["none", "relu_both"]


@dataclass(frozen=True)
class FusionSpec:
    """Which fusion terms are active and how the product term is shaped.

    ``prod_operand="square"`` swaps the cross product ``f1 * f2`` for
    ``f1 * f1``; it exists only as a negative control and is not one of the
    seven ablation rows.
    """

    use_sum: bool = True
    use_max: bool = False
    use_prod: bool = True
    prod_wrapper: Wrapper = "identity"
    prod_input_gate: Gate = "none"
    eps: float = DEFAULT_EPS
    prod_operand: Literal["cross", "square"] = "cross"

    def __post_init__(self):
        if not (self.use_sum or self.use_max or self.use_prod):
            raise EmptySpec("a fusion needs at least one of sum/max/prod")
        if self.prod_wrapper not in ("identity", "sqrt_eps"):
            raise ValueError(f"unknown product wrapper {self.prod_wrapper!r}")
        if self.prod_input_gate not in ("none", "relu_both"):
            raise ValueError(f"unknown product gate {self.prod_input_gate!r}")
        if self.prod_operand not in ("cross", "square"):
            raise ValueError(f"unknown product operand {self.prod_operand!r}")
        if self.prod_wrapper == "sqrt_eps" and not self.eps > 0:
            raise ValueError("sqrt_eps wrapper needs eps > 0")

    @property
    def label(self) -> str:
        return "+".join(t for t, on in (("sum", self.use_sum), ("max", self.use_max), ("prod", self.use_prod)) if on)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionSpec":
        return cls(**d)

    def with_terms(self, use_sum: bool, use_max: bool, use_prod: bool) -> "FusionSpec":
        d = self.to_dict()
        d.update(use_sum=use_sum, use_max=use_max, use_prod=use_prod)
        return FusionSpec(**d)


LINEAR_SUM = FusionSpec(use_sum=True, use_max=False, use_prod=False)
BRANCH_SORT = FusionSpec(use_sum=True, use_max=False, use_prod=True)


@dataclass(frozen=True)
class ResidualFuseParams:
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    def spec(self) -> FusionSpec:
        return residual_spec(self.eps)


def residual_spec(eps: float = DEFAULT_EPS) -> FusionSpec:
    return FusionSpec(use_sum=True, use_prod=True, prod_wrapper="sqrt_eps", prod_input_gate="relu_both", eps=eps)


# Row order of the ablation table: +, max, prod, +max, +prod, max+prod, all.
_ROW_TERMS = [
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (False, True, True),
    (True, True, True),
]


def ablation_rows(base: FusionSpec = BRANCH_SORT) -> list[FusionSpec]:
    """The seven non-empty subsets of {sum, max, prod}, sharing ``base``'s product settings."""
    return [base.with_terms(*terms) for terms in _ROW_TERMS]


def sort_fuse(f1: Tensor, f2: Tensor, spec: FusionSpec = BRANCH_SORT) -> Tensor:
    if f1.shape != f2.shape:
        raise ShapeMismatch(f"sort_fuse: branch shapes {f1.shape} and {f2.shape} differ")
    a, b = f1.data, f2.data
    gated = spec.prod_input_gate == "relu_both"
    sqrt_wrap = spec.prod_wrapper == "sqrt_eps"
    square = spec.prod_operand == "square"
    if spec.use_prod and sqrt_wrap and not gated:
        if np.any(a < 0) or (not square and np.any(b < 0)):
            raise NegativeInput("sort_fuse: sqrt wrapper without a ReLU gate needs non-negative inputs")

    if spec.use_sum and spec.use_prod and not spec.use_max and sqrt_wrap and gated and not square:
        return _residual_fast(f1, f2, spec.eps)

    out = None
    if spec.use_sum:
        out = a + b
    if spec.use_max:
        first = a >= b
        note_pattern(first)
        m = np.maximum(a, b)
        out = m if out is None else out + m
    if spec.use_prod:
        if gated and recording_pattern():
            note_pattern(a > 0)
            note_pattern(b > 0)
        ga = np.maximum(a, 0.0) if gated else a
        gb = ga if square else (np.maximum(b, 0.0) if gated else b)
        p = ga * gb
        if sqrt_wrap:
            p += spec.eps
            np.sqrt(p, out=p)
        out = p if out is None else out + p

    def backward(g):
        c1 = c2 = None

        def acc(c, term):
            return term if c is None else c + term

        if spec.use_sum:
            c1, c2 = 1.0, 1.0
        if spec.use_max:
            c1, c2 = acc(c1, first), acc(c2, ~first)
        if spec.use_prod:
            if square:
                # d(ga^2)/da only; the second branch receives nothing from this term
                t1 = 2.0 * ga
                if sqrt_wrap:
                    t1 = t1 * (0.5 / p)
                if gated:
                    t1 = t1 * (a > 0)
                c1 = acc(c1, t1)
            else:
                t1, t2 = gb, ga
                if sqrt_wrap:
                    half_inv = 0.5 / p
                    t1, t2 = t1 * half_inv, t2 * half_inv
                if gated:
                    t1, t2 = t1 * (a > 0), t2 * (b > 0)
                c1, c2 = acc(c1, t1), acc(c2, t2)
        g1 = _scale(g, c1)
        g2 = _scale(g, c2)
        return g1, g2

    return make_output("sort_fuse", out, (f1, f2), backward)


def _residual_fast(f1: Tensor, f2: Tensor, eps: float) -> Tensor:
    """``f1 + f2 + sqrt(relu(f1) * relu(f2) + eps)`` with few temporaries; this merge runs in every residual block."""
    a, b = f1.data, f2.data
    pos_a, pos_b = a > 0, b > 0
    if recording_pattern():
        note_pattern(pos_a)
        note_pattern(pos_b)
    ga = np.maximum(a, 0.0)
    gb = np.maximum(b, 0.0)
    r = ga * gb
    r += eps
    np.sqrt(r, out=r)
    out = a + b
    out += r

    def backward(g):
        w = np.divide(g, r)
        w *= 0.5
        g1 = np.multiply(w, gb)
        g1 *= pos_a
        g1 += g
        g2 = np.multiply(w, ga, out=w)
        g2 *= pos_b
        g2 += g
        return g1, g2

    return make_output("sort_fuse", out, (f1, f2), backward)


def _scale(g: np.ndarray, c) -> np.ndarray:
    if c is None:
        return np.zeros_like(g)
    if isinstance(c, float) and c == 1.0:
        return g
    return g * c


def residual_sort_fuse(x: Tensor, fx: Tensor, p: ResidualFuseParams = ResidualFuseParams()) -> Tensor:
    """``x + fx + sqrt(relu(x) * relu(fx) + eps)``; inputs may be negative."""
    return sort_fuse(x, fx, p.spec())


# -- response transform surfaces ---------------------------------------------------


def _f1(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.maximum(y, 0.0)


def _f2(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xs, ys = np.maximum(x, 0.0), np.maximum(y, 0.0)
    return xs + ys + xs * ys


def surface_value(which: str, x, y) -> np.ndarray:
    if which == "f1":
        return _f1(np.asarray(x, DTYPE), np.asarray(y, DTYPE))
    if which == "f2":
        return _f2(np.asarray(x, DTYPE), np.asarray(y, DTYPE))
    raise ValueError(f"unknown surface {which!r}; expected 'f1' or 'f2'")


def grid_axis(lo: float, hi: float, step: float) -> np.ndarray:
    if step <= 0 or hi < lo:
        raise EmptyGrid(f"empty grid: lo={lo}, hi={hi}, step={step}")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return np.round(lo + step * np.arange(n), 12)


def nonlinearity_surface(which: str, xs: Iterable[float], ys: Iterable[float] | None = None) -> np.ndarray:
    """Sample f1 (ReLU sum) or f2 (ReLU sum plus product) on the grid ``xs × ys``.

    Returns an ``[n, 3]`` array of ``(x, y, value)`` rows, x-major.
    """
    xs = np.asarray(list(xs), dtype=DTYPE)
    ys = xs if ys is None else np.asarray(list(ys), dtype=DTYPE)
    if xs.size == 0 or ys.size == 0:
        raise EmptyGrid("surface grid has no points")
    pts = np.array(list(_cartesian(xs, ys)), dtype=DTYPE)
    return np.column_stack([pts, surface_value(which, pts[:, 0], pts[:, 1])])


def write_surface_csv(path, table: np.ndarray) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        for x, y, v in table:
            w.writerow([f"{x:.6g}", f"{y:.6g}", f"{v:.6g}"])
    return path


def read_surface_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
