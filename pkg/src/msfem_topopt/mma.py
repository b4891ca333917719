"""Method of moving asymptotes for one objective and one inequality constraint.

The convex separable subproblem is solved through its dual, which for a
single constraint is a one-dimensional concave maximisation in the
multiplier; it is found by bisection on the sign of the approximated
constraint.  Asymptote handling and the ``p``/``q`` regularisation follow the
classical published scheme, except that the initial asymptote distance is a
parameter (``0.5 / (1 + beta)`` in the constant-beta approach), the
asymptotes may close in to ``ASY_MIN`` so that oscillating variables settle,
and they may open to at most ``ASY_MAX_RATIO`` times that initial offset
(the classical 10 for ``a0 = 0.5``).  Without the last cap, variables that
creep in one direction for tens of iterations get asymptotes near ten box
widths away and the next step jumps across the box.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RAA0 = 1e-5
ALBEFA = 0.1
ASY_INCR = 1.2
ASY_DECR = 0.7
ASY_MIN = 1e-5  # smallest asymptote distance, relative to the box
ASY_MAX_RATIO = 20.0  # largest asymptote distance, relative to a0
DUAL_TOL = 1e-10


class OptimizerError(RuntimeError):
    pass


def initial_asymptote(beta: float) -> float:
    """Initial asymptote offset used with a constant projection sharpness."""
    return 0.5 / (1.0 + beta)


@dataclass
class MmaState:
    x: np.ndarray
    a0: float = 0.5
    xmin: float = 0.0
    xmax: float = 1.0
    xold1: np.ndarray | None = None
    xold2: np.ndarray | None = None
    low: np.ndarray | None = None
    upp: np.ndarray | None = None
    iteration: int = 0
    history: list = field(default_factory=list)

    def reset(self, a0: float | None = None) -> None:
        """Forget the asymptote history (e.g. after a change of beta)."""
        if a0 is not None:
            self.a0 = a0
        self.xold1 = self.xold2 = self.low = self.upp = None
        self.iteration = 0


def _asymptotes(st: MmaState):
    x, span = st.x, st.xmax - st.xmin
    if st.iteration < 2 or st.low is None:
        return x - st.a0 * span, x + st.a0 * span
    zzz = (x - st.xold1) * (st.xold1 - st.xold2)
    factor = np.ones_like(x)
    factor[zzz > 0] = ASY_INCR
    factor[zzz < 0] = ASY_DECR
    low = x - factor * (st.xold1 - st.low)
    upp = x + factor * (st.upp - st.xold1)
    far = ASY_MAX_RATIO * st.a0 * span
    low = np.clip(low, x - far, x - ASY_MIN * span)
    upp = np.clip(upp, x + ASY_MIN * span, x + far)
    return low, upp


def _pq(dfdx, ux2, xl2, span):
    p = np.maximum(dfdx, 0.0)
    q = np.maximum(-dfdx, 0.0)
    reg = 0.001 * (p + q) + RAA0 / span
    return (p + reg) * ux2, (q + reg) * xl2


def _x_of(lam, p0, q0, p1, q1, low, upp, alpha, beta):
    P = p0 + lam * p1
    Q = q0 + lam * q1
    sp_, sq = np.sqrt(P), np.sqrt(Q)
    x = (upp * sq + low * sp_) / (sp_ + sq)
    return np.clip(x, alpha, beta)


def mma_update(state: MmaState, f: float, df: np.ndarray, g: float, dg: np.ndarray,
               bounds: tuple[float, float] | None = None) -> np.ndarray:
    """One MMA step from ``state.x``; updates ``state`` and returns the new design."""
    if bounds is not None:
        state.xmin, state.xmax = bounds
    x = np.asarray(state.x, dtype=float)
    df = np.asarray(df, dtype=float)
    dg = np.asarray(dg, dtype=float)
    span = state.xmax - state.xmin
    low, upp = _asymptotes(state)
    alpha = np.maximum(state.xmin, low + ALBEFA * (x - low))
    beta = np.minimum(state.xmax, upp - ALBEFA * (upp - x))
    ux1, xl1 = upp - x, x - low
    ux2, xl2 = ux1 * ux1, xl1 * xl1
    p0, q0 = _pq(df, ux2, xl2, span)
    p1, q1 = _pq(dg, ux2, xl2, span)
    r1 = g - np.sum(p1 / ux1 + q1 / xl1)

    def gt(lam):
        xl = _x_of(lam, p0, q0, p1, q1, low, upp, alpha, beta)
        return r1 + np.sum(p1 / (upp - xl) + q1 / (xl - low)), xl

    g0, xnew = gt(0.0)
    lam = 0.0
    if g0 > 0:
        if g > 0 and not np.any(dg):
            raise OptimizerError("constraint violated with an all-zero constraint gradient")
        hi = 1.0
        while gt(hi)[0] > 0 and hi < 1e15:
            hi *= 10.0
        lo = 0.0
        for _ in range(200):
            lam = 0.5 * (lo + hi)
            if hi - lo <= DUAL_TOL * max(hi, 1e-30):
                break
            if gt(lam)[0] > 0:
                lo = lam
            else:
                hi = lam
        lam = hi
        xnew = gt(lam)[1]
    state.xold2 = state.xold1 if state.xold1 is not None else x.copy()
    state.xold1 = x.copy()
    state.low, state.upp = low, upp
    state.x = xnew
    state.iteration += 1
    state.history.append((f, g, lam))
    return xnew
