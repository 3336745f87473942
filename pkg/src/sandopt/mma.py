"""Method of Moving Asymptotes for box-bounded programs with inequality constraints.

Each update builds a separable convex approximation of the objective and
constraints around the current design, bounded by per-variable asymptotes,
and solves the subproblem exactly through its dual. Asymptotes widen while a
variable moves monotonically and shrink when it oscillates, judged from the
two previous iterates kept in :class:`MMAState`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

_ALBEFA = 0.1  # keep subproblem bounds strictly inside the asymptotes
_RAA0 = 1e-5  # strict-convexity term of the approximation
_LAMBDA_CAP = 1e12


@dataclass
class MMAState:
    """Optimizer memory carried between updates."""

    lower_asymptotes: np.ndarray | None = None
    upper_asymptotes: np.ndarray | None = None
    x_prev1: np.ndarray | None = None
    x_prev2: np.ndarray | None = None
    iteration: int = 0
    move_limit: float = 0.2  # fraction of the variable range per step
    initial_spread: float = 0.5
    shrink: float = 0.7
    grow: float = 1.2
    spread_bounds: tuple[float, float] = (1e-4, 10.0)
    kkt_residual: float = float("nan")
    subproblem_feasible: bool = True


def asymptote_adapt(
    state: MMAState, x: np.ndarray, lower: np.ndarray, upper: np.ndarray
) -> MMAState:
    """Asymptotes around ``x`` for the next subproblem.

    First two iterations use the fixed initial spread. Afterwards the spread
    grows where (x_k - x_{k-1}) and (x_{k-1} - x_{k-2}) share a sign, shrinks
    where they disagree, and is clamped to ``spread_bounds`` times the range.
    """
    xrange = np.maximum(upper - lower, 1e-12)
    if state.x_prev1 is None or state.x_prev2 is None:
        low = x - state.initial_spread * xrange
        upp = x + state.initial_spread * xrange
    else:
        trend = (x - state.x_prev1) * (state.x_prev1 - state.x_prev2)
        factor = np.ones_like(x)
        factor[trend > 0] = state.grow
        factor[trend < 0] = state.shrink
        low = x - factor * (state.x_prev1 - state.lower_asymptotes)
        upp = x + factor * (state.upper_asymptotes - state.x_prev1)
    smin, smax = state.spread_bounds
    low = np.clip(low, x - smax * xrange, x - smin * xrange)
    upp = np.clip(upp, x + smin * xrange, x + smax * xrange)
    return replace(state, lower_asymptotes=low, upper_asymptotes=upp)


def _dual_x(lam, p0, q0, P, Q, low, upp, alfa, beta):
    pj = p0 + lam @ P
    qj = q0 + lam @ Q
    sp_, sq = np.sqrt(pj), np.sqrt(qj)
    x = (sp_ * low + sq * upp) / (sp_ + sq)
    return np.clip(x, alfa, beta)


def _dual_residual(lam, p0, q0, P, Q, b, low, upp, alfa, beta):
    x = _dual_x(lam, p0, q0, P, Q, low, upp, alfa, beta)
    return P @ (1.0 / (upp - x)) + Q @ (1.0 / (x - low)) - b


def _solve_dual(p0, q0, P, Q, b, low, upp, alfa, beta):
    """Maximize the dual; residuals h_i(lam) are decreasing in lam_i."""
    m = b.size
    lam = np.zeros(m)
    if m == 0:
        return lam, True

    def h_i(i, value):
        lam_try = lam.copy()
        lam_try[i] = value
        return _dual_residual(lam_try, p0, q0, P, Q, b, low, upp, alfa, beta)[i]

    feasible = True
    sweeps = 1 if m == 1 else 200
    for _ in range(sweeps):
        for i in range(m):
            if h_i(i, 0.0) <= 0.0:
                lam[i] = 0.0
                continue
            hi = 1.0
            while h_i(i, hi) > 0.0 and hi < _LAMBDA_CAP:
                hi *= 10.0
            if h_i(i, hi) > 0.0:
                lam[i] = hi
                feasible = False
                continue
            lo = 0.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if h_i(i, mid) > 0.0:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= 1e-15 * max(1.0, hi):
                    break
            lam[i] = hi
        if m == 1:
            break
        h = _dual_residual(lam, p0, q0, P, Q, b, low, upp, alfa, beta)
        if np.max(np.maximum(h, 0.0), initial=0.0) < 1e-10 and np.max(
            np.abs(lam * h), initial=0.0
        ) < 1e-10:
            break
    return lam, feasible


def mma_update(
    x: np.ndarray,
    f: float,
    df: np.ndarray,
    g: np.ndarray,
    dg: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    state: MMAState,
) -> tuple[np.ndarray, MMAState]:
    """One MMA iteration; returns the next design and the updated state.

    ``g``/``dg`` hold the inequality constraints g_i(x) <= 0 and their
    gradients, shapes (m,) and (m, n). If the subproblem is infeasible the
    closest feasible point is returned and ``state.subproblem_feasible`` is
    cleared. The objective value ``f`` is accepted for bookkeeping symmetry
    but only the gradients enter the approximation.
    """
    x = np.asarray(x, dtype=float)
    df = np.asarray(df, dtype=float)
    g = np.atleast_1d(np.asarray(g, dtype=float))
    dg = np.asarray(dg, dtype=float).reshape(g.size, x.size)
    lower = np.broadcast_to(np.asarray(lower, dtype=float), x.shape)
    upper = np.broadcast_to(np.asarray(upper, dtype=float), x.shape)
    if not np.isfinite(df).all() or not np.isfinite(dg).all():
        raise ValueError("gradients contain NaN or inf")
    if (lower > upper).any():
        raise ValueError("inconsistent box bounds")

    state = asymptote_adapt(state, x, lower, upper)
    low, upp = state.lower_asymptotes, state.upper_asymptotes
    xrange = np.maximum(upper - lower, 1e-12)
    move = state.move_limit * xrange

    alfa = np.maximum.reduce([lower, low + _ALBEFA * (x - low), x - move])
    beta = np.minimum.reduce([upper, upp - _ALBEFA * (upp - x), x + move])
    frozen = alfa > beta
    alfa[frozen] = beta[frozen] = np.clip(x, lower, upper)[frozen]

    ux2 = (upp - x) ** 2
    xl2 = (x - low) ** 2
    dfp, dfm = np.maximum(df, 0.0), np.maximum(-df, 0.0)
    reg = 0.001 * (dfp + dfm) + _RAA0 / xrange
    p0 = ux2 * (dfp + reg)
    q0 = xl2 * (dfm + reg)
    P = ux2[None, :] * np.maximum(dg, 0.0)
    Q = xl2[None, :] * np.maximum(-dg, 0.0)
    b = P @ (1.0 / (upp - x)) + Q @ (1.0 / (x - low)) - g

    lam, feasible = _solve_dual(p0, q0, P, Q, b, low, upp, alfa, beta)
    x_new = _dual_x(lam, p0, q0, P, Q, low, upp, alfa, beta)

    h = _dual_residual(lam, p0, q0, P, Q, b, low, upp, alfa, beta)
    kkt = 0.0
    if h.size:
        kkt = float(max(np.max(np.maximum(h, 0.0)), np.max(np.abs(lam * h))))
        if not feasible:
            kkt = float(np.max(np.maximum(h, 0.0)))

    new_state = replace(
        state,
        x_prev2=state.x_prev1,
        x_prev1=x.copy(),
        iteration=state.iteration + 1,
        kkt_residual=kkt,
        subproblem_feasible=feasible,
    )
    return x_new, new_state
