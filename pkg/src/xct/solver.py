"""CGLS reconstruction over the assembled operator.

Conjugate gradients on the least-squares normal equations: one projection
and one backprojection per iteration plus one initial backprojection, so a
run of n iterations performs exactly n projections and n+1 backprojections.
All dot products and scalar recurrences are double precision in every
mode; in the reduced-precision modes the persistent vectors are stored in
half with a per-vector max-norm factor and vector updates run in single.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .matrixstore import PRECISIONS
from .pipeline import AssembledSystem

__all__ = [
    "SolveConfig",
    "SolveResult",
    "SolverDivergence",
    "cgls_solve",
    "early_stop",
    "residual_curve_report",
]


class SolverDivergence(RuntimeError):
    """Raised when an iterate stops being finite."""

    def __init__(self, iteration: int, mode: str, what: str):
        self.iteration = iteration
        self.mode = mode
        super().__init__(
            f"CGLS diverged at iteration {iteration} in {mode} mode: {what}")


@dataclass(frozen=True)
class SolveConfig:
    """Iteration budget and precision policy for one solve."""

    max_iters: int = 30
    early_stop_iters: int | None = None
    precision: str = "double"
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.early_stop_iters is not None and not (
                1 <= self.early_stop_iters <= self.max_iters):
            raise ValueError("early_stop_iters must be in [1, max_iters]")
        if self.precision not in PRECISIONS:
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass
class SolveResult:
    """Final estimate plus the per-iteration record of one solve.

    ``residual_history`` tracks the relative measurement residual
    ||y - A x|| / ||y||; ``gradient_history`` tracks the normal-equation
    residual ||A^T (y - A x)|| relative to ||A^T y|| (the quantity the
    iteration minimizes over its Krylov spaces, available for free).
    """

    x: np.ndarray = field(repr=False)
    residual_history: list = field(default_factory=list)
    gradient_history: list = field(default_factory=list)
    iteration_seconds: list = field(default_factory=list)
    projections: int = 0
    backprojections: int = 0
    normalization_factors: list = field(default_factory=list)
    mode: str = "double"

    @property
    def iterations(self) -> int:
        return len(self.residual_history)


class _VectorStore:
    """Persistent-vector storage policy for one precision mode.

    double/single keep plain arrays; half and mixed store a half payload
    plus its max-norm factor (adaptive normalization), loading back to
    single for arithmetic.
    """

    def __init__(self, precision: str):
        self.precision = precision
        self.reduced = precision in ("half", "mixed")
        self.work_dtype = np.float64 if precision == "double" else np.float32

    def store(self, v: np.ndarray):
        if not self.reduced:
            return v.astype(self.work_dtype, copy=False)
        peak = float(np.max(np.abs(v))) if v.size else 0.0
        factor = peak if peak > 0 else 1.0
        return (v / factor).astype(np.float16), factor

    def load(self, stored) -> np.ndarray:
        if not self.reduced:
            return stored
        payload, factor = stored
        return payload.astype(np.float32) * np.float32(factor)


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.vdot(a.astype(np.float64), b.astype(np.float64)))


def _check_finite(v: np.ndarray, iteration: int, mode: str, what: str) -> None:
    if not np.all(np.isfinite(v)):
        raise SolverDivergence(iteration, mode, f"{what} contains NaN or Inf")


def early_stop(config: SolveConfig, history: list) -> bool:
    """Fixed-iteration early termination (the run's only regularization)."""
    if not history:
        raise ValueError("empty residual history")
    if config.early_stop_iters is None:
        return False
    return len(history) >= config.early_stop_iters


def cgls_solve(system: AssembledSystem, y: np.ndarray,
               config: SolveConfig) -> SolveResult:
    """Solve min_x ||y - A x|| by CGLS over the assembled operator.

    ``y`` is (num_rays,) or (num_rays, slices); the estimate starts at
    zero, so the initial residual is y itself and needs no projection.
    """
    squeeze = y.ndim == 1
    Y = (y.reshape(-1, 1) if squeeze else y).astype(np.float64)
    if Y.shape[0] != system.num_rows:
        raise ValueError(
            f"measurements have {Y.shape[0]} rays, operator expects {system.num_rows}")
    _check_finite(Y, 0, config.precision, "measurement data")
    store = _VectorStore(config.precision)
    result = SolveResult(x=np.zeros(0), mode=config.precision)
    y_norm = np.sqrt(_dot(Y, Y))
    if y_norm == 0.0:
        result.x = np.zeros((system.num_cols,) if squeeze
                            else (system.num_cols, Y.shape[1]))
        return result

    x_st = store.store(np.zeros((system.num_cols, Y.shape[1]),
                                dtype=store.work_dtype))
    r_st = store.store(Y.astype(store.work_dtype))
    s0, states = system.apply_adjoint(store.load(r_st))
    result.backprojections += 1
    result.normalization_factors.append([st.factor for st in states])
    p_st = store.store(s0.astype(store.work_dtype))
    gamma = _dot(s0, s0)
    gamma0 = gamma

    for it in range(1, config.max_iters + 1):
        t0 = time.perf_counter()
        if gamma == 0.0:
            break  # gradient vanished: already at the least-squares solution
        p = store.load(p_st)
        _check_finite(p, it, config.precision, "search direction")
        q, states = system.apply_forward(p)
        result.projections += 1
        result.normalization_factors.append([st.factor for st in states])
        qq = _dot(q, q)
        if qq == 0.0:
            break
        alpha = gamma / qq
        wd = store.work_dtype
        x = store.load(x_st) + wd(alpha) * p.astype(wd, copy=False)
        r = store.load(r_st) - wd(alpha) * q.astype(wd, copy=False)
        _check_finite(r, it, config.precision, "residual")
        x_st, r_st = store.store(x), store.store(r)
        s, states = system.apply_adjoint(store.load(r_st))
        result.backprojections += 1
        result.normalization_factors.append([st.factor for st in states])
        gamma_new = _dot(s, s)
        _check_finite(np.array([gamma_new]), it, config.precision, "gradient norm")
        beta = gamma_new / gamma if gamma > 0 else 0.0
        gamma = gamma_new
        p = s.astype(wd, copy=False) + wd(beta) * store.load(p_st)
        p_st = store.store(p)
        rel = np.sqrt(_dot(store.load(r_st), store.load(r_st))) / y_norm
        result.residual_history.append(rel)
        result.gradient_history.append(np.sqrt(gamma_new / gamma0))
        result.iteration_seconds.append(time.perf_counter() - t0)
        if early_stop(config, result.residual_history):
            break

    x_final = store.load(x_st).astype(np.float64)
    result.x = x_final[:, 0] if squeeze else x_final
    return result


def residual_curve_report(histories: dict[str, SolveResult]) -> str:
    """CSV of relative residuals per mode, indexed by iteration and by
    cumulative wall time (two data columns per mode)."""
    if not histories:
        raise ValueError("no residual histories to report")
    modes = sorted(histories)
    for mode, res in histories.items():
        if res.iterations == 0:
            raise ValueError(f"history for mode {mode!r} is empty")
    depth = max(res.iterations for res in histories.values())
    header = ["iteration"]
    for mode in modes:
        header += [f"{mode}_seconds", f"{mode}_rel_residual"]
    lines = [",".join(header)]
    for i in range(depth):
        row = [str(i + 1)]
        for mode in modes:
            res = histories[mode]
            if i < res.iterations:
                elapsed = sum(res.iteration_seconds[:i + 1])
                row += [f"{elapsed:.6e}", f"{res.residual_history[i]:.9e}"]
            else:
                row += ["", ""]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
