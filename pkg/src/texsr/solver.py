"""Unrolled primal-dual solver for the multi-view reconstruction energy.

The energy being minimized is

    sum_i || A_i tex - lr_i ||_1  (over visible LR pixels)
    + sum_x weights(x) * || grad tex(x) ||_2

with A_i the per-view formation chain. Dualizing both L1 terms gives a
saddle-point problem solved by alternating dual ascent / primal descent
with over-relaxation. One update cycle is one "layer"; a fixed number of
cycles is unrolled so the whole solve stays differentiable.

Update order within one cycle:
  1. per-view data duals:  q_i <- clamp_[-1,1]( q_i + eta * (A_i tex_bar - lr_i) ),
     invisible LR pixels forced to zero;
  2. TV dual:              p <- proj_L2ball( p + eta * weights * grad tex_bar );
  3. primal:               tex <- tex + tau * ( div(weights * p) - sum_i A_i^T q_i )
     (with ``exact_adjoint_tv`` off, the first term is weights * div p instead);
  4. over-relaxation:      tex_bar <- 2 tex_new - tex_old.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ParameterError, StructuralError
from .operators import power_iteration

__all__ = [
    "SolverConfig",
    "SolverState",
    "SolveTrace",
    "grad_op",
    "div_op",
    "project_l2_ball",
    "clamp_interval",
    "pd_step",
    "run_unrolled",
    "energy",
    "estimate_total_norm",
]


@dataclass(frozen=True)
class SolverConfig:
    """Step sizes and unroll depth.

    ``exact_adjoint_tv`` selects div(weights*p) in the primal update (the
    exact adjoint of the dual ascent term, required for gradient checks);
    the alternative weights*div(p) matches a common typeset form.
    """

    eta: float = 0.025
    tau: float = 0.025
    num_pd_iters: int = 50
    record_states: bool = False
    exact_adjoint_tv: bool = True
    check_step_bound: bool = False

    def __post_init__(self):
        if not (self.eta > 0 and self.tau > 0):
            raise ParameterError("step sizes must be positive")
        if self.num_pd_iters < 0:
            raise ParameterError("unroll depth must be >= 0")


@dataclass
class SolverState:
    """One snapshot of the iteration: primal, over-relaxed primal, duals."""

    tex: np.ndarray
    tex_relaxed: np.ndarray
    dual_data: list  # one LR-sized raster per view, |q| <= 1
    dual_tv: np.ndarray  # (2, h, w), per-texel L2 norm <= 1

    @classmethod
    def zeros(cls, tex_init: np.ndarray, lr_shapes) -> "SolverState":
        t = np.array(tex_init, dtype=np.float64)
        return cls(
            tex=t,
            tex_relaxed=t.copy(),
            dual_data=[np.zeros(s) for s in lr_shapes],
            dual_tv=np.zeros((2,) + t.shape),
        )

    def check_invariants(self, atol: float = 0.0):
        for q in self.dual_data:
            if np.abs(q).max(initial=0.0) > 1.0 + atol:
                raise NumericalError("data dual escaped [-1, 1]")
        nrm = np.sqrt(self.dual_tv[0] ** 2 + self.dual_tv[1] ** 2)
        if nrm.max(initial=0.0) > 1.0 + max(atol, 1e-15):
            raise NumericalError("TV dual escaped the unit ball")
        for a in (self.tex, self.tex_relaxed, self.dual_tv, *self.dual_data):
            if not np.all(np.isfinite(a)):
                raise NumericalError("non-finite value in solver state")


@dataclass
class SolveTrace:
    """Per-iteration values retained for reverse-mode differentiation.

    Stores, for each unrolled cycle, the over-relaxed primal it consumed and
    the pre-projection duals it produced; the projected duals are cheap to
    recompute from these.
    """

    views: list
    chains: list
    weights: np.ndarray
    cfg: SolverConfig
    valid_mask: np.ndarray | None
    tex_init: np.ndarray
    tex_relaxed_in: list = field(default_factory=list)
    dual_data_pre: list = field(default_factory=list)
    dual_tv_pre: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Discrete calculus and projections
# ---------------------------------------------------------------------------

def grad_op(tex: np.ndarray) -> np.ndarray:
    """Forward differences with Neumann boundary (zero at last row/column).

    Component 0 differentiates along columns (x), component 1 along rows (y).
    """
    g = np.zeros((2,) + tex.shape)
    g[0, :, :-1] = tex[:, 1:] - tex[:, :-1]
    g[1, :-1, :] = tex[1:, :] - tex[:-1, :]
    return g


def div_op(p: np.ndarray) -> np.ndarray:
    """Discrete divergence, the exact negative adjoint of :func:`grad_op`."""
    px, py = p[0], p[1]
    out = np.zeros(px.shape)
    out[:, 0] += px[:, 0]
    out[:, 1:-1] += px[:, 1:-1] - px[:, :-2]
    out[:, -1] -= px[:, -2]
    out[0, :] += py[0, :]
    out[1:-1, :] += py[1:-1, :] - py[:-2, :]
    out[-1, :] -= py[-2, :]
    return out


def project_l2_ball(p: np.ndarray) -> np.ndarray:
    """Per-texel projection of 2-vectors onto the L2 unit ball."""
    nrm = np.sqrt(p[0] ** 2 + p[1] ** 2)
    scale = 1.0 / np.maximum(1.0, nrm)
    return p * scale[None]


def clamp_interval(q: np.ndarray) -> np.ndarray:
    """Scalar duals clamped to [-1, 1]."""
    return np.clip(q, -1.0, 1.0)


# ---------------------------------------------------------------------------
# One primal-dual cycle
# ---------------------------------------------------------------------------

def _check_dims(views, chains, tex_shape):
    if len(views) != len(chains):
        raise StructuralError("views and chains must pair up")
    if not views:
        raise StructuralError("at least one view is required")
    for v, c in zip(views, chains):
        if c.tex_shape != tuple(tex_shape):
            raise StructuralError(f"chain texture shape {c.tex_shape} != {tuple(tex_shape)}")
        if v.image.shape != c.lr_shape:
            raise StructuralError(f"view image shape {v.image.shape} != chain {c.lr_shape}")


def pd_step(state: SolverState, views, chains, weights: np.ndarray, cfg: SolverConfig,
            trace: SolveTrace | None = None) -> SolverState:
    """One primal-dual update cycle; views are processed in the given order."""
    _check_dims(views, chains, state.tex.shape)
    weights = np.asarray(weights, dtype=np.float64)
    eta, tau = cfg.eta, cfg.tau

    # 1. dual ascent on the data terms
    new_dual_data = []
    pre_data = []
    for v, c, q in zip(views, chains, state.dual_data):
        resid = c.forward(state.tex_relaxed) - v.image
        if v.visibility is not None:
            resid = np.where(v.visibility, resid, 0.0)
        q_pre = q + eta * resid
        pre_data.append(q_pre)
        q_new = clamp_interval(q_pre)
        if v.visibility is not None:
            q_new = np.where(v.visibility, q_new, 0.0)
        new_dual_data.append(q_new)

    # 2. dual ascent on the TV term
    p_pre = state.dual_tv + eta * weights[None] * grad_op(state.tex_relaxed)
    new_dual_tv = project_l2_ball(p_pre)

    # 3. primal descent (reduction over views in the given order)
    if cfg.exact_adjoint_tv:
        tv_term = div_op(weights[None] * new_dual_tv)
    else:
        tv_term = weights * div_op(new_dual_tv)
    back = np.zeros_like(state.tex)
    for c, q in zip(chains, new_dual_data):
        back += c.adjoint(q)
    tex_new = state.tex + tau * (tv_term - back)

    # 4. over-relaxation
    tex_bar = 2.0 * tex_new - state.tex

    if trace is not None:
        trace.tex_relaxed_in.append(state.tex_relaxed)
        trace.dual_data_pre.append(pre_data)
        trace.dual_tv_pre.append(p_pre)

    return SolverState(tex=tex_new, tex_relaxed=tex_bar,
                       dual_data=new_dual_data, dual_tv=new_dual_tv)


# ---------------------------------------------------------------------------
# Unrolled solve
# ---------------------------------------------------------------------------

def _canonical_order(views, chains):
    order = sorted(range(len(views)), key=lambda i: views[i].view_id)
    return [views[i] for i in order], [chains[i] for i in order]


def run_unrolled(tex_init: np.ndarray, views, chains, weights: np.ndarray,
                 cfg: SolverConfig, sigmas=None, valid_mask=None):
    """Run exactly ``cfg.num_pd_iters`` update cycles from a zero dual state.

    Views are reduced in ascending view-id order, so the result is
    bit-identical under permutation of the inputs. When ``sigmas`` is given,
    each chain's blur is rebuilt at the stated width. With
    ``cfg.record_states`` a :class:`SolveTrace` for reverse-mode
    differentiation is returned, otherwise None.
    """
    tex_init = np.asarray(tex_init, dtype=np.float64)
    views = list(views)
    chains = list(chains)
    if sigmas is not None:
        if len(sigmas) != len(chains):
            raise StructuralError("one sigma per view required")
        chains = [c.with_sigma(float(s)) for c, s in zip(chains, sigmas)]
    views, chains = _canonical_order(views, chains)
    _check_dims(views, chains, tex_init.shape)

    if cfg.check_step_bound:
        total = estimate_total_norm(chains, weights)
        if cfg.eta * cfg.tau * total**2 > 1.0:
            warnings.warn(
                f"step sizes eta*tau*|A|^2 = {cfg.eta * cfg.tau * total**2:.3f} > 1 "
                "exceed the convergence bound", RuntimeWarning, stacklevel=2)

    trace = SolveTrace(views=views, chains=chains,
                       weights=np.asarray(weights, dtype=np.float64), cfg=cfg,
                       valid_mask=None if valid_mask is None else np.asarray(valid_mask, bool),
                       tex_init=tex_init) if cfg.record_states else None

    state = SolverState.zeros(tex_init, [c.lr_shape for c in chains])
    for _ in range(cfg.num_pd_iters):
        state = pd_step(state, views, chains, weights, cfg, trace=trace)
        if not np.all(np.isfinite(state.tex)):
            raise NumericalError("solver produced a non-finite texture")

    tex_out = state.tex
    if valid_mask is not None:
        tex_out = np.where(valid_mask, tex_out, 0.0)
    return tex_out, trace


def energy(tex: np.ndarray, views, chains, weights: np.ndarray) -> float:
    """Reconstruction energy: masked L1 reprojection error + weighted TV."""
    _check_dims(views, chains, tex.shape)
    total = 0.0
    for v, c in zip(views, chains):
        resid = c.forward(tex) - v.image
        if v.visibility is not None:
            resid = np.where(v.visibility, resid, 0.0)
        total += np.abs(resid).sum()
    g = grad_op(tex)
    total += (np.asarray(weights) * np.sqrt(g[0] ** 2 + g[1] ** 2)).sum()
    return float(total)


def estimate_total_norm(chains, weights, iters: int = 40, seed: int = 0) -> float:
    """Power-iteration estimate of the stacked operator [A_1; ...; A_N; W*grad]."""
    tex_shape = chains[0].tex_shape
    n = tex_shape[0] * tex_shape[1]
    w = np.asarray(weights, dtype=np.float64)

    def fwd(x):
        t = x.reshape(tex_shape)
        parts = [c.forward(t).ravel() for c in chains]
        parts.append((w[None] * grad_op(t)).ravel())
        return np.concatenate(parts)

    def adj(y):
        out = np.zeros(tex_shape)
        off = 0
        for c in chains:
            m = c.lr_shape[0] * c.lr_shape[1]
            out += c.adjoint(y[off:off + m].reshape(c.lr_shape))
            off += m
        p = y[off:].reshape((2,) + tex_shape)
        out -= div_op(w[None] * p)
        return out.ravel()

    return power_iteration(fwd, adj, n, iters=iters, seed=seed)
