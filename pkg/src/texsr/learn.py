"""Learning the solver's free parameters by differentiating the unrolled solve.

Learnable state: a per-texel regularization weight map (positivity enforced
by a softplus reparameterization), one blur width per view (kept inside
[0.05, 5.0] by a scaled sigmoid), and the weights of a small residual prior
network applied in texture space after the solver. All gradients are exact
reverse-mode, computed by hand against the forward definitions; nonsmooth
points use the conventions sign(0)=0, ReLU'(0)=0, and zero derivative on
(and outside) projection boundaries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from ._threads import parallel_map
from .atlas import Patch, ViewObservation
from .errors import ParameterError, ParseError, StructuralError, UsageError
from .operators import SIGMA_MAX, SIGMA_MIN
from .solver import (
    SolveTrace,
    SolverConfig,
    clamp_interval,
    div_op,
    grad_op,
    project_l2_ball,
    run_unrolled,
)

__all__ = [
    "PriorNet",
    "LearnableParams",
    "TrainConfig",
    "LossTerms",
    "SolverGradients",
    "AdamState",
    "TrainSample",
    "fresh_adam_state",
    "prior_forward",
    "prior_backward",
    "loss",
    "backprop_through_solver",
    "adam_step",
    "train_epoch",
    "run_pipeline",
    "init_params",
    "save_checkpoint",
    "load_checkpoint",
    "softplus",
    "softplus_inv",
    "sigma_from_raw",
    "sigma_to_raw",
]

HIDDEN_CHANNELS = 16
CHECKPOINT_MAGIC = b"TSRC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Reparameterizations
# ---------------------------------------------------------------------------

def softplus(x):
    """log(1 + exp(x)) evaluated stably."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ParameterError("softplus inverse needs positive values")
    return np.log(np.expm1(y))


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigma_from_raw(raw):
    """Smooth clamp of unconstrained values into (SIGMA_MIN, SIGMA_MAX)."""
    return SIGMA_MIN + (SIGMA_MAX - SIGMA_MIN) * _sigmoid(np.asarray(raw, np.float64))


def sigma_to_raw(sigma):
    s = np.asarray(sigma, dtype=np.float64)
    span = SIGMA_MAX - SIGMA_MIN
    p = np.clip((s - SIGMA_MIN) / span, 1e-9, 1 - 1e-9)
    return np.log(p / (1.0 - p))


def _dsigma_draw(raw):
    p = _sigmoid(np.asarray(raw, np.float64))
    return (SIGMA_MAX - SIGMA_MIN) * p * (1.0 - p)


# ---------------------------------------------------------------------------
# Residual prior network
# ---------------------------------------------------------------------------

@dataclass
class PriorNet:
    """Three 3x3 convolutions (1->16 ReLU, 16->16 ReLU, 16->1) plus a skip.

    Zero final-layer weights and bias make the network the identity map,
    which is the training starting point.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        c = HIDDEN_CHANNELS
        shapes = {"w1": (c, 1, 3, 3), "b1": (c,), "w2": (c, c, 3, 3), "b2": (c,),
                  "w3": (1, c, 3, 3), "b3": (1,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise StructuralError(f"{name} must have shape {shape}")
            setattr(self, name, arr)

    @classmethod
    def identity_init(cls, seed: int = 0) -> "PriorNet":
        """He-initialized hidden layers, zero biases, zero final layer."""
        rng = np.random.default_rng(seed)
        c = HIDDEN_CHANNELS
        w1 = rng.standard_normal((c, 1, 3, 3)) * np.sqrt(2.0 / 9.0)
        w2 = rng.standard_normal((c, c, 3, 3)) * np.sqrt(2.0 / (c * 9.0))
        return cls(w1=w1, b1=np.zeros(c), w2=w2, b2=np.zeros(c),
                   w3=np.zeros((1, c, 3, 3)), b3=np.zeros(1))

    @classmethod
    def random_init(cls, seed: int = 0, scale: float = 0.1) -> "PriorNet":
        """All layers nonzero; used by gradient checks to exercise every path."""
        net = cls.identity_init(seed)
        rng = np.random.default_rng(seed + 1)
        net.w3 = rng.standard_normal((1, HIDDEN_CHANNELS, 3, 3)) * scale
        net.b3 = rng.standard_normal(1) * scale
        net.b1 = rng.standard_normal(HIDDEN_CHANNELS) * scale
        net.b2 = rng.standard_normal(HIDDEN_CHANNELS) * scale
        return net

    def copy(self) -> "PriorNet":
        return PriorNet(self.w1.copy(), self.b1.copy(), self.w2.copy(),
                        self.b2.copy(), self.w3.copy(), self.b3.copy())


def _conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 correlation: (C_in,H,W) x (C_out,C_in,3,3) -> (C_out,H,W)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4])) + b[:, None, None]


def _conv3_backward(x, w, upstream):
    """Gradients of _conv3 w.r.t. weights, bias, and input."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    grad_w = np.tensordot(upstream, win, axes=([1, 2], [1, 2]))
    grad_b = upstream.sum(axis=(1, 2))
    # input gradient: correlate upstream with the flipped, transposed kernel
    wt = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gp = np.pad(upstream, ((0, 0), (1, 1), (1, 1)))
    gwin = np.lib.stride_tricks.sliding_window_view(gp, (3, 3), axis=(1, 2))
    grad_x = np.tensordot(wt, gwin, axes=([1, 2, 3], [0, 3, 4]))
    return grad_w, grad_b, grad_x


def _prior_stages(net: PriorNet, tex: np.ndarray):
    z1 = _conv3(tex[None], net.w1, net.b1)
    a1 = np.maximum(z1, 0.0)
    z2 = _conv3(a1, net.w2, net.b2)
    a2 = np.maximum(z2, 0.0)
    z3 = _conv3(a2, net.w3, net.b3)
    return z1, a1, z2, a2, z3


def prior_forward(net: PriorNet, tex: np.ndarray, valid_mask=None) -> np.ndarray:
    """Residual correction in texture space; invalid texels zeroed at the end."""
    tex = np.asarray(tex, dtype=np.float64)
    *_, z3 = _prior_stages(net, tex)
    out = tex + z3[0]
    if valid_mask is not None:
        out = np.where(valid_mask, out, 0.0)
    return out


def prior_backward(net: PriorNet, tex: np.ndarray, upstream: np.ndarray,
                   valid_mask=None):
    """Exact reverse-mode gradients of :func:`prior_forward`.

    Returns (weight-gradient dict, gradient w.r.t. the input texture).
    The forward activations are recomputed; ReLU takes subgradient 0 at 0.
    """
    tex = np.asarray(tex, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if valid_mask is not None:
        g = np.where(valid_mask, g, 0.0)
    z1, a1, z2, a2, _ = _prior_stages(net, tex)
    grad_in = g.copy()  # skip connection
    gw3, gb3, ga2 = _conv3_backward(a2, net.w3, g[None])
    gz2 = ga2 * (z2 > 0.0)
    gw2, gb2, ga1 = _conv3_backward(a1, net.w2, gz2)
    gz1 = ga1 * (z1 > 0.0)
    gw1, gb1, gx = _conv3_backward(tex[None], net.w1, gz1)
    grad_in += gx[0]
    grads = {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "w3": gw3, "b3": gb3}
    return grads, grad_in


# ---------------------------------------------------------------------------
# Parameters and loss
# ---------------------------------------------------------------------------

@dataclass
class LearnableParams:
    """Unconstrained parameter tensors; constrained values are derived."""

    lambda_raw: np.ndarray  # per-texel, weight map = softplus(lambda_raw)
    sigma_raw: np.ndarray   # per-view, sigma = scaled sigmoid into [0.05, 5]
    net: PriorNet

    def lambda_map(self) -> np.ndarray:
        return softplus(self.lambda_raw)

    def sigmas(self) -> np.ndarray:
        return sigma_from_raw(self.sigma_raw)

    def copy(self) -> "LearnableParams":
        return LearnableParams(self.lambda_raw.copy(), self.sigma_raw.copy(),
                               self.net.copy())


def init_params(tex_shape, sigma_init, lam_init: float = 0.1,
                seed: int = 0) -> LearnableParams:
    """Weight map at a uniform positive value, sigmas at the assumed blur,
    prior at the identity."""
    lam_raw = np.full(tex_shape, float(softplus_inv(lam_init)))
    sig_raw = sigma_to_raw(np.asarray(sigma_init, dtype=np.float64))
    return LearnableParams(lambda_raw=lam_raw, sigma_raw=np.atleast_1d(sig_raw),
                           net=PriorNet.identity_init(seed))


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError("alpha must be >= 0")
        if self.learning_rate <= 0 and self.learning_rate != 0.0:
            raise ParameterError("learning rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ParameterError("batch size and epochs must be positive")


@dataclass(frozen=True)
class LossTerms:
    data_l1: float
    sigma_reg: float
    total: float


def loss(t_hat, t_gt, sigmas, sigmas0, alpha: float = 1.0, valid_mask=None) -> LossTerms:
    """L1 intensity loss over valid texels plus the blur-width anchor term."""
    t_hat = np.asarray(t_hat, dtype=np.float64)
    t_gt = np.asarray(t_gt, dtype=np.float64)
    if t_hat.shape != t_gt.shape:
        raise StructuralError("prediction and target dims differ")
    diff = t_hat - t_gt
    if valid_mask is not None:
        diff = np.where(valid_mask, diff, 0.0)
    data = float(np.abs(diff).sum())
    reg = float(np.abs(np.asarray(sigmas, np.float64)
                       - np.asarray(sigmas0, np.float64)).sum())
    return LossTerms(data_l1=data, sigma_reg=reg, total=data + alpha * reg)


# ---------------------------------------------------------------------------
# Reverse mode through the unrolled solver
# ---------------------------------------------------------------------------

@dataclass
class SolverGradients:
    """Gradients w.r.t. the solve inputs; sigma entries follow ``view_ids``."""

    d_tex_init: np.ndarray
    d_weights: np.ndarray
    d_sigmas: np.ndarray
    view_ids: tuple


def backprop_through_solver(trace: SolveTrace, upstream: np.ndarray) -> SolverGradients:
    """Reverse accumulation through the recorded primal-dual iterations.

    Clamp and ball projections propagate gradients only strictly inside
    their constraint sets (the boundary counts as outside). The weight-map
    gradient collects the dual-ascent and primal TV terms; the sigma
    gradients collect every blur application, forward and adjoint, via the
    analytic tap derivative.
    """
    if trace is None:
        raise UsageError("run_unrolled must be called with record_states")
    views, chains = trace.views, trace.chains
    lam = trace.weights
    cfg = trace.cfg
    eta, tau = cfg.eta, cfg.tau
    n_views = len(views)
    iters = len(trace.tex_relaxed_in)

    g_tex = np.array(upstream, dtype=np.float64)
    if trace.valid_mask is not None:
        g_tex = np.where(trace.valid_mask, g_tex, 0.0)
    g_texbar = np.zeros_like(g_tex)
    g_q = [np.zeros(c.lr_shape) for c in chains]
    g_p = np.zeros((2,) + g_tex.shape)
    d_lam = np.zeros_like(lam)
    d_sig = np.zeros(n_views)

    for k in range(iters - 1, -1, -1):
        texbar = trace.tex_relaxed_in[k]
        p_pre = trace.dual_tv_pre[k]
        q_pre = trace.dual_data_pre[k]
        p_new = project_l2_ball(p_pre)

        # over-relaxation: texbar_out = 2*tex_out - tex_in
        g_t1 = g_tex + 2.0 * g_texbar
        g_tex_prev = g_tex + g_texbar  # passthrough minus the relaxation term

        # primal update
        if cfg.exact_adjoint_tv:
            gg = grad_op(g_t1)
            g_p_total = g_p - tau * lam[None] * gg
            d_lam += -tau * (gg[0] * p_new[0] + gg[1] * p_new[1])
        else:
            g_p_total = g_p - tau * grad_op(lam * g_t1)
            d_lam += tau * g_t1 * div_op(p_new)

        g_q_total = []
        for i, (v, c) in enumerate(zip(views, chains)):
            q_new = clamp_interval(q_pre[i])
            if v.visibility is not None:
                q_new = np.where(v.visibility, q_new, 0.0)
            z = c.project_warp(g_t1)
            g_q_total.append(g_q[i] - tau * c.blur_down(z))
            d_sig[i] += -tau * np.vdot(q_new, c.blur_down_dsigma(z))

        # TV dual ascent
        inside_p = (np.sqrt(p_pre[0] ** 2 + p_pre[1] ** 2) < 1.0)[None]
        g_p_pre = np.where(inside_p, g_p_total, 0.0)
        gbar = grad_op(texbar)
        d_lam += eta * (gbar[0] * g_p_pre[0] + gbar[1] * g_p_pre[1])
        g_texbar_new = -eta * div_op(lam[None] * g_p_pre)
        g_p = g_p_pre

        # data dual ascent
        new_g_q = []
        for i, (v, c) in enumerate(zip(views, chains)):
            inside_q = np.abs(q_pre[i]) < 1.0
            if v.visibility is not None:
                inside_q &= v.visibility
            g_q_pre = np.where(inside_q, g_q_total[i], 0.0)
            new_g_q.append(g_q_pre)
            g_texbar_new += eta * c.adjoint(g_q_pre)
            d_sig[i] += eta * np.vdot(g_q_pre, c.blur_down_dsigma(c.project_warp(texbar)))
        g_q = new_g_q
        g_tex = g_tex_prev
        g_texbar = g_texbar_new

    d_init = g_tex + g_texbar  # tex_0 and texbar_0 are both the initial atlas
    return SolverGradients(d_tex_init=d_init, d_weights=d_lam, d_sigmas=d_sig,
                           view_ids=tuple(v.view_id for v in views))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def like(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, t=0)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig,
              t: int) -> tuple:
    """One bias-corrected Adam update; returns new params and moments."""
    if t < 1:
        raise ParameterError("step index must be >= 1")
    new_p, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise StructuralError(f"gradient shape mismatch for {k}")
        m = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        new_p[k] = p - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        new_m[k] = m
        new_v[k] = v
    return new_p, AdamState(m=new_m, v=new_v, t=t)


def _params_to_dict(params: LearnableParams) -> dict:
    return {"lambda_raw": params.lambda_raw, "sigma_raw": params.sigma_raw,
            "w1": params.net.w1, "b1": params.net.b1, "w2": params.net.w2,
            "b2": params.net.b2, "w3": params.net.w3, "b3": params.net.b3}


def _dict_to_params(d: dict) -> LearnableParams:
    net = PriorNet(w1=d["w1"], b1=d["b1"], w2=d["w2"], b2=d["b2"],
                   w3=d["w3"], b3=d["b3"])
    return LearnableParams(lambda_raw=d["lambda_raw"], sigma_raw=d["sigma_raw"], net=net)


def fresh_adam_state(params: LearnableParams) -> AdamState:
    """Zero moments shaped like the full learnable parameter set."""
    return AdamState.like(_params_to_dict(params))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSample:
    """One training patch paired with its ground-truth texture window."""

    patch: Patch
    target: np.ndarray


def run_pipeline(tex_init, views, chains, params: LearnableParams,
                 solver_cfg: SolverConfig, valid_mask=None, record: bool = False):
    """Solve then apply the prior: the full reconstruction pipeline."""
    cfg = replace(solver_cfg, record_states=record)
    lam = params.lambda_map()
    if lam.shape != np.shape(tex_init):
        raise StructuralError("weight map does not match the texture")
    t_mva, trace = run_unrolled(tex_init, views, chains, lam, cfg,
                                sigmas=params.sigmas(), valid_mask=valid_mask)
    t_hat = prior_forward(params.net, t_mva, valid_mask)
    return t_hat, t_mva, trace


def _sample_grads(sample: TrainSample, params: LearnableParams, sigma0,
                  solver_cfg: SolverConfig, alpha: float):
    """Loss value and full parameter gradient for one patch."""
    patch = sample.patch
    oy, ox = patch.offset
    ps = patch.tex.shape[0]
    lam_raw = params.lambda_raw[oy:oy + ps, ox:ox + ps]
    local = LearnableParams(lambda_raw=lam_raw, sigma_raw=params.sigma_raw,
                            net=params.net)
    views = [ViewObservation(view_id=pv.view_id, image=pv.lr_crop,
                             visibility=pv.visibility) for pv in patch.views]
    chains = [pv.chain for pv in patch.views]
    t_hat, t_mva, trace = run_pipeline(patch.tex, views, chains, local,
                                       solver_cfg, valid_mask=patch.mask, record=True)
    sig = local.sigmas()
    terms = loss(t_hat, sample.target, sig, sigma0, alpha, patch.mask)

    d_that = np.where(patch.mask, np.sign(t_hat - sample.target), 0.0)
    net_grads, d_tmva = prior_backward(params.net, t_mva, d_that, patch.mask)
    sg = backprop_through_solver(trace, d_tmva)

    d_lam_raw = sg.d_weights * _sigmoid(lam_raw)
    d_sig = np.zeros_like(params.sigma_raw)
    for pos, vid in enumerate(sg.view_ids):
        d_sig[vid] += sg.d_sigmas[pos]
    d_sig += alpha * np.sign(sig - np.asarray(sigma0, np.float64))
    d_sig_raw = d_sig * _dsigma_draw(params.sigma_raw)

    grads = dict(net_grads)
    grads["sigma_raw"] = d_sig_raw
    full_lam = np.zeros_like(params.lambda_raw)
    full_lam[oy:oy + ps, ox:ox + ps] = d_lam_raw
    grads["lambda_raw"] = full_lam
    return terms, grads


def train_epoch(samples, params: LearnableParams, opt_state: AdamState,
                train_cfg: TrainConfig, solver_cfg: SolverConfig, sigma0,
                epoch: int = 0):
    """One pass over the dataset in seeded-shuffle order.

    Per batch, per-patch gradients are averaged (fixed patch order) and a
    single Adam update is applied to every learnable tensor jointly.
    Returns updated params, optimizer state, and mean loss terms.
    """
    if not samples:
        raise UsageError("training dataset is empty")
    rng = np.random.default_rng(train_cfg.seed + epoch)
    order = rng.permutation(len(samples))
    pdict = _params_to_dict(params)
    state = opt_state
    sums = np.zeros(3)
    for start in range(0, len(order), train_cfg.batch_size):
        batch = [samples[i] for i in order[start:start + train_cfg.batch_size]]
        cur = _dict_to_params(pdict)
        results = parallel_map(
            lambda s: _sample_grads(s, cur, sigma0, solver_cfg, train_cfg.alpha),
            batch)
        mean_grads = {k: np.zeros_like(v) for k, v in pdict.items()}
        for terms, grads in results:  # fixed order reduction
            sums += (terms.data_l1, terms.sigma_reg, terms.total)
            for k in mean_grads:
                mean_grads[k] += grads[k] / len(batch)
        pdict, state = adam_step(pdict, mean_grads, state, train_cfg, state.t + 1)
    mean = sums / len(samples)
    return _dict_to_params(pdict), state, LossTerms(*mean)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_PARAM_ORDER = ("lambda_raw", "sigma_raw", "w1", "b1", "w2", "b2", "w3", "b3")


def save_checkpoint(path, params: LearnableParams, state: AdamState):
    """Versioned little-endian binary dump of parameters + Adam moments."""
    d = _params_to_dict(params)
    h, w = params.lambda_raw.shape
    n = params.sigma_raw.size
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQIII", CHECKPOINT_VERSION, state.t, n, h, w))
        for group in (d, state.m, state.v):
            for key in _PARAM_ORDER:
                f.write(np.ascontiguousarray(group[key], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; validates header and sizes."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic", offset=0)
    try:
        version, step, n, h, w = struct.unpack_from("<IQIII", raw, 4)
    except struct.error as e:
        raise ParseError(f"truncated checkpoint header: {e}", offset=4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    c = HIDDEN_CHANNELS
    shapes = {"lambda_raw": (h, w), "sigma_raw": (n,), "w1": (c, 1, 3, 3),
              "b1": (c,), "w2": (c, c, 3, 3), "b2": (c,), "w3": (1, c, 3, 3),
              "b3": (1,)}
    off = 4 + struct.calcsize("<IQIII")
    groups = []
    for _ in range(3):
        g = {}
        for key in _PARAM_ORDER:
            cnt = int(np.prod(shapes[key]))
            end = off + cnt * 8
            if end > len(raw):
                raise ParseError("checkpoint truncated", offset=off)
            g[key] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shapes[key]).copy()
            off = end
        groups.append(g)
    if off != len(raw):
        raise ParseError("trailing bytes after checkpoint payload", offset=off)
    params = _dict_to_params(groups[0])
    state = AdamState(m=groups[1], v=groups[2], t=step)
    return params, state
