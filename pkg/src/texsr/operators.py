"""Image-formation operators as sparse linear maps with exact adjoints.

One low-resolution observation is produced from the high-resolution texture
by the chain

    lr = D K W P tex

where P resamples the texture onto the image grid (perspective/homography),
W compensates registration error by resampling along a flow field, K is a
separable Gaussian blur with renormalized boundary handling, and D is an
s x s box-average downsampler. Every builder returns either a
:class:`SparseLinearMap` or a :class:`BlurKernel`, and every operator comes
with an exact adjoint so that the primal-dual solver and reverse-mode
differentiation see a consistent pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError, StructuralError

__all__ = [
    "SparseLinearMap",
    "BlurKernel",
    "ProjectionSpec",
    "FlowField",
    "ViewChain",
    "build_projection",
    "build_warp",
    "build_blur",
    "blur_apply",
    "blur_adjoint",
    "blur_sigma_gradient",
    "blur_sigma_gradient_adjoint",
    "build_downsample",
    "compose_chain",
    "power_iteration",
]

SIGMA_MIN = 0.05
SIGMA_MAX = 5.0

_BOUNDS_TOL = 1e-9


# ---------------------------------------------------------------------------
# Sparse maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SparseLinearMap:
    """Row-compressed sparse matrix with validated structure.

    Column indices must be strictly increasing within each row (which also
    rules out duplicates) and lie in [0, cols); values must be finite.
    Mat-vec and its transpose action are delegated to scipy's CSR kernels,
    which accumulate per row in index order, so results are deterministic.
    """

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    _fwd: sp.csr_matrix = field(init=False, repr=False, compare=False)
    _adj: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        indptr = np.ascontiguousarray(self.indptr, dtype=np.int64)
        indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "data", data)
        if self.rows < 0 or self.cols < 0:
            raise StructuralError("negative dimensions")
        if indptr.shape != (self.rows + 1,):
            raise StructuralError("row offset array must have length rows+1")
        if indptr[0] != 0 or indptr[-1] != indices.size or np.any(np.diff(indptr) < 0):
            raise StructuralError("row offsets must be monotone from 0 to nnz")
        if indices.size != data.size:
            raise StructuralError("indices and values length mismatch")
        if indices.size:
            if indices.min() < 0 or indices.max() >= self.cols:
                raise StructuralError("column index out of range")
            # strictly increasing inside each row; row starts are exempt
            d = np.diff(indices)
            starts = np.zeros(indices.size, dtype=bool)
            starts[indptr[1:-1][indptr[1:-1] < indices.size]] = True
            if np.any((d <= 0) & ~starts[1:]):
                raise StructuralError("column indices must be sorted and unique per row")
        if not np.all(np.isfinite(data)):
            raise StructuralError("non-finite value in sparse map")
        fwd = sp.csr_matrix((data, indices, indptr), shape=(self.rows, self.cols))
        object.__setattr__(self, "_fwd", fwd)
        object.__setattr__(self, "_adj", fwd.T.tocsr())

    # -- constructors --------------------------------------------------

    @classmethod
    def from_scipy(cls, m) -> "SparseLinearMap":
        m = sp.csr_matrix(m)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def identity(cls, n: int) -> "SparseLinearMap":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    # -- queries --------------------------------------------------------

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        return self._fwd.toarray()

    def scipy(self) -> sp.csr_matrix:
        return self._fwd

    def row_sums(self) -> np.ndarray:
        return np.asarray(self._fwd.sum(axis=1)).ravel()

    # -- application ----------------------------------------------------

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Exact sparse mat-vec; x has length ``cols``."""
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.cols:
            raise StructuralError(f"expected input of length {self.cols}, got {x.size}")
        return self._fwd @ x

    def apply_adjoint(self, y: np.ndarray) -> np.ndarray:
        """Transpose action; y has length ``rows``."""
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.size != self.rows:
            raise StructuralError(f"expected input of length {self.rows}, got {y.size}")
        return self._adj @ y


def _bilinear_rows(sample_y, sample_x, grid_hw, valid=None):
    """CSR pieces for bilinear sampling at the given continuous positions.

    One row per sample point. Points outside the grid (beyond a 1e-9 slack)
    give all-zero rows, as do points whose nonzero-weight footprint touches
    a texel flagged invalid. In-bounds rows sum to 1 up to rounding.
    """
    gh, gw = grid_hw
    sy = np.asarray(sample_y, dtype=np.float64).ravel()
    sx = np.asarray(sample_x, dtype=np.float64).ravel()
    n = sy.size
    ok = np.isfinite(sy) & np.isfinite(sx)
    inb = (
        ok
        & (sx >= -_BOUNDS_TOL)
        & (sx <= gw - 1 + _BOUNDS_TOL)
        & (sy >= -_BOUNDS_TOL)
        & (sy <= gh - 1 + _BOUNDS_TOL)
    )
    cx = np.clip(np.where(ok, sx, 0.0), 0.0, gw - 1.0)
    cy = np.clip(np.where(ok, sy, 0.0), 0.0, gh - 1.0)
    if gw >= 2:
        x0 = np.minimum(np.floor(cx), gw - 2).astype(np.int64)
    else:
        x0 = np.zeros(n, dtype=np.int64)
    if gh >= 2:
        y0 = np.minimum(np.floor(cy), gh - 2).astype(np.int64)
    else:
        y0 = np.zeros(n, dtype=np.int64)
    fx = cx - x0
    fy = cy - y0

    w = np.empty((n, 4))
    w[:, 0] = (1.0 - fy) * (1.0 - fx)
    w[:, 1] = (1.0 - fy) * fx
    w[:, 2] = fy * (1.0 - fx)
    w[:, 3] = fy * fx
    w[~inb] = 0.0

    x1 = np.minimum(x0 + 1, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    cols = np.empty((n, 4), dtype=np.int64)
    cols[:, 0] = y0 * gw + x0
    cols[:, 1] = y0 * gw + x1
    cols[:, 2] = y1 * gw + x0
    cols[:, 3] = y1 * gw + x1

    if valid is not None:
        vflat = np.asarray(valid, dtype=bool).ravel()
        bad = ((w > 0.0) & ~vflat[cols]).any(axis=1)
        w[bad] = 0.0

    keep = w != 0.0
    counts = keep.sum(axis=1)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, cols[keep], w[keep]


# ---------------------------------------------------------------------------
# Projection and warp
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProjectionSpec:
    """Texture-plane-to-image mapping: a 3x3 homography, or a precomputed map.

    Exactly one of ``homography`` (synthetic planar mode) and ``matrix``
    (import mode, e.g. loaded from a TSR1 file) is set. Homographies act on
    homogeneous (x, y, 1) with x the column coordinate.
    """

    homography: np.ndarray | None = None
    matrix: SparseLinearMap | None = None

    def __post_init__(self):
        if (self.homography is None) == (self.matrix is None):
            raise ParameterError("exactly one of homography/matrix must be given")
        if self.homography is not None:
            h = np.asarray(self.homography, dtype=np.float64)
            if h.shape != (3, 3):
                raise ParameterError("homography must be 3x3")
            if abs(np.linalg.det(h)) <= 1e-12:
                raise ParameterError("homography is not invertible")
            object.__setattr__(self, "homography", h)

    @classmethod
    def from_homography(cls, h) -> "ProjectionSpec":
        return cls(homography=np.asarray(h, dtype=np.float64))

    @classmethod
    def from_map(cls, m: SparseLinearMap) -> "ProjectionSpec":
        return cls(matrix=m)


def build_projection(spec: ProjectionSpec, tex_dims, img_dims, tex_mask=None) -> SparseLinearMap:
    """Sparse map taking the texture raster to the image grid.

    Each image-pixel row holds the bilinear weights of the texture location
    the pixel maps back to. Rows with out-of-texture footprints (or
    footprints touching ``tex_mask``-invalid texels) are all-zero.
    """
    th, tw = tex_dims
    ih, iw = img_dims
    if th < 1 or tw < 1 or ih < 1 or iw < 1:
        raise ParameterError("grid dimensions must be >= 1")
    if spec.matrix is not None:
        m = spec.matrix
        if m.rows != ih * iw or m.cols != th * tw:
            raise StructuralError(
                f"imported projection is {m.rows}x{m.cols}, expected {ih * iw}x{th * tw}"
            )
        return m
    hinv = np.linalg.inv(spec.homography)
    yy, xx = np.mgrid[0:ih, 0:iw]
    xs = hinv[0, 0] * xx + hinv[0, 1] * yy + hinv[0, 2]
    ys = hinv[1, 0] * xx + hinv[1, 1] * yy + hinv[1, 2]
    ws = hinv[2, 0] * xx + hinv[2, 1] * yy + hinv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sample_x = np.where(np.abs(ws) > 1e-12, xs / ws, np.nan)
        sample_y = np.where(np.abs(ws) > 1e-12, ys / ws, np.nan)
    indptr, indices, data = _bilinear_rows(sample_y, sample_x, (th, tw), tex_mask)
    return SparseLinearMap(ih * iw, th * tw, indptr, indices, data)


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement (dy, dx) on the pre-downsample image grid."""

    data: np.ndarray
    max_magnitude: float = 3.0

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[2] != 2:
            raise ParameterError("flow must have shape (h, w, 2)")
        if not np.all(np.isfinite(d)):
            raise ParameterError("flow contains non-finite values")
        mag = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)
        if mag.max(initial=0.0) > self.max_magnitude + 1e-12:
            raise ParameterError(
                f"flow magnitude {mag.max():.3f} exceeds the {self.max_magnitude} px bound"
            )
        object.__setattr__(self, "data", d)

    @property
    def shape(self):
        return self.data.shape[:2]

    @classmethod
    def zero(cls, dims) -> "FlowField":
        h, w = dims
        return cls(np.zeros((h, w, 2)))


def build_warp(flow: FlowField) -> SparseLinearMap:
    """Bilinear resampling at pixel + flow(pixel) on the image grid."""
    h, w = flow.shape
    yy, xx = np.mgrid[0:h, 0:w]
    sample_y = yy + flow.data[..., 0]
    sample_x = xx + flow.data[..., 1]
    indptr, indices, data = _bilinear_rows(sample_y, sample_x, (h, w))
    return SparseLinearMap(h * w, h * w, indptr, indices, data)


# ---------------------------------------------------------------------------
# Gaussian blur
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlurKernel:
    """Separable truncated Gaussian with per-pixel boundary renormalization.

    ``taps`` are the normalized 1-D weights over [-radius, radius];
    ``dtaps`` their analytic derivative with respect to sigma
    (renormalization included). Near a raster edge the out-of-range taps
    are dropped and the remainder rescaled per output pixel, so constants
    pass through unchanged.
    """

    sigma: float
    radius: int
    taps: np.ndarray
    dtaps: np.ndarray
    _edge_cache: dict = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=np.float64)
        dt = np.asarray(self.dtaps, dtype=np.float64)
        if t.shape != (2 * self.radius + 1,) or dt.shape != t.shape:
            raise ParameterError("taps must have length 2*radius+1")
        if abs(t.sum() - 1.0) > 1e-12:
            raise ParameterError("taps must sum to 1")
        if not np.allclose(t, t[::-1], rtol=0, atol=0):
            raise ParameterError("taps must be symmetric")
        object.__setattr__(self, "taps", t)
        object.__setattr__(self, "dtaps", dt)

    def _edge(self, n: int):
        """Per-position sums of in-range taps and their sigma-derivatives."""
        got = self._edge_cache.get(n)
        if got is None:
            s = _corr1d(np.ones(n), self.taps)
            ds = _corr1d(np.ones(n), self.dtaps)
            got = (s, ds)
            self._edge_cache[n] = got
        return got


def build_blur(sigma: float) -> BlurKernel:
    """Normalized Gaussian taps at the given width, truncated at ceil(3*sigma)."""
    if not (sigma > 0.0) or not math.isfinite(sigma):
        raise ParameterError(f"sigma must be positive, got {sigma}")
    radius = max(1, math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    u = np.exp(-(k**2) / (2.0 * sigma**2))
    du = u * (k**2) / sigma**3
    s = u.sum()
    ds = du.sum()
    taps = u / s
    dtaps = du / s - taps * (ds / s)
    return BlurKernel(sigma=float(sigma), radius=radius, taps=taps, dtaps=dtaps)


def _corr1d(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Truncated correlation along the last axis, out-of-range taps dropped."""
    n = x.shape[-1]
    r = taps.size // 2
    out = np.zeros_like(x, dtype=np.float64)
    for j, w in enumerate(taps):
        shift = j - r
        lo_out, hi_out = max(0, -shift), n - max(0, shift)
        if lo_out >= hi_out:
            continue
        lo_in, hi_in = max(0, shift), n - max(0, -shift)
        out[..., lo_out:hi_out] += w * x[..., lo_in:hi_in]
    return out


def _axis_apply(fn, raster: np.ndarray, axis: int) -> np.ndarray:
    if axis == 1:
        return fn(raster)
    return fn(raster.T).T


def _pass(kernel: BlurKernel, raster, axis, adjoint=False):
    """One renormalized 1-D blur pass: out = C(x)/s, or its transpose C(x/s)."""
    n = raster.shape[axis]
    s, _ = kernel._edge(n)

    def run(arr):
        if adjoint:
            return _corr1d(arr / s, kernel.taps)
        return _corr1d(arr, kernel.taps) / s

    return _axis_apply(run, raster, axis)


def _pass_dsigma(kernel: BlurKernel, raster, axis, adjoint=False):
    """Sigma-derivative of one renormalized pass (or its transpose)."""
    n = raster.shape[axis]
    s, ds = kernel._edge(n)

    def run(arr):
        if adjoint:
            return _corr1d(arr / s, kernel.dtaps) - _corr1d(arr * ds / (s * s), kernel.taps)
        return (_corr1d(arr, kernel.dtaps) * s - _corr1d(arr, kernel.taps) * ds) / (s * s)

    return _axis_apply(run, raster, axis)


def blur_apply(kernel: BlurKernel, raster: np.ndarray) -> np.ndarray:
    """Separable Gaussian blur; constants are preserved exactly."""
    raster = np.asarray(raster, dtype=np.float64)
    return _pass(kernel, _pass(kernel, raster, axis=1), axis=0)


def blur_adjoint(kernel: BlurKernel, raster: np.ndarray) -> np.ndarray:
    """Exact transpose of :func:`blur_apply` (not symmetric near edges)."""
    raster = np.asarray(raster, dtype=np.float64)
    return _pass(kernel, _pass(kernel, raster, axis=0, adjoint=True), axis=1, adjoint=True)


def blur_sigma_gradient(kernel: BlurKernel, raster: np.ndarray) -> np.ndarray:
    """Directional derivative of blur_apply with respect to sigma.

    Product rule over the two separable passes; the truncation radius is held
    fixed, which is the almost-everywhere derivative.
    """
    raster = np.asarray(raster, dtype=np.float64)
    bx = _pass(kernel, raster, axis=1)
    dx = _pass_dsigma(kernel, raster, axis=1)
    return _pass_dsigma(kernel, bx, axis=0) + _pass(kernel, dx, axis=0)


def blur_sigma_gradient_adjoint(kernel: BlurKernel, raster: np.ndarray) -> np.ndarray:
    """Exact transpose of :func:`blur_sigma_gradient`."""
    raster = np.asarray(raster, dtype=np.float64)
    a = _pass(kernel, _pass_dsigma(kernel, raster, axis=0, adjoint=True), axis=1, adjoint=True)
    b = _pass_dsigma(kernel, _pass(kernel, raster, axis=0, adjoint=True), axis=1, adjoint=True)
    return a + b


# ---------------------------------------------------------------------------
# Downsampling
# ---------------------------------------------------------------------------

def build_downsample(factor: int, hr_dims) -> SparseLinearMap:
    """Box average over non-overlapping factor x factor blocks.

    Every row has factor**2 entries of value 1/factor**2. Factor 1 is the
    identity (used by identity-chain scenes).
    """
    h, w = hr_dims
    s = int(factor)
    if s < 1:
        raise ParameterError(f"downsample factor must be >= 1, got {factor}")
    if h % s or w % s:
        raise ParameterError(f"dimensions {h}x{w} not divisible by factor {s}")
    lh, lw = h // s, w // s
    n = lh * lw
    by, bx = np.divmod(np.arange(n), lw)
    dy, dx = np.divmod(np.arange(s * s), s)
    cols = ((by[:, None] * s + dy[None, :]) * w + bx[:, None] * s + dx[None, :]).ravel()
    data = np.full(n * s * s, 1.0 / (s * s))
    indptr = np.arange(n + 1, dtype=np.int64) * (s * s)
    return SparseLinearMap(n, h * w, indptr, cols, data)


# ---------------------------------------------------------------------------
# Composed per-view chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewChain:
    """Lazy composition D K W P for one view, with shape bookkeeping.

    ``forward`` maps a texture raster to an LR raster, ``adjoint`` the exact
    transpose. The intermediate stages are exposed separately because the
    reverse-mode pass through the solver needs them.
    """

    proj: SparseLinearMap
    warp: SparseLinearMap
    kernel: BlurKernel
    down: SparseLinearMap
    tex_shape: tuple
    img_shape: tuple
    lr_shape: tuple

    def with_sigma(self, sigma: float) -> "ViewChain":
        """Same geometry, different blur width."""
        return ViewChain(self.proj, self.warp, build_blur(sigma), self.down,
                         self.tex_shape, self.img_shape, self.lr_shape)

    # -- stages ----------------------------------------------------------

    def project_warp(self, tex: np.ndarray) -> np.ndarray:
        return self.warp.apply(self.proj.apply(tex.ravel())).reshape(self.img_shape)

    def backproject(self, img: np.ndarray) -> np.ndarray:
        return self.proj.apply_adjoint(self.warp.apply_adjoint(img.ravel())).reshape(self.tex_shape)

    def blur_down(self, img: np.ndarray) -> np.ndarray:
        return self.down.apply(blur_apply(self.kernel, img).ravel()).reshape(self.lr_shape)

    def blur_down_dsigma(self, img: np.ndarray) -> np.ndarray:
        return self.down.apply(blur_sigma_gradient(self.kernel, img).ravel()).reshape(self.lr_shape)

    def up_unblur(self, lr: np.ndarray) -> np.ndarray:
        return blur_adjoint(self.kernel, self.down.apply_adjoint(lr.ravel()).reshape(self.img_shape))

    # -- full chain --------------------------------------------------------

    def forward(self, tex: np.ndarray) -> np.ndarray:
        return self.blur_down(self.project_warp(tex))

    def adjoint(self, lr: np.ndarray) -> np.ndarray:
        return self.backproject(self.up_unblur(lr))

    def forward_dsigma(self, tex: np.ndarray) -> np.ndarray:
        """d(forward)/d(sigma) applied to a fixed texture."""
        return self.blur_down_dsigma(self.project_warp(tex))


def compose_chain(proj: SparseLinearMap, warp: SparseLinearMap, kernel: BlurKernel,
                  down: SparseLinearMap, tex_shape, img_shape, lr_shape) -> ViewChain:
    """Validate stage dimensions and assemble a :class:`ViewChain`.

    Order of application is projection, warp, blur, downsample.
    """
    th, tw = tex_shape
    ih, iw = img_shape
    lh, lw = lr_shape
    if proj.cols != th * tw or proj.rows != ih * iw:
        raise StructuralError(
            f"projection is {proj.rows}x{proj.cols}, expected {ih * iw}x{th * tw}")
    if warp.rows != ih * iw or warp.cols != ih * iw:
        raise StructuralError(f"warp is {warp.rows}x{warp.cols}, expected square {ih * iw}")
    if down.cols != ih * iw or down.rows != lh * lw:
        raise StructuralError(
            f"downsampler is {down.rows}x{down.cols}, expected {lh * lw}x{ih * iw}")
    return ViewChain(proj, warp, kernel, down,
                     (int(th), int(tw)), (int(ih), int(iw)), (int(lh), int(lw)))


def power_iteration(forward, adjoint, n_inputs: int, iters: int = 60, seed: int = 0) -> float:
    """Largest singular value estimate of a linear operator given as callables."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n_inputs)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = np.asarray(forward(x)).ravel()
        est = np.linalg.norm(y)  # Rayleigh estimate ||A x|| with unit x
        if est == 0.0:
            return 0.0
        z = np.asarray(adjoint(y)).ravel()
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return 0.0
        x = z / nz
    return float(est)
