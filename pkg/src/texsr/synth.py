"""Synthetic ground-truth scenes rendered through the exact forward model.

Geometry is a textured plane seen under near-identity homographies with
sub-pixel-diverse translations, optional band-limited flow perturbations and
additive Gaussian noise. Because the renderer and the solver share the same
operator code path, a noise-free scene makes the data term vanish exactly at
the true texture — which is what turns these scenes into oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi

from .atlas import TextureAtlas, ViewObservation, build_pullback_lr, init_atlas_average
from .errors import ParameterError, UsageError
from .operators import (
    FlowField,
    ProjectionSpec,
    build_blur,
    build_downsample,
    build_projection,
    build_warp,
    compose_chain,
)
from .solver import SolverConfig, run_unrolled

__all__ = [
    "SceneSpec",
    "GroundTruth",
    "gen_texture",
    "render_views",
    "make_pseudo_gt",
    "bicubic_upsample",
]

VISIBILITY_TOL = 1e-5


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic scene."""

    tex_dims: tuple = (64, 64)
    num_views: int = 8
    factor: int = 2
    sigma_true: tuple | float = 0.8
    noise_std: float = 0.005
    max_translation_px: float = 1.5
    max_rotation_deg: float = 0.5
    max_skew: float = 1e-6
    flow_amplitude: float = 0.0
    flow_handoff: bool = True
    texture_kind: str = "mixed"
    seed: int = 0

    def __post_init__(self):
        h, w = self.tex_dims
        if self.num_views < 1:
            raise ParameterError("at least one view is required")
        if self.noise_std < 0:
            raise ParameterError("noise level must be >= 0")
        if self.factor < 1 or h % self.factor or w % self.factor:
            raise ParameterError(f"dims {h}x{w} not divisible by factor {self.factor}")

    def sigmas(self) -> tuple:
        s = self.sigma_true
        if np.isscalar(s):
            return tuple(float(s) for _ in range(self.num_views))
        if len(s) != self.num_views:
            raise ParameterError("one sigma per view required")
        return tuple(float(v) for v in s)


@dataclass(frozen=True)
class GroundTruth:
    """Exact scene: true texture, per-view chains, clean and noisy images."""

    texture: TextureAtlas
    spec: SceneSpec
    chains: tuple
    views: tuple          # ViewObservation with the *noisy* images
    clean_images: tuple   # bit-exact chain.forward(texture)
    homographies: tuple


# ---------------------------------------------------------------------------
# Texture generation
# ---------------------------------------------------------------------------

def _draw_strokes(canvas: np.ndarray, rng, count: int, value: float):
    """Short random polylines rasterized with 1-texel thickness, then fattened."""
    h, w = canvas.shape
    ink = np.zeros((h, w), dtype=bool)
    for _ in range(count):
        y, x = rng.uniform(4, h - 4), rng.uniform(4, w - 4)
        for _ in range(rng.integers(2, 5)):
            ang = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(4, max(5, min(h, w) // 6))
            y2 = np.clip(y + length * np.sin(ang), 1, h - 2)
            x2 = np.clip(x + length * np.cos(ang), 1, w - 2)
            steps = int(max(abs(y2 - y), abs(x2 - x)) * 2 + 2)
            ys = np.linspace(y, y2, steps).round().astype(int)
            xs = np.linspace(x, x2, steps).round().astype(int)
            ink[ys, xs] = True
            y, x = y2, x2
    ink = ndi.binary_dilation(ink, structure=np.ones((2, 2), dtype=bool))
    canvas[ink] = value
    return canvas


def gen_texture(kind: str, dims, seed: int, cell: int = 4) -> TextureAtlas:
    """Deterministic test texture in [0, 1]; the whole raster is valid.

    Kinds: ``checker`` (alternating cells), ``smoothed-noise`` (band-limited
    noise stretched to full range), ``text-glyphs`` (dark strokes on a light
    background), ``mixed`` (strokes over smoothed noise — the stress case).
    """
    h, w = dims
    if h < 16 or w < 16:
        raise ParameterError("texture dims must be >= 16")
    rng = np.random.default_rng(seed)
    if kind == "checker":
        yy, xx = np.mgrid[0:h, 0:w]
        data = ((yy // cell + xx // cell) % 2).astype(np.float64)
    elif kind == "smoothed-noise":
        data = ndi.gaussian_filter(rng.standard_normal((h, w)), sigma=3.0)
        data = (data - data.min()) / (data.max() - data.min())
    elif kind == "text-glyphs":
        data = np.full((h, w), 0.85)
        data = _draw_strokes(data, rng, count=max(4, h * w // 900), value=0.1)
    elif kind == "mixed":
        base = ndi.gaussian_filter(rng.standard_normal((h, w)), sigma=4.0)
        base = 0.25 + 0.5 * (base - base.min()) / (base.max() - base.min())
        data = _draw_strokes(base, rng, count=max(4, h * w // 900), value=0.08)
        data = _draw_strokes(data, rng, count=max(2, h * w // 1800), value=0.95)
    else:
        raise ParameterError(f"unknown texture kind {kind!r}")
    return TextureAtlas.full(np.clip(data, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Geometry sampling
# ---------------------------------------------------------------------------

def _toroidal_linf(a, b):
    d = np.abs(np.asarray(a) - np.asarray(b)) % 1.0
    return np.minimum(d, 1.0 - d).max()


def _sample_homographies(spec: SceneSpec, rng):
    """Near-identity homographies whose fractional translations pairwise
    differ by at least 1/(4N) px (rejection-sampled) — genuine oversampling."""
    h, w = spec.tex_dims
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    # diversity is vacuous for degenerate zero-translation oracle scenes
    min_sep = 1.0 / (4.0 * spec.num_views) if spec.max_translation_px > 0 else 0.0
    fracs: list = []
    out = []
    for _ in range(spec.num_views):
        for attempt in range(10000):
            tx = rng.uniform(-spec.max_translation_px, spec.max_translation_px)
            ty = rng.uniform(-spec.max_translation_px, spec.max_translation_px)
            f = (tx % 1.0, ty % 1.0)
            if min_sep == 0.0 or all(_toroidal_linf(f, g) >= min_sep for g in fracs):
                fracs.append(f)
                break
        else:
            raise UsageError("could not find sub-pixel-diverse translations")
        ang = math.radians(rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg))
        ca, sa = math.cos(ang), math.sin(ang)
        # rotate about the raster center, then translate, then a tiny
        # projective perturbation
        hom = np.array([
            [ca, -sa, cx - ca * cx + sa * cy + tx],
            [sa, ca, cy - sa * cx - ca * cy + ty],
            [rng.uniform(-spec.max_skew, spec.max_skew),
             rng.uniform(-spec.max_skew, spec.max_skew), 1.0],
        ])
        out.append(hom)
    return out


def _band_limited_flow(dims, amplitude, rng):
    raw = rng.standard_normal(dims + (2,))
    smooth = np.stack([ndi.gaussian_filter(raw[..., k], sigma=8.0) for k in range(2)], axis=-1)
    mag = np.sqrt(smooth[..., 0] ** 2 + smooth[..., 1] ** 2).max()
    if mag > 0:
        smooth *= amplitude / mag
    return smooth


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_views(texture: TextureAtlas, spec: SceneSpec) -> GroundTruth:
    """Render the scene through the exact formation chains.

    Per-view randomness derives from ``spec.seed`` plus the view id, so a
    fixed spec reproduces the scene bit-exactly. Visibility marks LR pixels
    whose full sampling footprint stays on valid texels (the chain applied
    to an all-ones texture returns 1 there).
    """
    th, tw = spec.tex_dims
    if texture.data.shape != (th, tw):
        raise ParameterError("texture does not match the scene dims")
    img_dims = (th, tw)
    lr_dims = (th // spec.factor, tw // spec.factor)
    rng = np.random.default_rng(spec.seed)
    homs = _sample_homographies(spec, rng)
    sigmas = spec.sigmas()
    down = build_downsample(spec.factor, img_dims)
    ones = np.ones((th, tw))

    chains = []
    views = []
    clean = []
    for i in range(spec.num_views):
        view_rng = np.random.default_rng(spec.seed * 1_000_003 + i + 1)
        proj = build_projection(ProjectionSpec.from_homography(homs[i]),
                                (th, tw), img_dims, tex_mask=texture.mask)
        if spec.flow_amplitude > 0:
            flow_arr = _band_limited_flow(img_dims, spec.flow_amplitude, view_rng)
        else:
            flow_arr = np.zeros(img_dims + (2,))
        warp = build_warp(FlowField(flow_arr))
        chain = compose_chain(proj, warp, build_blur(sigmas[i]), down,
                              (th, tw), img_dims, lr_dims)
        b_clean = chain.forward(texture.data)
        vis = chain.forward(ones) >= 1.0 - VISIBILITY_TOL
        noise = view_rng.standard_normal(lr_dims) * spec.noise_std
        b_noisy = np.clip(b_clean + noise, 0.0, 1.0) if spec.noise_std > 0 else b_clean
        stored_flow = flow_arr if spec.flow_handoff else np.zeros_like(flow_arr)
        chains.append(chain)
        clean.append(b_clean)
        views.append(ViewObservation(view_id=i, image=b_noisy, visibility=vis,
                                     flow=stored_flow, chain=f"view_{i:03d}"))
    return GroundTruth(texture=texture, spec=spec, chains=tuple(chains),
                       views=tuple(views), clean_images=tuple(clean),
                       homographies=tuple(homs))


def make_pseudo_gt(views, chains, factor: int = 2, weights=None,
                   cfg: SolverConfig | None = None) -> TextureAtlas:
    """Training target from a long reference-depth solve over all views.

    Meant to be fed many more views than the downstream experiment uses.
    """
    if factor != 2:
        raise ParameterError("pseudo ground truth is generated at factor 2")
    pullbacks = [build_pullback_lr(c, v.visibility) for v, c in zip(views, chains)]
    init = init_atlas_average(views, pullbacks, chains[0].tex_shape)
    if weights is None:
        weights = np.full(chains[0].tex_shape, 0.1)
    if cfg is None:
        cfg = SolverConfig(num_pd_iters=2000)
    tex, _ = run_unrolled(init.data, views, chains, weights, cfg,
                          valid_mask=init.mask)
    return TextureAtlas(np.clip(tex, 0.0, 1.0), init.mask)


def bicubic_upsample(lr: np.ndarray, factor: int) -> np.ndarray:
    """Cubic upsampling aligned with the box-downsampling pixel centers."""
    h, w = lr.shape
    yy, xx = np.mgrid[0:h * factor, 0:w * factor].astype(np.float64)
    coords = np.stack([(yy - (factor - 1) / 2.0) / factor,
                       (xx - (factor - 1) / 2.0) / factor])
    return ndi.map_coordinates(lr, coords, order=3, mode="nearest")


# ---------------------------------------------------------------------------
# Scene bundles on disk
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoadedScene:
    """Scene bundle reconstructed from disk; chains are rebuilt from parts."""

    texture: TextureAtlas
    views: tuple
    chains: tuple
    factor: int
    sigmas: tuple
    meta: dict


def save_bundle(dirpath, gt: GroundTruth):
    """Write gt.pfm, views/, chains/ (projection maps), flows/, scene.cfg."""
    from pathlib import Path

    from . import fileio

    root = Path(dirpath)
    (root / "views").mkdir(parents=True, exist_ok=True)
    (root / "chains").mkdir(exist_ok=True)
    (root / "flows").mkdir(exist_ok=True)
    fileio.write_pfm(root / "gt.pfm", gt.texture.data)
    sigmas = gt.spec.sigmas()
    entries = {
        "width": gt.spec.tex_dims[1],
        "height": gt.spec.tex_dims[0],
        "num_views": gt.spec.num_views,
        "factor": gt.spec.factor,
        "noise_std": repr(gt.spec.noise_std),
        "seed": gt.spec.seed,
        "texture": gt.spec.texture_kind,
        "flow_amplitude": repr(gt.spec.flow_amplitude),
    }
    for i, (view, chain) in enumerate(zip(gt.views, gt.chains)):
        fileio.write_pfm(root / "views" / f"view_{i:03d}.pfm", view.image)
        fileio.write_sparse_map(root / "chains" / f"view_{i:03d}.tsr1", chain.proj)
        flow = view.flow if view.flow is not None else np.zeros(chain.img_shape + (2,))
        fileio.write_pfm(root / "flows" / f"view_{i:03d}.pfm",
                         fileio.flow_to_raster(flow))
        entries[f"sigma_{i:03d}"] = repr(sigmas[i])
    fileio.write_keyvalue(root / "scene.cfg", entries)


def load_bundle(dirpath) -> LoadedScene:
    """Rebuild chains from stored projections, flows, sigmas, and the factor.

    Visibility is recomputed from the chain itself (forward of an all-ones
    texture), so it round-trips without a dedicated file.
    """
    from pathlib import Path

    from . import fileio

    root = Path(dirpath)
    meta = fileio.read_keyvalue(root / "scene.cfg")
    th, tw = int(meta["height"]), int(meta["width"])
    factor = int(meta["factor"])
    n = int(meta["num_views"])
    gt_data = fileio.read_pfm(root / "gt.pfm")
    texture = TextureAtlas.full(gt_data)
    ones = np.ones((th, tw))
    views, chains, sigmas = [], [], []
    for i in range(n):
        sigma = float(meta[f"sigma_{i:03d}"])
        proj = fileio.read_sparse_map(root / "chains" / f"view_{i:03d}.tsr1")
        flow = fileio.raster_to_flow(fileio.read_pfm(root / "flows" / f"view_{i:03d}.pfm"))
        img_dims = flow.shape[:2]
        warp = build_warp(FlowField(flow))
        down = build_downsample(factor, img_dims)
        chain = compose_chain(proj, warp, build_blur(sigma), down,
                              (th, tw), img_dims,
                              (img_dims[0] // factor, img_dims[1] // factor))
        image = np.clip(fileio.read_pfm(root / "views" / f"view_{i:03d}.pfm"), 0.0, 1.0)
        vis = chain.forward(ones) >= 1.0 - VISIBILITY_TOL
        views.append(ViewObservation(view_id=i, image=image, visibility=vis,
                                     flow=flow, chain=f"view_{i:03d}"))
        chains.append(chain)
        sigmas.append(sigma)
    return LoadedScene(texture=texture, views=tuple(views), chains=tuple(chains),
                       factor=factor, sigmas=tuple(sigmas), meta=meta)
