"""Texture atlas data model, initialization, mask dilation, patch extraction.

The atlas is a single-channel (luma) raster over the texture domain with a
validity mask flagging texels that carry real content. Initialization
averages the input views pulled back onto the texture grid; patches cut the
atlas into fixed 64x64 training windows together with consistent crops of
every view's operators and data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp

from ._threads import parallel_map
from .errors import ParameterError, StructuralError
from .operators import SparseLinearMap, ViewChain, build_downsample, compose_chain

__all__ = [
    "TextureAtlas",
    "ViewObservation",
    "Patch",
    "PatchView",
    "PatchSet",
    "init_atlas_average",
    "dilate_mask",
    "extract_patches",
    "build_pullback_lr",
    "build_pullback_hr",
    "PATCH_SIZE",
    "IMG_CROP_SIZE",
]

PATCH_SIZE = 64
IMG_CROP_SIZE = 200


@dataclass(frozen=True)
class TextureAtlas:
    """High-resolution texture raster with a chart-membership mask.

    Values are float64 in [0, 1]; texels outside the mask are stored as 0.
    """

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        m = np.asarray(self.mask, dtype=bool)
        if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ParameterError("atlas must be a 2-D raster with positive dimensions")
        if m.shape != d.shape:
            raise StructuralError("mask shape must match the data raster")
        if not np.all(np.isfinite(d)):
            raise ParameterError("atlas values must be finite")
        d = np.where(m, d, 0.0)
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "mask", m)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def full(cls, data: np.ndarray) -> "TextureAtlas":
        """Atlas whose whole raster is valid."""
        data = np.asarray(data, dtype=np.float64)
        return cls(data, np.ones(data.shape, dtype=bool))


@dataclass(frozen=True)
class ViewObservation:
    """One calibrated LR observation with visibility and optional flow.

    ``flow`` lives on the pre-downsample image grid, shape (H, W, 2) with
    (dy, dx) components. ``chain`` is an identifier naming the composed
    formation operator for this view; the operator objects travel separately.
    """

    view_id: int
    image: np.ndarray
    visibility: np.ndarray | None = None
    flow: np.ndarray | None = None
    chain: str = ""

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 2:
            raise ParameterError("view image must be a 2-D raster")
        if not np.all(np.isfinite(img)):
            raise ParameterError("view image must be finite")
        if img.min(initial=0.0) < -1e-9 or img.max(initial=0.0) > 1 + 1e-9:
            raise ParameterError("view intensities must lie in [0, 1]")
        object.__setattr__(self, "image", np.clip(img, 0.0, 1.0))
        if self.visibility is not None:
            vis = np.asarray(self.visibility, dtype=bool)
            if vis.shape != img.shape:
                raise StructuralError("visibility shape must match the image")
            object.__setattr__(self, "visibility", vis)
        if self.flow is not None:
            f = np.asarray(self.flow, dtype=np.float64)
            if f.ndim != 3 or f.shape[2] != 2:
                raise ParameterError("flow must have shape (H, W, 2)")
            object.__setattr__(self, "flow", f)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _rownorm_transpose(m: sp.spmatrix, col_keep: np.ndarray | None) -> sp.csr_matrix:
    """Transpose, drop masked columns, normalize each surviving row to sum 1."""
    m = sp.csr_matrix(m)
    if col_keep is not None:
        keep = sp.diags(col_keep.astype(np.float64))
        m = keep @ m
    t = sp.csr_matrix(m.T)
    sums = np.asarray(t.sum(axis=1)).ravel()
    seen = sums > 1e-12
    inv = np.where(seen, 1.0, 0.0) / np.where(seen, sums, 1.0)
    return sp.diags(inv) @ t


def build_pullback_lr(chain: ViewChain, lr_visibility: np.ndarray | None = None) -> SparseLinearMap:
    """LR-image-to-texture sampling map for atlas initialization.

    Row-sum-normalized transpose of the geometric part of the chain
    (downsample . warp . projection; the blur is not part of the pullback).
    Invisible LR pixels are dropped before normalization; texels seen by no
    visible pixel get an all-zero row.
    """
    geo = chain.down.scipy() @ (chain.warp.scipy() @ chain.proj.scipy())
    keep = None if lr_visibility is None else np.asarray(lr_visibility, bool).ravel()
    return SparseLinearMap.from_scipy(_rownorm_transpose(geo, keep))


def build_pullback_hr(chain: ViewChain) -> SparseLinearMap:
    """HR-image-to-texture sampling map (no downsampling leg)."""
    geo = chain.warp.scipy() @ chain.proj.scipy()
    return SparseLinearMap.from_scipy(_rownorm_transpose(geo, None))


def init_atlas_average(views, pullback_maps, tex_shape=None) -> TextureAtlas:
    """Average each texel over the views in which it is visible.

    Contributions are accumulated in ascending view-id order, so any
    permutation of the inputs yields a bit-identical atlas. Texels visible
    in no view get value 0 and an invalid mask entry. ``tex_shape`` may be
    omitted for square textures.
    """
    if not views:
        raise StructuralError("at least one view is required")
    if len(views) != len(pullback_maps):
        raise StructuralError("one pullback map per view required")
    tex_n = pullback_maps[0].rows
    if tex_shape is None:
        side = int(round(np.sqrt(tex_n)))
        if side * side != tex_n:
            raise StructuralError("non-square texture: pass tex_shape explicitly")
        tex_shape = (side, side)
    if tex_shape[0] * tex_shape[1] != tex_n:
        raise StructuralError("tex_shape inconsistent with pullback maps")
    acc = np.zeros(tex_n)
    count = np.zeros(tex_n)
    for i in sorted(range(len(views)), key=lambda i: views[i].view_id):
        v, m = views[i], pullback_maps[i]
        if m.rows != tex_n:
            raise StructuralError("pullback maps disagree on the texture size")
        if m.cols != v.image.size:
            raise StructuralError(
                f"pullback expects {m.cols} LR pixels, view has {v.image.size}")
        acc += m.apply(v.image.ravel())
        count += (m.row_sums() > 0).astype(np.float64)
    seen = count > 0
    data = np.where(seen, acc / np.maximum(count, 1.0), 0.0)
    return TextureAtlas(data.reshape(tex_shape), seen.reshape(tex_shape))


# ---------------------------------------------------------------------------
# Mask dilation
# ---------------------------------------------------------------------------

def dilate_mask(mask: np.ndarray, radius: int = 8) -> np.ndarray:
    """Morphological dilation with a (2r+1)-square structuring element.

    Radius 0 is the identity. The default exceeds the prior network's
    receptive-field radius so valid texels never see raw background.
    """
    if radius < 0:
        raise ParameterError("dilation radius must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    structure = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndi.binary_dilation(mask, structure=structure)


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchView:
    """Per-view crop of one training patch: data, visibility, operators."""

    view_id: int
    lr_crop: np.ndarray
    visibility: np.ndarray
    chain: ViewChain
    img_origin: tuple
    flow_crop: np.ndarray | None = None


@dataclass(frozen=True)
class Patch:
    """One 64x64 texture window plus the matching crops of every view."""

    offset: tuple
    tex: np.ndarray
    mask: np.ndarray
    views: tuple


@dataclass(frozen=True)
class PatchSet:
    """All extracted patches, row-major by window offset."""

    patches: tuple
    factor: int
    patch_size: int = PATCH_SIZE
    crop_size: int = IMG_CROP_SIZE
    warning: str | None = None

    def __len__(self):
        return len(self.patches)


def _patch_bbox_rows(proj_csc, cols, img_shape):
    """Bounding box of image pixels whose projection rows touch the columns."""
    rows = proj_csc[:, cols].tocoo().row
    if rows.size == 0:
        return None
    ys, xs = np.divmod(rows, img_shape[1])
    return ys.min(), ys.max(), xs.min(), xs.max()


def _align_origin(lo, hi, limit, crop, factor):
    """Factor-aligned window origin covering [lo, hi] inside [0, limit)."""
    min_origin = max(0, hi + 1 - crop)
    max_origin = min(limit - crop, lo)
    if min_origin > max_origin:
        raise StructuralError("patch footprint exceeds the image crop size")
    origin = (lo + hi + 1 - crop) // 2
    origin = max(min_origin, min(max_origin, origin))
    origin -= origin % factor  # LR-grid alignment, rounds toward lo
    if origin < min_origin:
        origin += factor
        if origin > max_origin:
            raise StructuralError("cannot align the image crop to the LR grid")
    return origin


def _place_crop(bbox, img_shape, crop, factor):
    """200-square crop containing the bbox, aligned to the LR pixel grid."""
    y0, y1, x0, x1 = bbox
    ih, iw = img_shape
    if ih < crop or iw < crop:
        raise StructuralError(
            f"image grid {ih}x{iw} smaller than the {crop}x{crop} patch crop")
    return (_align_origin(y0, y1, ih, crop, factor),
            _align_origin(x0, x1, iw, crop, factor))


def _slice_map(m: SparseLinearMap, row_idx, col_idx) -> SparseLinearMap:
    sub = m.scipy()[row_idx][:, col_idx]
    return SparseLinearMap.from_scipy(sub)


def _crop_view(view, chain, offset, patch_size, crop, factor, tex_shape):
    """Build the per-patch operator chain and data crop for one view."""
    oy, ox = offset
    th, tw = tex_shape
    ih, iw = chain.img_shape
    dy, dx = np.mgrid[0:patch_size, 0:patch_size]
    tex_cols = ((oy + dy) * tw + (ox + dx)).ravel()

    proj_csc = chain.proj.scipy().tocsc()
    bbox = _patch_bbox_rows(proj_csc, tex_cols, chain.img_shape)
    if bbox is None:
        # patch projects nowhere into this view; pin the crop to the origin
        bbox = (0, 0, 0, 0)
    cy, cx = _place_crop(bbox, chain.img_shape, crop, factor)

    gy, gx = np.mgrid[cy:cy + crop, cx:cx + crop]
    img_rows = (gy * iw + gx).ravel()
    proj_p = _slice_map(chain.proj, img_rows, tex_cols)
    warp_p = _slice_map(chain.warp, img_rows, img_rows)
    down_p = build_downsample(factor, (crop, crop))
    lr_crop_sz = crop // factor
    chain_p = compose_chain(proj_p, warp_p, chain.kernel, down_p,
                            (patch_size, patch_size), (crop, crop),
                            (lr_crop_sz, lr_crop_sz))

    # visibility: HR pixels whose cropped rows carry full sampling weight,
    # eroded by the blur radius so renormalization and support never differ
    # from the full-scene render, then required over whole factor-blocks.
    full_w = (np.abs(proj_p.row_sums() - 1.0) < 1e-9) & \
             (np.abs(warp_p.row_sums() - 1.0) < 1e-9)
    r = chain.kernel.radius
    eroded = ndi.minimum_filter(full_w.reshape(crop, crop).astype(np.uint8),
                                size=2 * r + 1, mode="constant", cval=0).astype(bool)
    blocks = eroded.reshape(lr_crop_sz, factor, lr_crop_sz, factor)
    vis = blocks.all(axis=(1, 3))

    ly, lx = cy // factor, cx // factor
    lr_crop = view.image[ly:ly + lr_crop_sz, lx:lx + lr_crop_sz]
    if view.visibility is not None:
        vis = vis & view.visibility[ly:ly + lr_crop_sz, lx:lx + lr_crop_sz]
    flow_crop = None
    if view.flow is not None:
        flow_crop = view.flow[cy:cy + crop, cx:cx + crop]
    return PatchView(view_id=view.view_id, lr_crop=np.array(lr_crop),
                     visibility=vis, chain=chain_p, img_origin=(cy, cx),
                     flow_crop=flow_crop)


def extract_patches(atlas: TextureAtlas, views, chains, factor: int,
                    stride: int = 32) -> PatchSet:
    """Cut the atlas into 64x64 windows with per-view crops of 200x200
    image pixels and 200/factor-square LR pixels.

    Windows are placed on the stride grid, fully inside the atlas, ordered
    row-major by offset; windows with no valid texel are skipped. An atlas
    smaller than one window yields an empty set with a warning status.
    """
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    if factor not in (2, 4):
        raise ParameterError("patch extraction supports factors 2 and 4")
    h, w = atlas.data.shape
    if h < PATCH_SIZE or w < PATCH_SIZE:
        return PatchSet(patches=(), factor=factor,
                        warning=f"atlas {h}x{w} smaller than {PATCH_SIZE}x{PATCH_SIZE}")

    offsets = [(oy, ox)
               for oy in range(0, h - PATCH_SIZE + 1, stride)
               for ox in range(0, w - PATCH_SIZE + 1, stride)
               if atlas.mask[oy:oy + PATCH_SIZE, ox:ox + PATCH_SIZE].any()]

    def cut(offset):
        oy, ox = offset
        pviews = tuple(
            _crop_view(v, c, offset, PATCH_SIZE, IMG_CROP_SIZE, factor, atlas.data.shape)
            for v, c in zip(views, chains))
        return Patch(offset=offset,
                     tex=np.array(atlas.data[oy:oy + PATCH_SIZE, ox:ox + PATCH_SIZE]),
                     mask=np.array(atlas.mask[oy:oy + PATCH_SIZE, ox:ox + PATCH_SIZE]),
                     views=pviews)

    patches = parallel_map(cut, offsets)
    return PatchSet(patches=tuple(patches), factor=factor)
