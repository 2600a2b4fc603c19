"""Spatial-angular block extraction and overlap-averaged reassembly.

A block groups one b=0 channel, a center DWI and its angular neighbors at a
common spatial location. Each s x s x s patch of a block is vectorized
channel-by-channel into one column of the patch matrix, scaled to unit
variance; reassembly inverts the process and averages overlapping patches.
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import BrainMask, DiffusionVolume, GradientTable
from .errors import ArgumentError, ExtractionError

DEGENERATE_STD = 1e-8  # columns at or below this keep scale 1 and are stored verbatim


@dataclass
class PatchConfig:
    """Geometry of the extracted blocks.

    n_neighbors is the angular neighborhood size A; with include_b0 the
    block has C = A + 2 channels (b0 + center + A neighbors). Setting
    center_counts_as_neighbor treats the center DWI as one of the A
    neighbors instead (C = A + 1).
    """

    spatial_size: int = 3
    n_neighbors: int = 5
    include_b0: bool = True
    stride: int = 1
    rng_seed: int = 0
    require_full_mask: bool = False
    center_counts_as_neighbor: bool = False

    def __post_init__(self):
        if self.spatial_size < 1:
            raise ArgumentError("spatial_size must be >= 1")
        if self.n_neighbors < 0:
            raise ArgumentError("n_neighbors must be >= 0")
        if self.stride < 1:
            raise ArgumentError("stride must be >= 1")
        if self.center_counts_as_neighbor and self.n_neighbors < 1:
            raise ArgumentError("center_counts_as_neighbor needs n_neighbors >= 1")

    @property
    def n_channels(self):
        extra = 1 if self.include_b0 else 0
        if self.center_counts_as_neighbor:
            return self.n_neighbors + extra
        return self.n_neighbors + 1 + extra


@dataclass
class PatchSet:
    """Vectorized blocks with the metadata needed to invert the extraction.

    matrix is m x n with m = s^3 * C. corners/block_ids/block_channels record
    where each column came from; volume_means holds the per-channel means
    subtracted before extraction. Pooled multi-dataset sets used only for
    training carry volume_means=None and cannot be reassembled.
    """

    matrix: np.ndarray
    scales: np.ndarray
    volume_means: Optional[np.ndarray]
    corners: np.ndarray
    block_ids: np.ndarray
    block_channels: np.ndarray
    patch_shape: tuple
    volume_shape: Optional[tuple] = None
    affine: Optional[np.ndarray] = None
    voxel_size: Optional[np.ndarray] = None

    @property
    def n_patches(self):
        return self.matrix.shape[1]

    @property
    def m(self):
        return self.matrix.shape[0]

    def origins(self):
        """Yield (corner, channel list) per column, the spatial provenance."""
        for i in range(self.n_patches):
            yield (tuple(self.corners[i]),
                   self.block_channels[self.block_ids[i]].tolist())


def angular_neighbors(gtab: GradientTable, center: int, n_neighbors: int):
    """Indices of the DWIs closest to ``center`` on the (antipodal) sphere.

    Distance is arccos(min(1, |u.v|)); ties break toward the smaller index.
    """
    dwis = gtab.dwi_indices
    if center not in dwis:
        raise ArgumentError("center %d is not a diffusion-weighted volume" % center)
    others = dwis[dwis != center]
    if n_neighbors > others.size:
        raise ArgumentError("requested %d neighbors but only %d other DWIs"
                            % (n_neighbors, others.size))
    u = gtab.bvecs[center]
    u = u / np.linalg.norm(u)
    v = gtab.bvecs[others]
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    cosines = np.minimum(np.abs(v @ u), 1.0)
    theta = np.arccos(cosines)
    order = np.lexsort((others, theta))
    return others[order[:n_neighbors]].tolist()


def build_blocks(gtab, cfg, rng=None):
    """Channel table (n_blocks x C): one row per center DWI.

    Row layout: [b0 choice if any, center (unless it counts as a neighbor),
    neighbors in increasing angular distance]. The b0 channel is drawn per
    block from the available b0 volumes with the seeded RNG.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    dwis = gtab.dwi_indices
    if dwis.size == 0:
        raise ArgumentError("gradient table has no diffusion-weighted volumes")
    n_extra = cfg.n_neighbors - 1 if cfg.center_counts_as_neighbor else cfg.n_neighbors
    if n_extra > dwis.size - 1:
        raise ArgumentError(
            "block needs %d angular neighbors but only %d DWIs are available"
            % (n_extra, dwis.size))
    b0s = gtab.b0_indices
    rows = []
    for d in dwis:
        chans = []
        if cfg.include_b0:
            chans.append(int(b0s[rng.integers(0, b0s.size)]))
        chans.append(int(d))
        chans.extend(angular_neighbors(gtab, int(d), n_extra))
        rows.append(chans)
    return np.asarray(rows, dtype=np.intp)


def _kept_corners(mask, s, stride, require_full):
    windows = sliding_window_view(mask, (s, s, s))
    hit = windows.all(axis=(3, 4, 5)) if require_full else windows.any(axis=(3, 4, 5))
    hit = hit[::stride, ::stride, ::stride]
    idx = np.argwhere(hit) * stride
    return idx


def extract_patches(vol: DiffusionVolume, gtab: GradientTable, mask: BrainMask,
                    cfg: PatchConfig) -> PatchSet:
    """Extract all blocks of ``vol`` into a unit-variance column matrix."""
    s = cfg.spatial_size
    if min(vol.spatial_shape) < s:
        raise ArgumentError("volume spatial shape %s smaller than patch size %d"
                            % (vol.spatial_shape, s))
    if mask.mask.shape != vol.spatial_shape:
        raise ArgumentError("mask shape does not match volume")
    if len(gtab) != vol.n_volumes:
        raise ArgumentError("gradient table does not match volume channels")

    blocks = build_blocks(gtab, cfg)
    corners = _kept_corners(mask.mask, s, cfg.stride, cfg.require_full_mask)
    if corners.shape[0] == 0:
        raise ExtractionError("mask intersects no patch position")

    means = vol.data[mask.mask].mean(axis=0)
    centered = vol.data - means

    n_pos = corners.shape[0]
    n_blocks = blocks.shape[0]
    C = blocks.shape[1]
    m = s ** 3 * C
    # windows per channel, gathered once and reused across blocks
    win = {}
    for ch in np.unique(blocks):
        w = sliding_window_view(centered[..., ch], (s, s, s))
        win[int(ch)] = w[corners[:, 0], corners[:, 1], corners[:, 2]].reshape(n_pos, -1)

    matrix = np.empty((m, n_pos * n_blocks), dtype=np.float64)
    for b in range(n_blocks):
        cols = slice(b * n_pos, (b + 1) * n_pos)
        for ci, ch in enumerate(blocks[b]):
            matrix[ci * s ** 3:(ci + 1) * s ** 3, cols] = win[int(ch)].T

    scales = matrix.std(axis=0)
    degenerate = scales <= DEGENERATE_STD
    scales[degenerate] = 1.0
    matrix /= scales

    return PatchSet(
        matrix=matrix,
        scales=scales,
        volume_means=means,
        corners=np.tile(corners, (n_blocks, 1)),
        block_ids=np.repeat(np.arange(n_blocks, dtype=np.intp), n_pos),
        block_channels=blocks,
        patch_shape=(s, s, s, C),
        volume_shape=vol.data.shape,
        affine=vol.affine.copy(),
        voxel_size=vol.voxel_size.copy(),
    )


def pool_patch_sets(sets):
    """Concatenate patch sets from several datasets for joint training.

    The pooled set keeps column scales but loses reassembly metadata
    (volume means differ per dataset); it is only valid as training input.
    """
    if not sets:
        raise ArgumentError("no patch sets to pool")
    C = {ps.patch_shape[3] for ps in sets}
    if len(C) != 1:
        raise ArgumentError("patch channel counts differ across datasets: %s"
                            % sorted(C))
    shapes = {ps.patch_shape for ps in sets}
    if len(shapes) != 1:
        raise ArgumentError("patch shapes differ across datasets: %s"
                            % sorted(shapes))
    offset = 0
    block_ids = []
    blocks = []
    for ps in sets:
        block_ids.append(ps.block_ids + offset)
        blocks.append(ps.block_channels)
        offset += ps.block_channels.shape[0]
    return PatchSet(
        matrix=np.concatenate([ps.matrix for ps in sets], axis=1),
        scales=np.concatenate([ps.scales for ps in sets]),
        volume_means=None,
        corners=np.concatenate([ps.corners for ps in sets]),
        block_ids=np.concatenate(block_ids),
        block_channels=np.concatenate(blocks),
        patch_shape=sets[0].patch_shape,
    )


def reassemble(patches: PatchSet, reconstructed: np.ndarray,
               target_shape=None) -> DiffusionVolume:
    """Undo extraction: unscale columns, place at their origins, average overlaps.

    Voxels covered by no patch get the restored channel mean only. When the
    same DWI channel appears in several blocks all contributions are averaged
    together.
    """
    if patches.volume_means is None:
        raise ArgumentError("pooled patch sets cannot be reassembled")
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if reconstructed.shape != patches.matrix.shape:
        raise ArgumentError("reconstruction shape %s does not match patches %s"
                            % (reconstructed.shape, patches.matrix.shape))
    if target_shape is None:
        target_shape = patches.volume_shape
    target_shape = tuple(int(v) for v in target_shape)
    if len(target_shape) != 4:
        raise ArgumentError("target shape must be 4D")

    s = patches.patch_shape[0]
    X, Y, Z, V = target_shape
    if min(X, Y, Z) < s:
        raise ArgumentError("target shape %s smaller than patch size %d"
                            % (target_shape, s))
    n_spatial = X * Y * Z
    dx, dy, dz = np.meshgrid(np.arange(s), np.arange(s), np.arange(s),
                             indexing="ij")
    offsets = (dx * (Y * Z) + dy * Z + dz).ravel()

    unscaled = reconstructed * patches.scales
    acc = np.zeros((V, n_spatial))
    cnt = np.zeros((V, n_spatial))
    n_blocks = patches.block_channels.shape[0]
    for b in range(n_blocks):
        cols = np.flatnonzero(patches.block_ids == b)
        if cols.size == 0:
            continue
        corners = patches.corners[cols]
        if np.any(corners + s > (X, Y, Z)) or np.any(corners < 0):
            raise ArgumentError("patch corners fall outside the target shape")
        base = corners[:, 0] * (Y * Z) + corners[:, 1] * Z + corners[:, 2]
        idx = (base[:, None] + offsets[None, :]).ravel()
        ones = np.ones(idx.shape[0])
        for ci, ch in enumerate(patches.block_channels[b]):
            vals = unscaled[ci * s ** 3:(ci + 1) * s ** 3, cols].T.ravel()
            acc[ch] += np.bincount(idx, weights=vals, minlength=n_spatial)
            cnt[ch] += np.bincount(idx, weights=ones, minlength=n_spatial)

    covered = cnt > 0
    acc[covered] /= cnt[covered]
    acc += patches.volume_means[:, None]
    data = acc.T.reshape(X, Y, Z, V)

    affine = patches.affine if patches.affine is not None else np.eye(4)
    voxel = patches.voxel_size if patches.voxel_size is not None else np.ones(3)
    return DiffusionVolume(data, voxel, affine)


def retarget(patches: PatchSet, matrix: np.ndarray, patch_shape, corners,
             volume_shape, affine=None, voxel_size=None) -> PatchSet:
    """Patch set on a different output grid sharing scales/means/blocks."""
    return replace(
        patches, matrix=matrix, patch_shape=tuple(patch_shape),
        corners=np.asarray(corners, dtype=np.intp),
        volume_shape=tuple(volume_shape),
        affine=patches.affine if affine is None else affine,
        voxel_size=patches.voxel_size if voxel_size is None else voxel_size,
    )
