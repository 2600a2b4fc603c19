"""Domain types and file I/O for diffusion volumes, gradient tables and masks."""

from dataclasses import dataclass, field

import numpy as np

from . import nifti
from .errors import ArgumentError, FormatError

DEFAULT_B0_THRESHOLD = 50.0  # s/mm^2; nominal "b=0" images often carry a small b


@dataclass
class DiffusionVolume:
    """A 4D diffusion-weighted dataset: (x, y, z, volume) plus voxel geometry."""

    data: np.ndarray
    voxel_size: np.ndarray = field(default_factory=lambda: np.ones(3))
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ArgumentError("volume data must be 4D, got %dD" % self.data.ndim)
        if min(self.data.shape) < 1:
            raise ArgumentError("all dimensions must be >= 1")
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        self.affine = np.asarray(self.affine, dtype=np.float64).reshape(4, 4)

    @property
    def spatial_shape(self):
        return self.data.shape[:3]

    @property
    def n_volumes(self):
        return self.data.shape[3]


@dataclass
class GradientTable:
    """b-values (s/mm^2) and unit gradient directions for each volume."""

    bvals: np.ndarray
    bvecs: np.ndarray
    b0_threshold: float = DEFAULT_B0_THRESHOLD

    def __post_init__(self):
        self.bvals = np.asarray(self.bvals, dtype=np.float64).reshape(-1)
        self.bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if self.bvecs.ndim != 2 or self.bvecs.shape[1] != 3:
            raise ArgumentError("bvecs must be v x 3, got %s" % (self.bvecs.shape,))
        if self.bvecs.shape[0] != self.bvals.shape[0]:
            raise ArgumentError("bvals (%d) and bvecs (%d) disagree"
                                % (self.bvals.shape[0], self.bvecs.shape[0]))
        if np.any(self.bvals < 0):
            raise ArgumentError("negative b-value")
        norms = np.linalg.norm(self.bvecs, axis=1)
        weighted = self.bvals > self.b0_threshold
        bad = weighted & (np.abs(norms - 1.0) > 1e-3)
        if np.any(bad):
            raise ArgumentError(
                "non-unit b-vector for weighted volume(s) %s"
                % np.flatnonzero(bad).tolist())
        if not np.any(~weighted):
            raise ArgumentError("no b=0 volume (threshold %g)" % self.b0_threshold)

    @property
    def b0_indices(self):
        return np.flatnonzero(self.bvals <= self.b0_threshold)

    @property
    def dwi_indices(self):
        return np.flatnonzero(self.bvals > self.b0_threshold)

    def __len__(self):
        return self.bvals.shape[0]


@dataclass
class BrainMask:
    """Boolean voxel mask matching a volume's spatial shape."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(bool)
        if self.mask.ndim != 3:
            raise ArgumentError("mask must be 3D")
        if not self.mask.any():
            raise ArgumentError("empty mask")

    @property
    def n_voxels(self):
        return int(self.mask.sum())


@dataclass
class Region:
    """Axis-aligned voxel box: offset + shape."""

    offset: tuple
    shape: tuple

    def __post_init__(self):
        self.offset = tuple(int(v) for v in self.offset)
        self.shape = tuple(int(v) for v in self.shape)
        if len(self.offset) != 3 or len(self.shape) != 3:
            raise ArgumentError("region offset and shape must be 3-vectors")
        if int(np.prod(self.shape)) <= 0:
            raise ArgumentError("region shape must have positive volume")
        if any(o < 0 for o in self.offset):
            raise ArgumentError("region offset must be non-negative")

    def validate_within(self, spatial_shape):
        for o, s, n in zip(self.offset, self.shape, spatial_shape):
            if o + s > n:
                raise ArgumentError(
                    "region %s+%s exceeds volume shape %s"
                    % (self.offset, self.shape, tuple(spatial_shape)))

    @property
    def slices(self):
        return tuple(slice(o, o + s) for o, s in zip(self.offset, self.shape))

    @property
    def n_voxels(self):
        return int(np.prod(self.shape))


def read_bvals_bvecs(bvals_path, bvecs_path):
    """Read FSL-style whitespace text: one row of v b-values, 3 rows of v b-vectors."""
    try:
        bvals = np.loadtxt(bvals_path, dtype=np.float64, ndmin=1).reshape(-1)
        bvecs = np.loadtxt(bvecs_path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError("unparseable bvals/bvecs text: %s" % exc) from exc
    if bvecs.shape[0] == 3 and bvecs.shape[1] != 3:
        bvecs = bvecs.T
    elif bvecs.ndim == 2 and bvecs.shape == (3, 3):
        bvecs = bvecs.T  # FSL convention: rows are x/y/z
    if bvecs.ndim != 2 or bvecs.shape[1] != 3:
        raise FormatError("bvecs must be 3 x v, got %s" % (bvecs.shape,))
    if bvecs.shape[0] != bvals.shape[0]:
        raise FormatError("bvals has %d entries but bvecs has %d columns"
                          % (bvals.shape[0], bvecs.shape[0]))
    return bvals, bvecs


def save_bvals_bvecs(gtab, bvals_path, bvecs_path):
    """Write FSL-style bvals/bvecs text with full float precision."""
    with open(bvals_path, "w") as f:
        f.write(" ".join("%.17g" % v for v in gtab.bvals) + "\n")
    with open(bvecs_path, "w") as f:
        for row in gtab.bvecs.T:
            f.write(" ".join("%.17g" % v for v in row) + "\n")


def load_volume(path, bvals_path, bvecs_path, b0_threshold=DEFAULT_B0_THRESHOLD):
    """Load a 4D NIfTI plus its gradient table.

    Raises FormatError when the header, the volume count or the gradient
    files are inconsistent; gradient-table invariants are enforced, never
    silently repaired.
    """
    data, affine, voxel_size = nifti.read_nifti(path)
    if data.ndim != 4:
        raise FormatError("expected a 4D volume, got %dD" % data.ndim)
    if not np.all(np.isfinite(data)):
        raise FormatError("volume contains NaN or Inf values")
    bvals, bvecs = read_bvals_bvecs(bvals_path, bvecs_path)
    if bvals.shape[0] != data.shape[3]:
        raise FormatError("volume has %d channels but bvals lists %d"
                          % (data.shape[3], bvals.shape[0]))
    try:
        gtab = GradientTable(bvals, bvecs, b0_threshold=b0_threshold)
    except ArgumentError as exc:
        raise FormatError("invalid gradient table: %s" % exc) from exc
    return DiffusionVolume(data, voxel_size, affine), gtab


def save_volume(vol, path):
    """Write a volume as float32 NIfTI (gzipped when the path ends in .gz)."""
    nifti.write_nifti(path, vol.data, vol.affine, vol.voxel_size,
                      dtype=np.float32)


def save_map(data, path, like=None):
    """Write a 3D scalar map, copying geometry from ``like`` when given."""
    affine = like.affine if like is not None else np.eye(4)
    voxel_size = like.voxel_size if like is not None else None
    nifti.write_nifti(path, data, affine, voxel_size, dtype=np.float32)


def load_map(path):
    """Read a 3D scalar map (trailing singleton dimensions are dropped)."""
    data, _, _ = nifti.read_nifti(path)
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise FormatError("expected a 3D map, got %dD" % data.ndim)
    return data


def load_mask(path, vol):
    """Load a 3D mask whose spatial shape matches ``vol``; nonzero means inside."""
    data, _, _ = nifti.read_nifti(path)
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise FormatError("mask must be 3D, got %dD" % data.ndim)
    if data.shape != vol.spatial_shape:
        raise FormatError("mask shape %s does not match volume %s"
                          % (data.shape, vol.spatial_shape))
    return BrainMask(data != 0)
