"""Free-water contamination of a region (edema-like) and synthetic phantoms."""

from dataclasses import dataclass, field

import numpy as np

from .core import DiffusionVolume, Region
from .errors import ArgumentError

FREE_WATER_DIFFUSIVITY = 3e-3  # mm^2/s, free water at body temperature


@dataclass
class AlterationConfig:
    """Region, free-water fraction range and diffusivity for the simulator."""

    region: Region = field(default_factory=lambda: Region((0, 0, 0), (15, 20, 10)))
    f_low: float = 0.7
    f_high: float = 0.9
    d_csf: float = FREE_WATER_DIFFUSIVITY
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.f_low <= self.f_high <= 1.0:
            raise ArgumentError("need 0 <= f_low <= f_high <= 1")
        if self.d_csf <= 0:
            raise ArgumentError("d_csf must be positive")


def alter_volume(vol, gtab, cfg: AlterationConfig):
    """Add a free-water compartment to every voxel of the region.

    Per voxel one fraction f ~ U(f_low, f_high) is drawn (counter-based
    Philox stream keyed by the seed) and f * S0 * exp(-b * d_csf) is added
    to every channel, with S0 the mean of the voxel's b=0 channels. Returns
    the altered volume and the drawn fractions (region-shaped array).
    """
    cfg.region.validate_within(vol.spatial_shape)
    b0s = gtab.b0_indices
    if b0s.size < 1:
        raise ArgumentError("volume has no b=0 channel")
    if len(gtab) != vol.n_volumes:
        raise ArgumentError("gradient table does not match volume channels")

    rng = np.random.Generator(np.random.Philox(key=cfg.rng_seed))
    fractions = rng.uniform(cfg.f_low, cfg.f_high, size=cfg.region.shape)

    data = vol.data.copy()
    sl = cfg.region.slices
    s0 = data[sl][..., b0s].mean(axis=-1)
    decay = np.exp(-gtab.bvals * cfg.d_csf)
    data[sl] += fractions[..., None] * s0[..., None] * decay
    return DiffusionVolume(data, vol.voxel_size, vol.affine), fractions


def make_phantom(shape, tensors, gtab, s0=1.0, noise_sigma=0.0, seed=0,
                 voxel_size=(1.0, 1.0, 1.0)):
    """Mono-exponential tensor phantom: S = S0 * exp(-b g'Dg) per voxel.

    ``tensors`` broadcasts to (x, y, z, 3, 3); ``s0`` to (x, y, z). With
    noise_sigma > 0 the signal gets a seeded Rician perturbation
    sqrt((S + e1)^2 + e2^2), e ~ N(0, sigma^2).
    """
    shape = tuple(int(v) for v in shape)
    if len(shape) != 4:
        raise ArgumentError("phantom shape must be 4D")
    if shape[3] != len(gtab):
        raise ArgumentError("phantom channel count does not match gradient table")
    spatial = shape[:3]
    tensors = np.broadcast_to(np.asarray(tensors, dtype=np.float64),
                              spatial + (3, 3))
    s0 = np.broadcast_to(np.asarray(s0, dtype=np.float64), spatial)

    quad = np.einsum("vi,...ij,vj->...v", gtab.bvecs, tensors, gtab.bvecs)
    signal = s0[..., None] * np.exp(-gtab.bvals * quad)
    if noise_sigma > 0:
        rng = np.random.Generator(np.random.Philox(key=seed))
        e1 = rng.normal(0.0, noise_sigma, size=signal.shape)
        e2 = rng.normal(0.0, noise_sigma, size=signal.shape)
        signal = np.sqrt((signal + e1) ** 2 + e2 ** 2)
    affine = np.diag([voxel_size[0], voxel_size[1], voxel_size[2], 1.0])
    return DiffusionVolume(signal, np.asarray(voxel_size, dtype=np.float64),
                           affine)


def diagonal_tensor(d_parallel, d_perp1=None, d_perp2=None):
    """Convenience: diagonal tensor from up to three eigenvalues."""
    if d_perp1 is None:
        d_perp1 = d_parallel
    if d_perp2 is None:
        d_perp2 = d_perp1
    return np.diag([d_parallel, d_perp1, d_perp2]).astype(np.float64)


def rotated_tensor(eigenvalues, rotation):
    """Tensor with the given eigenvalues in the rotated frame: R diag R'."""
    rotation = np.asarray(rotation, dtype=np.float64)
    return rotation @ np.diag(np.asarray(eigenvalues, dtype=np.float64)) @ rotation.T
