"""Scalar evaluation maps: ADC and FA from a log-linear tensor fit, RISH
features from a real even-order spherical harmonics fit."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import lpmv

from .errors import ArgumentError, FitError

MIN_SIGNAL = 1e-10  # signals at or below zero are clipped before the log


@dataclass
class TensorFit:
    """Per-voxel symmetric diffusion tensor (mm^2/s) and log-S0."""

    tensors: np.ndarray  # (x, y, z, 3, 3)
    log_s0: np.ndarray   # (x, y, z)
    mask: np.ndarray     # (x, y, z) bool


@dataclass
class ShFit:
    """Per-voxel real even-order SH coefficients up to ``order``."""

    coeffs: np.ndarray  # (x, y, z, R)
    order: int
    mask: np.ndarray

    def __post_init__(self):
        expected = (self.order + 1) * (self.order + 2) // 2
        if self.coeffs.shape[-1] != expected:
            raise ArgumentError("coefficient count %d does not match order %d"
                                % (self.coeffs.shape[-1], self.order))


def _dti_design(bvals, bvecs):
    g = bvecs
    b = bvals
    return np.column_stack([
        np.ones_like(b),
        -b * g[:, 0] ** 2,
        -b * g[:, 1] ** 2,
        -b * g[:, 2] ** 2,
        -2 * b * g[:, 0] * g[:, 1],
        -2 * b * g[:, 0] * g[:, 2],
        -2 * b * g[:, 1] * g[:, 2],
    ])


def fit_dti(vol, gtab, mask) -> TensorFit:
    """Ordinary least squares on the log signal, all channels at once."""
    n_dwi = gtab.dwi_indices.size
    n_b0 = gtab.b0_indices.size
    if n_dwi < 6 or n_b0 < 1:
        raise FitError("tensor fit needs >= 6 weighted directions and a b=0 "
                       "image, got %d and %d" % (n_dwi, n_b0))
    design = _dti_design(gtab.bvals, gtab.bvecs)
    if np.linalg.matrix_rank(design) < 7:
        raise FitError("rank-deficient tensor design: %d distinct directions "
                       "are not enough" % n_dwi)
    signals = vol.data[mask.mask]
    signals = np.clip(signals, MIN_SIGNAL, None)
    coeffs, *_ = np.linalg.lstsq(design, np.log(signals).T, rcond=None)

    shape = vol.spatial_shape
    tensors = np.zeros(shape + (3, 3))
    log_s0 = np.zeros(shape)
    dxx, dyy, dzz, dxy, dxz, dyz = coeffs[1:7]
    t = np.empty((coeffs.shape[1], 3, 3))
    t[:, 0, 0] = dxx
    t[:, 1, 1] = dyy
    t[:, 2, 2] = dzz
    t[:, 0, 1] = t[:, 1, 0] = dxy
    t[:, 0, 2] = t[:, 2, 0] = dxz
    t[:, 1, 2] = t[:, 2, 1] = dyz
    tensors[mask.mask] = t
    log_s0[mask.mask] = coeffs[0]
    return TensorFit(tensors, log_s0, mask.mask.copy())


def adc(fit: TensorFit):
    """Mean diffusivity: trace(D)/3 per voxel."""
    return np.trace(fit.tensors, axis1=-2, axis2=-1) / 3.0


def fa(fit: TensorFit):
    """Fractional anisotropy from the tensor eigenvalues, clamped to [0, 1]."""
    out = np.zeros(fit.tensors.shape[:3])
    evals = np.linalg.eigvalsh(fit.tensors[fit.mask])
    sq = (evals * evals).sum(axis=1)
    mean = evals.mean(axis=1, keepdims=True)
    dev = ((evals - mean) ** 2).sum(axis=1)
    vals = np.zeros(evals.shape[0])
    nz = sq > 0
    vals[nz] = np.sqrt(1.5 * dev[nz] / sq[nz])
    out[fit.mask] = np.clip(vals, 0.0, 1.0)
    return out


def sh_basis(order, directions):
    """Real, antipodally symmetric SH design matrix (even degrees only).

    Row layout per direction; columns ordered by (l ascending, m = -l..l):
    m < 0 -> sqrt(2) * K * P_l^{|m|} * cos(|m| phi), m = 0 -> K * P_l^0,
    m > 0 -> sqrt(2) * K * P_l^m * sin(m phi).
    """
    if order < 0 or order % 2 != 0:
        raise ArgumentError("SH order must be even and >= 0")
    dirs = np.asarray(directions, dtype=np.float64)
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ArgumentError("zero direction vector in SH fit")
    dirs = dirs / norms
    theta = np.arccos(np.clip(dirs[:, 2], -1.0, 1.0))
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    cos_t = np.cos(theta)

    cols = []
    for l in range(0, order + 1, 2):
        for m in range(-l, l + 1):
            am = abs(m)
            k = math.sqrt((2 * l + 1) / (4 * math.pi)
                          * math.factorial(l - am) / math.factorial(l + am))
            plm = lpmv(am, l, cos_t)
            if m < 0:
                cols.append(math.sqrt(2) * k * plm * np.cos(am * phi))
            elif m == 0:
                cols.append(k * plm)
            else:
                cols.append(math.sqrt(2) * k * plm * np.sin(m * phi))
    return np.column_stack(cols)


def fit_sh(vol, gtab, mask, order=2, lb_weight=0.0) -> ShFit:
    """Least-squares SH fit of the weighted signal (b=0 channels excluded).

    lb_weight > 0 adds Laplace-Beltrami regularization.
    """
    dwis = gtab.dwi_indices
    n_coef = (order + 1) * (order + 2) // 2
    if dwis.size < n_coef:
        raise FitError("SH fit of order %d needs >= %d directions, got %d"
                       % (order, n_coef, dwis.size))
    basis = sh_basis(order, gtab.bvecs[dwis])
    if np.linalg.matrix_rank(basis) < n_coef:
        raise FitError("SH design is rank deficient for these directions")
    signals = vol.data[mask.mask][:, dwis]
    if lb_weight > 0.0:
        degrees = np.concatenate([[l] * (2 * l + 1)
                                  for l in range(0, order + 1, 2)])
        lb = np.diag((degrees * (degrees + 1.0)) ** 2)
        lhs = basis.T @ basis + lb_weight * lb
        coeffs = np.linalg.solve(lhs, basis.T @ signals.T)
    else:
        coeffs, *_ = np.linalg.lstsq(basis, signals.T, rcond=None)

    out = np.zeros(vol.spatial_shape + (n_coef,))
    out[mask.mask] = coeffs.T
    return ShFit(out, order, mask.mask.copy())


def rish(fit: ShFit, degree):
    """Rotationally invariant SH energy at one even degree: sum_m c_{l,m}^2."""
    if degree % 2 != 0 or degree < 0 or degree > fit.order:
        raise ArgumentError("RISH degree must be even and <= fit order %d"
                            % fit.order)
    start = degree * (degree - 1) // 2 if degree > 0 else 0
    block = fit.coeffs[..., start:start + 2 * degree + 1]
    return (block * block).sum(axis=-1)
