"""End-to-end pipelines: multi-scanner dictionary training, reconstruction of
a source dataset against a fixed target dictionary, and cross-resolution
mapping by coding against a spatially downsampled copy of the atoms while
reconstructing with the full-size ones (shared coefficients)."""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dictionary import Dictionary, TrainConfig, train
from .errors import ArgumentError
from .lasso import PathConfig, sparse_code_batch
from .patching import PatchConfig, extract_patches, pool_patch_sets, reassemble, retarget


@dataclass
class HarmonizeConfig:
    """Patch geometry, selection settings and the optional resolution ratio."""

    patch_cfg: PatchConfig = field(default_factory=PatchConfig)
    path_cfg: PathConfig = field(default_factory=PathConfig)
    upsample_ratio: Optional[tuple] = None  # per-axis target/source ratio
    rng_seed: int = 0

    def __post_init__(self):
        if self.upsample_ratio is not None:
            ratio = tuple(float(r) for r in np.atleast_1d(self.upsample_ratio))
            if len(ratio) == 1:
                ratio = ratio * 3
            if len(ratio) != 3 or any(r <= 0 for r in ratio):
                raise ArgumentError("upsample_ratio must be 1 or 3 positive values")
            self.upsample_ratio = ratio


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def train_target_dictionary(datasets, patch_cfg: PatchConfig,
                            train_cfg: TrainConfig, dataset_ids=None):
    """Pool patches from every (volume, gradient table, mask) triple and train.

    Dataset identity plays no role during training; pooling several scanners
    builds a neutral reconstruction space.
    """
    if not datasets:
        raise ArgumentError("need at least one dataset")
    sets = [extract_patches(vol, gtab, mask, patch_cfg)
            for vol, gtab, mask in datasets]
    pooled = sets[0] if len(sets) == 1 else pool_patch_sets(sets)
    if dataset_ids is None:
        dataset_ids = ["dataset%d" % i for i in range(len(datasets))]
    return train(pooled, train_cfg, dataset_ids=dataset_ids)


def _axis_weights(n_src, n_dst, mode):
    """(n_dst, n_src) interpolation weights on the normalized patch cube."""
    w = np.zeros((n_dst, n_src))
    if mode == "trilinear":
        for j in range(n_dst):
            t = (j + 0.5) * n_src / n_dst - 0.5
            t = min(max(t, 0.0), n_src - 1.0)
            i0 = int(np.floor(t))
            i1 = min(i0 + 1, n_src - 1)
            f = t - i0
            w[j, i0] += 1.0 - f
            w[j, i1] += f
    elif mode == "mean":
        for j in range(n_dst):
            lo, hi = j / n_dst, (j + 1) / n_dst
            for i in range(n_src):
                a, b = i / n_src, (i + 1) / n_src
                overlap = max(0.0, min(hi, b) - max(lo, a))
                w[j, i] = overlap * n_dst
    else:
        raise ArgumentError("unknown resampling mode %r" % mode)
    return w


def downsample_dictionary(D: Dictionary, target_spatial, mode="trilinear"):
    """Resample each atom's spatial block to a smaller size, per channel.

    Columns are deliberately NOT renormalized so that coefficients fitted
    against the small dictionary remain valid for the full-size
    reconstruction.
    """
    s = D.patch_shape[0]
    C = D.n_channels
    target = tuple(int(v) for v in np.atleast_1d(target_spatial))
    if len(target) == 1:
        target = target * 3
    if len(target) != 3:
        raise ArgumentError("target_spatial must be 1 or 3 integers")
    if any(t > s for t in target) or any(t < 1 for t in target):
        raise ArgumentError("target spatial size %s must lie in [1, %d]"
                            % (target, s))
    wx = _axis_weights(s, target[0], mode)
    wy = _axis_weights(s, target[1], mode)
    wz = _axis_weights(s, target[2], mode)
    # (p, C, s, s, s) channel-major blocks, resampled one axis at a time
    blocks = D.atoms.T.reshape(D.p, C, s, s, s)
    blocks = np.einsum("ax,pcxyz->pcayz", wx, blocks)
    blocks = np.einsum("by,pcayz->pcabz", wy, blocks)
    blocks = np.einsum("cz,pcabz->pcabc", wz, blocks.astype(np.float64))
    atoms = blocks.reshape(D.p, -1).T
    prov = dict(D.provenance)
    prov["downsampled_from"] = int(s)
    return Dictionary(np.ascontiguousarray(atoms),
                      (target[0], target[1], target[2], C),
                      unit_norm=False, provenance=prov)


def sparse_code_patches(D_code: Dictionary, patches, path_cfg: PathConfig,
                        seed=0):
    """Sparse-code every patch column against a fixed coding dictionary."""
    cfg = PathConfig(**{**path_cfg.__dict__, "rng_seed": seed})
    return sparse_code_batch(D_code.atoms, patches.matrix, cfg)


def harmonize(vol, gtab, mask, D: Dictionary, cfg: HarmonizeConfig):
    """Reconstruct a source dataset with a fixed target dictionary.

    Same resolution: each patch is replaced by D @ alpha with alpha selected
    per patch. With upsample_ratio the coefficients are fitted against the
    spatially downsampled dictionary and the exact same alphas multiply the
    full-size atoms; the output grid is the source grid scaled by the ratio.
    """
    pc = cfg.patch_cfg
    if pc.n_channels != D.n_channels:
        raise ArgumentError(
            "patch config yields %d channels but dictionary expects %d"
            % (pc.n_channels, D.n_channels))
    s_src = pc.spatial_size
    s_tgt = D.patch_shape[0]
    ratio = cfg.upsample_ratio
    if ratio is None:
        if s_src != s_tgt:
            raise ArgumentError(
                "source patch size %d does not match dictionary %d "
                "(set upsample_ratio for cross-resolution mapping)"
                % (s_src, s_tgt))
        D_code = D
    else:
        mapped = tuple(_round_half_up(r * s_src) for r in ratio)
        if mapped != (s_tgt,) * 3:
            raise ArgumentError(
                "ratio %s maps source patches to %s but the dictionary has "
                "spatial size %d" % (ratio, mapped, s_tgt))
        D_code = downsample_dictionary(D, (s_src,) * 3)

    patches = extract_patches(vol, gtab, mask, pc)
    codes = sparse_code_patches(D_code, patches, cfg.path_cfg, seed=cfg.rng_seed)
    recon = D.atoms @ codes.alphas

    if ratio is None:
        out = reassemble(patches, recon)
    else:
        src_shape = vol.spatial_shape
        tgt_shape = tuple(_round_half_up(r * n) for r, n in zip(ratio, src_shape))
        corners = np.empty_like(patches.corners)
        for ax in range(3):
            corners[:, ax] = np.floor(ratio[ax] * patches.corners[:, ax] + 0.5)
        corners = np.minimum(corners, np.asarray(tgt_shape) - s_tgt)
        scale = np.diag([1.0 / ratio[0], 1.0 / ratio[1], 1.0 / ratio[2], 1.0])
        target = retarget(
            patches, recon, D.patch_shape, corners,
            tgt_shape + (vol.n_volumes,),
            affine=patches.affine @ scale,
            voxel_size=patches.voxel_size / np.asarray(ratio),
        )
        out = reassemble(target, recon, target.volume_shape)
    return out
