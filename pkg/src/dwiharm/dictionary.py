"""Online dictionary learning with a parameter-free block-coordinate update.

Training alternates per-batch sparse coding (automatic per-patch penalty,
see lasso) with a closed-form column update driven by the accumulated
statistics A = sum a a' and B = sum x a'. Columns are kept at exact unit
l2-norm; unused (dead) atoms are replaced by fresh random patches.
"""

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .errors import ArgumentError, FormatError
from .lasso import PathConfig, sparse_code_batch

DEAD_ATOM_THRESHOLD = 1e-10
UNIT_NORM_TOL = 1e-10
MAGIC = b"DLD1"
FORMAT_VERSION = 1


@dataclass
class Dictionary:
    """m x p atom matrix with the block geometry it was trained on."""

    atoms: np.ndarray
    patch_shape: tuple
    unit_norm: bool = True
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.atoms = np.ascontiguousarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2:
            raise ArgumentError("atoms must be 2D")
        self.patch_shape = tuple(int(v) for v in self.patch_shape)
        if len(self.patch_shape) != 4:
            raise ArgumentError("patch_shape must be (s, s, s, C)")
        if int(np.prod(self.patch_shape)) != self.atoms.shape[0]:
            raise ArgumentError("patch_shape %s does not match %d atom rows"
                                % (self.patch_shape, self.atoms.shape[0]))
        if self.unit_norm:
            norms = np.linalg.norm(self.atoms, axis=0)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise ArgumentError("unit_norm dictionary has non-unit columns")

    @property
    def m(self):
        return self.atoms.shape[0]

    @property
    def p(self):
        return self.atoms.shape[1]

    @property
    def n_channels(self):
        return self.patch_shape[3]


@dataclass
class TrainConfig:
    """Iteration count, batch size and the per-patch selection used in training."""

    n_iterations: int = 500
    batch_size: int = 32
    path_cfg: PathConfig = field(default_factory=lambda: PathConfig(selection="cv"))
    rng_seed: int = 0
    n_atoms: Optional[int] = None  # default p = 2m
    holdout_size: int = 0          # >0: track the held-out objective per iteration

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ArgumentError("n_iterations must be >= 1")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.holdout_size < 0:
            raise ArgumentError("holdout_size must be >= 0")


def _draw_patch_columns(matrix, n_draw, rng):
    """Column indices of nonzero patches, redrawing zero-norm picks."""
    norms = np.linalg.norm(matrix, axis=0)
    nonzero = np.flatnonzero(norms > 0.0)
    if nonzero.size == 0:
        raise ArgumentError("cannot draw atoms: all patches are zero")
    if nonzero.size >= n_draw:
        return rng.choice(nonzero, size=n_draw, replace=False)
    return rng.choice(nonzero, size=n_draw, replace=True)


def init_dictionary(patches, p=None, seed=0):
    """Initialize atoms from randomly selected patches, unit normalized."""
    matrix = patches.matrix
    if matrix.shape[1] < 1:
        raise ArgumentError("patch set is empty")
    if p is None:
        p = 2 * matrix.shape[0]
    if p < 1:
        raise ArgumentError("p must be >= 1")
    rng = np.random.default_rng(seed)
    idx = _draw_patch_columns(matrix, p, rng)
    atoms = matrix[:, idx].copy()
    atoms /= np.linalg.norm(atoms, axis=0)
    return Dictionary(atoms, patches.patch_shape, unit_norm=True,
                      provenance={"init_seed": int(seed)})


@njit(cache=True)
def _update_columns(atoms, A, BT, dead_threshold):
    """One block-coordinate pass over the columns, ascending index order.

    A must be symmetric (rows double as columns); BT is B transposed so its
    rows are contiguous. Columns whose accumulator diagonal is at or below
    the threshold (dead atoms) are flagged instead of updated, as are
    columns whose update has zero norm.
    """
    m, p = atoms.shape
    dead = np.zeros(p, dtype=np.bool_)
    for j in range(p):
        ajj = A[j, j]
        if ajj <= dead_threshold:
            dead[j] = True
            continue
        da = np.dot(atoms, A[j])
        u = np.empty(m)
        nrm = 0.0
        for i in range(m):
            u[i] = (BT[j, i] - da[i]) / ajj + atoms[i, j]
            nrm += u[i] * u[i]
        nrm = nrm ** 0.5
        if nrm <= 0.0:
            dead[j] = True
            continue
        for i in range(m):
            atoms[i, j] = u[i] / nrm
    return dead


def dictionary_update(D: Dictionary, A, B, replacement_source, rng=None):
    """Closed-form refinement of every atom given the accumulators A, B.

    Dead atoms (A_jj below threshold, or a zero-norm update) are replaced by
    fresh unit-normalized patches drawn from ``replacement_source``.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != (D.p, D.p) or B.shape != (D.m, D.p):
        raise ArgumentError("accumulator shapes do not match the dictionary")
    if rng is None:
        rng = np.random.default_rng(0)
    atoms = D.atoms.copy()
    sym = np.ascontiguousarray((A + A.T) / 2.0)  # the kernel reads rows as columns
    dead = _update_columns(atoms, sym, np.ascontiguousarray(B.T),
                           DEAD_ATOM_THRESHOLD)
    n_dead = int(dead.sum())
    if n_dead:
        idx = _draw_patch_columns(replacement_source.matrix, n_dead, rng)
        fresh = replacement_source.matrix[:, idx].copy()
        fresh /= np.linalg.norm(fresh, axis=0)
        atoms[:, dead] = fresh
    return Dictionary(atoms, D.patch_shape, unit_norm=True,
                      provenance=dict(D.provenance))


def objective(D, X, codes, lambdas):
    """Mean penalized objective of the coded batch (lower is better fit)."""
    resid = X - D.atoms @ codes
    rss = (resid * resid).sum(axis=0)
    l1 = np.abs(codes).sum(axis=0)
    return float(np.mean(0.5 * rss + lambdas * l1))


def train(patches, cfg: TrainConfig, dataset_ids=()):
    """Learn a dictionary from the pooled patch matrix.

    Batches are drawn uniformly with replacement; A and B accumulate across
    iterations without forgetting. With holdout_size > 0 that many columns
    are set aside and the mean penalized objective on them is recorded per
    iteration in provenance["holdout_objective"].
    """
    matrix = patches.matrix
    n = matrix.shape[1]
    if n < 1:
        raise ArgumentError("patch set is empty")
    rng = np.random.default_rng(cfg.rng_seed)

    pool = np.arange(n)
    holdout = None
    if cfg.holdout_size > 0:
        if cfg.holdout_size >= n:
            raise ArgumentError("holdout_size must be smaller than the patch count")
        held_idx = rng.choice(n, size=cfg.holdout_size, replace=False)
        keep = np.ones(n, dtype=bool)
        keep[held_idx] = False
        pool = np.flatnonzero(keep)
        holdout = np.ascontiguousarray(matrix[:, held_idx])

    D = init_dictionary(patches, p=cfg.n_atoms,
                        seed=int(rng.integers(0, 2 ** 63 - 1)))
    p = D.p
    A = np.zeros((p, p))
    B = np.zeros((D.m, p))
    history = []
    for _ in range(cfg.n_iterations):
        batch_idx = pool[rng.integers(0, pool.size, size=cfg.batch_size)]
        Xb = np.ascontiguousarray(matrix[:, batch_idx])
        codes = sparse_code_batch(D.atoms, Xb, cfg.path_cfg, rng=rng)
        A += codes.alphas @ codes.alphas.T
        B += Xb @ codes.alphas.T
        D = dictionary_update(D, A, B, patches, rng=rng)
        if holdout is not None:
            held = sparse_code_batch(D.atoms, holdout, cfg.path_cfg, rng=rng)
            history.append(objective(D, holdout, held.alphas, held.lambdas))

    prov = {
        "iterations": int(cfg.n_iterations),
        "batch_size": int(cfg.batch_size),
        "seed": int(cfg.rng_seed),
        "selection": cfg.path_cfg.selection,
        "datasets": [str(d) for d in dataset_ids],
    }
    if history:
        prov["holdout_objective"] = history
    return Dictionary(D.atoms, D.patch_shape, unit_norm=True, provenance=prov)


def save_dictionary(D: Dictionary, path):
    """Write the bit-exact DLD1 container: magic, JSON header, float64 columns."""
    header = {
        "version": FORMAT_VERSION,
        "m": D.m,
        "p": D.p,
        "patch_shape": list(D.patch_shape),
        "unit_norm": bool(D.unit_norm),
        "provenance": D.provenance,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(D.atoms.astype("<f8").tobytes(order="F"))


def load_dictionary(path) -> Dictionary:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise FormatError("bad magic: not a DLD1 dictionary file")
    if len(raw) < 8:
        raise FormatError("truncated dictionary header")
    hlen = struct.unpack_from("<I", raw, 4)[0]
    if len(raw) < 8 + hlen:
        raise FormatError("truncated dictionary header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("unreadable dictionary header: %s" % exc) from exc
    m, p = int(header["m"]), int(header["p"])
    expected = 8 + hlen + m * p * 8
    if len(raw) != expected:
        raise FormatError("dictionary payload size mismatch (%d != %d bytes)"
                          % (len(raw), expected))
    atoms = np.frombuffer(raw, dtype="<f8", count=m * p, offset=8 + hlen)
    atoms = atoms.reshape((m, p), order="F").copy()
    return Dictionary(atoms, tuple(header["patch_shape"]),
                      unit_norm=bool(header["unit_norm"]),
                      provenance=header.get("provenance", {}))
