"""Sparse coding: coordinate-descent lasso, lambda paths, AIC and CV selection.

The solver minimizes 0.5 * ||x - D a||_2^2 + lambda * ||a||_1 by cyclic
coordinate descent on the gram system (G = D'D, c = D'x). The gradient
vector q = c - G a is maintained incrementally across sweeps and across the
warm-started path, so a path solve costs little more than the coefficients
that actually move. Columns of D may have arbitrary nonzero norms so the
same solver serves spatially downsampled dictionaries.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit, prange

from .errors import ArgumentError

# Internal KKT target; the public contract is 1e-6, solved with margin.
KKT_TOL = 1e-7
_REFRESH_EVERY_LAMBDAS = 16  # recompute q from scratch to bound float drift
_REFRESH_EVERY_ALTERNATIONS = 16
_STALL_LIMIT = 4             # stable-support alternations without KKT progress
_MAX_ALTERNATIONS = 40       # full-sweep/active-burst rounds per lambda
_BURST_LIMIT = 100           # active-set passes between two full sweeps
_AIC_PATIENCE = 10           # batch coding stops after this many worse AICs
_FAST_KKT_REL = 1e-3         # pipeline KKT target relative to the current lambda
_FAST_KKT_FLOOR = 1e-5       # pipeline absolute KKT floor relative to lambda_max
_RSS_FLOOR = 1e-300          # guards log() in the AIC for exact reconstructions


@dataclass
class PathConfig:
    """Controls the lambda path and the per-patch model selection."""

    n_lambdas: int = 100
    eps_ratio: float = 1e-3
    cd_tol: float = 1e-4
    cd_max_iter: int = 1000
    early_stop_tol: float = 1e-5
    selection: str = "aic"
    cv_folds: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_lambdas < 2:
            raise ArgumentError("n_lambdas must be >= 2")
        if not 0.0 < self.eps_ratio < 1.0:
            raise ArgumentError("eps_ratio must lie in (0, 1)")
        if self.cv_folds < 2:
            raise ArgumentError("cv_folds must be >= 2")
        if self.selection not in ("aic", "cv"):
            raise ArgumentError("selection must be 'aic' or 'cv'")


@dataclass
class SparseCode:
    """A selected sparse solution: coefficients, penalty and model size."""

    alpha: np.ndarray
    lambda_selected: float
    df: int
    criterion_value: float


class PathEntry(NamedTuple):
    lam: float
    alpha: np.ndarray
    rss: float


class BatchCodes(NamedTuple):
    alphas: np.ndarray     # (p, n)
    lambdas: np.ndarray    # (n,)
    dfs: np.ndarray        # (n,)
    criteria: np.ndarray   # (n,)


@njit(cache=True)
def _refresh_q(G, c, alpha, q):
    t = np.dot(G, alpha)
    for j in range(alpha.shape[0]):
        q[j] = c[j] - t[j]


@njit(cache=True)
def _sweep(G, lam, alpha, q):
    """One cyclic pass; returns (max |delta|, max |alpha|)."""
    p = alpha.shape[0]
    max_delta = 0.0
    max_abs = 0.0
    for j in range(p):
        gjj = G[j, j]
        old = alpha[j]
        if gjj <= 0.0:
            new = 0.0
        else:
            z = q[j] + gjj * old
            if z > lam:
                new = (z - lam) / gjj
            elif z < -lam:
                new = (z + lam) / gjj
            else:
                new = 0.0
        delta = new - old
        if delta != 0.0:
            alpha[j] = new
            for k in range(p):
                q[k] -= delta * G[j, k]
            ad = abs(delta)
            if ad > max_delta:
                max_delta = ad
        na = abs(new)
        if na > max_abs:
            max_abs = na
    return max_delta, max_abs


@njit(cache=True)
def _kkt_violation_q(q, alpha, lam):
    worst = 0.0
    for j in range(alpha.shape[0]):
        if alpha[j] > 0.0:
            v = abs(q[j] - lam)
        elif alpha[j] < 0.0:
            v = abs(q[j] + lam)
        else:
            v = abs(q[j]) - lam
            if v < 0.0:
                v = 0.0
        if v > worst:
            worst = v
    return worst


@njit(cache=True)
def _sweep_active(G, lam, alpha, qa, act, k):
    """One pass over the frozen active set, updating only its local gradient."""
    max_delta = 0.0
    max_abs = 0.0
    for i in range(k):
        j = act[i]
        gjj = G[j, j]
        old = alpha[j]
        if gjj <= 0.0:
            new = 0.0
        else:
            z = qa[i] + gjj * old
            if z > lam:
                new = (z - lam) / gjj
            elif z < -lam:
                new = (z + lam) / gjj
            else:
                new = 0.0
        delta = new - old
        if delta != 0.0:
            alpha[j] = new
            for i2 in range(k):
                qa[i2] -= delta * G[j, act[i2]]
            ad = abs(delta)
            if ad > max_delta:
                max_delta = ad
        na = abs(new)
        if na > max_abs:
            max_abs = na
    return max_delta, max_abs


@njit(cache=True)
def _apply_step(G, alpha, q, act, k, sol, gamma, drop):
    """Move alpha[act] toward sol by gamma, zeroing the dropped index."""
    p = q.shape[0]
    for i in range(k):
        j = act[i]
        new = alpha[j] + gamma * (sol[i] - alpha[j])
        if i == drop:
            new = 0.0
        net = new - alpha[j]
        if net != 0.0:
            alpha[j] = new
            for kk in range(p):
                q[kk] -= net * G[j, kk]


@njit(cache=True)
def _subspace_polish(G, c, lam, alpha, q, act_in, k_in):
    """Exactly solve the KKT equations on the active support.

    Repeatedly solves G[A, A] a = c[A] - lam * sign(a[A]) by minimum-norm
    least squares (singular grams from duplicated atoms stay well defined).
    When the solution would flip a sign, steps only to the first zero
    crossing, removes that atom and re-solves; the penalized objective is
    non-increasing along every step. Returns True when the refined support
    was solved exactly.
    """
    k = k_in
    act = act_in[:k_in].copy()
    p = q.shape[0]
    for _ in range(k_in + 1):
        if k == 0:
            return True
        GA = np.empty((k, k))
        rhs = np.empty((k, 1))
        rhs_max = 0.0
        for i in range(k):
            ji = act[i]
            sign = 1.0 if alpha[ji] > 0.0 else -1.0
            r = c[ji] - lam * sign
            rhs[i, 0] = r
            if abs(r) > rhs_max:
                rhs_max = abs(r)
            for i2 in range(k):
                GA[i, i2] = G[ji, act[i2]]
        sol = np.linalg.lstsq(GA, rhs)[0][:, 0]
        resid = rhs[:, 0] - np.dot(GA, sol)
        res_max = np.abs(resid).max()
        if res_max > 1e-10 * (1.0 + rhs_max) and lam > 0.0:
            # inconsistent sign-fixed system: the penalized objective is
            # unbounded along null(GA); descend along the null component of
            # the rhs until a coefficient dies, then drop it and re-solve
            t_best = np.inf
            drop = -1
            for i in range(k):
                di = resid[i]
                ai = alpha[act[i]]
                if di != 0.0 and ai * di < 0.0:
                    t = -ai / di
                    if t < t_best:
                        t_best = t
                        drop = i
            if drop < 0:
                return False
            for i in range(k):
                j = act[i]
                new = 0.0 if i == drop else alpha[j] + t_best * resid[i]
                net = new - alpha[j]
                if net != 0.0:
                    alpha[j] = new
                    for kk in range(p):
                        q[kk] -= net * G[j, kk]
        else:
            if lam == 0.0:
                # unpenalized: signs are unconstrained
                _apply_step(G, alpha, q, act, k, sol, 1.0, -1)
                return True
            gamma = 1.0
            drop = -1
            for i in range(k):
                ai = alpha[act[i]]
                if sol[i] * ai < 0.0 or (sol[i] == 0.0 and ai != 0.0):
                    g = ai / (ai - sol[i])
                    if g < gamma:
                        gamma = g
                        drop = i
            _apply_step(G, alpha, q, act, k, sol, gamma, drop)
            if drop < 0:
                return True
        # compact the support: remove the dropped atom and any exact zeros
        kept = 0
        for i in range(k):
            if alpha[act[i]] != 0.0:
                act[kept] = act[i]
                kept += 1
        k = kept
    return False


@njit(cache=True)
def _cd_q(G, c, lam, alpha, q, cd_tol, max_sweeps, kkt_tol, kkt_rel,
          use_polish):
    """Coordinate descent to stationarity; alpha and q update in place.

    q must equal c - G @ alpha on entry. Each round first converges the
    current active set with cheap passes on a local copy of the gradient
    (reconciled into q afterwards), then runs one full sweep that admits
    new coordinates. Once the support is stable the active KKT system is
    solved exactly (minimum-norm), which settles tied atoms that plain
    cyclic descent resolves only asymptotically. Stops when a full sweep
    moves no coefficient by more than cd_tol (relative to the largest
    coefficient) and the KKT residuals are within kkt_tol; gives up after
    max_sweeps passes in total, or when the violation stops improving on a
    stable support.
    """
    p = alpha.shape[0]
    if kkt_rel * lam > kkt_tol:
        kkt_tol = kkt_rel * lam
    act = np.empty(p, dtype=np.int64)
    prev_act = np.empty(p, dtype=np.int64)
    start = np.empty(p)
    qa = np.empty(p)
    sweeps = 0
    rounds = 0
    prev_k = -1
    best_viol = np.inf
    stall = 0
    streak = 0
    next_polish = 2
    while sweeps < max_sweeps and rounds < _MAX_ALTERNATIONS:
        rounds += 1
        if rounds % _REFRESH_EVERY_ALTERNATIONS == 0:
            _refresh_q(G, c, alpha, q)
        k = 0
        for j in range(p):
            if alpha[j] != 0.0:
                act[k] = j
                k += 1
        if k > 0:
            for i in range(k):
                start[i] = alpha[act[i]]
                qa[i] = q[act[i]]
            burst = 0
            prev_md = np.inf
            while sweeps < max_sweeps and burst < _BURST_LIMIT:
                md, ma = _sweep_active(G, lam, alpha, qa, act, k)
                sweeps += 1
                burst += 1
                inner_scale = ma if ma > 1e-12 else 1e-12
                if md <= cd_tol * inner_scale or md >= 0.995 * prev_md:
                    break
                prev_md = md
            for i in range(k):
                net = alpha[act[i]] - start[i]
                if net != 0.0:
                    j = act[i]
                    for kk in range(p):
                        q[kk] -= net * G[j, kk]
        max_delta, max_abs = _sweep(G, lam, alpha, q)
        sweeps += 1
        viol = _kkt_violation_q(q, alpha, lam)
        scale = max_abs if max_abs > 1e-12 else 1e-12
        if max_delta <= cd_tol * scale and viol <= kkt_tol:
            return sweeps
        # support after the admitting sweep drives the polish and stall logic
        k = 0
        for j in range(p):
            if alpha[j] != 0.0:
                act[k] = j
                k += 1
        same_support = k == prev_k
        if same_support:
            for i in range(k):
                if act[i] != prev_act[i]:
                    same_support = False
                    break
        prev_k = k
        for i in range(k):
            prev_act[i] = act[i]
        if same_support:
            streak += 1
        else:
            streak = 1
            next_polish = 2
        # once the support settles, solve it exactly rather than creeping
        # toward the optimum sweep by sweep (backoff bounds the linear solves)
        polished = False
        if use_polish and k > 0 and same_support and streak >= next_polish:
            _subspace_polish(G, c, lam, alpha, q, act, k)
            next_polish = 2 * streak
            polished = True
            viol = _kkt_violation_q(q, alpha, lam)
        if viol < 0.99 * best_viol:
            best_viol = viol
            stall = 0
        elif same_support:
            stall += 1
        if stall >= _STALL_LIMIT:
            if use_polish and not polished and k > 0:
                _subspace_polish(G, c, lam, alpha, q, act, k)
                viol = _kkt_violation_q(q, alpha, lam)
                if viol < 0.99 * best_viol:
                    best_viol = viol
                    stall = 0
                    continue
            return sweeps
    return sweeps


@njit(cache=True)
def _lambda_grid(lam_max, n, eps_ratio):
    grid = np.zeros(n)
    if lam_max <= 0.0:
        return grid
    log_step = math.log(eps_ratio) / (n - 1)
    for i in range(n):
        grid[i] = lam_max * math.exp(i * log_step)
    grid[0] = lam_max
    grid[n - 1] = lam_max * eps_ratio
    return grid


@njit(cache=True)
def _rss_from_q(xtx, c, q, alpha):
    """||x - D a||^2 = x'x - c'a - q'a given a maintained q = c - G a."""
    acc = 0.0
    for j in range(alpha.shape[0]):
        aj = alpha[j]
        if aj != 0.0:
            acc += (c[j] + q[j]) * aj
    rss = xtx - acc
    return rss if rss > 0.0 else 0.0


@njit(cache=True)
def _path_store(G, c, xtx, lambdas, cd_tol, max_sweeps, kkt_tol, early_tol,
                kkt_rel, use_polish):
    """Warm-started path over ``lambdas``; returns (alphas, rss, n_used).

    Terminates early when the penalized objective changes by less than
    early_tol between consecutive lambdas (disabled when early_tol < 0).
    """
    k = lambdas.shape[0]
    p = c.shape[0]
    alphas = np.zeros((k, p))
    rss = np.empty(k)
    alpha = np.zeros(p)
    q = c.copy()
    prev_obj = np.inf
    used = 0
    for s in range(k):
        if s > 0 and s % _REFRESH_EVERY_LAMBDAS == 0:
            _refresh_q(G, c, alpha, q)
        _cd_q(G, c, lambdas[s], alpha, q, cd_tol, max_sweeps, kkt_tol,
              kkt_rel, use_polish)
        r = _rss_from_q(xtx, c, q, alpha)
        l1 = 0.0
        for j in range(p):
            l1 += abs(alpha[j])
        alphas[s] = alpha
        rss[s] = r
        used = s + 1
        obj = 0.5 * r + lambdas[s] * l1
        if s > 0 and early_tol >= 0.0 and abs(obj - prev_obj) < early_tol:
            break
        prev_obj = obj
    return alphas, rss, used


@njit(cache=True)
def _nnz(v):
    n = 0
    for j in range(v.shape[0]):
        if v[j] != 0.0:
            n += 1
    return n


@njit(cache=True)
def _aic_select(alphas, rss, used, m):
    """Index minimizing m*log(rss/m) + 2*df; ties go to the earliest entry
    (larger lambda)."""
    best = 0
    best_aic = np.inf
    for s in range(used):
        r = rss[s]
        if r < _RSS_FLOOR:
            r = _RSS_FLOOR
        aic = m * math.log(r / m) + 2.0 * _nnz(alphas[s])
        if aic < best_aic:
            best_aic = aic
            best = s
    return best, best_aic


@njit(cache=True)
def _path_aic_fused(G, c, xtx, lambdas, m, cd_tol, max_sweeps, kkt_tol,
                    early_tol, patience, best_alpha):
    """Warm-started path that tracks the AIC minimum without storing entries.

    Stops on the objective-based early rule or once the AIC has not improved
    for ``patience`` consecutive lambdas (the selection never revisits the
    deep overfitting tail). Returns (best_lambda, best_aic).
    """
    k = lambdas.shape[0]
    p = c.shape[0]
    alpha = np.zeros(p)
    q = c.copy()
    prev_obj = np.inf
    best_aic = np.inf
    best_lam = lambdas[0]
    since_best = 0
    best_alpha[:] = 0.0
    # absolute KKT floor scaled to the problem; pipelines tolerate this
    kt = kkt_tol if kkt_tol > _FAST_KKT_FLOOR * lambdas[0] else _FAST_KKT_FLOOR * lambdas[0]
    for s in range(k):
        if s > 0 and s % _REFRESH_EVERY_LAMBDAS == 0:
            _refresh_q(G, c, alpha, q)
        _cd_q(G, c, lambdas[s], alpha, q, cd_tol, max_sweeps, kt,
              _FAST_KKT_REL, 0)
        r = _rss_from_q(xtx, c, q, alpha)
        rr = r if r > _RSS_FLOOR else _RSS_FLOOR
        aic = m * math.log(rr / m) + 2.0 * _nnz(alpha)
        if aic < best_aic:
            best_aic = aic
            best_lam = lambdas[s]
            best_alpha[:] = alpha
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
        l1 = 0.0
        for j in range(p):
            l1 += abs(alpha[j])
        obj = 0.5 * r + lambdas[s] * l1
        if s > 0 and early_tol >= 0.0 and abs(obj - prev_obj) < early_tol:
            break
        prev_obj = obj
    return best_lam, best_aic


@njit(cache=True)
def _cv_mse(D, x, labels, n_folds, lambdas, cd_tol, max_sweeps, kkt_tol,
            kkt_rel, use_polish):
    """Mean held-out MSE per candidate lambda over the given folds."""
    k = lambdas.shape[0]
    p = D.shape[1]
    mse = np.zeros(k)
    for f in range(n_folds):
        kept = labels != f
        held = ~kept
        Dk = D[kept]
        Dh = D[held]
        xk = x[kept]
        xh = x[held]
        nh = xh.shape[0]
        Gk = np.dot(Dk.T, Dk)
        ck = np.dot(Dk.T, xk)
        alpha = np.zeros(p)
        q = ck.copy()
        for s in range(k):
            if s > 0 and s % _REFRESH_EVERY_LAMBDAS == 0:
                _refresh_q(Gk, ck, alpha, q)
            _cd_q(Gk, ck, lambdas[s], alpha, q, cd_tol, max_sweeps, kkt_tol,
                  kkt_rel, use_polish)
            resid = xh - np.dot(Dh, alpha)
            acc = 0.0
            for i in range(nh):
                acc += resid[i] * resid[i]
            mse[s] += acc / nh
    for s in range(k):
        mse[s] /= n_folds
    return mse


@njit(cache=True)
def _solve_to(G, c, lambdas, stop, cd_tol, max_sweeps, kkt_tol, kkt_rel,
              use_polish):
    """Warm-started path down to index ``stop`` (inclusive); returns alpha."""
    alpha = np.zeros(c.shape[0])
    q = c.copy()
    for s in range(stop + 1):
        if s > 0 and s % _REFRESH_EVERY_LAMBDAS == 0:
            _refresh_q(G, c, alpha, q)
        _cd_q(G, c, lambdas[s], alpha, q, cd_tol, max_sweeps, kkt_tol,
              kkt_rel, use_polish)
    return alpha


@njit(parallel=True, cache=True)
def _batch_aic(DT, G, X, n_lambdas, eps_ratio, cd_tol, max_sweeps, kkt_tol,
               early_tol, alphas_out, lam_out, df_out, crit_out):
    m, n = X.shape
    for t in prange(n):
        x = X[:, t].copy()
        c = np.dot(DT, x)
        xtx = np.dot(x, x)
        lam_max = np.abs(c).max()
        if lam_max <= 0.0:
            alphas_out[:, t] = 0.0
            lam_out[t] = 0.0
            df_out[t] = 0
            r = xtx if xtx > _RSS_FLOOR else _RSS_FLOOR
            crit_out[t] = m * math.log(r / m)
            continue
        lambdas = _lambda_grid(lam_max, n_lambdas, eps_ratio)
        best_alpha = np.empty(c.shape[0])
        best_lam, best_aic = _path_aic_fused(
            G, c, xtx, lambdas, m, cd_tol, max_sweeps, kkt_tol, early_tol,
            _AIC_PATIENCE, best_alpha)
        alphas_out[:, t] = best_alpha
        lam_out[t] = best_lam
        df_out[t] = _nnz(best_alpha)
        crit_out[t] = best_aic


@njit(parallel=True, cache=True)
def _batch_cv(D, DT, G, X, fold_labels, n_folds, n_lambdas, eps_ratio, cd_tol,
              max_sweeps, kkt_tol, alphas_out, lam_out, df_out, crit_out):
    m, n = X.shape
    for t in prange(n):
        x = X[:, t].copy()
        c = np.dot(DT, x)
        xtx = np.dot(x, x)
        lam_max = np.abs(c).max()
        if lam_max <= 0.0:
            alphas_out[:, t] = 0.0
            lam_out[t] = 0.0
            df_out[t] = 0
            crit_out[t] = xtx / m
            continue
        lambdas = _lambda_grid(lam_max, n_lambdas, eps_ratio)
        kt = kkt_tol if kkt_tol > _FAST_KKT_FLOOR * lam_max else _FAST_KKT_FLOOR * lam_max
        mse = _cv_mse(D, x, fold_labels[t], n_folds, lambdas, cd_tol,
                      max_sweeps, kt, _FAST_KKT_REL, 0)
        best = 0
        best_mse = np.inf
        for s in range(n_lambdas):
            if mse[s] < best_mse:
                best_mse = mse[s]
                best = s
        alpha = _solve_to(G, c, lambdas, best, cd_tol, max_sweeps, kt,
                          _FAST_KKT_REL, 0)
        alphas_out[:, t] = alpha
        lam_out[t] = lambdas[best]
        df_out[t] = _nnz(alpha)
        crit_out[t] = best_mse


def _as_matrix(D):
    D = np.ascontiguousarray(D, dtype=np.float64)
    if D.ndim != 2 or D.size == 0:
        raise ArgumentError("dictionary must be a nonempty 2D matrix")
    return D


def lambda_max(D, x):
    """Smallest penalty giving the all-zero solution: ||D'x||_inf."""
    D = _as_matrix(D)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return float(np.abs(D.T @ x).max())


def solve_lasso(D, x, lam, warm_start=None, cd_tol=1e-4, cd_max_iter=1000):
    """Solve one lasso problem by cyclic coordinate descent.

    Column norms may be arbitrary but must be nonzero. The returned
    coefficients satisfy the KKT conditions within 1e-6 unless cd_max_iter
    is exhausted first.
    """
    D = _as_matrix(D)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if lam < 0:
        raise ArgumentError("lambda must be >= 0")
    if x.shape[0] != D.shape[0]:
        raise ArgumentError("signal length %d does not match dictionary rows %d"
                            % (x.shape[0], D.shape[0]))
    norms = (D * D).sum(axis=0)
    if np.any(norms == 0.0):
        raise ArgumentError("dictionary has zero-norm column(s) %s"
                            % np.flatnonzero(norms == 0).tolist())
    if warm_start is None:
        alpha = np.zeros(D.shape[1])
    else:
        alpha = np.array(warm_start, dtype=np.float64).reshape(-1).copy()
        if alpha.shape[0] != D.shape[1]:
            raise ArgumentError("warm start length does not match dictionary")
    G = D.T @ D
    c = D.T @ x
    q = c - G @ alpha
    _cd_q(G, c, float(lam), alpha, q, float(cd_tol), int(cd_max_iter), KKT_TOL,
          0.0, 1)
    return alpha


def solve_path(D, x, cfg: PathConfig):
    """Geometric lambda path from lambda_max down to eps_ratio * lambda_max.

    Each solve is warm-started from the previous one; the path stops early
    once the penalized objective settles (early_stop_tol). Entries carry the
    residual sum of squares so selection does not need to refit.
    """
    D = _as_matrix(D)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    norms = (D * D).sum(axis=0)
    if np.any(norms == 0.0):
        raise ArgumentError("dictionary has zero-norm column(s)")
    c = D.T @ x
    xtx = float(x @ x)
    lam_max = float(np.abs(c).max())
    if lam_max <= 0.0:
        return [PathEntry(0.0, np.zeros(D.shape[1]), xtx)]
    G = D.T @ D
    lambdas = _lambda_grid(lam_max, cfg.n_lambdas, cfg.eps_ratio)
    alphas, rss, used = _path_store(G, c, xtx, lambdas, cfg.cd_tol,
                                    cfg.cd_max_iter, KKT_TOL,
                                    cfg.early_stop_tol, 0.0, 1)
    return [PathEntry(float(lambdas[s]), alphas[s].copy(), float(rss[s]))
            for s in range(used)]


def select_aic(path, m):
    """Path entry minimizing the least-squares AIC; ties prefer larger lambda."""
    if not path:
        raise ArgumentError("empty path")
    alphas = np.stack([e.alpha for e in path])
    rss = np.array([e.rss for e in path])
    best, best_aic = _aic_select(alphas, rss, len(path), m)
    entry = path[best]
    return SparseCode(entry.alpha.copy(), entry.lam,
                      int(np.count_nonzero(entry.alpha)), float(best_aic))


def cv_fold_labels(m, n_folds, rng):
    """Balanced random fold assignment of the m rows."""
    base = np.resize(np.arange(n_folds, dtype=np.int64), m)
    return rng.permutation(base)


def select_cv(D, x, cfg: PathConfig, fold_labels=None):
    """Pick lambda by k-fold cross-validated held-out MSE, then refit on all rows.

    Folds are drawn from cfg.rng_seed unless explicit labels are supplied.
    """
    D = _as_matrix(D)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    m = x.shape[0]
    if m < cfg.cv_folds:
        raise ArgumentError("need at least cv_folds=%d rows, got %d"
                            % (cfg.cv_folds, m))
    if fold_labels is None:
        fold_labels = cv_fold_labels(m, cfg.cv_folds,
                                     np.random.default_rng(cfg.rng_seed))
    fold_labels = np.asarray(fold_labels, dtype=np.int64).reshape(-1)
    if fold_labels.shape[0] != m:
        raise ArgumentError("fold labels do not match signal length")
    counts = np.bincount(fold_labels, minlength=cfg.cv_folds)
    if np.any(counts[:cfg.cv_folds] < 1):
        raise ArgumentError("every fold needs at least one row")

    c = D.T @ x
    xtx = float(x @ x)
    lam_max = float(np.abs(c).max())
    if lam_max <= 0.0:
        return SparseCode(np.zeros(D.shape[1]), 0.0, 0, xtx / m)
    G = D.T @ D
    lambdas = _lambda_grid(lam_max, cfg.n_lambdas, cfg.eps_ratio)
    mse = _cv_mse(D, x, fold_labels, cfg.cv_folds, lambdas, cfg.cd_tol,
                  cfg.cd_max_iter, KKT_TOL, 0.0, 1)
    best = int(np.argmin(mse))
    alpha = _solve_to(G, c, lambdas, best, cfg.cd_tol, cfg.cd_max_iter,
                      KKT_TOL, 0.0, 1)
    return SparseCode(alpha, float(lambdas[best]),
                      int(np.count_nonzero(alpha)), float(mse[best]))


def batch_fold_labels(n, m, n_folds, rng):
    """Per-patch balanced fold labels, (n, m), drawn in one deterministic pass."""
    base = np.resize(np.arange(n_folds, dtype=np.int64), m)
    tiled = np.broadcast_to(base, (n, m)).copy()
    return rng.permuted(tiled, axis=1)


def sparse_code_batch(D, X, cfg: PathConfig, rng=None) -> BatchCodes:
    """Select a sparse code per column of X against a fixed dictionary.

    Columns are independent; results do not depend on the worker count.
    """
    D = _as_matrix(D)
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != D.shape[0]:
        raise ArgumentError("patch matrix shape %s does not match dictionary"
                            % (X.shape,))
    norms = (D * D).sum(axis=0)
    if np.any(norms == 0.0):
        raise ArgumentError("dictionary has zero-norm column(s)")
    m, n = X.shape
    p = D.shape[1]
    DT = np.ascontiguousarray(D.T)
    G = D.T @ D
    alphas = np.empty((p, n))
    lams = np.empty(n)
    dfs = np.empty(n, dtype=np.int64)
    crits = np.empty(n)
    if cfg.selection == "aic":
        _batch_aic(DT, G, X, cfg.n_lambdas, cfg.eps_ratio, cfg.cd_tol,
                   cfg.cd_max_iter, KKT_TOL, cfg.early_stop_tol,
                   alphas, lams, dfs, crits)
    else:
        if m < cfg.cv_folds:
            raise ArgumentError("need at least cv_folds rows for CV coding")
        if rng is None:
            rng = np.random.default_rng(cfg.rng_seed)
        labels = batch_fold_labels(n, m, cfg.cv_folds, rng)
        _batch_cv(D, DT, G, X, labels, cfg.cv_folds, cfg.n_lambdas,
                  cfg.eps_ratio, cfg.cd_tol, cfg.cd_max_iter, KKT_TOL,
                  alphas, lams, dfs, crits)
    return BatchCodes(alphas, lams, dfs, crits)
