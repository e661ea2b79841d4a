"""Compiled inner loop of the componentwise Metropolis sampler for linear classifiers."""

import numpy as np
from numba import njit

HINGE, LOGISTIC = 0, 1
GAUSSIAN, STUDENT = 0, 1


@njit(cache=True)
def _loss(margin, loss_kind, s_max):
    if margin > s_max:
        margin = s_max
    elif margin < -s_max:
        margin = -s_max
    if loss_kind == HINGE:
        v = 1.0 - margin
        return v if v > 0.0 else 0.0
    # log(1 + exp(-margin)) without overflow
    if margin > 0.0:
        return np.log1p(np.exp(-margin))
    return -margin + np.log1p(np.exp(margin))


@njit(cache=True)
def _log_prior_1d(t, prior_kind, prior_scale):
    if prior_kind == GAUSSIAN:
        return -0.5 * t * t / (prior_scale * prior_scale)
    return -2.0 * np.log(prior_scale * prior_scale + t * t)


@njit(cache=True)
def coordinate_sweeps(theta, margins, ZT, lam, loss_kind, s_max, prior_kind, prior_scale, C1,
                      scales, jump_scale, normals, uniforms, indep, adapt, accepts):
    """Run ``normals.shape[0]`` sweeps in place and return the state after each sweep.

    Per coordinate and sweep, up to three Metropolis-Hastings moves are made:
    a local random walk with adaptive scale, a random walk of fixed scale
    ``jump_scale`` and an independence proposal from the 1-d prior marginal
    (``indep`` holds draws of that law at unit scale). The last two run only when
    ``jump_scale > 0``. ``ZT`` is the ``(d, n)`` matrix with columns
    ``y_i * x_i`` and ``margins`` must equal ``ZT.T @ theta`` on entry.
    """
    d, n = ZT.shape
    n_sweeps = normals.shape[0]
    out = np.empty((n_sweeps, d))
    n_moves = 3 if jump_scale > 0.0 else 1
    cur = np.empty(n)
    new_loss = np.empty(n)
    for i in range(n):
        cur[i] = _loss(margins[i], loss_kind, s_max)
    for s in range(n_sweeps):
        l1 = 0.0
        for j in range(d):
            l1 += abs(theta[j])
        for j in range(d):
            zj = ZT[j]
            for k in range(n_moves):
                old = theta[j]
                if k == 0:
                    new = old + scales[j] * normals[s, j, 0]
                elif k == 1:
                    new = old + jump_scale * normals[s, j, 1]
                else:
                    new = prior_scale * indep[s, j]
                new_l1 = l1 - abs(old) + abs(new)
                if new_l1 > C1:
                    if k == 0 and adapt:
                        scales[j] *= 0.95
                    continue
                if k == 2:
                    log_ratio = 0.0
                else:
                    log_ratio = _log_prior_1d(new, prior_kind, prior_scale) - _log_prior_1d(old, prior_kind, prior_scale)
                delta = new - old
                diff = 0.0
                for i in range(n):
                    v = _loss(margins[i] + delta * zj[i], loss_kind, s_max)
                    new_loss[i] = v
                    diff += v - cur[i]
                log_ratio -= lam * diff / n
                if np.log(uniforms[s, j, k]) < log_ratio:
                    theta[j] = new
                    l1 = new_l1
                    for i in range(n):
                        margins[i] += delta * zj[i]
                        cur[i] = new_loss[i]
                    if k == 0:
                        accepts[j] += 1.0
                        if adapt:
                            scales[j] *= 1.1
                elif k == 0 and adapt:
                    scales[j] *= 0.95
        for j in range(d):
            out[s, j] = theta[j]
    return out


@njit(cache=True)
def _row_move(F, G, i, ptr, obs, other_idx, scores, y, lam_n, s_max, gamma, scale, normals, u, buf):
    # Metropolis move on row i of F (the partner factor G stays fixed)
    K = F.shape[1]
    prop = np.empty(K)
    log_ratio = 0.0
    for k in range(K):
        prop[k] = F[i, k] + scale * normals[k]
        log_ratio -= 0.5 * (prop[k] * prop[k] - F[i, k] * F[i, k]) / gamma[k]
    diff = 0.0
    for t in range(ptr[i], ptr[i + 1]):
        o = obs[t]
        j = other_idx[o]
        s = 0.0
        for k in range(K):
            s += prop[k] * G[j, k]
        buf[t - ptr[i]] = s
        diff += _loss(y[o] * s, HINGE, s_max) - _loss(y[o] * scores[o], HINGE, s_max)
    log_ratio -= lam_n * diff
    if np.log(u) < log_ratio:
        for k in range(K):
            F[i, k] = prop[k]
        for t in range(ptr[i], ptr[i + 1]):
            scores[obs[t]] = buf[t - ptr[i]]
        return True
    return False


@njit(cache=True)
def _log_gamma_target(g, sq, dim_sum, a, b, inverse):
    # log pi(g) + log N(factor columns | g) + log g (log-scale Jacobian)
    if inverse:
        lp = -(a + 1.0) * np.log(g) - b / g
    else:
        lp = (a - 1.0) * np.log(g) - b * g
    return lp - 0.5 * dim_sum * np.log(g) - 0.5 * sq / g + np.log(g)


@njit(cache=True)
def factor_sweeps(L, R, gamma, y, rows, cols, scores, row_ptr, row_obs, col_ptr, col_obs,
                  lam_n, s_max, a, b, inverse, scales_L, scales_R, scales_g,
                  normals_L, normals_R, normals_g, uniforms, adapt, accepts,
                  out_L, out_R, out_g):
    """Metropolis-within-blocks sweeps for the low-rank hinge Gibbs posterior.

    Each sweep updates every row of ``L``, then every row of ``R``, then each
    ``gamma_k`` by a random walk on ``log gamma_k``. ``scores`` must hold the
    observed entries of ``L @ R.T`` on entry; ``row_ptr/row_obs`` and
    ``col_ptr/col_obs`` index the observations of each row and column.
    ``accepts`` counts acceptances for the three blocks.
    """
    d1, K = L.shape
    d2 = R.shape[0]
    n_sweeps = normals_L.shape[0]
    buf = np.empty(y.shape[0])
    dim_sum = float(d1 + d2)
    for s in range(n_sweeps):
        for i in range(d1):
            ok = _row_move(L, R, i, row_ptr, row_obs, cols, scores, y, lam_n, s_max, gamma,
                           scales_L[i], normals_L[s, i], uniforms[s, i], buf)
            if ok:
                accepts[0] += 1.0
            if adapt:
                scales_L[i] *= 1.1 if ok else 0.95
        for j in range(d2):
            ok = _row_move(R, L, j, col_ptr, col_obs, rows, scores, y, lam_n, s_max, gamma,
                           scales_R[j], normals_R[s, j], uniforms[s, d1 + j], buf)
            if ok:
                accepts[1] += 1.0
            if adapt:
                scales_R[j] *= 1.1 if ok else 0.95
        for k in range(K):
            sq = 0.0
            for i in range(d1):
                sq += L[i, k] * L[i, k]
            for j in range(d2):
                sq += R[j, k] * R[j, k]
            new = gamma[k] * np.exp(scales_g[k] * normals_g[s, k])
            log_ratio = (_log_gamma_target(new, sq, dim_sum, a, b, inverse)
                         - _log_gamma_target(gamma[k], sq, dim_sum, a, b, inverse))
            ok = np.log(uniforms[s, d1 + d2 + k]) < log_ratio
            if ok:
                gamma[k] = new
                accepts[2] += 1.0
            if adapt:
                scales_g[k] *= 1.1 if ok else 0.95
        out_L[s] = L
        out_R[s] = R
        out_g[s] = gamma
