"""Hot numeric kernels with a numba path and a pure numpy/scipy fallback.

Each kernel exists twice: a loop-style implementation compiled with
``numba.njit`` and a vectorised numpy implementation.  Both are always
importable (see :data:`NUMBA_KERNELS` and :data:`NUMPY_KERNELS`); the module
level names bind to the numba set unless numba is missing or the environment
variable ``SYNTHBAYES_DISABLE_NUMBA`` is set to a truthy value.

The HMC chain driver is written once and specialised for each backend by
closing over that backend's log-density kernel, so both paths execute the
same algorithm on the same pre-drawn random numbers.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np
from scipy.signal import lfilter

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_disabled() -> bool:
    return os.environ.get("SYNTHBAYES_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()

_LOG_2PI = math.log(2.0 * math.pi)
_DIVERGENCE = 1000.0
# outside this range sigma^2 under/overflows; the density is treated as zero there
_LOG_SIGMA_MAX = 300.0

# dual averaging constants (Hoffman & Gelman 2014)
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75


def _jit(fn):
    return numba.njit(cache=True, nogil=True, error_model="numpy")(fn)


# ---------------------------------------------------------------------------
# AR(1) paths


def _ar1_paths_loop(innov, rho):
    T, G = innov.shape
    out = np.empty((T, G))
    scale = 1.0 / math.sqrt(1.0 - rho * rho)
    for g in range(G):
        out[0, g] = innov[0, g] * scale
    for t in range(1, T):
        for g in range(G):
            out[t, g] = rho * out[t - 1, g] + innov[t, g]
    return out


def _ar1_paths_vec(innov, rho):
    x = np.array(innov, dtype=np.float64, copy=True)
    x[0] /= math.sqrt(1.0 - rho * rho)
    return lfilter([1.0], [1.0, -rho], x, axis=0)


# ---------------------------------------------------------------------------
# Pairwise Frank-Wolfe on loss(w) = w'Qw - 2 p'w + c over the simplex


def _fw_loop(Q, p, c, w0, tol, max_iter, trace):
    J = p.shape[0]
    w = w0.copy()
    Qw = Q @ w
    loss = c - 2.0 * (p @ w) + (w @ Qw)
    grad = 2.0 * (Qw - p)
    gap = np.inf
    it = 0
    if trace.shape[0] > 0:
        trace[0] = loss
    while it < max_iter:
        s = 0
        for j in range(1, J):
            if grad[j] < grad[s]:
                s = j
        a = -1
        gw = 0.0
        for j in range(J):
            gw += grad[j] * w[j]
            if w[j] > 0.0 and (a < 0 or grad[j] > grad[a]):
                a = j
        gap = gw - grad[s]
        if gap <= tol or s == a:
            break
        slope = grad[s] - grad[a]
        curv = 2.0 * (Q[s, s] - 2.0 * Q[s, a] + Q[a, a])
        gmax = w[a]
        if curv > 0.0:
            gamma = -slope / curv
            if gamma > gmax:
                gamma = gmax
        else:
            gamma = gmax
        if gamma <= 0.0:
            break
        if gamma == gmax:
            w[s] += w[a]
            w[a] = 0.0
        else:
            w[s] += gamma
            w[a] -= gamma
        for j in range(J):
            grad[j] += 2.0 * gamma * (Q[j, s] - Q[j, a])
        loss = loss + gamma * slope + 0.5 * gamma * gamma * curv
        it += 1
        if it < trace.shape[0]:
            trace[it] = loss
    return w, it, gap


def _fw_vec(Q, p, c, w0, tol, max_iter, trace):
    w = np.array(w0, dtype=np.float64, copy=True)
    Qw = Q @ w
    loss = c - 2.0 * (p @ w) + (w @ Qw)
    grad = 2.0 * (Qw - p)
    gap = np.inf
    it = 0
    if trace.shape[0] > 0:
        trace[0] = loss
    while it < max_iter:
        s = int(np.argmin(grad))
        support = np.flatnonzero(w > 0.0)
        a = int(support[np.argmax(grad[support])])
        gap = float(grad @ w - grad[s])
        if gap <= tol or s == a:
            break
        slope = grad[s] - grad[a]
        curv = 2.0 * (Q[s, s] - 2.0 * Q[s, a] + Q[a, a])
        gmax = w[a]
        gamma = min(-slope / curv, gmax) if curv > 0.0 else gmax
        if gamma <= 0.0:
            break
        if gamma == gmax:
            w[s] += w[a]
            w[a] = 0.0
        else:
            w[s] += gamma
            w[a] -= gamma
        grad += 2.0 * gamma * (Q[:, s] - Q[:, a])
        loss = loss + gamma * slope + 0.5 * gamma * gamma * curv
        it += 1
        if it < trace.shape[0]:
            trace[it] = loss
    return w, it, gap


# ---------------------------------------------------------------------------
# Stick-breaking simplex transform
#
# u in R^{n-1} -> x in simplex(n):  z_k = logistic(u_k - log(n-1-k)),
# x_k = s_k z_k, s_{k+1} = s_k (1 - z_k), x_{n-1} = s_{n-1}.  u = 0 maps to the
# barycentre.  The backward pass takes gxx = x * df/dx, which stays finite when
# a coordinate underflows.


def _log_sigmoid(a):
    if a >= 0.0:
        return -math.log1p(math.exp(-a))
    return a - math.log1p(math.exp(a))


def _stick_forward_loop(u, x, z, logx):
    n = x.shape[0]
    log_s = 0.0
    s = 1.0
    logjac = 0.0
    for k in range(n - 1):
        a = u[k] - math.log(n - 1 - k)
        lz = _log_sigmoid(a)
        l1z = _log_sigmoid(-a)
        z[k] = math.exp(lz)
        x[k] = s * z[k]
        logx[k] = log_s + lz
        logjac += lz + l1z + log_s
        log_s += l1z
        s = math.exp(log_s)
    x[n - 1] = s
    logx[n - 1] = log_s
    return logjac


def _stick_backward_loop(z, gxx, gu):
    n = gxx.shape[0]
    R = gxx[n - 1]
    for k in range(n - 2, -1, -1):
        gu[k] = (1.0 - z[k]) * gxx[k] - R * z[k] + 1.0 - 2.0 * z[k]
        R += gxx[k] + 1.0


def _log_sigmoid_vec(a):
    return -np.logaddexp(0.0, -a)


def _stick_forward_vec(u, n):
    k = np.arange(n - 1)
    a = u - np.log(n - 1 - k)
    lz = _log_sigmoid_vec(a)
    l1z = _log_sigmoid_vec(-a)
    log_s = np.concatenate(([0.0], np.cumsum(l1z)))
    logx = np.empty(n)
    logx[:-1] = log_s[:-1] + lz
    logx[-1] = log_s[-1]
    logjac = float(np.sum(lz + l1z + log_s[:-1]))
    return np.exp(logx), np.exp(lz), logx, logjac


def _stick_backward_vec(z, gxx):
    A = gxx + 1.0
    A[-1] = gxx[-1]
    # R[k+1] = sum_{m > k} A[m]
    tail = np.cumsum(A[::-1])[::-1]
    R_next = tail[1:]
    return (1.0 - z) * gxx[:-1] - R_next * z + 1.0 - 2.0 * z


# ---------------------------------------------------------------------------
# Log posterior of the simplex-weight model
#
# theta = [u_w (J-1), u_gamma (K-1 if K > 0), log sigma (if sigma is free)]
# K == 0: sufficient-statistic likelihood y ~ N(Xw, sigma^2 I) via G = X'X,
#         b = X'y, yy = y'y over n_rows rows.
# K > 0:  row likelihood x1_k ~ N(x0_k'w, sigma^2 / gamma_k^2) with gamma on
#         the simplex under a Dirichlet(conc) prior.
# sigma ~ half-normal(sigma_scale) unless fixed_sigma > 0.


def _logp_loop(theta, J, K, fixed_sigma, sigma_scale, G, b, yy, n_rows, X, y, conc):
    D = theta.shape[0]
    grad = np.zeros(D)
    w = np.empty(J)
    zw = np.empty(max(J - 1, 0))
    logw = np.empty(J)
    lp = math.lgamma(float(J))
    lp += _stick_forward_loop(theta[0 : J - 1], w, zw, logw)
    off = J - 1
    gam = np.empty(K)
    zg = np.empty(max(K - 1, 0))
    loggam = np.empty(K)
    if K > 0:
        lp += _stick_forward_loop(theta[off : off + K - 1], gam, zg, loggam)
        off += K - 1
    if fixed_sigma > 0.0:
        sigma = fixed_sigma
        log_sigma = math.log(sigma)
    else:
        log_sigma = theta[off]
        if not abs(log_sigma) <= _LOG_SIGMA_MAX:
            return -np.inf, grad
        sigma = math.exp(log_sigma)
        lp += log_sigma
        lp += math.log(2.0) - 0.5 * _LOG_2PI - math.log(sigma_scale) - 0.5 * (sigma / sigma_scale) ** 2
    inv_s2 = 1.0 / (sigma * sigma)
    gw = np.zeros(J)
    gsig = 0.0
    ggxx = np.zeros(K)
    if K == 0:
        Gw = G @ w
        wb = 0.0
        wGw = 0.0
        for j in range(J):
            wb += w[j] * b[j]
            wGw += w[j] * Gw[j]
        rss = yy - 2.0 * wb + wGw
        if rss < 0.0:
            rss = 0.0
        lp += -n_rows * (log_sigma + 0.5 * _LOG_2PI) - 0.5 * rss * inv_s2
        for j in range(J):
            gw[j] = -(Gw[j] - b[j]) * inv_s2
        gsig = -n_rows / sigma + rss * inv_s2 / sigma
    else:
        csum = 0.0
        for k in range(K):
            csum += conc[k]
            lp += (conc[k] - 1.0) * loggam[k] - math.lgamma(conc[k])
        lp += math.lgamma(csum)
        for k in range(K):
            r = y[k]
            for j in range(J):
                r -= X[k, j] * w[j]
            prec = gam[k] * gam[k] * inv_s2
            lp += loggam[k] - log_sigma - 0.5 * _LOG_2PI - 0.5 * prec * r * r
            for j in range(J):
                gw[j] += X[k, j] * prec * r
            ggxx[k] = 1.0 - prec * r * r + (conc[k] - 1.0)
            gsig += -1.0 / sigma + prec * r * r / sigma
    if fixed_sigma <= 0.0:
        gsig += -sigma / (sigma_scale * sigma_scale)
        grad[D - 1] = gsig * sigma + 1.0
    if J > 1:
        gxx = np.empty(J)
        for j in range(J):
            gxx[j] = gw[j] * w[j]
        _stick_backward_loop(zw, gxx, grad[0 : J - 1])
    if K > 1:
        _stick_backward_loop(zg, ggxx, grad[J - 1 : J - 1 + K - 1])
    return lp, grad


def _logp_vec(theta, J, K, fixed_sigma, sigma_scale, G, b, yy, n_rows, X, y, conc):
    D = theta.shape[0]
    grad = np.zeros(D)
    w, zw, _, lj = _stick_forward_vec(theta[: J - 1], J)
    lp = math.lgamma(J) + lj
    off = J - 1
    if K > 0:
        gam, zg, loggam, ljg = _stick_forward_vec(theta[off : off + K - 1], K)
        lp += ljg
        off += K - 1
    if fixed_sigma > 0.0:
        sigma = fixed_sigma
        log_sigma = math.log(sigma)
    else:
        log_sigma = float(theta[off])
        if not abs(log_sigma) <= _LOG_SIGMA_MAX:
            return -np.inf, grad
        sigma = math.exp(log_sigma)
        lp += log_sigma
        lp += math.log(2.0) - 0.5 * _LOG_2PI - math.log(sigma_scale) - 0.5 * (sigma / sigma_scale) ** 2
    inv_s2 = 1.0 / (sigma * sigma)
    if K == 0:
        Gw = G @ w
        rss = max(yy - 2.0 * float(w @ b) + float(w @ Gw), 0.0)
        lp += -n_rows * (log_sigma + 0.5 * _LOG_2PI) - 0.5 * rss * inv_s2
        gw = -(Gw - b) * inv_s2
        gsig = -n_rows / sigma + rss * inv_s2 / sigma
    else:
        lp += math.lgamma(float(conc.sum())) - sum(math.lgamma(c) for c in conc)
        lp += float(np.sum((conc - 1.0) * loggam))
        r = y - X @ w
        prec = gam * gam * inv_s2
        lp += float(np.sum(loggam - log_sigma - 0.5 * _LOG_2PI - 0.5 * prec * r * r))
        gw = X.T @ (prec * r)
        ggxx = 1.0 - prec * r * r + (conc - 1.0)
        gsig = float(np.sum(-1.0 / sigma + prec * r * r / sigma))
    if fixed_sigma <= 0.0:
        gsig += -sigma / (sigma_scale * sigma_scale)
        grad[D - 1] = gsig * sigma + 1.0
    if J > 1:
        grad[: J - 1] = _stick_backward_vec(zw, gw * w)
    if K > 1:
        grad[J - 1 : J - 1 + K - 1] = _stick_backward_vec(zg, ggxx)
    return lp, grad


# ---------------------------------------------------------------------------
# HMC with jittered path length, dual averaging and diagonal metric adaptation
#
# All randomness is supplied by the caller: momenta (n_iter x D standard
# normals), uniforms (n_iter) and n_steps (n_iter ints).  phase marks warmup
# iterations: 0 = step-size only, 1 = also accumulate metric statistics,
# 2 = accumulate then update the metric at the end of a slow window.


def _make_chain(logp):
    def kinetic(p, inv_metric):
        e = 0.0
        for i in range(p.shape[0]):
            e += inv_metric[i] * p[i] * p[i]
        return 0.5 * e

    def leapfrog(q, p, g, eps, n_steps, inv_metric, H0, args):
        J, K, fs, ss, G, b, yy, n_rows, X, y, conc = args
        lp = 0.0
        for _ in range(n_steps):
            p = p + 0.5 * eps * g
            q = q + eps * inv_metric * p
            lp, g = logp(q, J, K, fs, ss, G, b, yy, n_rows, X, y, conc)
            p = p + 0.5 * eps * g
            H = -lp + kinetic(p, inv_metric)
            if not np.isfinite(H) or H - H0 > _DIVERGENCE:
                return q, g, lp, H, True
        return q, g, lp, -lp + kinetic(p, inv_metric), False

    def initial_step(theta, lp, g, inv_metric, r, args):
        eps = 0.5
        p = r / np.sqrt(inv_metric)
        H0 = -lp + kinetic(p, inv_metric)
        _, _, _, H1, div = leapfrog(theta, p, g, eps, 1, inv_metric, H0, args)
        dH = H0 - H1 if not div else -np.inf
        direction = 1.0 if dH > math.log(0.5) else -1.0
        for _ in range(60):
            _, _, _, H1, div = leapfrog(theta, p, g, eps, 1, inv_metric, H0, args)
            dH = H0 - H1 if not div else -np.inf
            if direction > 0.0 and not dH > math.log(0.5):
                break
            if direction < 0.0 and dH > math.log(0.5):
                break
            eps = eps * 2.0 if direction > 0.0 else eps * 0.5
            if eps < 1e-12 or eps > 1e6:
                break
        return eps

    def run_chain(theta0, n_warmup, n_draws, target_accept, momenta, uniforms, n_steps, phase, args):
        D = theta0.shape[0]
        inv_metric = np.ones(D)
        theta = theta0.copy()
        J, K, fs, ss, G, b, yy, n_rows, X, y, conc = args
        lp, g = logp(theta, J, K, fs, ss, G, b, yy, n_rows, X, y, conc)
        eps = initial_step(theta, lp, g, inv_metric, momenta[0], args)
        mu = math.log(10.0 * eps)
        hbar = 0.0
        log_eps_bar = 0.0
        m = 0
        w_n = 0
        w_mean = np.zeros(D)
        w_m2 = np.zeros(D)
        n_iter = n_warmup + n_draws
        draws = np.empty((n_draws, D))
        lp_draws = np.empty(n_draws)
        accept = np.empty(n_iter)
        divergent = np.zeros(n_iter, dtype=np.bool_)
        for it in range(n_iter):
            p = momenta[it] / np.sqrt(inv_metric)
            H0 = -lp + kinetic(p, inv_metric)
            q, gq, lpq, H, div = leapfrog(theta, p, g, eps, n_steps[it], inv_metric, H0, args)
            if div:
                acc = 0.0
            else:
                acc = math.exp(min(0.0, H0 - H))
            divergent[it] = div
            accept[it] = acc
            if not div and uniforms[it] < acc:
                theta = q
                g = gq
                lp = lpq
            if it < n_warmup:
                m += 1
                eta = 1.0 / (m + _DA_T0)
                hbar = (1.0 - eta) * hbar + eta * (target_accept - acc)
                log_eps = mu - math.sqrt(m) / _DA_GAMMA * hbar
                xeta = m ** (-_DA_KAPPA)
                log_eps_bar = xeta * log_eps + (1.0 - xeta) * log_eps_bar
                eps = math.exp(log_eps)
                ph = phase[it]
                if ph >= 1:
                    w_n += 1
                    delta = theta - w_mean
                    w_mean = w_mean + delta / w_n
                    w_m2 = w_m2 + delta * (theta - w_mean)
                if ph == 2 and w_n >= 3:
                    var = w_m2 / (w_n - 1)
                    inv_metric = (w_n / (w_n + 5.0)) * var + 1e-3 * (5.0 / (w_n + 5.0))
                    w_n = 0
                    w_mean = np.zeros(D)
                    w_m2 = np.zeros(D)
                    eps = initial_step(theta, lp, g, inv_metric, momenta[it], args)
                    mu = math.log(10.0 * eps)
                    hbar = 0.0
                    log_eps_bar = 0.0
                    m = 0
                if it == n_warmup - 1:
                    eps = math.exp(log_eps_bar) if m > 0 else eps
            else:
                draws[it - n_warmup] = theta
                lp_draws[it - n_warmup] = lp
        return draws, lp_draws, accept, divergent, eps, inv_metric

    return kinetic, leapfrog, initial_step, run_chain


# ---------------------------------------------------------------------------
# Gaussian KDE evaluation


def _kde_loop(samples, grid, h):
    n = samples.shape[0]
    out = np.empty(grid.shape[0])
    norm = 1.0 / (n * h * math.sqrt(2.0 * math.pi))
    for i in range(grid.shape[0]):
        acc = 0.0
        for j in range(n):
            d = (grid[i] - samples[j]) / h
            acc += math.exp(-0.5 * d * d)
        out[i] = acc * norm
    return out


def _kde_vec(samples, grid, h):
    n = samples.shape[0]
    out = np.empty(grid.shape[0])
    chunk = max(1, 4_000_000 // max(n, 1))
    for i0 in range(0, grid.shape[0], chunk):
        d = (grid[i0 : i0 + chunk, None] - samples[None, :]) / h
        out[i0 : i0 + chunk] = np.exp(-0.5 * d * d).sum(axis=1)
    return out / (n * h * math.sqrt(2.0 * math.pi))


# ---------------------------------------------------------------------------
# Backend assembly


def _numpy_backend() -> SimpleNamespace:
    _, _, _, chain = _make_chain(_logp_vec)
    return SimpleNamespace(
        name="numpy",
        ar1_paths=_ar1_paths_vec,
        frank_wolfe=_fw_vec,
        logp_grad=_logp_vec,
        run_chain=chain,
        kde_eval=_kde_vec,
    )


def _numba_backend() -> SimpleNamespace:
    global _log_sigmoid, _stick_forward_loop, _stick_backward_loop
    # helpers are resolved as globals by numba at compile time, so they must
    # be dispatchers before the kernels that call them are first compiled
    _log_sigmoid = _jit(_log_sigmoid)
    _stick_forward_loop = _jit(_stick_forward_loop)
    _stick_backward_loop = _jit(_stick_backward_loop)
    logp = _jit(_logp_loop)
    kinetic, leapfrog, initial_step, chain = _make_chain(logp)
    nb = numba.njit(nogil=True, error_model="numpy")
    kin = nb(kinetic)
    # rebuild with jitted inner helpers so the whole chain compiles as one unit
    lf = _closure_jit(leapfrog, logp=logp, kinetic=kin)
    init = _closure_jit(initial_step, leapfrog=lf, kinetic=kin)
    run = _closure_jit(chain, logp=logp, kinetic=kin, leapfrog=lf, initial_step=init)
    return SimpleNamespace(
        name="numba",
        ar1_paths=_jit(_ar1_paths_loop),
        frank_wolfe=_jit(_fw_loop),
        logp_grad=logp,
        run_chain=run,
        kde_eval=_jit(_kde_loop),
    )


def _closure_jit(fn, **freevars):
    """Compile a closure from :func:`_make_chain` with its free variables
    replaced by the given (jitted) objects."""
    import types

    names = fn.__code__.co_freevars
    cells = tuple(types.CellType(freevars[n]) if n in freevars else c for n, c in zip(names, fn.__closure__))
    rebuilt = types.FunctionType(fn.__code__, fn.__globals__, fn.__name__, fn.__defaults__, cells)
    return numba.njit(nogil=True)(rebuilt)


NUMPY_KERNELS = _numpy_backend()
NUMBA_KERNELS = _numba_backend() if HAVE_NUMBA else None


def active() -> SimpleNamespace:
    """Kernel set selected by the environment at import time."""
    return NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def backend_name() -> str:
    return active().name
