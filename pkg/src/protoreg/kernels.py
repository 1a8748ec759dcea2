"""Hot numeric kernels: numba-jitted loops with pure-numpy fallbacks.

The jitted path is the default. Set ``PROTOREG_NUMBA=0`` (or ``false``/``no``/
``off``) before import to force the numpy implementations. Both paths compute
the same quantities; results agree up to floating-point summation order.
``benchmarks/bench_kernels.py`` times the two side by side.

All kernels take float64 C-contiguous arrays. Convolution kernels operate on
pre-padded inputs; padding and bias handling live in the calling op.
"""

import os

import numpy as np

_FLAG = os.environ.get("PROTOREG_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _FLAG not in ("0", "false", "no", "off")

try:
    if NUMBA_REQUESTED:
        from numba import njit
        NUMBA_ENABLED = True
    else:
        NUMBA_ENABLED = False
except ImportError:
    NUMBA_ENABLED = False

if not NUMBA_ENABLED:
    def njit(*args, **kwargs):
        # decorator stand-in so the jitted definitions below stay importable
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


# ---------------------------------------------------------------------------
# numpy implementations

def conv2d_forward_np(xp, w, sh, sw):
    """Valid convolution of padded input xp (N,H,W,Ci) with w (kh,kw,Ci,Co)."""
    n, hp, wp, ci = xp.shape
    kh, kw, _, co = w.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    cols = np.empty((n, ho, wo, kh * kw * ci), dtype=np.float64)
    k = 0
    for i in range(kh):
        for j in range(kw):
            cols[..., k * ci:(k + 1) * ci] = xp[:, i:i + ho * sh:sh, j:j + wo * sw:sw, :]
            k += 1
    out = cols.reshape(-1, kh * kw * ci) @ w.reshape(kh * kw * ci, co)
    return out.reshape(n, ho, wo, co)


def conv2d_grad_input_np(g, w, sh, sw, hp, wp):
    """Gradient wrt the padded input; g is (N,Ho,Wo,Co)."""
    n, ho, wo, co = g.shape
    kh, kw, ci, _ = w.shape
    gx = np.zeros((n, hp, wp, ci), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + ho * sh:sh, j:j + wo * sw:sw, :] += g @ w[i, j].T
    return gx


def conv2d_grad_weights_np(xp, g, sh, sw, kh, kw):
    n, ho, wo, co = g.shape
    ci = xp.shape[3]
    gw = np.empty((kh, kw, ci, co), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, i:i + ho * sh:sh, j:j + wo * sw:sw, :]
            gw[i, j] = np.tensordot(xs, g, axes=([0, 1, 2], [0, 1, 2]))
    return gw


def pairwise_dist_forward_np(a, b):
    """Euclidean distances between row sets: a (nb,m,c), b (nb,m2,c) -> (nb,m,m2)."""
    diff = a[:, :, None, :] - b[:, None, :, :]
    return np.sqrt(np.einsum("nijc,nijc->nij", diff, diff))


def pairwise_dist_backward_np(a, b, dist, g):
    """Adjoint of pairwise_dist_forward; zero subgradient where dist == 0."""
    diff = a[:, :, None, :] - b[:, None, :, :]
    scale = np.where(dist > 0.0, g / np.where(dist > 0.0, dist, 1.0), 0.0)
    ga = np.einsum("nij,nijc->nic", scale, diff)
    gb = -np.einsum("nij,nijc->njc", scale, diff)
    return ga, gb


# ---------------------------------------------------------------------------
# numba implementations (same contracts, explicit loops)

@njit(cache=True)
def conv2d_forward_nb(xp, w, sh, sw):
    n, hp, wp, ci = xp.shape
    kh, kw, _, co = w.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    out = np.zeros((n, ho, wo, co), dtype=np.float64)
    for nn in range(n):
        for y in range(ho):
            for x in range(wo):
                for i in range(kh):
                    for j in range(kw):
                        for c in range(ci):
                            v = xp[nn, y * sh + i, x * sw + j, c]
                            for o in range(co):
                                out[nn, y, x, o] += v * w[i, j, c, o]
    return out


@njit(cache=True)
def conv2d_grad_input_nb(g, w, sh, sw, hp, wp):
    n, ho, wo, co = g.shape
    kh, kw, ci, _ = w.shape
    gx = np.zeros((n, hp, wp, ci), dtype=np.float64)
    for nn in range(n):
        for y in range(ho):
            for x in range(wo):
                for i in range(kh):
                    for j in range(kw):
                        for c in range(ci):
                            acc = 0.0
                            for o in range(co):
                                acc += g[nn, y, x, o] * w[i, j, c, o]
                            gx[nn, y * sh + i, x * sw + j, c] += acc
    return gx


@njit(cache=True)
def conv2d_grad_weights_nb(xp, g, sh, sw, kh, kw):
    n, ho, wo, co = g.shape
    ci = xp.shape[3]
    gw = np.zeros((kh, kw, ci, co), dtype=np.float64)
    for nn in range(n):
        for y in range(ho):
            for x in range(wo):
                for i in range(kh):
                    for j in range(kw):
                        for c in range(ci):
                            v = xp[nn, y * sh + i, x * sw + j, c]
                            for o in range(co):
                                gw[i, j, c, o] += v * g[nn, y, x, o]
    return gw


@njit(cache=True)
def pairwise_dist_forward_nb(a, b):
    nb, m, c = a.shape
    m2 = b.shape[1]
    out = np.empty((nb, m, m2), dtype=np.float64)
    for n in range(nb):
        for i in range(m):
            for j in range(m2):
                acc = 0.0
                for k in range(c):
                    d = a[n, i, k] - b[n, j, k]
                    acc += d * d
                out[n, i, j] = np.sqrt(acc)
    return out


@njit(cache=True)
def pairwise_dist_backward_nb(a, b, dist, g):
    nb, m, c = a.shape
    m2 = b.shape[1]
    ga = np.zeros((nb, m, c), dtype=np.float64)
    gb = np.zeros((nb, m2, c), dtype=np.float64)
    for n in range(nb):
        for i in range(m):
            for j in range(m2):
                d = dist[n, i, j]
                if d > 0.0:
                    s = g[n, i, j] / d
                    for k in range(c):
                        t = s * (a[n, i, k] - b[n, j, k])
                        ga[n, i, k] += t
                        gb[n, j, k] -= t
    return ga, gb


if NUMBA_ENABLED:
    conv2d_forward = conv2d_forward_nb
    conv2d_grad_input = conv2d_grad_input_nb
    conv2d_grad_weights = conv2d_grad_weights_nb
    pairwise_dist_forward = pairwise_dist_forward_nb
    pairwise_dist_backward = pairwise_dist_backward_nb
else:
    conv2d_forward = conv2d_forward_np
    conv2d_grad_input = conv2d_grad_input_np
    conv2d_grad_weights = conv2d_grad_weights_np
    pairwise_dist_forward = pairwise_dist_forward_np
    pairwise_dist_backward = pairwise_dist_backward_np
