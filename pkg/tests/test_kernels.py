import numpy as np

from protoreg import kernels


def _conv_case(seed=0):
    rng = np.random.default_rng(seed)
    xp = rng.normal(size=(2, 9, 9, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    return np.ascontiguousarray(xp), np.ascontiguousarray(w)


def test_conv_forward_paths_agree():
    xp, w = _conv_case()
    for stride in (1, 2):
        a = kernels.conv2d_forward_np(xp, w, stride, stride)
        b = kernels.conv2d_forward_nb(xp, w, stride, stride)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_conv_grad_paths_agree():
    xp, w = _conv_case(1)
    out = kernels.conv2d_forward_np(xp, w, 2, 2)
    g = np.ascontiguousarray(np.random.default_rng(2).normal(size=out.shape))
    gi_np = kernels.conv2d_grad_input_np(g, w, 2, 2, 9, 9)
    gi_nb = kernels.conv2d_grad_input_nb(g, w, 2, 2, 9, 9)
    np.testing.assert_allclose(gi_np, gi_nb, rtol=1e-12, atol=1e-12)
    gw_np = kernels.conv2d_grad_weights_np(xp, g, 2, 2, 3, 3)
    gw_nb = kernels.conv2d_grad_weights_nb(xp, g, 2, 2, 3, 3)
    np.testing.assert_allclose(gw_np, gw_nb, rtol=1e-12, atol=1e-12)


def test_pairwise_paths_agree():
    rng = np.random.default_rng(3)
    a = np.ascontiguousarray(rng.normal(size=(4, 6, 5)))
    b = np.ascontiguousarray(rng.normal(size=(4, 7, 5)))
    d_np = kernels.pairwise_dist_forward_np(a, b)
    d_nb = kernels.pairwise_dist_forward_nb(a, b)
    np.testing.assert_allclose(d_np, d_nb, rtol=1e-12, atol=1e-12)
    g = np.ascontiguousarray(rng.normal(size=d_np.shape))
    ga_np, gb_np = kernels.pairwise_dist_backward_np(a, b, d_np, g)
    ga_nb, gb_nb = kernels.pairwise_dist_backward_nb(a, b, d_nb, g)
    np.testing.assert_allclose(ga_np, ga_nb, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gb_np, gb_nb, rtol=1e-12, atol=1e-12)


def test_selected_path_matches_flag():
    if kernels.NUMBA_ENABLED:
        assert kernels.conv2d_forward is kernels.conv2d_forward_nb
    else:
        assert kernels.conv2d_forward is kernels.conv2d_forward_np
