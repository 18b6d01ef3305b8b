# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution kernels (hot loops of the tensor library).

Same call signatures as :mod:`attnmine.kernels_np`; inputs are contiguous,
pre-padded arrays. Each convolution lowers to one large matrix product over
an im2col buffer with the batch folded into the column dimension. The
gather/scatter copies run in C; the product itself goes through numpy's
BLAS, which the fallback path cannot exploit as effectively because its
windowed views force strided access. float32 and float64 are supported
through a fused type.
"""

import numpy as np

cimport cython
from libc.string cimport memcpy

BACKEND = "native"

ctypedef fused real:
    float
    double


cdef void _im2col(real *xp, real *cols, Py_ssize_t nb, Py_ssize_t cin,
                  Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t k, int stride,
                  Py_ssize_t ho, Py_ssize_t wo) nogil:
    # cols[(ci*k+i)*k+j, (b*ho+oh)*wo+ow] = xp[b, ci, oh*stride+i, ow*stride+j]
    cdef Py_ssize_t m = nb * ho * wo
    cdef Py_ssize_t b, ci, i, j, oh, ow
    cdef real *src
    cdef real *dst
    for ci in range(cin):
        for i in range(k):
            for j in range(k):
                dst = cols + ((ci * k + i) * k + j) * m
                for b in range(nb):
                    for oh in range(ho):
                        src = xp + ((b * cin + ci) * hp + oh * stride + i) * wp + j
                        if stride == 1:
                            memcpy(dst, src, wo * sizeof(real))
                        else:
                            for ow in range(wo):
                                dst[ow] = src[ow * stride]
                        dst += wo
    return


cdef void _gather_batch(real *g, real *gt, Py_ssize_t nb, Py_ssize_t cout,
                        Py_ssize_t plane) nogil:
    # gt[co, b*plane : (b+1)*plane] = g[b, co] output plane
    cdef Py_ssize_t b, co
    for b in range(nb):
        for co in range(cout):
            memcpy(gt + (co * nb + b) * plane,
                   g + (b * cout + co) * plane,
                   plane * sizeof(real))


def conv2d_forward(real[:, :, :, ::1] xp, real[:, :, :, ::1] w,
                   real[::1] bias, int stride):
    cdef Py_ssize_t nb = xp.shape[0], cin = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t ho = (hp - k) // stride + 1
    cdef Py_ssize_t wo = (wp - k) // stride + 1
    cdef Py_ssize_t kk = cin * k * k, m = nb * ho * wo, plane = ho * wo
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    cols_arr = np.empty((kk, m), dtype=dtype)
    out_arr = np.empty((nb, cout, ho, wo), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef real[:, :, :, ::1] out = out_arr
    with nogil:
        _im2col(&xp[0, 0, 0, 0], &cols[0, 0], nb, cin, hp, wp, k, stride,
                ho, wo)
    prod_arr = np.asarray(w).reshape(cout, kk) @ cols_arr
    cdef real[:, ::1] prod = prod_arr
    cdef Py_ssize_t b, co, p
    cdef real bv
    cdef real *src
    cdef real *dst
    with nogil:
        for b in range(nb):
            for co in range(cout):
                src = &prod[co, b * plane]
                dst = &out[b, co, 0, 0]
                bv = bias[co]
                for p in range(plane):
                    dst[p] = src[p] + bv
    return out_arr


def conv2d_backward_input(real[:, :, :, ::1] g, real[:, :, :, ::1] w,
                          int stride, Py_ssize_t hp, Py_ssize_t wp):
    cdef Py_ssize_t nb = g.shape[0], cout = g.shape[1]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t cin = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t kk = cin * k * k, m = nb * ho * wo, plane = ho * wo
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    gt_arr = np.empty((cout, m), dtype=dtype)
    gx_arr = np.zeros((nb, cin, hp, wp), dtype=dtype)
    cdef real[:, ::1] gt = gt_arr
    cdef real[:, :, :, ::1] gx = gx_arr
    with nogil:
        _gather_batch(&g[0, 0, 0, 0], &gt[0, 0], nb, cout, plane)
    # cols[kk, m] = W^T @ gt, then scatter-add windows back into gx
    cols_arr = np.asarray(w).reshape(cout, kk).T @ gt_arr
    cdef real[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, ci, i, j, oh, ow
    cdef real *src
    cdef real *dst
    with nogil:
        for ci in range(cin):
            for i in range(k):
                for j in range(k):
                    src = &cols[(ci * k + i) * k + j, 0]
                    for b in range(nb):
                        for oh in range(ho):
                            dst = &gx[b, ci, oh * stride + i, j]
                            if stride == 1:
                                for ow in range(wo):
                                    dst[ow] += src[ow]
                            else:
                                for ow in range(wo):
                                    dst[ow * stride] += src[ow]
                            src += wo
    return gx_arr


def conv2d_backward_kernel(real[:, :, :, ::1] g, real[:, :, :, ::1] xp,
                           Py_ssize_t k, int stride):
    cdef Py_ssize_t nb = g.shape[0], cout = g.shape[1]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t cin = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t kk = cin * k * k, m = nb * ho * wo, plane = ho * wo
    if real is float:
        dtype = np.float32
    else:
        dtype = np.float64
    cols_arr = np.empty((kk, m), dtype=dtype)
    gt_arr = np.empty((cout, m), dtype=dtype)
    cdef real[:, ::1] cols = cols_arr
    cdef real[:, ::1] gt = gt_arr
    with nogil:
        _im2col(&xp[0, 0, 0, 0], &cols[0, 0], nb, cin, hp, wp, k, stride,
                ho, wo)
        _gather_batch(&g[0, 0, 0, 0], &gt[0, 0], nb, cout, plane)
    # gw[cout, kk] = gt @ cols^T
    gw = gt_arr @ cols_arr.T
    return np.ascontiguousarray(gw).reshape(cout, cin, k, k)
