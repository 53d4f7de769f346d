# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels. Semantics match mdg._kernels_py."""
import numpy as np
from libc.math cimport cos, sin, fmod, fabs, M_PI


cdef inline double _wrap(double a) nogil:
    cdef double y = fmod(a + M_PI, 2.0 * M_PI)
    if y < 0:
        y += 2.0 * M_PI
    y -= M_PI
    if y == -M_PI:
        y = M_PI
    return y


def rollout_forward(init, actions, double dt, int chunk):
    cdef const double[:, ::1] s0 = np.ascontiguousarray(init, dtype=np.float64)
    cdef const double[:, :, ::1] u = np.ascontiguousarray(actions, dtype=np.float64)
    cdef Py_ssize_t n = u.shape[0], ta = u.shape[1]
    out_arr = np.empty((n, ta * chunk, 4))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, c, j, k
    cdef double x, y, th, v, acc, yaw
    with nogil:
        for i in range(n):
            x = s0[i, 0]
            y = s0[i, 1]
            th = s0[i, 2]
            v = s0[i, 3]
            k = 0
            for c in range(ta):
                acc = u[i, c, 0]
                yaw = u[i, c, 1]
                for j in range(chunk):
                    v = v + acc * dt
                    th = _wrap(th + yaw * dt)
                    x = x + v * cos(th) * dt
                    y = y + v * sin(th) * dt
                    out[i, k, 0] = x
                    out[i, k, 1] = y
                    out[i, k, 2] = th
                    out[i, k, 3] = v
                    k += 1
    return out_arr


def rollout_backward(states, grad_states, double dt, int chunk):
    cdef const double[:, :, ::1] st = np.ascontiguousarray(states, dtype=np.float64)
    cdef const double[:, :, ::1] g = np.ascontiguousarray(grad_states, dtype=np.float64)
    cdef Py_ssize_t n = st.shape[0], tt = st.shape[1]
    cdef Py_ssize_t ta = tt // chunk
    ga_arr = np.zeros((n, ta, 2))
    gi_arr = np.empty((n, 4))
    cdef double[:, :, ::1] ga = ga_arr
    cdef double[:, ::1] gi = gi_arr
    cdef Py_ssize_t i, k
    cdef double bx, by, bth, bv, c, s, vt, tht, v
    with nogil:
        for i in range(n):
            bx = 0.0
            by = 0.0
            bth = 0.0
            bv = 0.0
            for k in range(tt - 1, -1, -1):
                bx = bx + g[i, k, 0]
                by = by + g[i, k, 1]
                bth = bth + g[i, k, 2]
                bv = bv + g[i, k, 3]
                c = cos(st[i, k, 2])
                s = sin(st[i, k, 2])
                v = st[i, k, 3]
                vt = bv + (bx * c + by * s) * dt
                tht = bth + (by * c - bx * s) * v * dt
                ga[i, k // chunk, 0] += vt * dt
                ga[i, k // chunk, 1] += tht * dt
                bth = tht
                bv = vt
            gi[i, 0] = bx
            gi[i, 1] = by
            gi[i, 2] = bth
            gi[i, 3] = bv
    return ga_arr, gi_arr


cdef inline double _radius(double ux, double uy, double c, double s, double hl, double hw) nogil:
    return hl * fabs(ux * c + uy * s) + hw * fabs(-ux * s + uy * c)


def obb_overlap_frames(boxes):
    cdef const double[:, :, ::1] b = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef Py_ssize_t nf = b.shape[0], n = b.shape[1]
    out_arr = np.zeros((nf, n, n), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] out = out_arr
    cdef Py_ssize_t f, i, j, a
    cdef double ci, si, cj, sj, dx, dy, ux, uy, hli, hwi, hlj, hwj
    cdef bint sep
    with nogil:
        for f in range(nf):
            for i in range(n):
                ci = cos(b[f, i, 2])
                si = sin(b[f, i, 2])
                hli = 0.5 * b[f, i, 3]
                hwi = 0.5 * b[f, i, 4]
                for j in range(i + 1, n):
                    cj = cos(b[f, j, 2])
                    sj = sin(b[f, j, 2])
                    hlj = 0.5 * b[f, j, 3]
                    hwj = 0.5 * b[f, j, 4]
                    dx = b[f, j, 0] - b[f, i, 0]
                    dy = b[f, j, 1] - b[f, i, 1]
                    sep = False
                    for a in range(4):
                        if a == 0:
                            ux = ci
                            uy = si
                        elif a == 1:
                            ux = -si
                            uy = ci
                        elif a == 2:
                            ux = cj
                            uy = sj
                        else:
                            ux = -sj
                            uy = cj
                        if fabs(dx * ux + dy * uy) >= _radius(ux, uy, ci, si, hli, hwi) + _radius(ux, uy, cj, sj, hlj, hwj):
                            sep = True
                            break
                    if not sep:
                        out[f, i, j] = 1
                        out[f, j, i] = 1
    return out_arr.astype(bool)
