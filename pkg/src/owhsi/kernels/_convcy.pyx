# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled float32 convolution primitives.

Each output element is reduced in a fixed serial order by exactly one
thread, so results are bitwise identical for any thread count.
"""

from cython.parallel cimport prange


def corr_valid_f32(float[:, :, :, ::1] x, float[:, :, :, ::1] kern,
                   float[:, :, :, ::1] out, int threads):
    # x: [N,H,W,Ci]  kern: [kh,kw,Ci,Co]  out: [N,Ho,Wo,Co]
    cdef Py_ssize_t N = x.shape[0], Ci = x.shape[3]
    cdef Py_ssize_t kh = kern.shape[0], kw = kern.shape[1], Co = kern.shape[3]
    cdef Py_ssize_t Ho = out.shape[1], Wo = out.shape[2]
    cdef Py_ssize_t t, n, p, q, i, j, ci, co
    cdef float xv
    for t in prange(N * Ho, nogil=True, schedule='static', num_threads=threads):
        n = t // Ho
        p = t % Ho
        for q in range(Wo):
            for co in range(Co):
                out[n, p, q, co] = 0.0
            for i in range(kh):
                for j in range(kw):
                    for ci in range(Ci):
                        xv = x[n, p + i, q + j, ci]
                        for co in range(Co):
                            out[n, p, q, co] += xv * kern[i, j, ci, co]


def scatter_full_f32(float[:, :, :, ::1] g, float[:, :, :, ::1] kern_t,
                     float[:, :, :, ::1] out, int threads):
    # g: [N,P,Q,Cb]  kern_t: [kh,kw,Cb,Co] (transposed copy)  out: [N,P+kh-1,Q+kw-1,Co]
    # Gather form of the scatter adjoint: race-free under prange.
    cdef Py_ssize_t N = g.shape[0], P = g.shape[1], Q = g.shape[2], Cb = g.shape[3]
    cdef Py_ssize_t kh = kern_t.shape[0], kw = kern_t.shape[1], Co = kern_t.shape[3]
    cdef Py_ssize_t R = out.shape[1], S = out.shape[2]
    cdef Py_ssize_t t, n, r, s, i, j, cb, co, i0, i1, j0, j1
    cdef float gv
    for t in prange(N * R, nogil=True, schedule='static', num_threads=threads):
        n = t // R
        r = t % R
        i0 = r - P + 1
        if i0 < 0:
            i0 = 0
        i1 = kh - 1
        if r < i1:
            i1 = r
        for s in range(S):
            j0 = s - Q + 1
            if j0 < 0:
                j0 = 0
            j1 = kw - 1
            if s < j1:
                j1 = s
            for co in range(Co):
                out[n, r, s, co] = 0.0
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    for cb in range(Cb):
                        gv = g[n, r - i, s - j, cb]
                        for co in range(Co):
                            out[n, r, s, co] += gv * kern_t[i, j, cb, co]


def kernel_grad_f32(float[:, :, :, ::1] x, float[:, :, :, ::1] g,
                    float[:, :, :, ::1] out, int threads):
    # x: [N,H,W,Ca]  g: [N,P,Q,Cb]  out: [kh,kw,Ca,Cb]
    cdef Py_ssize_t N = x.shape[0], Ca = x.shape[3]
    cdef Py_ssize_t P = g.shape[1], Q = g.shape[2], Cb = g.shape[3]
    cdef Py_ssize_t kh = out.shape[0], kw = out.shape[1]
    cdef Py_ssize_t t, i, j, ca, cb, n, p, q
    cdef float xv
    for t in prange(kh * kw * Ca, nogil=True, schedule='static', num_threads=threads):
        i = t // (kw * Ca)
        j = (t // Ca) % kw
        ca = t % Ca
        for cb in range(Cb):
            out[i, j, ca, cb] = 0.0
        for n in range(N):
            for p in range(P):
                for q in range(Q):
                    xv = x[n, p + i, q + j, ca]
                    for cb in range(Cb):
                        out[i, j, ca, cb] += xv * g[n, p, q, cb]
