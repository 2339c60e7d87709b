# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled trilinear kernels.

Arithmetic order mirrors ``_pykernels`` term for term so both backends
produce the same values for sampling.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline void _locate(double p, Py_ssize_t n, Py_ssize_t* i0, Py_ssize_t* i1,
                         double* f, double* inside) noexcept nogil:
    cdef double pc = p
    inside[0] = 1.0
    if pc < 0.0:
        pc = 0.0
        inside[0] = 0.0
    elif pc > n - 1:
        pc = n - 1
        inside[0] = 0.0
    if n < 2:
        i0[0] = 0
        i1[0] = 0
        f[0] = 0.0
        inside[0] = 0.0
        return
    cdef Py_ssize_t i = <Py_ssize_t>floor(pc)
    if i > n - 2:
        i = n - 2
    i0[0] = i
    i1[0] = i + 1
    f[0] = pc - i


def interp(const double[:, :, :, ::1] vol, const double[:, ::1] pos):
    cdef Py_ssize_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    cdef Py_ssize_t nc = vol.shape[3], npts = pos.shape[0]
    out_arr = np.empty((npts, nc), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, c, x0, x1, y0, y1, z0, z1
    cdef double fx, fy, fz, gx, gy, gz, ix, iy, iz
    cdef double c00, c10, c01, c11, c0, c1
    with nogil:
        for k in range(npts):
            _locate(pos[k, 0], nx, &x0, &x1, &fx, &ix)
            _locate(pos[k, 1], ny, &y0, &y1, &fy, &iy)
            _locate(pos[k, 2], nz, &z0, &z1, &fz, &iz)
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            for c in range(nc):
                c00 = vol[x0, y0, z0, c] * gx + vol[x1, y0, z0, c] * fx
                c10 = vol[x0, y1, z0, c] * gx + vol[x1, y1, z0, c] * fx
                c01 = vol[x0, y0, z1, c] * gx + vol[x1, y0, z1, c] * fx
                c11 = vol[x0, y1, z1, c] * gx + vol[x1, y1, z1, c] * fx
                c0 = c00 * gy + c10 * fy
                c1 = c01 * gy + c11 * fy
                out[k, c] = c0 * gz + c1 * fz
    return out_arr


def interp_grad(const double[:, :, :, ::1] vol, const double[:, ::1] pos):
    cdef Py_ssize_t nx = vol.shape[0], ny = vol.shape[1], nz = vol.shape[2]
    cdef Py_ssize_t nc = vol.shape[3], npts = pos.shape[0]
    out_arr = np.empty((npts, nc), dtype=np.float64)
    der_arr = np.empty((npts, nc, 3), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, :, ::1] der = der_arr
    cdef Py_ssize_t k, c, x0, x1, y0, y1, z0, z1
    cdef double fx, fy, fz, gx, gy, gz, ix, iy, iz
    cdef double v000, v100, v010, v110, v001, v101, v011, v111
    cdef double c00, c10, c01, c11, c0, c1
    with nogil:
        for k in range(npts):
            _locate(pos[k, 0], nx, &x0, &x1, &fx, &ix)
            _locate(pos[k, 1], ny, &y0, &y1, &fy, &iy)
            _locate(pos[k, 2], nz, &z0, &z1, &fz, &iz)
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            for c in range(nc):
                v000 = vol[x0, y0, z0, c]
                v100 = vol[x1, y0, z0, c]
                v010 = vol[x0, y1, z0, c]
                v110 = vol[x1, y1, z0, c]
                v001 = vol[x0, y0, z1, c]
                v101 = vol[x1, y0, z1, c]
                v011 = vol[x0, y1, z1, c]
                v111 = vol[x1, y1, z1, c]
                c00 = v000 * gx + v100 * fx
                c10 = v010 * gx + v110 * fx
                c01 = v001 * gx + v101 * fx
                c11 = v011 * gx + v111 * fx
                c0 = c00 * gy + c10 * fy
                c1 = c01 * gy + c11 * fy
                out[k, c] = c0 * gz + c1 * fz
                der[k, c, 0] = (((v100 - v000) * gy + (v110 - v010) * fy) * gz
                                + ((v101 - v001) * gy + (v111 - v011) * fy) * fz) * ix
                der[k, c, 1] = ((c10 - c00) * gz + (c11 - c01) * fz) * iy
                der[k, c, 2] = (c1 - c0) * iz
    return out_arr, der_arr


def interp_adjoint(const double[:, ::1] pos, const double[:, ::1] g, tuple shape):
    cdef Py_ssize_t nx = shape[0], ny = shape[1], nz = shape[2]
    cdef Py_ssize_t nc = g.shape[1], npts = pos.shape[0]
    acc_arr = np.zeros((nx, ny, nz, nc), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t k, c, x0, x1, y0, y1, z0, z1
    cdef double fx, fy, fz, gx, gy, gz, ix, iy, iz, val
    with nogil:
        for k in range(npts):
            _locate(pos[k, 0], nx, &x0, &x1, &fx, &ix)
            _locate(pos[k, 1], ny, &y0, &y1, &fy, &iy)
            _locate(pos[k, 2], nz, &z0, &z1, &fz, &iz)
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            for c in range(nc):
                val = g[k, c]
                acc[x0, y0, z0, c] += gx * gy * gz * val
                acc[x1, y0, z0, c] += fx * gy * gz * val
                acc[x0, y1, z0, c] += gx * fy * gz * val
                acc[x1, y1, z0, c] += fx * fy * gz * val
                acc[x0, y0, z1, c] += gx * gy * fz * val
                acc[x1, y0, z1, c] += fx * gy * fz * val
                acc[x0, y1, z1, c] += gx * fy * fz * val
                acc[x1, y1, z1, c] += fx * fy * fz * val
    return acc_arr


def compose_backward(const double[:, :, :, ::1] d, const double[:, :, :, ::1] g):
    """Gradient w.r.t. ``d`` of ``<g, d + d(x + d)>``, i.e. one squaring step backwards."""
    cdef Py_ssize_t nx = d.shape[0], ny = d.shape[1], nz = d.shape[2]
    out_arr = np.array(g, dtype=np.float64, copy=True)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t a, b, e, c, x0, x1, y0, y1, z0, z1
    cdef double fx, fy, fz, gx, gy, gz, ix, iy, iz, val
    cdef double v000, v100, v010, v110, v001, v101, v011, v111
    cdef double c00, c10, c01, c11, c0, c1, dx, dy, dz
    with nogil:
        for a in range(nx):
            for b in range(ny):
                for e in range(nz):
                    _locate(a + d[a, b, e, 0], nx, &x0, &x1, &fx, &ix)
                    _locate(b + d[a, b, e, 1], ny, &y0, &y1, &fy, &iy)
                    _locate(e + d[a, b, e, 2], nz, &z0, &z1, &fz, &iz)
                    gx = 1.0 - fx
                    gy = 1.0 - fy
                    gz = 1.0 - fz
                    dx = 0.0
                    dy = 0.0
                    dz = 0.0
                    for c in range(3):
                        val = g[a, b, e, c]
                        v000 = d[x0, y0, z0, c]
                        v100 = d[x1, y0, z0, c]
                        v010 = d[x0, y1, z0, c]
                        v110 = d[x1, y1, z0, c]
                        v001 = d[x0, y0, z1, c]
                        v101 = d[x1, y0, z1, c]
                        v011 = d[x0, y1, z1, c]
                        v111 = d[x1, y1, z1, c]
                        c00 = v000 * gx + v100 * fx
                        c10 = v010 * gx + v110 * fx
                        c01 = v001 * gx + v101 * fx
                        c11 = v011 * gx + v111 * fx
                        c0 = c00 * gy + c10 * fy
                        c1 = c01 * gy + c11 * fy
                        dx = dx + val * ((((v100 - v000) * gy + (v110 - v010) * fy) * gz
                                          + ((v101 - v001) * gy + (v111 - v011) * fy) * fz) * ix)
                        dy = dy + val * (((c10 - c00) * gz + (c11 - c01) * fz) * iy)
                        dz = dz + val * ((c1 - c0) * iz)
                        # through the sampled value
                        out[x0, y0, z0, c] += gx * gy * gz * val
                        out[x1, y0, z0, c] += fx * gy * gz * val
                        out[x0, y1, z0, c] += gx * fy * gz * val
                        out[x1, y1, z0, c] += fx * fy * gz * val
                        out[x0, y0, z1, c] += gx * gy * fz * val
                        out[x1, y0, z1, c] += fx * gy * fz * val
                        out[x0, y1, z1, c] += gx * fy * fz * val
                        out[x1, y1, z1, c] += fx * fy * fz * val
                    # through the sample position
                    out[a, b, e, 0] += dx
                    out[a, b, e, 1] += dy
                    out[a, b, e, 2] += dz
    return out_arr
