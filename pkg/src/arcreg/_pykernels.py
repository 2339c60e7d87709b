"""Pure-numpy trilinear kernels (fallback for the compiled ``_ckernels``)."""
import numpy as np


def _locate(p, n):
    inside = ((p >= 0.0) & (p <= n - 1)).astype(np.float64)
    if n < 2:
        zeros = np.zeros(p.shape, dtype=np.intp)
        return zeros, zeros, np.zeros(p.shape), np.zeros(p.shape)
    pc = np.clip(p, 0.0, n - 1)
    i0 = np.minimum(np.floor(pc).astype(np.intp), n - 2)
    return i0, i0 + 1, pc - i0, inside


def _corners(vol, pos):
    nx, ny, nz = vol.shape[:3]
    x0, x1, fx, ix = _locate(pos[:, 0], nx)
    y0, y1, fy, iy = _locate(pos[:, 1], ny)
    z0, z1, fz, iz = _locate(pos[:, 2], nz)
    return (x0, x1, y0, y1, z0, z1), (fx, fy, fz), (ix, iy, iz)


def interp(vol, pos):
    (x0, x1, y0, y1, z0, z1), (fx, fy, fz), _ = _corners(vol, pos)
    gx, gy, gz = (1.0 - fx)[:, None], (1.0 - fy)[:, None], (1.0 - fz)[:, None]
    fx, fy, fz = fx[:, None], fy[:, None], fz[:, None]
    c00 = vol[x0, y0, z0] * gx + vol[x1, y0, z0] * fx
    c10 = vol[x0, y1, z0] * gx + vol[x1, y1, z0] * fx
    c01 = vol[x0, y0, z1] * gx + vol[x1, y0, z1] * fx
    c11 = vol[x0, y1, z1] * gx + vol[x1, y1, z1] * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    return c0 * gz + c1 * fz


def interp_grad(vol, pos):
    (x0, x1, y0, y1, z0, z1), (fx, fy, fz), (ix, iy, iz) = _corners(vol, pos)
    gx, gy, gz = (1.0 - fx)[:, None], (1.0 - fy)[:, None], (1.0 - fz)[:, None]
    fx, fy, fz = fx[:, None], fy[:, None], fz[:, None]
    v000, v100 = vol[x0, y0, z0], vol[x1, y0, z0]
    v010, v110 = vol[x0, y1, z0], vol[x1, y1, z0]
    v001, v101 = vol[x0, y0, z1], vol[x1, y0, z1]
    v011, v111 = vol[x0, y1, z1], vol[x1, y1, z1]
    c00 = v000 * gx + v100 * fx
    c10 = v010 * gx + v110 * fx
    c01 = v001 * gx + v101 * fx
    c11 = v011 * gx + v111 * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    out = c0 * gz + c1 * fz
    der = np.empty(out.shape + (3,))
    der[:, :, 0] = (((v100 - v000) * gy + (v110 - v010) * fy) * gz
                    + ((v101 - v001) * gy + (v111 - v011) * fy) * fz) * ix[:, None]
    der[:, :, 1] = ((c10 - c00) * gz + (c11 - c01) * fz) * iy[:, None]
    der[:, :, 2] = (c1 - c0) * iz[:, None]
    return out, der


def interp_adjoint(pos, g, shape):
    nx, ny, nz = shape
    nc = g.shape[1]
    (x0, x1, y0, y1, z0, z1), (fx, fy, fz), _ = _corners(np.empty((nx, ny, nz, 0)), pos)
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    nvox = nx * ny * nz
    acc = np.zeros((nvox, nc))
    corners = (
        (x0, y0, z0, gx * gy * gz), (x1, y0, z0, fx * gy * gz),
        (x0, y1, z0, gx * fy * gz), (x1, y1, z0, fx * fy * gz),
        (x0, y0, z1, gx * gy * fz), (x1, y0, z1, fx * gy * fz),
        (x0, y1, z1, gx * fy * fz), (x1, y1, z1, fx * fy * fz),
    )
    for xi, yi, zi, w in corners:
        flat = (xi * ny + yi) * nz + zi
        for c in range(nc):
            acc[:, c] += np.bincount(flat, weights=w * g[:, c], minlength=nvox)
    return acc.reshape(nx, ny, nz, nc)


def compose_backward(d, g):
    shape = d.shape[:3]
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    pos = (np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1) + d).reshape(-1, 3)
    gf = g.reshape(-1, 3)
    _, der = interp_grad(d, pos)
    through_pos = np.einsum("nc,ncj->nj", gf, der).reshape(g.shape)
    return g + through_pos + interp_adjoint(pos, gf, shape)
