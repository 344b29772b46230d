"""Pure-Python/numpy twin of the compiled kernel core.

Bit-identical to _core.pyx by construction:

* integer stream math is exact (uint64 wraparound),
* transcendentals go through the same libm (math.log/cos/sin == libc),
* float expressions keep the same operation order, and reductions
  (pooling) accumulate sequentially exactly like the C loops.
"""

import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MULT1 = np.uint64(0xBF58476D1CE4E5B9)
_MULT2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1
_INV_2_53 = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * math.pi


def _mix_array(z):
    z = (z ^ (z >> np.uint64(30))) * _MULT1
    z = (z ^ (z >> np.uint64(27))) * _MULT2
    return z ^ (z >> np.uint64(31))


def splitmix_fill_u64(state, out):
    n = out.shape[0]
    with np.errstate(over="ignore"):
        steps = np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN
        out[:] = _mix_array(np.uint64(state) + steps)
    return (state + n * 0x9E3779B97F4A7C15) & _MASK


def uniform_fill(state, out):
    n = out.shape[0]
    raw = np.empty(n, dtype=np.uint64)
    state = splitmix_fill_u64(state, raw)
    out[:] = (raw >> np.uint64(11)).astype(np.float64) * _INV_2_53
    return state


def gaussian_fill(state, out):
    n = out.shape[0]
    npairs = (n + 1) // 2
    u = np.empty(2 * npairs, dtype=np.float64)
    state = uniform_fill(state, u)
    log, cos, sin, sqrt = math.log, math.cos, math.sin, math.sqrt
    for k in range(npairs):
        r = sqrt(-2.0 * log(1.0 - u[2 * k]))
        theta = _TWO_PI * u[2 * k + 1]
        i = 2 * k
        out[i] = r * cos(theta)
        if i + 1 < n:
            out[i + 1] = r * sin(theta)
    return state


def resample_trilinear(src, nx, ny, nz, sx, sy, sz, tx, ty, tz, dst, mx, my, mz):
    vol = np.asarray(src, dtype=np.float64).reshape(nz, ny, nx)

    def axis_coords(m, t, s, n):
        g = ((np.arange(m, dtype=np.float64) + 0.5) * t) / s - 0.5
        lo = np.floor(g)
        f = g - lo
        i0 = np.clip(lo.astype(np.int64), 0, n - 1)
        i1 = np.clip(lo.astype(np.int64) + 1, 0, n - 1)
        return i0, i1, f

    ix0, ix1, fx = axis_coords(mx, tx, sx, nx)
    iy0, iy1, fy = axis_coords(my, ty, sy, ny)
    iz0, iz1, fz = axis_coords(mz, tz, sz, nz)

    # broadcast to (mz, my, mx)
    fx = fx[None, None, :]
    fy = fy[None, :, None]
    fz = fz[:, None, None]
    X0, X1 = ix0[None, None, :], ix1[None, None, :]
    Y0, Y1 = iy0[None, :, None], iy1[None, :, None]
    Z0, Z1 = iz0[:, None, None], iz1[:, None, None]

    c00 = vol[Z0, Y0, X0] * (1.0 - fx) + vol[Z0, Y0, X1] * fx
    c10 = vol[Z0, Y1, X0] * (1.0 - fx) + vol[Z0, Y1, X1] * fx
    c01 = vol[Z1, Y0, X0] * (1.0 - fx) + vol[Z1, Y0, X1] * fx
    c11 = vol[Z1, Y1, X0] * (1.0 - fx) + vol[Z1, Y1, X1] * fx
    c0 = c00 * (1.0 - fy) + c10 * fy
    c1 = c01 * (1.0 - fy) + c11 * fy
    res = c0 * (1.0 - fz) + c1 * fz
    dst[:] = res.astype(np.float32).reshape(-1)


def avg_pool3d(src, nx, ny, nz, block, out):
    bxn, byn, bzn = nx // block, ny // block, nz // block
    vol = np.asarray(src, dtype=np.float64).reshape(nz, ny, nx)
    inv = 1.0 / float(block * block * block)
    for bz in range(bzn):
        for by in range(byn):
            for bx in range(bxn):
                cube = vol[bz * block:(bz + 1) * block,
                           by * block:(by + 1) * block,
                           bx * block:(bx + 1) * block]
                acc = 0.0
                for v in cube.reshape(-1):
                    acc += v
                out[bx + bxn * (by + byn * bz)] = acc * inv
