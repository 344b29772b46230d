# Compiled hot kernels: SplitMix64 stream fills, Box-Muller gaussians,
# trilinear volume resampling and block average-pooling.
#
# Every function here has a bit-identical pure-Python twin in _pure.py;
# hiertax._kernels selects one backend at import time.  Keep the arithmetic
# expression order in both files in sync: IEEE-754 double ops are correctly
# rounded, so identical expression trees give identical bits (the build
# disables FMA contraction for the same reason).

from libc.math cimport cos, floor, log, sin, sqrt

cdef extern from *:
    """
    #define SM64_GOLDEN 0x9E3779B97F4A7C15ULL
    #define SM64_MULT1  0xBF58476D1CE4E5B9ULL
    #define SM64_MULT2  0x94D049BB133111EBULL
    """
    unsigned long long SM64_GOLDEN
    unsigned long long SM64_MULT1
    unsigned long long SM64_MULT2

cdef double TWO_PI = 6.283185307179586476925287
cdef double INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53


cdef inline unsigned long long _mix(unsigned long long z) nogil:
    z = (z ^ (z >> 30)) * SM64_MULT1
    z = (z ^ (z >> 27)) * SM64_MULT2
    return z ^ (z >> 31)


def splitmix_fill_u64(unsigned long long state, unsigned long long[::1] out):
    """Fill `out` with the next len(out) SplitMix64 values; return new state."""
    cdef Py_ssize_t i, n = out.shape[0]
    for i in range(n):
        state += SM64_GOLDEN
        out[i] = _mix(state)
    return state


def uniform_fill(unsigned long long state, double[::1] out):
    """Fill `out` with doubles in [0, 1), one raw draw each; return new state."""
    cdef Py_ssize_t i, n = out.shape[0]
    for i in range(n):
        state += SM64_GOLDEN
        out[i] = <double>(_mix(state) >> 11) * INV_2_53
    return state


def gaussian_fill(unsigned long long state, double[::1] out):
    """Fill `out` with standard normals via Box-Muller; return new state.

    Consumes two raw draws per pair; an odd-length fill discards the
    second member of the final pair, so n values consume 2*ceil(n/2) draws.
    """
    cdef Py_ssize_t i = 0, n = out.shape[0]
    cdef double u1, u2, r, theta
    while i < n:
        state += SM64_GOLDEN
        u1 = <double>(_mix(state) >> 11) * INV_2_53
        state += SM64_GOLDEN
        u2 = <double>(_mix(state) >> 11) * INV_2_53
        r = sqrt(-2.0 * log(1.0 - u1))
        theta = TWO_PI * u2
        out[i] = r * cos(theta)
        i += 1
        if i < n:
            out[i] = r * sin(theta)
            i += 1
    return state


cdef inline Py_ssize_t _clampi(long v, Py_ssize_t hi) nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def resample_trilinear(float[::1] src, Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                       double sx, double sy, double sz,
                       double tx, double ty, double tz,
                       float[::1] dst, Py_ssize_t mx, Py_ssize_t my, Py_ssize_t mz):
    """Trilinear resampling of an x-fastest volume onto an (mx,my,mz) grid.

    Both grids are cell-centered partitions of the same physical extent;
    sampling outside the source grid clamps to the border voxel.
    """
    cdef Py_ssize_t ox, oy, oz, ix0, ix1, iy0, iy1, iz0, iz1, base0, base1
    cdef long x0, y0, z0
    cdef double gx, gy, gz, fx, fy, fz
    cdef double v000, v100, v010, v110, v001, v101, v011, v111
    cdef double c00, c10, c01, c11, c0, c1
    with nogil:
        for oz in range(mz):
            gz = ((<double>oz + 0.5) * tz) / sz - 0.5
            z0 = <long>floor(gz)
            fz = gz - floor(gz)
            iz0 = _clampi(z0, nz - 1)
            iz1 = _clampi(z0 + 1, nz - 1)
            for oy in range(my):
                gy = ((<double>oy + 0.5) * ty) / sy - 0.5
                y0 = <long>floor(gy)
                fy = gy - floor(gy)
                iy0 = _clampi(y0, ny - 1)
                iy1 = _clampi(y0 + 1, ny - 1)
                for ox in range(mx):
                    gx = ((<double>ox + 0.5) * tx) / sx - 0.5
                    x0 = <long>floor(gx)
                    fx = gx - floor(gx)
                    ix0 = _clampi(x0, nx - 1)
                    ix1 = _clampi(x0 + 1, nx - 1)

                    base0 = nx * (iy0 + ny * iz0)
                    base1 = nx * (iy1 + ny * iz0)
                    v000 = src[ix0 + base0]
                    v100 = src[ix1 + base0]
                    v010 = src[ix0 + base1]
                    v110 = src[ix1 + base1]
                    base0 = nx * (iy0 + ny * iz1)
                    base1 = nx * (iy1 + ny * iz1)
                    v001 = src[ix0 + base0]
                    v101 = src[ix1 + base0]
                    v011 = src[ix0 + base1]
                    v111 = src[ix1 + base1]

                    c00 = v000 * (1.0 - fx) + v100 * fx
                    c10 = v010 * (1.0 - fx) + v110 * fx
                    c01 = v001 * (1.0 - fx) + v101 * fx
                    c11 = v011 * (1.0 - fx) + v111 * fx
                    c0 = c00 * (1.0 - fy) + c10 * fy
                    c1 = c01 * (1.0 - fy) + c11 * fy
                    dst[ox + mx * (oy + my * oz)] = <float>(c0 * (1.0 - fz) + c1 * fz)


def avg_pool3d(float[::1] src, Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
               Py_ssize_t block, double[::1] out):
    """Average non-overlapping block^3 regions; blocks emitted x-fastest.

    Accumulation is sequential over the block's (z, y, x) voxels with x
    innermost; _pure mirrors this order.
    """
    cdef Py_ssize_t bx_n = nx // block, by_n = ny // block, bz_n = nz // block
    cdef Py_ssize_t bx, by, bz, x, y, z, x0, y0, z0
    cdef double acc, inv = 1.0 / (<double>(block * block * block))
    with nogil:
        for bz in range(bz_n):
            z0 = bz * block
            for by in range(by_n):
                y0 = by * block
                for bx in range(bx_n):
                    x0 = bx * block
                    acc = 0.0
                    for z in range(z0, z0 + block):
                        for y in range(y0, y0 + block):
                            for x in range(x0, x0 + block):
                                acc += src[x + nx * (y + ny * z)]
                    out[bx + bx_n * (by + by_n * bz)] = acc * inv
