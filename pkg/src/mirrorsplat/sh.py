"""Real spherical harmonics: evaluation, direction gradients, and the
coefficient transform that mirrors view-dependent color across a plane."""
from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

MAX_DEGREE = 3


def num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def _check_degree(degree: int):
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree {degree} unsupported (0..{MAX_DEGREE})")


def sh_basis(dirs, degree: int) -> np.ndarray:
    """Basis values B_k(d) for unit directions, shape (..., (degree+1)^2).

    Ordering and signs follow the splatting convention: a color is
    sum_k B_k(d) * c_k with no extra sign bookkeeping at call sites.
    """
    _check_degree(degree)
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (num_coeffs(degree),), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs, degree: int) -> np.ndarray:
    """d B_k / d (x,y,z) as free (unconstrained) gradients, shape (..., K, 3)."""
    _check_degree(degree)
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    g = np.zeros(d.shape[:-1] + (num_coeffs(degree), 3), dtype=np.float64)
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = -2.0 * SH_C2[2] * x
        g[..., 6, 1] = -2.0 * SH_C2[2] * y
        g[..., 6, 2] = 4.0 * SH_C2[2] * z
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = 2.0 * SH_C2[4] * x
        g[..., 8, 1] = -2.0 * SH_C2[4] * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
        g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = SH_C3[2] * 8.0 * y * z
        g[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = SH_C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = SH_C3[4] * 8.0 * x * z
        g[..., 14, 0] = SH_C3[5] * 2.0 * x * z
        g[..., 14, 1] = SH_C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = SH_C3[5] * (xx - yy)
        g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return g


def eval_sh(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Raw SH color sum_k B_k(d) c_k for (N, K, 3) coefficients and (N, 3) unit dirs."""
    sh = np.asarray(sh, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[-2]))) - 1
    basis = sh_basis(dirs, degree)
    return np.einsum("...k,...kc->...c", basis, sh)


def rgb_to_dc(rgb) -> np.ndarray:
    """DC coefficient that renders to the given base color (render adds 0.5)."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def dc_to_rgb(dc) -> np.ndarray:
    return np.asarray(dc, dtype=np.float64) * SH_C0 + 0.5


# --- direction transforms -------------------------------------------------
#
# Each degree-l basis function is a homogeneous polynomial in (x, y, z); the
# span of a degree block is closed under any orthogonal change of direction.
# Composing the basis polynomials with the 3x3 map and re-expressing them in
# the basis yields the exact per-degree block transform, with no sampling.

_BASIS_POLYS = {
    0: [{(0, 0, 0): SH_C0}],
    1: [
        {(0, 1, 0): -SH_C1},
        {(0, 0, 1): SH_C1},
        {(1, 0, 0): -SH_C1},
    ],
    2: [
        {(1, 1, 0): SH_C2[0]},
        {(0, 1, 1): SH_C2[1]},
        {(0, 0, 2): 2.0 * SH_C2[2], (2, 0, 0): -SH_C2[2], (0, 2, 0): -SH_C2[2]},
        {(1, 0, 1): SH_C2[3]},
        {(2, 0, 0): SH_C2[4], (0, 2, 0): -SH_C2[4]},
    ],
    3: [
        {(2, 1, 0): 3.0 * SH_C3[0], (0, 3, 0): -SH_C3[0]},
        {(1, 1, 1): SH_C3[1]},
        {(0, 1, 2): 4.0 * SH_C3[2], (2, 1, 0): -SH_C3[2], (0, 3, 0): -SH_C3[2]},
        {(0, 0, 3): 2.0 * SH_C3[3], (2, 0, 1): -3.0 * SH_C3[3], (0, 2, 1): -3.0 * SH_C3[3]},
        {(1, 0, 2): 4.0 * SH_C3[4], (3, 0, 0): -SH_C3[4], (1, 2, 0): -SH_C3[4]},
        {(2, 0, 1): SH_C3[5], (0, 2, 1): -SH_C3[5]},
        {(3, 0, 0): SH_C3[6], (1, 2, 0): -3.0 * SH_C3[6]},
    ],
}


def _poly_mul(a: dict, b: dict) -> dict:
    out: dict = {}
    for pa, ca in a.items():
        for pb, cb in b.items():
            key = (pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2])
            out[key] = out.get(key, 0.0) + ca * cb
    return out


def _compose_with_linear(poly: dict, H: np.ndarray) -> dict:
    """p(H v) for a monomial-dict polynomial p."""
    rows = [
        {(1, 0, 0): H[r, 0], (0, 1, 0): H[r, 1], (0, 0, 1): H[r, 2]} for r in range(3)
    ]
    out: dict = {}
    for powers, coeff in poly.items():
        term = {(0, 0, 0): coeff}
        for axis, p in enumerate(powers):
            for _ in range(p):
                term = _poly_mul(term, rows[axis])
        for key, val in term.items():
            out[key] = out.get(key, 0.0) + val
    return out


def _degree_block(H: np.ndarray, degree: int) -> np.ndarray:
    """D with basis_l(H v) = D basis_l(v), computed by polynomial composition."""
    basis = _BASIS_POLYS[degree]
    monomials = sorted({m for poly in basis for m in poly})
    P = np.array([[poly.get(m, 0.0) for m in monomials] for poly in basis])
    composed = [_compose_with_linear(poly, H) for poly in basis]
    mono_all = sorted({m for poly in composed for m in poly} | set(monomials))
    P_full = np.array([[poly.get(m, 0.0) for m in mono_all] for poly in basis])
    Q = np.array([[poly.get(m, 0.0) for m in mono_all] for poly in composed])
    # Q = D @ P_full, consistent because harmonic blocks are O(3)-invariant.
    D, *_ = np.linalg.lstsq(P_full.T, Q.T, rcond=None)
    resid = Q - D.T @ P_full
    if np.max(np.abs(resid)) > 1e-9:
        raise ValueError("direction map does not preserve the harmonic block; not orthogonal?")
    del P
    return D.T


def sh_direction_transform(H: np.ndarray, degree: int) -> np.ndarray:
    """K x K matrix T with eval(T c, v) = eval(c, H v) for orthogonal 3x3 H."""
    _check_degree(degree)
    H = np.asarray(H, dtype=np.float64)
    if H.shape != (3, 3) or not np.allclose(H @ H.T, np.eye(3), atol=1e-8):
        raise ValueError("H must be a 3x3 orthogonal matrix")
    k = num_coeffs(degree)
    T = np.zeros((k, k))
    for deg in range(degree + 1):
        lo = deg * deg
        hi = (deg + 1) ** 2
        T[lo:hi, lo:hi] = _degree_block(H, deg).T
    return T


def transform_sh(sh: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Apply a direction transform to (N, K, 3) or (K, 3) coefficients."""
    sh = np.asarray(sh, dtype=np.float64)
    degree = int(round(np.sqrt(sh.shape[-2]))) - 1
    _check_degree(degree)
    if num_coeffs(degree) != sh.shape[-2]:
        raise ValueError("coefficient count is not a complete SH band set")
    T = sh_direction_transform(H, degree)
    return np.einsum("pk,...kc->...pc", T, sh)
