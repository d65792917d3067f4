"""Dense matrix helpers: Kronecker products, vectorization, spectral norms and
PSD-order checks.

Vectorization stacks columns, so ``vectorize(Theta)`` of a ``d x K`` matrix
places column ``k`` in the contiguous block ``[k*d, (k+1)*d)``.
"""

import numpy as np

KRON_SIZE_CAP = 16384
SYMMETRY_TOL = 1e-12


class SizeCapError(ValueError):
    pass


def as_matrix(a, name="matrix"):
    m = np.asarray(a, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def kron(a, b, cap=KRON_SIZE_CAP):
    """Kronecker product with block ``(i, j)`` equal to ``a[i, j] * b``.

    Raises SizeCapError when either output dimension exceeds ``cap``.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    rows = a.shape[0] * b.shape[0]
    cols = a.shape[1] * b.shape[1]
    if rows > cap or cols > cap:
        raise SizeCapError(f"kron output {rows}x{cols} exceeds cap {cap}")
    return np.kron(a, b)


def vectorize(m):
    m = np.asarray(m, dtype=float)
    return m.reshape(-1, order="F")


def unvectorize(v, rows, cols):
    v = np.asarray(v, dtype=float)
    if v.size != rows * cols:
        raise ValueError(f"cannot reshape {v.size} entries to {rows}x{cols}")
    return v.reshape(rows, cols, order="F")


def symmetrize(m):
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def eig_sym(m, tol=SYMMETRY_TOL):
    """Eigen-decomposition of a symmetric matrix.

    Returns ascending eigenvalues and orthonormal eigenvectors (as columns).
    Raises ValueError when ``m`` is not symmetric to within ``tol``.
    """
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"eig_sym needs a square matrix, got {m.shape}")
    asym = np.max(np.abs(m - m.T)) if m.size else 0.0
    if asym > tol:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    # LAPACK syevd: Householder tridiagonalization followed by divide and conquer.
    w, v = np.linalg.eigh(symmetrize(m))
    return w, v


def spectral_norm(m):
    """Largest singular value, from the eigenvalues of the smaller Gram matrix."""
    m = as_matrix(m)
    if m.size == 0:
        return 0.0
    gram = m.T @ m if m.shape[1] <= m.shape[0] else m @ m.T
    w, _ = eig_sym(symmetrize(gram))
    return float(np.sqrt(max(w[-1], 0.0)))


def psd_margin(a, b):
    """Smallest eigenvalue of the symmetric part of ``b - a``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape or a.shape[0] != a.shape[1]:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")
    w, _ = eig_sym(symmetrize(b - a))
    return float(w[0])


def psd_order_check(a, b, slack=0.0):
    """True iff ``a <= b`` in the Loewner order, up to ``slack``."""
    return psd_margin(a, b) >= -slack


def sqrtm_psd(m, inverse=False):
    """Symmetric square root (or inverse square root) of a PSD matrix."""
    w, v = eig_sym(symmetrize(m))
    if inverse:
        if w[0] <= 0:
            raise ValueError("matrix is not positive definite")
        d = 1.0 / np.sqrt(w)
    else:
        d = np.sqrt(np.clip(w, 0.0, None))
    return (v * d) @ v.T
