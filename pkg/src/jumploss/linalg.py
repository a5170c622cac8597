"""Dense complex linear-algebra kernels used by every other module.

Thin, contract-checked wrappers around numpy/scipy: matrix exponential
(scaling-and-squaring with a Pade core, via scipy), reduced QR (deterministic
Householder), Hermitian eigenvalues, SVD null space, Kronecker product.
All functions are pure; rank decisions share a single relative tolerance.
"""

import numpy as np
import scipy.linalg

from .errors import ContractError, DimensionError

RANK_RTOL = 1e-10
HERMITICITY_ATOL = 1e-8


def _as_complex(a):
    a = np.asarray(a, dtype=complex)
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix contains non-finite entries")
    return a


def matrix_exponential(a):
    """e^A by scaling-and-squaring (Pade core); backward error ~1e-12 relative.

    Chosen over eigendecomposition because the generators involved are in
    general non-normal (non-Hermitian effective Hamiltonians), where
    eigendecomposition can be ill-conditioned.
    """
    a = _as_complex(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix_exponential needs a square matrix, got {a.shape}")
    return scipy.linalg.expm(a)


def qr_decompose(v):
    """Reduced QR of an L x N matrix (L >= N): V = Q R, Q^dag Q = I.

    Returns (Q, R, rank) where rank counts diagonal entries of R with modulus
    above RANK_RTOL times the largest column norm of V. Rank deficiency is
    reported, never raised.
    """
    v = _as_complex(v)
    if v.ndim != 2:
        raise DimensionError(f"qr_decompose needs a matrix, got shape {v.shape}")
    if v.shape[0] < v.shape[1]:
        raise DimensionError(f"qr_decompose needs L >= N, got {v.shape}")
    q, r = np.linalg.qr(v, mode="reduced")
    scale = np.max(np.linalg.norm(v, axis=0)) if v.size else 0.0
    tol = RANK_RTOL * scale
    rank = int(np.sum(np.abs(np.diagonal(r)) > tol))
    return q, r, rank


def hermitian_eigenvalues(a):
    """Real eigenvalues of a Hermitian matrix, ascending.

    Symmetrizes (A + A^dag)/2 internally; rejects inputs whose Hermiticity
    violation exceeds HERMITICITY_ATOL in max-abs.
    """
    a = _as_complex(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"hermitian_eigenvalues needs a square matrix, got {a.shape}")
    drift = np.max(np.abs(a - a.conj().T))
    if drift > HERMITICITY_ATOL:
        raise ContractError(f"matrix is not Hermitian: max |A - A^dag| = {drift:.3e}")
    return np.linalg.eigvalsh((a + a.conj().T) / 2)


def null_space(a):
    """Orthonormal basis of ker A as columns (possibly zero columns).

    SVD-based; singular values below RANK_RTOL times the largest singular
    value count as zero, matching the qr_decompose rank tolerance.
    """
    a = _as_complex(a)
    if a.ndim != 2:
        raise DimensionError(f"null_space needs a matrix, got shape {a.shape}")
    _, s, vh = np.linalg.svd(a, full_matrices=True)
    tol = RANK_RTOL * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    return vh[rank:].conj().T


def kron(a, b):
    """Kronecker product with (A x B)[i*rb + k, j*cb + l] = A[i,j] B[k,l]."""
    return np.kron(_as_complex(a), _as_complex(b))
