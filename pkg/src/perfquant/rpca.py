"""Low-rank plus sparse decomposition by ADMM.

Solves ``min ||L||_* + lam ||S||_1  s.t.  L + S = M`` with the classic
two-block augmented-Lagrangian iteration at a constant penalty ``mu``.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ValidationError

GRAM_ASPECT = 4


def soft_threshold(X, eps):
    """Elementwise shrinkage ``sign(x) * max(|x| - eps, 0)``."""
    if eps < 0:
        raise ValidationError(f"threshold must be non-negative, got {eps}")
    X = np.asarray(X, dtype=float)
    return np.sign(X) * np.maximum(np.abs(X) - eps, 0.0)


def svt(X, eps):
    """Singular value thresholding: shrink the spectrum of ``X`` by ``eps``.

    Strongly rectangular inputs (such as Casorati matrices with thousands
    of pixels and tens of frames) go through the eigen-decomposition of the
    small Gram matrix. Its absolute eigenvalue error is about
    ``eps_machine * sigma_max**2``, far below any threshold in use.
    """
    if eps < 0:
        raise ValidationError(f"threshold must be non-negative, got {eps}")
    X = np.asarray(X, dtype=float)
    m, n = X.shape
    if min(m, n) > 0 and max(m, n) >= GRAM_ASPECT * min(m, n) and eps > 0:
        tall = m >= n
        A = X if tall else X.T
        w, V = np.linalg.eigh(A.T @ A)
        s = np.sqrt(np.clip(w, 0.0, None))
        keep = s > eps
        if not np.any(keep):
            return np.zeros_like(X)
        V = V[:, keep]
        s = s[keep]
        # A V = U diag(s); shrinking maps it to U diag(s - eps)
        out = (A @ V) * ((s - eps) / s) @ V.T
        return out if tall else out.T
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    s = np.maximum(s - eps, 0.0)
    keep = s > 0
    return (U[:, keep] * s[keep]) @ Vt[keep]


def nuclear_norm(X):
    return float(np.linalg.svd(X, compute_uv=False).sum())


def rpca_objective(L, S, lam):
    return nuclear_norm(L) + lam * float(np.abs(S).sum())


@dataclass
class Decomposition:
    """Result of :func:`rpca_admm`.

    ``objective`` holds, per iteration when requested, the objective at the
    constraint-satisfying pair ``(L, M - L)``. The raw iterate pair starts
    infeasible at zero, so its objective has to rise before it can settle.
    """

    L: np.ndarray
    S: np.ndarray
    iterations: int
    primal_residual: float
    converged: bool
    lam: float
    mu: float
    objective: list = field(default_factory=list)

    @property
    def rank(self):
        if not np.any(self.L):
            return 0
        s = np.linalg.svd(self.L, compute_uv=False)
        return int(np.sum(s > s[0] * max(self.L.shape) * np.finfo(float).eps))


def default_lambda(shape):
    return 1.0 / np.sqrt(max(shape))


def default_mu(M):
    return 0.25 * M.size / np.abs(M).sum()


def rpca_admm(M, lam=None, mu=None, tol=1e-7, max_iter=500, record_objective=False):
    """Decompose ``M`` into low-rank ``L`` and sparse ``S``.

    Parameters
    ----------
    M : ndarray of shape (m, n)
    lam : float, optional
        Sparsity weight, default ``1 / sqrt(max(m, n))``.
    mu : float, optional
        Constant augmented-Lagrangian penalty, default ``0.25 m n / ||M||_1``.
    tol : float
        Stop when ``||M - L - S||_F / ||M||_F < tol``.
    max_iter : int

    Returns
    -------
    Decomposition
        ``converged`` is False (with a warning) when ``max_iter`` is hit.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValidationError("M must be a matrix")
    if not np.all(np.isfinite(M)):
        raise ValidationError("M contains non-finite values")
    lam = default_lambda(M.shape) if lam is None else float(lam)
    if lam <= 0:
        raise ValidationError("lambda must be positive")
    norm_m = np.linalg.norm(M)
    if norm_m == 0:
        zero = np.zeros_like(M)
        return Decomposition(zero, zero.copy(), 0, 0.0, True, lam, 0.0 if mu is None else mu)
    mu = default_mu(M) if mu is None else float(mu)
    if mu <= 0:
        raise ValidationError("mu must be positive")

    S = np.zeros_like(M)
    Y = np.zeros_like(M)
    history = []
    residual = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        L = svt(M - S + Y / mu, 1.0 / mu)
        S = soft_threshold(M - L + Y / mu, lam / mu)
        Z = M - L - S
        Y += mu * Z
        residual = float(np.linalg.norm(Z))
        if record_objective:
            history.append(rpca_objective(L, M - L, lam))
        if residual / norm_m < tol:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"RPCA stopped after {max_iter} iterations with relative residual "
            f"{residual / norm_m:.3g}",
            stacklevel=2,
        )
    return Decomposition(L, S, it, residual, converged, lam, mu, history)


class RobustPCA(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`rpca_admm`.

    ``fit`` decomposes ``X``; ``transform`` returns the low-rank part of the
    fitted matrix (the decomposition is transductive, so ``X`` must be the
    matrix passed to ``fit``).
    """

    def __init__(self, lam=None, mu=None, tol=1e-7, max_iter=500):
        self.lam = lam
        self.mu = mu
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        dec = rpca_admm(X, self.lam, self.mu, self.tol, self.max_iter)
        self.low_rank_ = dec.L
        self.sparse_ = dec.S
        self.n_iter_ = dec.iterations
        self.converged_ = dec.converged
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "low_rank_")
        X = check_array(X, dtype=float)
        if X.shape != self.low_rank_.shape:
            raise ValidationError("transform expects the matrix passed to fit")
        return self.low_rank_
