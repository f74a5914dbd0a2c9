"""Heteroskedastic Gaussian-process emulation of replicated simulator runs.

The model for run ``j`` at unique location ``x_i`` is

    y_ij = mu0 + f(x_i) + e_ij,   f ~ GP(0, nu * k),   e_ij ~ N(0, lam(x_i))

with a Matern-5/2 kernel ``k`` (one lengthscale per input) and a log-noise
field that is itself a smoothed latent GP. Because replicates at one
location share ``f(x_i)``, the likelihood of all ``N`` runs splits into a
GP term on the ``n`` location means (noise ``lam_i / a_i``) and a per-
location residual term, so fitting and prediction cost ``O(n^3)`` rather
than ``O(N^3)``.

Two fitting modes are available:

``"joint"``
    latent log-noise values are optimised together with the kernel
    hyperparameters; the latent field is regularised by its own GP
    log-likelihood.
``"staged"``
    empirical log variances are smoothed by a homoskedastic GP first and
    the mean GP is then fitted with that noise held fixed.

Outputs are standardised before fitting and mapped back in
:meth:`HetGP.predict`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular, LinAlgError
from scipy.linalg.lapack import dpotri
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from ._io import save_npz
from .errors import NumericalError

SQRT5 = np.sqrt(5.0)
LS_BOUNDS = (0.05, 10.0)
NU_BOUNDS = (1e-6, 1e6)
G_BOUNDS = (1e-2, 1e2)
NOISE_FLOOR = 1e-6
MIN_LATENT_VAR = 1e-2
FORMAT_VERSION = 1


class SingularCovarianceError(NumericalError, np.linalg.LinAlgError):
    """Covariance stayed non positive definite after the largest jitter."""


@dataclass(frozen=True)
class ReplicateData:
    """Unique design, replicate counts and per-location moments."""

    X: np.ndarray
    a: np.ndarray
    ybar: np.ndarray
    s2: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        a = np.asarray(self.a, dtype=np.int64).reshape(-1)
        ybar = np.asarray(self.ybar, dtype=float).reshape(-1)
        s2 = np.asarray(self.s2, dtype=float).reshape(-1)
        n = X.shape[0]
        if not (a.shape[0] == ybar.shape[0] == s2.shape[0] == n):
            raise ValueError("X, a, ybar and s2 must describe the same n locations")
        if np.any(a < 1):
            raise ValueError("replicate counts must be >= 1")
        if np.any(s2 < 0):
            raise ValueError("sample variances must be >= 0")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(ybar)) and np.all(np.isfinite(s2))):
            raise ValueError("non-finite values in replicate data")
        for name, v in (("X", X), ("a", a), ("ybar", ybar), ("s2", s2)):
            object.__setattr__(self, name, v)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def N(self) -> int:
        return int(self.a.sum())

    @classmethod
    def from_runs(cls, X, y) -> "ReplicateData":
        """Group runs by identical input rows (sorted lexicographically)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("one output per input row required")
        if not np.all(np.isfinite(y)):
            raise ValueError("non-finite outputs")
        Xu, inv, a = np.unique(X, axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        sums = np.bincount(inv, weights=y, minlength=len(a))
        ybar = sums / a
        dev = y - ybar[inv]
        ss = np.bincount(inv, weights=dev * dev, minlength=len(a))
        s2 = np.where(a > 1, ss / np.maximum(a - 1, 1), 0.0)
        return cls(Xu, a, ybar, s2)

    def total_moments(self) -> tuple[float, float]:
        """Grand mean and (biased) variance of all N runs."""
        N = self.N
        mean = float(np.sum(self.a * self.ybar) / N)
        ss = np.sum((self.a - 1) * self.s2) + np.sum(self.a * (self.ybar - mean) ** 2)
        return mean, float(ss / N)


# --- kernel ------------------------------------------------------------------

def matern52(X1, X2, ls) -> np.ndarray:
    """Matern-5/2 correlation with per-dimension lengthscales."""
    ls = np.asarray(ls, dtype=float)
    r = np.sqrt(cdist(np.atleast_2d(X1) / ls, np.atleast_2d(X2) / ls, "sqeuclidean"))
    s = SQRT5 * r
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


def _sq_diffs(X) -> np.ndarray:
    """Per-dimension squared differences, shape ``(d, n, n)``."""
    return (X.T[:, :, None] - X.T[:, None, :]) ** 2


@numba.njit(cache=True)
def _kgrad_kernel(sqd, inv_ls2):
    d, n = sqd.shape[0], sqd.shape[1]
    K = np.empty((n, n))
    dK = np.empty((d, n, n))
    for i in range(n):
        for j in range(i + 1):
            r2 = 0.0
            for k in range(d):
                r2 += sqd[k, i, j] * inv_ls2[k]
            s = np.sqrt(5.0 * r2)
            e = np.exp(-s)
            K[i, j] = K[j, i] = (1.0 + s + s * s / 3.0) * e
            common = (5.0 / 3.0) * (1.0 + s) * e
            for k in range(d):
                v = common * sqd[k, i, j] * inv_ls2[k]
                dK[k, i, j] = v
                dK[k, j, i] = v
    return K, dK


def _matern52_with_grads(sqd, ls):
    """Correlation matrix and its derivatives w.r.t. each log-lengthscale.

    ``sqd`` comes from :func:`_sq_diffs`; the derivative stack has shape
    ``(d, n, n)``.
    """
    return _kgrad_kernel(sqd, 1.0 / (np.asarray(ls, dtype=float) ** 2))


@numba.njit(cache=True)
def _cross_matern(Xnew, X, inv_ls):
    q, n, d = Xnew.shape[0], X.shape[0], X.shape[1]
    out = np.empty((q, n))
    for p in range(q):
        for i in range(n):
            r2 = 0.0
            for k in range(d):
                t = (Xnew[p, k] - X[i, k]) * inv_ls[k]
                r2 += t * t
            s = np.sqrt(5.0 * r2)
            out[p, i] = (1.0 + s + s * s / 3.0) * np.exp(-s)
    return out


@numba.njit(cache=True, fastmath={"reassoc", "contract"})
def _predict_rows(Xnew, X, inv_ls, nu, alpha, Linv, noise_X, inv_nls, mu_g, w, floor):
    """Row-by-row predictive moments; each row's arithmetic is independent of the batch."""
    q, n, d = Xnew.shape[0], X.shape[0], X.shape[1]
    m = noise_X.shape[0]
    mean = np.empty(q)
    var = np.empty(q)
    noise = np.empty(q)
    kx = np.empty(n)
    for p in range(q):
        acc = 0.0
        for i in range(n):
            r2 = 0.0
            for k in range(d):
                t = (Xnew[p, k] - X[i, k]) * inv_ls[k]
                r2 += t * t
            s = np.sqrt(5.0 * r2)
            kx[i] = nu * (1.0 + s + s * s / 3.0) * np.exp(-s)
            acc += kx[i] * alpha[i]
        mean[p] = acc
        quad = 0.0
        for i in range(n):
            v = 0.0
            for j in range(i + 1):
                v += Linv[i, j] * kx[j]
            quad += v * v
        var[p] = max(nu - quad, 0.0)
        acc = 0.0
        for i in range(m):
            r2 = 0.0
            for k in range(d):
                t = (Xnew[p, k] - noise_X[i, k]) * inv_nls[k]
                r2 += t * t
            s = np.sqrt(5.0 * r2)
            acc += (1.0 + s + s * s / 3.0) * np.exp(-s) * w[i]
        noise[p] = floor + np.exp(mu_g + acc)
    return mean, var, noise


def _traces(W, dK) -> np.ndarray:
    """``tr(W dK_k)`` for symmetric ``W`` and each slice of ``dK``."""
    return dK.reshape(dK.shape[0], -1) @ W.ravel()


def _chol_inverse(L) -> np.ndarray:
    inv, info = dpotri(L, lower=1)
    if info != 0:
        raise SingularCovarianceError("inverse from Cholesky factor failed")
    return np.tril(inv) + np.tril(inv, -1).T


def _chol(A, scale: float):
    """Cholesky with escalating diagonal jitter ``1e-8 .. 1e-4 * scale``."""
    try:
        return cholesky(A, lower=True, check_finite=False), 0.0
    except LinAlgError:
        pass
    jitter = 1e-8 * scale
    eye = np.eye(A.shape[0])
    while jitter <= 1e-4 * scale * (1 + 1e-12):
        try:
            return cholesky(A + jitter * eye, lower=True, check_finite=False), jitter
        except LinAlgError:
            jitter *= 10.0
    raise SingularCovarianceError("covariance matrix is singular even with maximal jitter")


def _logdet(L) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


# --- likelihood ----------------------------------------------------------------

def _mean_terms(K, nu, lam, a, ybar, s2, mu0=None):
    """GP-on-means part plus replicate residuals of the full-data log-likelihood.

    Returns the log-likelihood, the GLS trend (if ``mu0`` is None), and the
    pieces needed for gradients: ``W = alpha alpha^T - C^-1`` and
    ``dlam = d loglik / d lam``.
    """
    C = nu * K + np.diag(lam / a)
    L, _ = _chol(C, nu)
    Cinv = _chol_inverse(L)
    if mu0 is None:
        ones_c = Cinv.sum(axis=0)
        mu0 = float(ones_c @ ybar / ones_c.sum())
    r = ybar - mu0
    alpha = Cinv @ r
    N = a.sum()
    am1 = a - 1
    ll = (-0.5 * r @ alpha - 0.5 * _logdet(L) - 0.5 * N * np.log(2 * np.pi)
          - 0.5 * np.sum(np.log(a)) - 0.5 * np.sum(am1 * np.log(lam)) - 0.5 * np.sum(am1 * s2 / lam))
    W = np.outer(alpha, alpha) - Cinv
    dlam = 0.5 * np.diag(W) / a - 0.5 * am1 / lam + 0.5 * am1 * s2 / lam**2
    return float(ll), mu0, W, dlam, L, alpha


def replicate_loglik(X, a, ybar, s2, lengthscales, nu, mu0, lam) -> float:
    """Exact log-likelihood of all ``N`` runs from the ``n`` location summaries."""
    X = np.atleast_2d(X)
    K = matern52(X, X, lengthscales)
    a = np.asarray(a, dtype=float)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), a.shape)
    ll, *_ = _mean_terms(K, nu, lam, a, np.asarray(ybar, float), np.asarray(s2, float), mu0=mu0)
    return ll


class _JointObjective:
    """Negative penalised log-likelihood over

    ``[log ls (d), log nu, log ls_noise (d), log g, delta (n)]``

    with the trend concentrated out. The latent log-noise at the design is
    ``Lambda = mu_g + M (delta - mu_g)``, ``M = Kg B^-1``, ``B = Kg + g/a``,
    ``mu_g = mean(delta)``, and ``lam = floor + exp(Lambda)``.
    """

    def __init__(self, X, a, ybar, s2, floor):
        self.X, self.a, self.ybar, self.s2, self.floor = X, a.astype(float), ybar, s2, floor
        self.n, self.d = X.shape
        self.sqd = _sq_diffs(X)

    def unpack(self, phi):
        d = self.d
        ls = np.exp(phi[:d])
        nu = np.exp(phi[d])
        ls_g = np.exp(phi[d + 1:2 * d + 1])
        g = np.exp(phi[2 * d + 1])
        delta = phi[2 * d + 2:]
        return ls, nu, ls_g, g, delta

    def latent(self, ls_g, g, delta):
        Kg, dKg = _matern52_with_grads(self.sqd, ls_g)
        B = Kg + np.diag(g / self.a)
        LB, _ = _chol(B, 1.0)
        Binv = _chol_inverse(LB)
        mu_g = float(delta.mean())
        rho = delta - mu_g
        beta = Binv @ rho
        Lam = mu_g + Kg @ beta
        return Kg, dKg, B, LB, Binv, mu_g, rho, beta, Lam

    def __call__(self, phi):
        n, d, a = self.n, self.d, self.a
        ls, nu, ls_g, g, delta = self.unpack(phi)
        K, dK = _matern52_with_grads(self.sqd, ls)
        try:
            Kg, dKg, B, LB, Binv, mu_g, rho, beta, Lam = self.latent(ls_g, g, delta)
            expL = np.exp(Lam)
            lam = self.floor + expL
            ll, _, W, dlam, _, _ = _mean_terms(K, nu, lam, a, self.ybar, self.s2)
        except SingularCovarianceError:
            return 1e25, np.zeros_like(phi)

        # latent-field penalty with floored concentrated variance
        q = float(rho @ beta)
        if q / n > MIN_LATENT_VAR:
            pen = -0.5 * n * np.log(q / n)
            c = 0.5 * n / q
        else:
            pen = -0.5 * q / MIN_LATENT_VAR - 0.5 * n * np.log(MIN_LATENT_VAR)
            c = 0.5 / MIN_LATENT_VAR
        pen -= 0.5 * _logdet(LB)
        total = ll + pen

        grad = np.empty_like(phi)
        grad[:d] = 0.5 * nu * _traces(W, dK)
        grad[d] = 0.5 * nu * np.sum(W * K)

        gL = dlam * expL                       # d ll / d Lambda
        # gL^T (I - M) = gL^T - (Binv Kg gL)^T with M = Kg Binv
        Mt_gL = Binv @ (Kg @ gL)
        v = gL - Mt_gL
        dKb = dKg @ beta                        # (d, n)
        grad[d + 1:2 * d + 1] = dKb @ v + c * (dKb @ beta) - 0.5 * _traces(Binv, dKg)
        dBg = g / a
        grad[2 * d + 1] = -Mt_gL @ (dBg * beta) + c * np.sum(beta * dBg * beta) \
            - 0.5 * np.sum(np.diag(Binv) * dBg)
        g_delta = gL.sum() / n + (Mt_gL - Mt_gL.mean())
        g_delta += -2.0 * c * (beta - beta.mean())
        grad[2 * d + 2:] = g_delta
        return -total, -grad


class _MeanObjective:
    """Negative log-likelihood over ``[log ls, log nu]`` (+ ``log lam`` if homoskedastic)."""

    def __init__(self, X, a, ybar, s2, lam=None):
        self.X, self.a, self.ybar, self.s2, self.lam = X, a.astype(float), ybar, s2, lam
        self.d = X.shape[1]
        self.sqd = _sq_diffs(X)

    def __call__(self, phi):
        d = self.d
        ls, nu = np.exp(phi[:d]), np.exp(phi[d])
        lam = np.full(len(self.a), np.exp(phi[d + 1])) if self.lam is None else self.lam
        K, dK = _matern52_with_grads(self.sqd, ls)
        try:
            ll, _, W, dlam, _, _ = _mean_terms(K, nu, lam, self.a, self.ybar, self.s2)
        except SingularCovarianceError:
            return 1e25, np.zeros_like(phi)
        grad = np.empty_like(phi)
        grad[:d] = 0.5 * nu * _traces(W, dK)
        grad[d] = 0.5 * nu * np.sum(W * K)
        if self.lam is None:
            grad[d + 1] = np.sum(dlam) * lam[0]
        return -ll, -grad


def _starts(lo, hi, count, seed=20180808):
    """Space-filling (Latin hypercube) starting points inside ``[lo, hi]``."""
    from .design import lhs_maximin

    u = lhs_maximin(len(lo), count, seed=seed, restarts=20).points
    return lo + u * (hi - lo)


def _optimize(fun, starts, bounds, maxiter, burst=50):
    """Short L-BFGS-B burst from every start, then polish the best one.

    Ties between bursts go to the earliest start.
    """
    opts = {"ftol": 1e-10, "gtol": 1e-6}
    best = None
    for x0 in starts:
        res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={**opts, "maxiter": min(burst, maxiter)})
        if best is None or res.fun < best.fun:
            best = res
    if maxiter > burst:
        res = minimize(fun, best.x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={**opts, "maxiter": maxiter})
        if res.fun <= best.fun:
            best = res
    return best


# --- model ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HetGP:
    """Fitted emulator; all hyperparameters live on the standardised scale.

    Attributes
    ----------
    data : ReplicateData
        Training summaries in original units.
    shift, scale : float
        Output standardisation ``y_std = (y - shift) / scale``.
    lengthscales, nu, mu0 : kernel lengthscales, process variance and trend.
    noise_lengthscales, mu_g, noise_weights : latent log-noise smoother;
        ``log(lam(x) - floor) = mu_g + k_g(x, X) @ noise_weights``.
    g : float
        Latent smoothing nugget (diagnostic only after fitting).
    floor : float
        Lower bound on the noise variance.
    """

    data: ReplicateData
    shift: float
    scale: float
    lengthscales: np.ndarray
    nu: float
    mu0: float
    noise_lengthscales: np.ndarray
    mu_g: float
    noise_weights: np.ndarray
    g: float
    floor: float
    method: str = "joint"
    degenerate: bool = False
    noise_X: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.noise_X is None:
            object.__setattr__(self, "noise_X", self.data.X)
        X = self.data.X
        lam = self.noise_at_design()
        C = self.nu * matern52(X, X, self.lengthscales) + np.diag(lam / self.data.a)
        L, jitter = _chol(C, self.nu)
        Cinv = _chol_inverse(L)
        Linv = solve_triangular(L, np.eye(len(L)), lower=True, check_finite=False)
        ystd = (self.data.ybar - self.shift) / self.scale
        self._cache.update(L=L, Cinv=Cinv, Linv=np.ascontiguousarray(Linv),
                           alpha=Cinv @ (ystd - self.mu0), lam=lam, jitter=jitter)

    # -- construction helpers
    @classmethod
    def from_hyperparameters(cls, data: ReplicateData, lengthscales, nu, mu0, lam,
                             noise_lengthscales=None, shift=0.0, scale=1.0, floor=0.0):
        """Model with hand-set hyperparameters and per-location noise ``lam``.

        The noise field interpolates ``log(lam - floor)`` with a Matern
        smoother (lengthscales default to the mean kernel's).
        """
        lam = np.broadcast_to(np.asarray(lam, dtype=float), (data.n,))
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=float))
        nls = ls if noise_lengthscales is None else np.atleast_1d(np.asarray(noise_lengthscales, float))
        Lam = np.log(lam - floor)
        mu_g = float(Lam.mean())
        Kg = matern52(data.X, data.X, nls)
        Lg, _ = _chol(Kg, 1.0)
        w = cho_solve((Lg, True), Lam - mu_g)
        return cls(data, float(shift), float(scale), ls, float(nu), float(mu0), nls, mu_g, w,
                   0.0, float(floor), method="fixed")

    # -- noise field
    def noise_at_design(self) -> np.ndarray:
        Kg = matern52(self.data.X, self.noise_X, self.noise_lengthscales)
        return self.floor + np.exp(self.mu_g + np.sum(Kg * self.noise_weights, axis=1))

    @property
    def lam(self) -> np.ndarray:
        """Fitted per-location noise variances (standardised scale)."""
        return self._cache["lam"]

    # -- prediction
    def predict(self, Xnew) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Predictive mean, variance of the mean and noise variance at ``Xnew``.

        The variance of a single future run is ``var_mean + var_noise``.
        Row results do not depend on how many rows are passed at once.
        """
        Xnew = np.atleast_2d(np.asarray(Xnew, dtype=float))
        if Xnew.shape[1] != self.data.d:
            raise ValueError(f"expected {self.data.d} input columns, got {Xnew.shape[1]}")
        c = self._cache
        mean, var, noise = _predict_rows(
            np.ascontiguousarray(Xnew), np.ascontiguousarray(self.data.X), 1.0 / self.lengthscales,
            float(self.nu), c["alpha"], c["Linv"], np.ascontiguousarray(self.noise_X),
            1.0 / self.noise_lengthscales, float(self.mu_g), np.asarray(self.noise_weights, float),
            float(self.floor))
        s2 = self.scale * self.scale
        return self.shift + self.scale * (self.mu0 + mean), var * s2, noise * s2

    # -- likelihood
    def loglik(self) -> float:
        """Full-data log-likelihood of the N training runs in original units."""
        s2 = self.scale ** 2
        return replicate_loglik(self.data.X, self.data.a, self.data.ybar, self.data.s2,
                                self.lengthscales, self.nu * s2, self.shift + self.scale * self.mu0,
                                self.lam * s2)

    # -- persistence
    def save(self, path: str | Path) -> None:
        """Write a self-describing ``.npz`` archive (see ``docs/emulator_format.md``)."""
        meta = {
            "format": "histmatch.hetgp",
            "version": FORMAT_VERSION,
            "shift": self.shift, "scale": self.scale, "nu": self.nu, "mu0": self.mu0,
            "mu_g": self.mu_g, "g": self.g, "floor": self.floor,
            "method": self.method, "degenerate": self.degenerate,
        }
        save_npz(path, meta=np.array(json.dumps(meta, sort_keys=True)),
                 X=self.data.X, a=self.data.a, ybar=self.data.ybar, s2=self.data.s2,
                 lengthscales=self.lengthscales, noise_lengthscales=self.noise_lengthscales,
                 noise_weights=self.noise_weights, noise_X=self.noise_X)

    @classmethod
    def load(cls, path: str | Path) -> "HetGP":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("format") != "histmatch.hetgp" or meta.get("version") != FORMAT_VERSION:
                raise ValueError(f"{path}: not a version-{FORMAT_VERSION} emulator archive")
            data = ReplicateData(z["X"], z["a"], z["ybar"], z["s2"])
            return cls(data, meta["shift"], meta["scale"], z["lengthscales"], meta["nu"], meta["mu0"],
                       z["noise_lengthscales"], meta["mu_g"], z["noise_weights"], meta["g"],
                       meta["floor"], meta["method"], meta["degenerate"], z["noise_X"])


def _standardize(data: ReplicateData):
    shift, var = data.total_moments()
    scale = float(np.sqrt(var)) if var > 0 else 1.0
    ystd = (data.ybar - shift) / scale
    s2std = data.s2 / scale**2
    v = float(np.var(ystd))
    return shift, scale, ystd, s2std, (v if v > 0 else 1.0)


def _constant_model(data, shift, scale, floor, method):
    d = data.d
    ls = np.full(d, LS_BOUNDS[1])
    return HetGP(data, shift, scale, ls, NU_BOUNDS[0], 0.0, ls, float(np.log(floor)),
                 np.zeros(data.n), 1.0, 0.0, method=method, degenerate=True)


def _smooth_log_variance(X, a, s2, floor, restarts):
    """Homoskedastic GP fit to empirical log variances; returns the smoother."""
    has = a > 1
    if not np.any(has):
        raise ValueError("need at least one location with two or more replicates")
    z = np.log(np.maximum(s2[has], floor))
    Xs = X[has]
    d = X.shape[1]
    if has.sum() < 3 or np.ptp(z) == 0:
        mu = float(z.mean())
        return np.full(d, LS_BOUNDS[1]), mu, np.zeros(len(X)), X
    ones = np.ones(len(z), dtype=np.int64)
    zbar, zvar = z.mean(), max(z.var(), 1e-8)
    zs = (z - zbar) / np.sqrt(zvar)
    obj = _MeanObjective(Xs, ones, zs, np.zeros(len(z)))
    lo = np.r_[np.full(d, np.log(LS_BOUNDS[0])), np.log(1e-3), np.log(1e-3)]
    hi = np.r_[np.full(d, np.log(LS_BOUNDS[1])), np.log(1e2), np.log(1e1)]
    st = _starts(np.r_[np.full(d, np.log(0.1)), np.log(0.5), np.log(0.05)],
                 np.r_[np.full(d, np.log(1.5)), np.log(2.0), np.log(0.5)], restarts)
    res = _optimize(obj, st, list(zip(lo, hi)), maxiter=200)
    ls, nu, nug = np.exp(res.x[:d]), np.exp(res.x[d]), np.exp(res.x[d + 1])
    K = matern52(Xs, Xs, ls)
    ll, mu, W, dlam, L, alpha = _mean_terms(K, nu, np.full(len(z), nug), ones.astype(float), zs, np.zeros(len(z)))
    # predictive mean of log variance, back on the log scale
    weights = np.sqrt(zvar) * nu * alpha
    return ls, float(zbar + np.sqrt(zvar) * mu), weights, Xs


def fit(data: ReplicateData, method: str = "joint", restarts: int = 5, maxiter: int = 300) -> HetGP:
    """Fit a heteroskedastic GP to replicated runs.

    Parameters
    ----------
    data : ReplicateData
        Needs ``n >= d + 2`` locations, at least one of them replicated.
    method : {"joint", "staged"}
        Joint latent-noise optimisation, or empirical-variance smoothing
        followed by a mean-GP fit with the noise held fixed.
    restarts : int
        Number of space-filling hyperparameter starting points.

    Returns
    -------
    HetGP
        ``degenerate`` is set when the data carry no variation at all.
    """
    if method not in ("joint", "staged"):
        raise ValueError(f"unknown fitting method {method!r}")
    if data.n < data.d + 2:
        raise ValueError(f"need at least d + 2 = {data.d + 2} unique locations, got {data.n}")
    if not np.any(data.a > 1):
        raise ValueError("need at least one location with two or more replicates")
    shift, scale, ystd, s2std, vy = _standardize(data)
    floor = NOISE_FLOOR * vy
    if np.ptp(data.ybar) == 0 and np.all(data.s2 == 0):
        return _constant_model(data, shift, scale, floor, method)

    X, a, d, n = data.X, data.a, data.d, data.n
    log_ls = (np.log(LS_BOUNDS[0]), np.log(LS_BOUNDS[1]))
    log_nu = (np.log(NU_BOUNDS[0] * vy), np.log(NU_BOUNDS[1] * vy))

    if method == "staged":
        nls, mu_g, w, Xs = _smooth_log_variance(X, a, s2std, floor, restarts)
        Lam = mu_g + matern52(X, Xs, nls) @ w
        lam = floor + np.exp(Lam)
        obj = _MeanObjective(X, a, ystd, s2std, lam=lam)
        st = _starts(np.r_[np.full(d, np.log(0.1)), np.log(0.3 * vy)],
                     np.r_[np.full(d, np.log(1.5)), np.log(3.0 * vy)], restarts)
        res = _optimize(obj, st, [log_ls] * d + [log_nu], maxiter)
        ls, nu = np.exp(res.x[:d]), float(np.exp(res.x[d]))
        K = matern52(X, X, ls)
        _, mu0, *_ = _mean_terms(K, nu, lam, a.astype(float), ystd, s2std)
        return HetGP(data, shift, scale, ls, nu, mu0, nls, mu_g, w, 0.0, floor, method="staged", noise_X=Xs)

    pooled = np.sum((a - 1) * s2std) / max(np.sum(a - 1), 1)
    delta0 = np.log(np.maximum(np.where(a > 1, s2std, pooled), floor))
    lo_d = np.log(floor) - 5.0
    hi_d = np.log(100.0)
    delta0 = np.clip(delta0, lo_d, hi_d)
    obj = _JointObjective(X, a, ystd, s2std, floor)
    hyper = _starts(np.r_[np.full(d, np.log(0.1)), np.log(0.3 * vy), np.full(d, np.log(0.1)), np.log(1e-2)],
                    np.r_[np.full(d, np.log(1.5)), np.log(3.0 * vy), np.full(d, np.log(1.5)), np.log(1.0)],
                    restarts)
    st = [np.r_[h, delta0] for h in hyper]
    bounds = [log_ls] * d + [log_nu] + [log_ls] * d + [(np.log(G_BOUNDS[0]), np.log(G_BOUNDS[1]))] \
        + [(lo_d, hi_d)] * n
    res = _optimize(obj, st, bounds, maxiter)
    ls, nu, ls_g, g, delta = obj.unpack(res.x)
    Kg, dKg, B, LB, Binv, mu_g, rho, beta, Lam = obj.latent(ls_g, g, delta)
    lam = floor + np.exp(Lam)
    K = matern52(X, X, ls)
    _, mu0, *_ = _mean_terms(K, float(nu), lam, a.astype(float), ystd, s2std)
    return HetGP(data, shift, scale, ls, float(nu), mu0, ls_g, mu_g, beta, float(g), floor, method="joint")


def fit_many(datasets, method="joint", restarts=5, jobs=1) -> list[HetGP]:
    """Fit independent emulators (one per output), optionally in parallel."""
    from .parallel import pmap

    return pmap(_fit_one, [(ds, method, restarts) for ds in datasets], jobs)


def _fit_one(args):
    ds, method, restarts = args
    return fit(ds, method=method, restarts=restarts)
