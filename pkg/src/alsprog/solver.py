"""Elastic-net and lasso linear regression by cyclic coordinate descent.

Minimizes::

    1/(2n) ||y - b0 - X b||^2 + lam * (alpha ||b||_1 + (1 - alpha)/2 ||b||^2)

on standardized columns (population std) and a centered target, so the
penalty does not depend on the sample size or on column units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .core import NumericalError

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 10_000


def soft_threshold(z: float, gamma: float) -> float:
    if gamma < 0:
        raise ValueError("threshold must be non-negative")
    if z > gamma:
        return z - gamma
    if z < -gamma:
        return z + gamma
    return 0.0


@njit(cache=True, nogil=True)
def _cd_gram(gram, xty, beta, active, l1, l2, tol, max_iter):
    """Covariance-update coordinate descent; ``beta`` is updated in place.

    ``gram`` = X'X/n and ``xty`` = X'y/n for standardized X and centered y.
    Returns (sweeps, converged).
    """
    p = beta.shape[0]
    # grad[j] = xty[j] - (gram @ beta)[j]
    grad = xty.copy()
    for k in range(p):
        if beta[k] != 0.0:
            for j in range(p):
                grad[j] -= gram[j, k] * beta[k]
    for it in range(1, max_iter + 1):
        max_change = 0.0
        for j in range(p):
            if not active[j]:
                continue
            old = beta[j]
            rho = grad[j] + gram[j, j] * old
            if rho > l1:
                new = (rho - l1) / (gram[j, j] + l2)
            elif rho < -l1:
                new = (rho + l1) / (gram[j, j] + l2)
            else:
                new = 0.0
            if new != old:
                delta = new - old
                beta[j] = new
                for i in range(p):
                    grad[i] -= gram[i, j] * delta
                if abs(delta) > max_change:
                    max_change = abs(delta)
        if max_change < tol:
            return it, True
    return max_iter, False


@njit(cache=True, nogil=True)
def _cd_path(gram, xty, active, lams, alpha, tol, max_iter):
    """Warm-started fits for ``lams`` (must be sorted descending)."""
    p = xty.shape[0]
    nl = lams.shape[0]
    betas = np.zeros((nl, p))
    iters = np.zeros(nl, dtype=np.int64)
    conv = np.zeros(nl, dtype=np.bool_)
    beta = np.zeros(p)
    for i in range(nl):
        it, ok = _cd_gram(gram, xty, beta, active, lams[i] * alpha, lams[i] * (1.0 - alpha), tol, max_iter)
        betas[i] = beta
        iters[i] = it
        conv[i] = ok
    return betas, iters, conv


@dataclass
class ElasticNetModel:
    feature_names: list[str]
    feature_means: np.ndarray
    feature_stds: np.ndarray
    target_mean: float
    coefficients: np.ndarray
    lam: float
    alpha: float
    iterations: int = 0
    converged: bool = True

    @property
    def intercept(self) -> float:
        """Intercept on the original column scale."""
        scale = np.where(self.feature_stds > 0, self.feature_stds, 1.0)
        return float(self.target_mean - np.sum(self.coefficients * self.feature_means / scale))

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "feature_means": [float(v) for v in self.feature_means],
            "feature_stds": [float(v) for v in self.feature_stds],
            "target_mean": float(self.target_mean),
            "coefficients": [float(v) for v in self.coefficients],
            "intercept": self.intercept,
            "lambda": float(self.lam),
            "alpha": float(self.alpha),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ElasticNetModel":
        return cls(
            feature_names=list(d["feature_names"]),
            feature_means=np.array(d["feature_means"], dtype=float),
            feature_stds=np.array(d["feature_stds"], dtype=float),
            target_mean=float(d["target_mean"]),
            coefficients=np.array(d["coefficients"], dtype=float),
            lam=float(d["lambda"]),
            alpha=float(d["alpha"]),
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ElasticNetModel":
        return cls.from_dict(json.loads(text))


@dataclass
class Standardized:
    X: np.ndarray
    y: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    target_mean: float
    gram: np.ndarray
    xty: np.ndarray
    active: np.ndarray


def _check_inputs(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"shape mismatch: X {X.shape}, y {y.shape}")
    if X.shape[0] < 2:
        raise ValueError("need at least two rows to fit")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NumericalError("non-finite values in design matrix or target")
    return X, y


def standardize(X, y) -> Standardized:
    X, y = _check_inputs(X, y)
    n = X.shape[0]
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    active = stds > 1e-12 * np.maximum(1.0, np.abs(means))
    scale = np.where(active, stds, 1.0)
    Xs = (X - means) / scale
    Xs[:, ~active] = 0.0
    ym = float(y.mean())
    yc = y - ym
    gram = Xs.T @ Xs / n
    xty = Xs.T @ yc / n
    return Standardized(Xs, yc, means, np.where(active, stds, 0.0), ym, gram, xty, active)


def _check_hyper(lam: float, alpha: float) -> None:
    if not lam >= 0 or not math.isfinite(lam):
        raise ValueError(f"lambda must be finite and >= 0, got {lam}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def _fit_standardized(
    st: Standardized, lam, alpha, tol, max_iter, names, beta0=None
) -> ElasticNetModel:
    _check_hyper(lam, alpha)
    p = st.gram.shape[0]
    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    beta[~st.active] = 0.0
    it, conv = _cd_gram(st.gram, st.xty, beta, st.active, lam * alpha, lam * (1.0 - alpha), tol, max_iter)
    if not np.all(np.isfinite(beta)):
        raise NumericalError("coordinate descent diverged")
    return ElasticNetModel(
        feature_names=list(names),
        feature_means=st.means.copy(),
        feature_stds=st.stds.copy(),
        target_mean=st.target_mean,
        coefficients=beta,
        lam=float(lam),
        alpha=float(alpha),
        iterations=int(it),
        converged=bool(conv),
    )


def fit(
    X,
    y,
    lam: float,
    alpha: float = 1.0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    feature_names: Optional[Sequence[str]] = None,
) -> ElasticNetModel:
    """Fit one elastic net; ``alpha=1`` is the lasso, ``alpha=0`` ridge."""
    _check_hyper(lam, alpha)
    st = standardize(X, y)
    names = feature_names if feature_names is not None else [f"x{j}" for j in range(st.X.shape[1])]
    if len(names) != st.X.shape[1]:
        raise ValueError("feature_names length does not match X")
    return _fit_standardized(st, lam, alpha, tol, max_iter, names)


def fit_path(
    X,
    y,
    lams: Sequence[float],
    alpha: float = 1.0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    feature_names: Optional[Sequence[str]] = None,
    standardized: Optional[Standardized] = None,
) -> list[ElasticNetModel]:
    """Warm-started fits along ``lams``; returned in the order given.

    The path is traversed from the largest lambda down regardless of input order.
    """
    st = standardized if standardized is not None else standardize(X, y)
    names = feature_names if feature_names is not None else [f"x{j}" for j in range(st.X.shape[1])]
    for lam in lams:
        _check_hyper(lam, alpha)
    order = sorted(range(len(lams)), key=lambda i: -lams[i])
    desc = np.array([lams[i] for i in order], dtype=float)
    betas, iters, conv = _cd_path(st.gram, st.xty, st.active, desc, float(alpha), float(tol), int(max_iter))
    if not np.all(np.isfinite(betas)):
        raise NumericalError("coordinate descent diverged")
    out: list[Optional[ElasticNetModel]] = [None] * len(lams)
    for k, i in enumerate(order):
        out[i] = ElasticNetModel(
            feature_names=list(names),
            feature_means=st.means.copy(),
            feature_stds=st.stds.copy(),
            target_mean=st.target_mean,
            coefficients=betas[k].copy(),
            lam=float(lams[i]),
            alpha=float(alpha),
            iterations=int(iters[k]),
            converged=bool(conv[k]),
        )
    return out  # type: ignore[return-value]


def predict(model: ElasticNetModel, X, feature_names: Optional[Sequence[str]] = None) -> np.ndarray:
    """Raw (unrounded) predictions ``target_mean + sum_j b_j (x_j - mean_j) / std_j``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if feature_names is not None and list(feature_names) != list(model.feature_names):
        raise ValueError("X columns do not match the model's feature names")
    if X.shape[1] != len(model.feature_names):
        raise ValueError(f"expected {len(model.feature_names)} columns, got {X.shape[1]}")
    scale = np.where(model.feature_stds > 0, model.feature_stds, 1.0)
    Z = (X - model.feature_means) / scale
    Z[:, model.feature_stds <= 0] = 0.0
    return model.target_mean + Z @ model.coefficients


def objective(model: ElasticNetModel, X, y) -> float:
    r = np.asarray(y, dtype=float) - predict(model, X)
    b = model.coefficients
    pen = model.alpha * np.abs(b).sum() + 0.5 * (1 - model.alpha) * (b @ b)
    return float(0.5 * np.mean(r * r) + model.lam * pen)


def kkt_residuals(model: ElasticNetModel, X, y) -> np.ndarray:
    """Per-coordinate violation of the optimality conditions (0 at the exact optimum)."""
    st = standardize(X, y)
    b = model.coefficients
    grad = st.xty - st.gram @ b
    l1, l2 = model.lam * model.alpha, model.lam * (1 - model.alpha)
    out = np.zeros_like(b)
    for j in range(b.size):
        if not st.active[j]:
            continue
        if b[j] != 0:
            out[j] = abs(grad[j] - l2 * b[j] - l1 * np.sign(b[j]))
        else:
            out[j] = max(abs(grad[j]) - l1, 0.0)
    return out


@dataclass(frozen=True)
class Importance:
    feature: str
    importance: float
    rank: int


def importance(model: ElasticNetModel) -> list[Importance]:
    """Features by |standardized coefficient|, largest first, ties by name."""
    pairs = sorted(
        zip(model.feature_names, np.abs(model.coefficients)), key=lambda t: (-t[1], t[0])
    )
    return [Importance(f, float(v), r) for r, (f, v) in enumerate(pairs, start=1)]
