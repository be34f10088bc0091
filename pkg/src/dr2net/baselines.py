"""Reference solvers independent of the SGD training path.

* ``fit_closed_form``: ridge least-squares linear reconstructor from the
  normal equations, the optimum stage-1 training should approach.
* ``ista_reconstruct``: iterative soft-thresholding with an orthonormal 2-D
  DCT sparsifier, a classical sparse-recovery baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.fft import dctn, idctn

from .container import read_container, write_container
from .errors import CheckpointError, DimensionError, InvalidParameterError, NumericError, SingularSystemError
from .model import Dr2Model, init_model
from .sensing import MeasurementOperator, rng_for


@dataclass
class LinearReconstructor:
    w: np.ndarray  # (n, m)
    lam: float
    operator_seed: int | None = None
    train_loss: float = float("nan")

    def reconstruct(self, y) -> np.ndarray:
        """(m,) -> (n,) or (N, m) -> (N, n)."""
        return np.asarray(y, dtype=np.float64) @ self.w.T

    def to_model(self, operator: MeasurementOperator) -> Dr2Model:
        """A zero-block network whose linear layer is this solution."""
        n, m = self.w.shape
        if operator.m != m or operator.n != n:
            raise DimensionError(f"operator {operator.phi.shape} does not fit W {self.w.shape}")
        model = init_model(m, 0, seed=0, operator=operator)
        model.linear.params["weight"][...] = self.w
        model.linear.params["bias"][...] = 0
        model.info["baseline"] = "closed-form"
        return model


def default_lambda(Y) -> float:
    """1e-6 * trace(Y Y^T) / m."""
    Y = np.asarray(Y, dtype=np.float64)
    return 1e-6 * float(np.einsum("ij,ij->", Y, Y)) / Y.shape[0]


def fit_closed_form(X, Y, lam: float | None = None, operator_seed=None) -> LinearReconstructor:
    """Minimise ||X - W Y||^2 + lam ||W||^2 with X (n, N) and Y (m, N):
    W = X Y^T (Y Y^T + lam I)^-1, via a Cholesky solve.

    ``train_loss`` is the per-sample mean squared error (1/N)||X - WY||^2,
    the same normalisation as the training loss.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise DimensionError(f"X {X.shape} and Y {Y.shape} must be (n, N) and (m, N)")
    if X.shape[1] < 1:
        raise InvalidParameterError("need at least one sample")
    lam = default_lambda(Y) if lam is None else float(lam)
    if lam < 0:
        raise InvalidParameterError("lambda must be >= 0")
    m = Y.shape[0]
    gram = Y @ Y.T + lam * np.eye(m)
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True)
    except np.linalg.LinAlgError:
        raise SingularSystemError("normal equations are singular; use lambda > 0") from None
    diag = np.diag(factor[0])
    if lam == 0 and diag.min() <= np.sqrt(np.finfo(float).eps) * diag.max():
        raise SingularSystemError("normal equations are numerically singular; use lambda > 0")
    w = scipy.linalg.cho_solve(factor, Y @ X.T).T
    resid = X - w @ Y
    loss = float(np.einsum("ij,ij->", resid, resid)) / X.shape[1]
    return LinearReconstructor(w, lam, operator_seed, loss)


def save_linear(rec: LinearReconstructor, path, operator: MeasurementOperator | None = None) -> None:
    arrays = {"w": rec.w}
    if operator is not None:
        arrays["phi"] = operator.phi
    write_container(path, b"DR2LB", {"lambda": rec.lam, "operator_seed": rec.operator_seed,
                                     "train_loss": rec.train_loss}, arrays)


def load_linear(path):
    """Returns ``(reconstructor, operator or None)``."""
    meta, arrays = read_container(path, b"DR2LB", CheckpointError)
    rec = LinearReconstructor(arrays["w"].astype(np.float64), meta["lambda"],
                              meta["operator_seed"], meta["train_loss"])
    op = None
    if "phi" in arrays:
        op = MeasurementOperator(arrays["phi"], meta["operator_seed"])
    return rec, op


# --------------------------------------------------------------------- ISTA

def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0)


def power_iteration(matvec, dim, max_iters=1000, tol=1e-7, seed=0) -> float:
    """Largest eigenvalue of a symmetric PSD operator; raises NumericError
    if the estimate has not settled to ``tol`` within ``max_iters``."""
    v = rng_for(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iters):
        w = matvec(v)
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        if abs(new - est) <= tol * abs(new):
            return new
        est = new
    raise NumericError(f"power iteration did not converge in {max_iters} steps")


def _side(n):
    s = int(round(np.sqrt(n)))
    if s * s != n:
        raise DimensionError(f"signal length {n} is not a square block")
    return s


def ista_reconstruct(y, operator, lam: float = 0.1, iters: int = 200,
                     return_objective: bool = False, lipschitz_margin: float = 1.01):
    """Recover a square block from ``y = phi x`` assuming sparsity in the
    orthonormal 2-D DCT basis Psi:

        z <- soft(z + Psi^T phi^T (y - phi Psi z) / L, lam / L)

    with L = margin * lambda_max(phi^T phi) from power iteration. Returns
    ``x = Psi z`` (and the per-step objective 0.5||y - phi Psi z||^2 +
    lam ||z||_1, starting with z = 0, if requested).
    """
    if iters < 1:
        raise InvalidParameterError("iters must be >= 1")
    if lam < 0:
        raise InvalidParameterError("lambda must be >= 0")
    phi = operator.phi if isinstance(operator, MeasurementOperator) else np.asarray(operator)
    phi = phi.astype(np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = phi.shape
    if y.shape != (m,):
        raise DimensionError(f"y has shape {y.shape}, operator expects ({m},)")
    side = _side(n)

    def synth(z):
        return idctn(z.reshape(side, side), norm="ortho").ravel()

    def analyse(x):
        return dctn(x.reshape(side, side), norm="ortho").ravel()

    # Psi is orthonormal, so lambda_max(Psi^T phi^T phi Psi) = lambda_max(phi phi^T)
    L = lipschitz_margin * power_iteration(lambda v: phi @ (phi.T @ v), m)
    if L == 0:
        raise NumericError("operator is identically zero")
    z = np.zeros(n)

    def objective(z):
        r = y - phi @ synth(z)
        return 0.5 * float(r @ r) + lam * float(np.abs(z).sum())

    history = [objective(z)] if return_objective else None
    for _ in range(iters):
        grad = analyse(phi.T @ (y - phi @ synth(z)))
        z = soft_threshold(z + grad / L, lam / L)
        if return_objective:
            history.append(objective(z))
    x = synth(z)
    return (x, np.array(history)) if return_objective else x
