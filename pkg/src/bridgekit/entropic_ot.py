"""Static Schrödinger bridge / entropic optimal transport on finite supports.

Solves  min_{pi in Pi(a, b)}  <c, pi> + eps * KL(pi || a (x) b)
by Sinkhorn iteration (log-domain by default) and, for Gaussian marginals,
by the closed form for the optimal cross-covariance block.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "DiscreteMeasure",
    "CostMatrix",
    "Coupling",
    "DualPotentials",
    "SinkhornConfig",
    "SinkhornReport",
    "GaussianCoupling",
    "sinkhorn_solve",
    "dual_objective",
    "coupling_from_potentials",
    "kl_discrete",
    "gaussian_eot_closed_form",
    "measure_from_csv",
    "coupling_to_csv",
    "report_to_json",
]


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted finite support: points (n, d), weights (n,) summing to 1."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights length mismatch")
        if np.any(w < 0):
            raise ValueError("negative weight")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        # pairwise-distinct support points
        if pts.shape[0] > 1:
            uniq = np.unique(pts, axis=0)
            if uniq.shape[0] != pts.shape[0]:
                raise ValueError("support points are not pairwise distinct")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class CostMatrix:
    """Transport costs, entry (i, j) = cost from source point i to target j."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 2:
            raise ValueError("cost matrix must be 2-D")
        if not np.all(np.isfinite(e)):
            raise ValueError("non-finite cost entry")
        object.__setattr__(self, "entries", e)


@dataclass(frozen=True)
class Coupling:
    """Joint weights over source x target supports."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("negative coupling weight")
        object.__setattr__(self, "weights", w)

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weights.sum(axis=1), self.weights.sum(axis=0)


@dataclass(frozen=True)
class DualPotentials:
    """Schrödinger potentials: phi per source point, phi_hat per target."""

    phi: np.ndarray
    phi_hat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float).ravel())
        object.__setattr__(self, "phi_hat", np.asarray(self.phi_hat, dtype=float).ravel())
        if not (np.all(np.isfinite(self.phi)) and np.all(np.isfinite(self.phi_hat))):
            raise ValueError("non-finite potential")


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float
    max_iters: int = 10_000
    marginal_tol: float = 1e-9
    log_domain: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.marginal_tol <= 0:
            raise ValueError("marginal_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass
class SinkhornReport:
    iterations_used: int
    dual_objective_trace: list[float] = field(default_factory=list)
    marginal_error_trace: list[float] = field(default_factory=list)
    converged: bool = True


@dataclass(frozen=True)
class GaussianCoupling:
    """Joint Gaussian over (X0, XT): stacked mean and 2x2-block covariance."""

    mean: np.ndarray       # (2d,)
    cov: np.ndarray        # (2d, 2d)
    cross: np.ndarray      # (d, d) cross-covariance block Cov(X0, XT)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def kl_discrete(p, q) -> float:
    """KL divergence between weight arrays; sum p log(p/q), 0 log 0 = 0.

    Returns +inf if p charges a point q does not.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("shape mismatch")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("negative weight")
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _strip_zero_support(m: DiscreteMeasure) -> tuple[np.ndarray, np.ndarray]:
    keep = m.weights > 0
    return m.points[keep], m.weights[keep], keep


def dual_objective(potentials: DualPotentials, source: DiscreteMeasure,
                   target: DiscreteMeasure, cost: CostMatrix, epsilon: float) -> float:
    """Dual value G(phi, phi_hat); at the optimum equals the primal value.

    G = <phi, a> + <phi_hat, b> - eps * E_{a x b}[exp((phi + phi_hat - c)/eps)] + eps
    computed via log-sum-exp to avoid overflow.
    """
    a, b = source.weights, target.weights
    f, g = potentials.phi, potentials.phi_hat
    c = cost.entries
    la = np.where(a > 0, np.log(np.maximum(a, 1e-300)), -np.inf)
    lb = np.where(b > 0, np.log(np.maximum(b, 1e-300)), -np.inf)
    log_terms = (f[:, None] + g[None, :] - c) / epsilon + la[:, None] + lb[None, :]
    total = np.exp(logsumexp(log_terms))
    if not np.isfinite(total):
        raise OverflowError("dual objective non-finite even in log domain")
    return float(f @ a + g @ b - epsilon * total + epsilon)


def coupling_from_potentials(potentials: DualPotentials, source: DiscreteMeasure,
                             target: DiscreteMeasure, cost: CostMatrix,
                             epsilon: float) -> Coupling:
    """exp((phi_i + phi_hat_j - c_ij)/eps) * a_i * b_j, no normalization."""
    a, b = source.weights, target.weights
    f, g = potentials.phi, potentials.phi_hat
    w = np.exp((f[:, None] + g[None, :] - cost.entries) / epsilon) * a[:, None] * b[None, :]
    if not np.all(np.isfinite(w)):
        raise OverflowError("non-finite coupling entry")
    return Coupling(w)


def _tv(p, q) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def sinkhorn_solve(source: DiscreteMeasure, target: DiscreteMeasure,
                   cost: CostMatrix, config: SinkhornConfig
                   ) -> tuple[Coupling, DualPotentials, SinkhornReport]:
    """Alternating dual updates until both marginal TV errors <= marginal_tol.

    phi is initialized to zero.  Zero-weight support points are stripped
    before solving and restored (with zero rows/columns) afterwards.
    """
    if cost.entries.shape != (source.n, target.n):
        raise ValueError("cost dimensions do not match the measures")
    eps = config.epsilon

    _, a, keep_a = _strip_zero_support(source)
    _, b, keep_b = _strip_zero_support(target)
    C = cost.entries[np.ix_(keep_a, keep_b)]
    la, lb = np.log(a), np.log(b)

    sub_source = DiscreteMeasure(source.points[keep_a], a)
    sub_target = DiscreteMeasure(target.points[keep_b], b)
    sub_cost = CostMatrix(C)

    f = np.zeros(a.shape[0])
    g = np.zeros(b.shape[0])

    report = SinkhornReport(iterations_used=0)
    converged = False
    for it in range(1, config.max_iters + 1):
        if config.log_domain:
            # f-update enforces the source marginal, g-update the target one.
            # (the reference-product factors a_i b_j live in the coupling, so
            # only the opposite marginal's log-weights enter the update)
            f = -eps * logsumexp((g[None, :] - C) / eps + lb[None, :], axis=1)
            g = -eps * logsumexp((f[:, None] - C) / eps + la[:, None], axis=0)
        else:
            K = np.exp(-C / eps)
            v = np.exp(g / eps)
            u = 1.0 / (K @ (v * b))
            v = 1.0 / (K.T @ (u * a))
            f, g = eps * np.log(u), eps * np.log(v)

        pots = DualPotentials(f, g)
        pi = coupling_from_potentials(pots, sub_source, sub_target, sub_cost, eps)
        row, col = pi.marginals()
        err = max(_tv(row, a), _tv(col, b))
        report.marginal_error_trace.append(err)
        report.dual_objective_trace.append(
            dual_objective(pots, sub_source, sub_target, sub_cost, eps))
        report.iterations_used = it
        if err <= config.marginal_tol:
            converged = True
            break
    report.converged = converged

    # restore stripped support with zero mass
    full = np.zeros((source.n, target.n))
    full[np.ix_(keep_a, keep_b)] = pi.weights
    f_full = np.zeros(source.n)
    g_full = np.zeros(target.n)
    f_full[keep_a] = f
    g_full[keep_b] = g
    return Coupling(full), DualPotentials(f_full, g_full), report


def _sqrtm_spd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    if np.any(vals <= 0):
        raise ValueError(f"matrix not positive definite; eigenvalues {vals}")
    return (vecs * np.sqrt(vals)) @ vecs.T


def gaussian_eot_closed_form(mu0, Sigma0, muT, SigmaT, sigma: float) -> GaussianCoupling:
    """Optimal entropic coupling of two Gaussians for noise level sigma.

    Cross block: C = (1/2) (S0^{1/2} D S0^{-1/2} - sigma^2 I) with
    D = (4 S0^{1/2} ST S0^{1/2} + sigma^4 I)^{1/2}.  sigma = 0 gives the
    deterministic (Monge) coupling.  The static epsilon convention maps as
    epsilon = 2 sigma^2 at call sites.
    """
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    muT = np.atleast_1d(np.asarray(muT, dtype=float))
    S0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    ST = np.atleast_2d(np.asarray(SigmaT, dtype=float))
    d = mu0.shape[0]
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    for name, M in (("Sigma0", S0), ("SigmaT", ST)):
        if not np.allclose(M, M.T, atol=1e-12):
            raise ValueError(f"{name} not symmetric")
        vals = np.linalg.eigvalsh(M)
        if np.any(vals <= 0):
            raise ValueError(f"{name} not positive definite; eigenvalues {vals}")

    root0 = _sqrtm_spd(S0)
    root0_inv = np.linalg.inv(root0)
    D = _sqrtm_spd(4.0 * root0 @ ST @ root0 + sigma ** 4 * np.eye(d))
    C = 0.5 * (root0 @ D @ root0_inv - sigma ** 2 * np.eye(d))

    mean = np.concatenate([mu0, muT])
    cov = np.block([[S0, C], [C.T, ST]])
    # symmetrize against roundoff and check PSD
    cov = 0.5 * (cov + cov.T)
    min_eig = np.linalg.eigvalsh(cov).min()
    if min_eig < -1e-8:
        raise ValueError(f"joint covariance not PSD (min eigenvalue {min_eig})")
    return GaussianCoupling(mean=mean, cov=cov, cross=C)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def measure_from_csv(path) -> DiscreteMeasure:
    """Load a measure: one row per support point, columns coords..., weight."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].startswith("#"):
                continue
            rows.append([float(v) for v in rec])
    arr = np.asarray(rows, dtype=float)
    return DiscreteMeasure(points=arr[:, :-1], weights=arr[:, -1])


def coupling_to_csv(coupling: Coupling, path) -> None:
    np.savetxt(path, coupling.weights, delimiter=",", fmt="%.17g")


def report_to_json(report: SinkhornReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(
            {
                "iterations_used": report.iterations_used,
                "converged": report.converged,
                "dual_objective_trace": report.dual_objective_trace,
                "marginal_error_trace": report.marginal_error_trace,
            },
            fh,
            indent=2,
        )
