"""Closed-form Gaussian Schrödinger bridge for linear reference SDEs.

For a reference  dX = (c_t X + alpha_t) dt + sigma_t dB  and Gaussian
endpoint marginals, the bridge is a Gaussian Markov process whose moments
and drift are available in closed form from a handful of scalar schedule
integrals (tau, zeta, kappa, r, rho).  The Bures-Wasserstein action over
covariance paths is provided as an independent consistency oracle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.linalg import solve_sylvester

from .entropic_ot import gaussian_eot_closed_form

__all__ = [
    "GaussianMarginal",
    "LinearReferenceSde",
    "BridgeSchedule",
    "GaussianBridgePath",
    "compute_schedule",
    "bridge_moments",
    "make_bridge_path",
    "bridge_drift",
    "lyapunov_solve",
    "bw_action",
    "moments_to_csv",
]


@dataclass(frozen=True)
class GaussianMarginal:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("covariance not symmetric")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValueError("covariance not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class LinearReferenceSde:
    """dX = (c_t X + alpha_t) dt + sigma_t dB on [0, T]."""

    c_of_t: Callable[[float], float]
    alpha_of_t: Optional[Callable[[float], np.ndarray]]
    sigma_of_t: Callable[[float], float]
    T: float

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("horizon must be positive")


class BridgeSchedule:
    """Schedule quantities of the linear-reference bridge.

    All integrals are evaluated once by composite Simpson quadrature on a
    fixed uniform grid and interpolated afterwards.  Derivative queries use
    central differences with step T/1024.
    """

    def __init__(self, ref: LinearReferenceSde, ts, tau, zeta, growth):
        self.ref = ref
        self.T = ref.T
        self._ts = ts            # (N,)
        self._tau = tau          # (N,)
        self._zeta = zeta        # (N, d_alpha) or None
        self._growth = growth    # (N,) cumulative integral of tau^{-2} sigma^2
        self._h = ref.T / 1024.0
        if growth[-1] <= 0:
            raise ValueError("zero diffusion: kappa(T, T) vanishes")
        self.sigma_star = float(np.sqrt(tau[-1] * growth[-1]))

    # -- scalar schedule functions -------------------------------------
    def tau(self, t):
        return np.interp(t, self._ts, self._tau)

    def zeta(self, t):
        if self._zeta is None:
            return np.zeros(1) if np.isscalar(t) else np.zeros((np.shape(t)[0], 1))
        cols = [np.interp(t, self._ts, self._zeta[:, j])
                for j in range(self._zeta.shape[1])]
        return np.stack(cols, axis=-1) if not np.isscalar(t) else np.array(cols)

    def _I(self, t):
        return np.interp(t, self._ts, self._growth)

    def kappa(self, t, t_prime):
        lo = np.minimum(t, t_prime)
        return self.tau(t) * self.tau(t_prime) * self._I(lo)

    def r(self, t):
        return self.tau(t) * self._I(t) / (self._tau[-1] * self._growth[-1])

    def r_bar(self, t):
        return self.tau(t) - self.r(t) * self._tau[-1]

    def rho(self, t):
        return self._I(t) / self._growth[-1]

    # -- derivatives (central differences, one-sided at the ends) ------
    def _ddt(self, fn, t):
        h = self._h
        lo, hi = max(t - h, 0.0), min(t + h, self.T)
        return (fn(hi) - fn(lo)) / (hi - lo)

    def r_dot(self, t):
        return self._ddt(self.r, t)

    def r_bar_dot(self, t):
        return self._ddt(self.r_bar, t)


def compute_schedule(ref: LinearReferenceSde, quad_points: int = 512) -> BridgeSchedule:
    """Evaluate tau, zeta and the kappa growth integral by Simpson quadrature."""
    if quad_points < 16:
        raise ValueError("quad_points must be at least 16")
    n = quad_points if quad_points % 2 == 1 else quad_points + 1  # Simpson wants odd
    ts = np.linspace(0.0, ref.T, n)

    c_vals = np.array([float(ref.c_of_t(t)) for t in ts])
    cum_c = cumulative_simpson(c_vals, x=ts, initial=0.0)
    tau = np.exp(cum_c)

    sig = np.array([float(ref.sigma_of_t(t)) for t in ts])
    if np.any(sig <= 0):
        raise ValueError("sigma_of_t must be positive on [0, T]")
    growth = cumulative_simpson(sig ** 2 / tau ** 2, x=ts, initial=0.0)

    zeta = None
    if ref.alpha_of_t is not None:
        alpha = np.array([np.atleast_1d(ref.alpha_of_t(t)) for t in ts], dtype=float)
        inner = cumulative_simpson(alpha / tau[:, None], x=ts, initial=0.0, axis=0)
        zeta = tau[:, None] * inner

    return BridgeSchedule(ref, ts, tau, zeta, growth)


def cross_covariance(schedule: BridgeSchedule, Sigma0, SigmaT) -> np.ndarray:
    """Optimal endpoint cross-covariance C for the bridge.

    Computed on tau_T-rescaled endpoints (initial covariance tau_T^2 Sigma0,
    effective noise variance kappa(T,T)) and unscaled by 1/tau_T.
    """
    S0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    ST = np.atleast_2d(np.asarray(SigmaT, dtype=float))
    tau_T = schedule._tau[-1]
    kTT = float(schedule.kappa(schedule.T, schedule.T))
    d = S0.shape[0]
    joint = gaussian_eot_closed_form(np.zeros(d), tau_T ** 2 * S0,
                                     np.zeros(d), ST, np.sqrt(kTT))
    return joint.cross / tau_T


def bridge_moments(schedule: BridgeSchedule, mu0, Sigma0, muT, SigmaT, t
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the bridge marginal at time t."""
    if t < 0 or t > schedule.T:
        raise ValueError("t outside [0, T]")
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    muT = np.atleast_1d(np.asarray(muT, dtype=float))
    S0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    ST = np.atleast_2d(np.asarray(SigmaT, dtype=float))
    d = mu0.shape[0]

    r = schedule.r(t)
    rb = schedule.r_bar(t)
    rho = schedule.rho(t)
    ktt = schedule.kappa(t, t)
    C = cross_covariance(schedule, S0, ST)

    zeta_t = np.resize(schedule.zeta(t), d)
    zeta_T = np.resize(schedule.zeta(schedule.T), d)
    mean = rb * mu0 + r * muT + zeta_t - r * zeta_T
    cov = (rb ** 2 * S0 + r ** 2 * ST + r * rb * (C + C.T)
           + ktt * (1.0 - rho) * np.eye(d))
    return mean, cov


@dataclass
class GaussianBridgePath:
    """Bundles the schedule with the endpoint marginals.

    mu_star / sigma_star_cov / S are functions of t; C_sigma_star is the
    endpoint cross-covariance block.
    """

    schedule: BridgeSchedule
    start: GaussianMarginal
    end: GaussianMarginal
    C_sigma_star: np.ndarray

    def mu_star(self, t) -> np.ndarray:
        m, _ = bridge_moments(self.schedule, self.start.mean, self.start.cov,
                              self.end.mean, self.end.cov, t)
        return m

    def sigma_star_cov(self, t) -> np.ndarray:
        _, c = bridge_moments(self.schedule, self.start.mean, self.start.cov,
                              self.end.mean, self.end.cov, t)
        return c

    def S(self, t) -> np.ndarray:
        sch = self.schedule
        d = self.start.dim
        C = self.C_sigma_star
        r = sch.r(t)
        rb = sch.r_bar(t)
        P = sch.r_dot(t) * (r * self.end.cov + rb * C)
        Q = -sch.r_bar_dot(t) * (rb * self.start.cov + r * C)
        c_t = float(sch.ref.c_of_t(t))
        sig_t = float(sch.ref.sigma_of_t(t))
        scalar = c_t * sch.kappa(t, t) * (1.0 - sch.rho(t)) - sig_t ** 2 * sch.rho(t)
        return P - Q.T + scalar * np.eye(d)

    def mu_star_dot(self, t) -> np.ndarray:
        h = self.schedule._h
        lo, hi = max(t - h, 0.0), min(t + h, self.schedule.T)
        return (self.mu_star(hi) - self.mu_star(lo)) / (hi - lo)


def make_bridge_path(schedule: BridgeSchedule, start: GaussianMarginal,
                     end: GaussianMarginal) -> GaussianBridgePath:
    C = cross_covariance(schedule, start.cov, end.cov)
    return GaussianBridgePath(schedule, start, end, C)


def bridge_drift(path: GaussianBridgePath, x, t) -> np.ndarray:
    """Closed-form bridge drift  S_t^T Sigma_t^{-1} (x - mu_t) + d/dt mu_t.

    Accepts a single state vector or a batch (..., d).
    """
    x = np.asarray(x, dtype=float)
    d = path.start.dim
    cov = path.sigma_star_cov(t)
    cov = cov + 1e-10 * np.eye(d)  # jitter for near-pinned endpoints
    cond = np.linalg.cond(cov)
    if not np.isfinite(cond):
        raise np.linalg.LinAlgError("singular bridge covariance after jitter")
    A = np.linalg.solve(cov.T, path.S(t)).T  # S^T Sigma^{-1}
    dev = x - path.mu_star(t)
    return dev @ A.T + path.mu_star_dot(t)


def lyapunov_solve(Sigma: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Solve  Sigma A + A Sigma = U  for symmetric A (Sigma SPD, U symmetric)."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if not np.allclose(U, U.T, atol=1e-12):
        raise ValueError("U not symmetric")
    if np.any(np.linalg.eigvalsh(Sigma) <= 0):
        raise ValueError("Sigma not positive definite")
    A = solve_sylvester(Sigma, Sigma, U)
    A = 0.5 * (A + A.T)
    resid = np.linalg.norm(Sigma @ A + A @ Sigma - U)
    if resid > 1e-10 * max(1.0, np.linalg.norm(U)):
        raise ArithmeticError(f"Lyapunov residual {resid} too large")
    return A


def bw_action(cov_path, sigma_of_t, T: float = 1.0) -> float:
    """Bures-Wasserstein action of a covariance path on a uniform grid.

    Trapezoidal sum of  (1/2)||dSigma/dt||^2_Sigma + (sigma_t^4/8) tr(Sigma^{-1}),
    with the metric norm  ||U||^2_Sigma = (1/2) tr(L_Sigma[U] U)  via the
    Lyapunov operator and time derivatives by central differences.
    """
    mats = [np.atleast_2d(np.asarray(m, dtype=float)) for m in cov_path]
    m = len(mats)
    if m < 3:
        raise ValueError("need at least 3 path points")
    for M in mats:
        if np.any(np.linalg.eigvalsh(M) <= 0):
            raise ValueError("covariance path entry not SPD")
    dt = T / (m - 1)
    ts = np.linspace(0.0, T, m)
    integrand = np.empty(m)
    for k in range(m):
        if k == 0:
            dS = (mats[1] - mats[0]) / dt
        elif k == m - 1:
            dS = (mats[-1] - mats[-2]) / dt
        else:
            dS = (mats[k + 1] - mats[k - 1]) / (2 * dt)
        dS = 0.5 * (dS + dS.T)
        A = lyapunov_solve(mats[k], dS)
        kinetic = 0.5 * 0.5 * np.trace(A @ dS)
        sig = float(sigma_of_t(ts[k]))
        potential = sig ** 4 / 8.0 * np.trace(np.linalg.inv(mats[k]))
        integrand[k] = kinetic + potential
    return float(np.trapezoid(integrand, dx=dt))


def moments_to_csv(path: GaussianBridgePath, ts, out_path) -> None:
    """Serialize (t, mu entries, Sigma entries row-major) rows."""
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        d = path.start.dim
        writer.writerow(["t"] + [f"mu_{i}" for i in range(d)]
                        + [f"cov_{i}{j}" for i in range(d) for j in range(d)])
        for t in ts:
            m = path.mu_star(t)
            c = path.sigma_star_cov(t)
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in m]
                            + [repr(float(v)) for v in c.ravel()])
