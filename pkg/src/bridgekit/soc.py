"""Grid-exact stochastic optimal control at desk scale.

Value functions are computed two independent ways — Monte-Carlo averaging of
exponentially discounted terminal functionals along uncontrolled paths, and a
linear backward PDE for the exponentiated potential phi = exp(-V) — and the
optimal control is u*(x, t) = -sigma_t grad V.  (The backward "Z-process" of
the adjoint formulation is represented only through this grid: Z = -sigma
grad V; no standalone FBSDE integrator is built.)

Three training losses over path ensembles are provided: relative entropy
(on-policy), cross entropy (importance-weighted, off-policy) and log-variance
(off-policy, constant-shift invariant).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import logsumexp, ndtri

from ._rng import named_stream, stream
from .path_sim import PathEnsemble, SdeSpec, simulate_sde

__all__ = [
    "SocProblem",
    "SpaceTimeGrid",
    "ValueGrid",
    "ParamControl",
    "CeLossResult",
    "FitResult",
    "feynman_kac_value",
    "hjb_solve_grid",
    "control_from_value",
    "sb_terminal_cost",
    "loss_relative_entropy",
    "loss_cross_entropy",
    "loss_log_variance",
    "optimal_log_weights",
    "fit_control",
    "value_grid_to_csv",
]


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SocProblem:
    """Reference dynamics dX = f dt + sigma dB, running cost c, terminal cost Phi.

    ref_drift=None means f = 0; running_cost=None means c = 0.  init_law is a
    sampler (rng, n) -> (n, d) or a fixed state vector.
    """

    ref_drift: Optional[Callable]
    sigma_of_t: Callable[[float], float]
    running_cost: Optional[Callable]
    terminal_cost: Callable
    T: float
    init_law: object = 0.0

    def sde_spec(self, control=None) -> SdeSpec:
        return SdeSpec(self.ref_drift, control, self.sigma_of_t, self.T)


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform 1-D (xs array) or tensor 2-D (xs = (ax, ay)) space grid, time grid ts."""

    ts: np.ndarray
    xs: object

    def __post_init__(self):
        object.__setattr__(self, "ts", np.asarray(self.ts, dtype=float))
        if isinstance(self.xs, tuple):
            object.__setattr__(self, "xs", tuple(np.asarray(a, dtype=float) for a in self.xs))
        else:
            object.__setattr__(self, "xs", np.asarray(self.xs, dtype=float))

    @property
    def ndim_space(self) -> int:
        return 2 if isinstance(self.xs, tuple) else 1


@dataclass
class ValueGrid:
    grid: SpaceTimeGrid
    V: np.ndarray                      # (n_t, n_x) or (n_t, nx, ny)
    mc_se: Optional[np.ndarray] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.V)):
            raise FloatingPointError("non-finite value entries")

    @property
    def phi(self) -> np.ndarray:
        return np.exp(-self.V)

    def value(self, x, t) -> float:
        """Bilinear interpolation in (t, x); 1-D space only."""
        ts, xs = self.grid.ts, self.grid.xs
        ti = np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2)
        wt = (t - ts[ti]) / (ts[ti + 1] - ts[ti])
        wt = np.clip(wt, 0.0, 1.0)
        row = (1 - wt) * self.V[ti] + wt * self.V[ti + 1]
        return float(np.interp(x, xs, row))


@dataclass
class ParamControl:
    """Tabular-on-grid (bilinear) or linear-in-features control, 1-D state.

    tabular: params has shape (n_t, n_x) over (ts, xs) nodes.
    features: per-time-bin weights (n_bins, n_centers + 2) on
              [rbf(x; centers), x, 1] features.
    """

    kind: str
    ts: Optional[np.ndarray] = None
    xs: Optional[np.ndarray] = None
    bin_edges: Optional[np.ndarray] = None
    centers: Optional[np.ndarray] = None
    bandwidth: float = 1.0
    params: np.ndarray = None

    @staticmethod
    def tabular(ts, xs, values=None) -> "ParamControl":
        ts = np.asarray(ts, dtype=float)
        xs = np.asarray(xs, dtype=float)
        if values is None:
            values = np.zeros((len(ts), len(xs)))
        return ParamControl(kind="tabular", ts=ts, xs=xs,
                            params=np.asarray(values, dtype=float))

    @staticmethod
    def features(bin_edges, centers, bandwidth, weights=None) -> "ParamControl":
        bin_edges = np.asarray(bin_edges, dtype=float)
        centers = np.asarray(centers, dtype=float)
        if weights is None:
            weights = np.zeros((len(bin_edges) - 1, len(centers) + 2))
        return ParamControl(kind="features", bin_edges=bin_edges, centers=centers,
                            bandwidth=float(bandwidth),
                            params=np.asarray(weights, dtype=float))

    def design(self, x: np.ndarray, t: float) -> sp.csr_matrix:
        """Sparse design rows so that u(x, t) = design @ params.ravel()."""
        x = np.asarray(x, dtype=float).ravel()
        n = x.shape[0]
        if self.kind == "tabular":
            ts, xs = self.ts, self.xs
            ti = int(np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2))
            wt = float(np.clip((t - ts[ti]) / (ts[ti + 1] - ts[ti]), 0.0, 1.0))
            xi = np.clip(np.searchsorted(xs, x) - 1, 0, len(xs) - 2)
            wx = np.clip((x - xs[xi]) / (xs[xi + 1] - xs[xi]), 0.0, 1.0)
            n_x = len(xs)
            rows = np.repeat(np.arange(n), 4)
            cols = np.stack([ti * n_x + xi, ti * n_x + xi + 1,
                             (ti + 1) * n_x + xi, (ti + 1) * n_x + xi + 1], axis=1).ravel()
            vals = np.stack([(1 - wt) * (1 - wx), (1 - wt) * wx,
                             wt * (1 - wx), wt * wx], axis=1).ravel()
            return sp.csr_matrix((vals, (rows, cols)), shape=(n, self.params.size))
        # features
        edges = self.bin_edges
        b = int(np.clip(np.searchsorted(edges, t, side="right") - 1, 0, len(edges) - 2))
        feats = np.empty((n, self.centers.shape[0] + 2))
        feats[:, :-2] = np.exp(-0.5 * ((x[:, None] - self.centers[None, :])
                                       / self.bandwidth) ** 2)
        feats[:, -2] = x
        feats[:, -1] = 1.0
        n_feat = feats.shape[1]
        rows = np.repeat(np.arange(n), n_feat)
        cols = np.tile(b * n_feat + np.arange(n_feat), n)
        return sp.csr_matrix((feats.ravel(), (rows, cols)), shape=(n, self.params.size))

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        out = self.design(x, float(t)) @ self.params.ravel()
        return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# Value solvers
# ---------------------------------------------------------------------------

def feynman_kac_value(problem: SocProblem, grid: SpaceTimeGrid, n_mc: int,
                      seed: int) -> ValueGrid:
    """V_t(x) = -log E[exp(-int c ds - Phi(X_T)) | X_t = x], uncontrolled MC.

    Shared (common) random numbers across grid nodes.  When ref_drift and
    running_cost are both None the terminal state is sampled in one exact
    shot (zero-drift Euler is exact) from randomized stratified normals (16
    independently offset strata replicates; the replicate spread gives the
    standard error); otherwise paths are stepped on the time grid with
    antithetic pairs.
    """
    if grid.ndim_space != 1:
        raise NotImplementedError("Feynman-Kac value grids are 1-D in space")
    ts, xs = grid.ts, grid.xs
    n_t, n_x = len(ts), len(xs)
    T = problem.T
    half = max(n_mc // 2, 1)
    reps = 16
    per = max(n_mc // reps, 2)
    offsets = named_stream(seed, "feynman-kac").random((reps, per))
    z_strat = ndtri((np.arange(per)[None, :] + offsets) / per)  # (reps, per)
    z = z_strat.ravel()
    n_eff = z.shape[0]

    V = np.empty((n_t, n_x))
    se = np.empty((n_t, n_x))
    for i, t in enumerate(ts):
        if i == n_t - 1 or t >= T:
            V[i] = np.array([float(np.ravel(problem.terminal_cost(np.atleast_1d(x)))[0])
                             for x in xs])
            se[i] = 0.0
            continue
        one_shot = problem.ref_drift is None and problem.running_cost is None
        if one_shot:
            s2 = _integrated_sigma2(problem.sigma_of_t, t, T)
            xT = xs[:, None] + np.sqrt(s2) * z[None, :]          # (n_x, n_eff)
            log_w = -_apply_terminal(problem.terminal_cost, xT)
        else:
            sub_ts = np.concatenate([[t], ts[ts > t]])
            if sub_ts[-1] < T:
                sub_ts = np.concatenate([sub_ts, [T]])
            x_cur = np.repeat(xs[:, None], 2 * half, axis=1)
            acc = np.zeros_like(x_cur)
            rng = named_stream(seed, f"feynman-kac-row-{i}")
            for k in range(len(sub_ts) - 1):
                tk, dt_k = sub_ts[k], sub_ts[k + 1] - sub_ts[k]
                if problem.running_cost is not None:
                    acc += _apply_cost(problem.running_cost, x_cur, tk) * dt_k
                drift = 0.0
                if problem.ref_drift is not None:
                    drift = _apply_cost(problem.ref_drift, x_cur, tk)
                zz = rng.standard_normal((n_x, half))
                zz = np.concatenate([zz, -zz], axis=1)  # antithetic
                x_cur = x_cur + drift * dt_k + float(problem.sigma_of_t(tk)) * np.sqrt(dt_k) * zz
            xT = x_cur
            log_w = -acc - _apply_terminal(problem.terminal_cost, xT)

        m = log_w.max(axis=1, keepdims=True)
        e = np.exp(log_w - m)
        mean_e = e.mean(axis=1)
        lse = m[:, 0] + np.log(mean_e)
        if not np.all(np.isfinite(lse)):
            raise FloatingPointError("Feynman-Kac estimate non-finite after log-sum-exp")
        V[i] = -lse
        # delta-method standard error of -log(mean w): replicate means for
        # the stratified one-shot branch, antithetic pair means otherwise
        if one_shot:
            rep_means = e.reshape(n_x, reps, per).mean(axis=2)
            se[i] = (np.std(rep_means, axis=1, ddof=1) / np.sqrt(reps)
                     / mean_e)
        else:
            pair = 0.5 * (e[:, :half] + e[:, half:2 * half]) / mean_e[:, None]
            se[i] = np.std(pair, axis=1, ddof=1) / np.sqrt(half)
    return ValueGrid(grid=grid, V=V, mc_se=se)


def _integrated_sigma2(sigma_of_t, a, b, n=64):
    tt = np.linspace(a, b, n)
    vals = np.array([float(sigma_of_t(t)) ** 2 for t in tt])
    return float(np.trapezoid(vals, tt))


def _apply_terminal(phi, x_grid):
    flat = x_grid.reshape(-1, 1)
    vals = np.asarray(phi(flat), dtype=float).reshape(x_grid.shape)
    return vals


def _apply_cost(c, x_grid, t):
    flat = x_grid.reshape(-1, 1)
    vals = np.broadcast_to(np.asarray(c(flat, t), dtype=float), flat.shape)
    return vals.reshape(x_grid.shape)


def _operator_1d(xs, f_vals, sigma, c_vals):
    """Tridiagonal L = f d/dx + sigma^2/2 d2/dx2 - c, zero 2nd derivative at ends."""
    n = len(xs)
    dx = xs[1] - xs[0]
    main = np.zeros(n)
    lower = np.zeros(n - 1)
    upper = np.zeros(n - 1)
    diff = sigma ** 2 / (2 * dx ** 2)
    adv = f_vals / (2 * dx)
    main[1:-1] = -2 * diff - c_vals[1:-1]
    lower[:-1] = diff - adv[1:-1]
    upper[1:] = diff + adv[1:-1]
    # boundary rows: one-sided first derivative, no diffusion term
    main[0] = -f_vals[0] / dx - c_vals[0]
    upper[0] = f_vals[0] / dx
    main[-1] = f_vals[-1] / dx - c_vals[-1]
    lower[-1] = -f_vals[-1] / dx
    return sp.diags([lower, main, upper], offsets=[-1, 0, 1], format="csc")


def hjb_solve_grid(problem: SocProblem, grid: SpaceTimeGrid) -> ValueGrid:
    """Backward Crank-Nicolson integration of the linear potential PDE.

    d/dt phi + f phi' + (sigma^2/2) phi'' - c phi = 0, phi_T = exp(-Phi);
    V = -log phi.  The space domain is padded by half its width on each side
    (same spacing) and restricted back, to keep boundary effects away.
    """
    if grid.ndim_space == 2:
        return _hjb_solve_2d(problem, grid)
    ts, xs = grid.ts, grid.xs
    dx = xs[1] - xs[0]
    n_pad = len(xs) // 2
    xs_ext = np.concatenate([xs[0] - dx * np.arange(n_pad, 0, -1), xs,
                             xs[-1] + dx * np.arange(1, n_pad + 1)])
    phi = np.exp(-np.array([float(np.ravel(problem.terminal_cost(np.atleast_1d(x)))[0])
                            for x in xs_ext]))
    out = np.empty((len(ts), len(xs)))
    out[-1] = -np.log(phi[n_pad:n_pad + len(xs)])

    def L_at(t):
        f_vals = np.zeros_like(xs_ext)
        if problem.ref_drift is not None:
            f_vals = _apply_cost(problem.ref_drift, xs_ext[:, None], t)[:, 0]
        c_vals = np.zeros_like(xs_ext)
        if problem.running_cost is not None:
            c_vals = _apply_cost(problem.running_cost, xs_ext[:, None], t)[:, 0]
        return _operator_1d(xs_ext, f_vals, float(problem.sigma_of_t(t)), c_vals)

    eye = sp.identity(len(xs_ext), format="csc")
    for k in range(len(ts) - 2, -1, -1):
        dt = ts[k + 1] - ts[k]
        L_new, L_old = L_at(ts[k]), L_at(ts[k + 1])
        rhs = (eye + 0.5 * dt * L_old) @ phi
        phi = spla.spsolve((eye - 0.5 * dt * L_new).tocsc(), rhs)
        if np.any(phi <= 0):
            raise ArithmeticError(f"phi nonpositive at t = {ts[k]} (scheme violation)")
        out[k] = -np.log(phi[n_pad:n_pad + len(xs)])
    return ValueGrid(grid=grid, V=out)


def _hjb_solve_2d(problem: SocProblem, grid: SpaceTimeGrid) -> ValueGrid:
    ts = grid.ts
    ax, ay = grid.xs
    nx, ny = len(ax), len(ay)
    X, Y = np.meshgrid(ax, ay, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    phi = np.exp(-np.asarray(problem.terminal_cost(pts), dtype=float).ravel())
    out = np.empty((len(ts), nx, ny))
    out[-1] = -np.log(phi).reshape(nx, ny)

    def d1(n, h):
        e = np.ones(n)
        D = sp.diags([-e[:-1], e[:-1]], offsets=[-1, 1]) / (2 * h)
        D = D.tolil()
        D[0, :3] = [-1 / h, 1 / h, 0.0]
        D[-1, -3:] = [0.0, -1 / h, 1 / h]
        return D.tocsr()

    def d2(n, h):
        e = np.ones(n)
        D = sp.diags([e[:-1], -2 * e, e[:-1]], offsets=[-1, 0, 1]) / h ** 2
        D = D.tolil()
        D[0, :] = 0.0
        D[-1, :] = 0.0
        return D.tocsr()

    hx, hy = ax[1] - ax[0], ay[1] - ay[0]
    Ix, Iy = sp.identity(nx), sp.identity(ny)
    Dx1 = sp.kron(d1(nx, hx), Iy).tocsr()
    Dy1 = sp.kron(Ix, d1(ny, hy)).tocsr()
    Lap = (sp.kron(d2(nx, hx), Iy) + sp.kron(Ix, d2(ny, hy))).tocsr()

    def L_at(t):
        sig = float(problem.sigma_of_t(t))
        L = sig ** 2 / 2 * Lap
        if problem.ref_drift is not None:
            fv = np.asarray(problem.ref_drift(pts, t), dtype=float)
            fv = np.broadcast_to(fv, pts.shape)
            L = L + sp.diags(fv[:, 0]) @ Dx1 + sp.diags(fv[:, 1]) @ Dy1
        if problem.running_cost is not None:
            cv = np.asarray(problem.running_cost(pts, t), dtype=float).ravel()
            L = L - sp.diags(np.broadcast_to(cv, (pts.shape[0],)))
        return L.tocsc()

    eye = sp.identity(nx * ny, format="csc")
    for k in range(len(ts) - 2, -1, -1):
        dt = ts[k + 1] - ts[k]
        rhs = (eye + 0.5 * dt * L_at(ts[k + 1])) @ phi
        phi = spla.spsolve((eye - 0.5 * dt * L_at(ts[k])).tocsc(), rhs)
        if np.any(phi <= 0):
            raise ArithmeticError(f"phi nonpositive at t = {ts[k]}")
        out[k] = -np.log(phi).reshape(nx, ny)
    return ValueGrid(grid=grid, V=out)


def control_from_value(value: ValueGrid, sigma_of_t) -> ParamControl:
    """u(x, t) = -sigma_t * dV/dx on the grid (central differences, one-sided ends)."""
    if value.grid.ndim_space != 1:
        raise NotImplementedError("tabular controls are 1-D in space")
    ts, xs = value.grid.ts, value.grid.xs
    grad = np.gradient(value.V, xs, axis=1)
    sig = np.array([float(sigma_of_t(t)) for t in ts])
    return ParamControl.tabular(ts, xs, -sig[:, None] * grad)


def sb_terminal_cost(phi_hat_T: Callable, target_density: Callable) -> Callable:
    """Terminal cost  x -> log phi_hat_T(x) - log pi_T(x)  for bridge problems."""

    def Phi(x):
        a = np.asarray(phi_hat_T(x), dtype=float)
        b = np.asarray(target_density(x), dtype=float)
        if np.any(a <= 0) or np.any(b <= 0):
            raise ValueError("sb_terminal_cost requires positive inputs")
        return np.log(a) - np.log(b)

    return Phi


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _eval_control_grid(control, ensemble: PathEnsemble) -> np.ndarray:
    """Control values at (path, left grid time); shape (n_paths, n_steps)."""
    n_steps = len(ensemble.grid) - 1
    out = np.empty((ensemble.n_paths, n_steps))
    for k in range(n_steps):
        xk = ensemble.states[:, k]
        val = np.broadcast_to(np.asarray(control(xk, float(ensemble.grid[k])),
                                         dtype=float), xk.shape)
        out[:, k] = val[:, 0]
    return out


def _running_cost_sum(problem: SocProblem, ensemble: PathEnsemble) -> np.ndarray:
    if problem.running_cost is None:
        return np.zeros(ensemble.n_paths)
    n_steps = len(ensemble.grid) - 1
    acc = np.zeros(ensemble.n_paths)
    for k in range(n_steps):
        xk = ensemble.states[:, k]
        cv = np.asarray(problem.running_cost(xk, float(ensemble.grid[k])),
                        dtype=float).reshape(-1)
        acc += np.broadcast_to(cv, (ensemble.n_paths,)) * ensemble.dt
    return acc


def _terminal_cost(problem: SocProblem, ensemble: PathEnsemble) -> np.ndarray:
    return np.asarray(problem.terminal_cost(ensemble.states[:, -1]),
                      dtype=float).reshape(-1)


def _reference_increments(problem: SocProblem, ensemble: PathEnsemble) -> np.ndarray:
    """Reference-measure Brownian increments dB0 = (dX - f dt)/sigma.

    Exact for Euler-simulated ensembles regardless of the simulating control.
    Shape (n_paths, n_steps) for 1-D state.
    """
    dX = np.diff(ensemble.states[:, :, 0], axis=1)
    n_steps = len(ensemble.grid) - 1
    out = np.empty_like(dX)
    for k in range(n_steps):
        t = float(ensemble.grid[k])
        f = 0.0
        if problem.ref_drift is not None:
            xk = ensemble.states[:, k]
            f = np.broadcast_to(np.asarray(problem.ref_drift(xk, t), dtype=float),
                                xk.shape)[:, 0]
        out[:, k] = (dX[:, k] - f * ensemble.dt) / float(problem.sigma_of_t(t))
    return out


def loss_relative_entropy(control, problem: SocProblem,
                          ensemble: PathEnsemble) -> float:
    """MC average of  int (1/2 ||u||^2 + c) dt + Phi(X_T)  (ensemble under u)."""
    u = _eval_control_grid(control, ensemble) if control is not None \
        else np.zeros((ensemble.n_paths, len(ensemble.grid) - 1))
    per_path = (0.5 * np.sum(u ** 2, axis=1) * ensemble.dt
                + _running_cost_sum(problem, ensemble)
                + _terminal_cost(problem, ensemble))
    return float(per_path.mean())


@dataclass
class CeLossResult:
    value: float
    ess: float
    low_ess: bool


def loss_cross_entropy(control, problem: SocProblem, ensemble: PathEnsemble,
                       log_rnd_weights: np.ndarray) -> CeLossResult:
    """Self-normalized importance-weighted cross-entropy objective.

    Weighted mean of the u-dependent CE integrand
        1/2 int ||u||^2 dt - int u^T dB0
    with weights proportional to exp(log dP*/dP^v) along the proposal paths.
    """
    log_w = np.asarray(log_rnd_weights, dtype=float).ravel()
    w = np.exp(log_w - logsumexp(log_w))
    ess = 1.0 / np.sum(w ** 2)
    u = _eval_control_grid(control, ensemble)
    dB0 = _reference_increments(problem, ensemble)
    integrand = 0.5 * np.sum(u ** 2, axis=1) * ensemble.dt - np.sum(u * dB0, axis=1)
    return CeLossResult(value=float(np.sum(w * integrand)), ess=float(ess),
                        low_ess=bool(ess < 10))


def loss_log_variance(control, problem: SocProblem,
                      ensemble: PathEnsemble) -> float:
    """Empirical variance over proposal paths of  F_{u,v} - Phi(X_T)  with

    F = 1/2 int ||u||^2 dt - int u^T dB0 - int c dt.
    Invariant under constant shifts of Phi; >= 0; zero at the optimal control.
    """
    if ensemble.n_paths < 2:
        raise ValueError("variance undefined for a single path")
    u = _eval_control_grid(control, ensemble)
    dB0 = _reference_increments(problem, ensemble)
    F = (0.5 * np.sum(u ** 2, axis=1) * ensemble.dt - np.sum(u * dB0, axis=1)
         - _running_cost_sum(problem, ensemble))
    G = F - _terminal_cost(problem, ensemble)
    return float(np.var(G, ddof=1))


def optimal_log_weights(problem: SocProblem, ensemble: PathEnsemble,
                        proposal=None, value0: Callable = None) -> np.ndarray:
    """log dP*/dP^v per proposal path, up to an additive constant.

    -Phi(X_T) - int c dt - log dP^v/dQ  (+ V0(X0) when value0 is supplied;
    with a point-mass initial law the V0 term is constant and may be omitted).
    """
    dB0 = _reference_increments(problem, ensemble)
    if proposal is None:
        log_v = np.zeros(ensemble.n_paths)
    else:
        v = _eval_control_grid(proposal, ensemble)
        log_v = -0.5 * np.sum(v ** 2, axis=1) * ensemble.dt + np.sum(v * dB0, axis=1)
    out = (-_terminal_cost(problem, ensemble) - _running_cost_sum(problem, ensemble)
           - log_v)
    if value0 is not None:
        out = out + np.asarray(value0(ensemble.states[:, 0]), dtype=float).reshape(-1)
    return out


# ---------------------------------------------------------------------------
# Control fitting
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    control: ParamControl
    loss_trace: list[float] = field(default_factory=list)
    evaluations: int = 0


def fit_control(problem: SocProblem, loss: str, representation: ParamControl,
                budget: int, seed: int, proposal=None, n_paths: int = 4000,
                n_steps: int = 100, log_rnd_weights=None) -> FitResult:
    """Gradient descent (analytic gradients, step halving) over the chosen loss.

    loss in {"lv", "ce", "re"}.  A proposal ensemble is simulated once under
    `proposal` (default: uncontrolled) from the problem's initial law and
    frozen; the loss is then a deterministic function of the parameters.
    Deterministic given seed.  Returns the best-loss iterate with its trace.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if loss not in ("lv", "ce", "re"):
        raise ValueError(f"unknown loss selector {loss!r}")
    spec = problem.sde_spec(control=proposal)
    ensemble = simulate_sde(spec, problem.init_law, n_paths, n_steps, seed)
    dt = ensemble.dt
    dB0 = _reference_increments(problem, ensemble)
    cost_sum = _running_cost_sum(problem, ensemble)
    term = _terminal_cost(problem, ensemble)

    # design matrix: u_flat = W @ theta, rows ordered (path, step)
    n_stp = len(ensemble.grid) - 1
    blocks = [representation.design(ensemble.states[:, k, 0], float(ensemble.grid[k]))
              for k in range(n_stp)]
    W = sp.vstack(blocks).tocsr()  # (n_steps * n_paths, n_params)
    # row r = k * n_paths + p  ->  path p, step k
    dB_flat = dB0.T.ravel()

    if loss == "ce":
        if log_rnd_weights is None:
            log_rnd_weights = optimal_log_weights(problem, ensemble, proposal)
        lw = np.asarray(log_rnd_weights, dtype=float).ravel()
        w_norm = np.exp(lw - logsumexp(lw))

    def loss_and_grad(theta):
        u_flat = W @ theta
        U = u_flat.reshape(n_stp, n_paths).T      # (n_paths, n_steps)
        if loss == "re":
            val = float(np.mean(0.5 * np.sum(U ** 2, axis=1) * dt + cost_sum + term))
            g_flat = (U.T.ravel() * dt) / n_paths
        elif loss == "ce":
            per = 0.5 * np.sum(U ** 2, axis=1) * dt - np.sum(U * dB0, axis=1)
            val = float(np.sum(w_norm * per))
            wrep = np.tile(w_norm, n_stp)
            g_flat = wrep * (u_flat * dt - dB_flat)
        else:  # lv
            F = (0.5 * np.sum(U ** 2, axis=1) * dt - np.sum(U * dB0, axis=1) - cost_sum)
            G = F - term
            val = float(np.var(G, ddof=1))
            centered = np.tile(G - G.mean(), n_stp)
            g_flat = 2.0 / (n_paths - 1) * centered * (u_flat * dt - dB_flat)
        grad = W.T @ g_flat
        return val, grad

    theta = representation.params.ravel().copy()
    val, grad = loss_and_grad(theta)
    evals = 1
    trace = [val]
    best_theta, best_val = theta.copy(), val
    step = 1.0 / max(np.linalg.norm(grad), 1e-12)
    while evals < budget:
        cand = theta - step * grad
        cand_val, cand_grad = loss_and_grad(cand)
        evals += 1
        if not np.isfinite(cand_val):
            raise FloatingPointError(f"loss diverged (trace: {trace[-5:]})")
        if cand_val < val:
            theta, val, grad = cand, cand_val, cand_grad
            trace.append(val)
            if val < best_val:
                best_val, best_theta = val, theta.copy()
            step *= 1.3
        else:
            step *= 0.5
            if step < 1e-14:
                break
    fitted = ParamControl(kind=representation.kind, ts=representation.ts,
                          xs=representation.xs, bin_edges=representation.bin_edges,
                          centers=representation.centers,
                          bandwidth=representation.bandwidth,
                          params=best_theta.reshape(representation.params.shape))
    return FitResult(control=fitted, loss_trace=trace, evaluations=evals)


def value_grid_to_csv(value: ValueGrid, path) -> None:
    """Rows: t, x..., V."""
    import csv as _csv
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh)
        if value.grid.ndim_space == 1:
            writer.writerow(["t", "x", "V"])
            for i, t in enumerate(value.grid.ts):
                for j, x in enumerate(value.grid.xs):
                    writer.writerow([repr(float(t)), repr(float(x)),
                                     repr(float(value.V[i, j]))])
        else:
            ax, ay = value.grid.xs
            writer.writerow(["t", "x", "y", "V"])
            for i, t in enumerate(value.grid.ts):
                for j, x in enumerate(ax):
                    for k, y in enumerate(ay):
                        writer.writerow([repr(float(t)), repr(float(x)),
                                         repr(float(y)), repr(float(value.V[i, j, k]))])
