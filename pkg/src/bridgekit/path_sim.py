"""Controlled SDE path ensembles, bridge mixtures, and path-space RNDs.

Conventions: a controlled SDE evolves as
    X_{k+1} = X_k + (f + sigma * u)(X_k, t_k) dt + sigma_{t_k} sqrt(dt) z_k
(Euler-Maruyama on a uniform grid).  Brownian increments are retained in
the ensemble so Radon-Nikodym derivatives are exact functionals of the
simulated noise.  Path i draws from the Philox stream keyed by (seed, i).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ._rng import named_stream, path_noise, stream
from .entropic_ot import Coupling, GaussianCoupling

__all__ = [
    "SdeSpec",
    "PathEnsemble",
    "InterpolantSpec",
    "EndpointSampler",
    "BrownianBridgeStats",
    "simulate_sde",
    "brownian_bridge_stats",
    "sample_bridge_mixture",
    "interpolant_sample",
    "girsanov_log_rnd",
    "path_kl_estimate",
    "reverse_drift",
    "ensemble_to_bin",
    "ensemble_from_bin",
    "ensemble_to_csv",
    "histogram_to_csv",
]


@dataclass(frozen=True)
class SdeSpec:
    """Reference drift f, optional control u, scalar diffusion sigma_t, horizon T.

    ref_drift=None means f = 0.  Drift/control callables receive a batch of
    states (n, d) and a scalar time and must broadcast accordingly.
    """

    ref_drift: Optional[Callable]
    control: Optional[Callable]
    sigma_of_t: Callable[[float], float]
    T: float

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("horizon must be positive")

    def total_drift(self, x: np.ndarray, t: float) -> np.ndarray:
        sig = float(self.sigma_of_t(t))
        out = np.zeros_like(x)
        if self.ref_drift is not None:
            out = out + np.broadcast_to(np.asarray(self.ref_drift(x, t), dtype=float), x.shape)
        if self.control is not None:
            out = out + sig * np.broadcast_to(np.asarray(self.control(x, t), dtype=float), x.shape)
        return out


@dataclass
class PathEnsemble:
    grid: np.ndarray                 # (n_times,), grid[0]=0, grid[-1]=T
    states: np.ndarray               # (n_paths, n_times, dim)
    brownian_increments: Optional[np.ndarray]  # (n_paths, n_times-1, dim)
    seed: int

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0])


def simulate_sde(spec: SdeSpec, init, n_paths: int, n_steps: int, seed: int) -> PathEnsemble:
    """Euler-Maruyama ensemble; deterministic given seed.

    init: a fixed state vector, an (n_paths, d) array, or a callable
    (rng, n) -> (n, d) sampling the initial law.
    """
    if n_steps < 1 or n_paths < 1:
        raise ValueError("n_steps and n_paths must be >= 1")
    grid = np.linspace(0.0, spec.T, n_steps + 1)
    dt = grid[1] - grid[0]

    if callable(init):
        x0 = np.asarray(init(named_stream(seed, "init"), n_paths), dtype=float)
    else:
        x0 = np.atleast_1d(np.asarray(init, dtype=float))
        if x0.ndim == 1:
            x0 = np.broadcast_to(x0, (n_paths, x0.shape[0])).copy()
    if x0.shape[0] != n_paths:
        raise ValueError("initial states do not match n_paths")
    dim = x0.shape[1]

    z = path_noise(seed, n_paths, n_steps, dim)
    dB = np.sqrt(dt) * z

    states = np.empty((n_paths, n_steps + 1, dim))
    states[:, 0] = x0
    x = x0
    for k in range(n_steps):
        t = grid[k]
        sig = float(spec.sigma_of_t(t))
        x = x + spec.total_drift(x, t) * dt + sig * dB[:, k]
        if not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x))[0]
            raise FloatingPointError(
                f"non-finite state at path {bad[0]}, step {k + 1}")
        states[:, k + 1] = x
    return PathEnsemble(grid=grid, states=states, brownian_increments=dB, seed=seed)


@dataclass(frozen=True)
class BrownianBridgeStats:
    mean: np.ndarray
    var: float
    pinned_drift: Callable
    conditional_score: Callable


def brownian_bridge_stats(x0, xT, t: float, T: float, sigma: float) -> BrownianBridgeStats:
    """Marginal mean/variance and drift/score of the pinned Brownian bridge.

    mean = (1 - t/T) x0 + (t/T) xT,  var = sigma^2 t (T - t) / T;
    pinned_drift(x) = (xT - x)/(T - t);
    conditional_score(x) = (mean - x)/var.
    """
    if not (0 < t < T):
        raise ValueError("t must lie strictly inside (0, T)")
    x0 = np.asarray(x0, dtype=float)
    xT = np.asarray(xT, dtype=float)
    mean = (1 - t / T) * x0 + (t / T) * xT
    var = sigma ** 2 * t * (T - t) / T

    def pinned_drift(x):
        return (xT - np.asarray(x, dtype=float)) / (T - t)

    def conditional_score(x):
        return (mean - np.asarray(x, dtype=float)) / var

    return BrownianBridgeStats(mean=mean, var=var, pinned_drift=pinned_drift,
                               conditional_score=conditional_score)


@dataclass(frozen=True)
class EndpointSampler:
    """Samples endpoint pairs (x0, xT) with the configured joint law."""

    mode: str  # empirical-coupling | gaussian-joint | independent-product
    _draw: Callable

    def draw(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        return self._draw(rng, n)

    @staticmethod
    def from_coupling(source_points, target_points, coupling: Coupling) -> "EndpointSampler":
        sp = np.atleast_2d(np.asarray(source_points, dtype=float))
        tp = np.atleast_2d(np.asarray(target_points, dtype=float))
        w = coupling.weights.ravel()
        w = w / w.sum()
        n_t = coupling.weights.shape[1]

        def _draw(rng, n):
            idx = rng.choice(w.shape[0], size=n, p=w)
            return sp[idx // n_t], tp[idx % n_t]

        return EndpointSampler("empirical-coupling", _draw)

    @staticmethod
    def from_gaussian_joint(joint: GaussianCoupling) -> "EndpointSampler":
        d = joint.mean.shape[0] // 2

        def _draw(rng, n):
            xy = rng.multivariate_normal(joint.mean, joint.cov, size=n,
                                         method="svd")
            return xy[:, :d], xy[:, d:]

        return EndpointSampler("gaussian-joint", _draw)

    @staticmethod
    def independent(draw0: Callable, drawT: Callable) -> "EndpointSampler":
        """draw0/drawT: (rng, n) -> (n, d) samplers of the two marginals."""

        def _draw(rng, n):
            return (np.atleast_2d(np.asarray(draw0(rng, n), dtype=float)),
                    np.atleast_2d(np.asarray(drawT(rng, n), dtype=float)))

        return EndpointSampler("independent-product", _draw)


def sample_bridge_mixture(endpoints: EndpointSampler, t: float, sigma: float,
                          n: int, seed: int, T: float = 1.0) -> np.ndarray:
    """Samples of the time-t marginal of the Brownian bridge mixture.

    Draw (x0, xT) from the coupling, then x_t ~ N(bridge mean, bridge var I).
    """
    if t < 0 or t > T:
        raise ValueError("t outside [0, T]")
    rng = stream(seed, 0)
    x0, xT = endpoints.draw(rng, n)
    mean = (1 - t / T) * x0 + (t / T) * xT
    var = sigma ** 2 * t * (T - t) / T
    noise = stream(seed, 1).standard_normal(mean.shape)
    return mean + np.sqrt(var) * noise


@dataclass(frozen=True)
class InterpolantSpec:
    """x_t = I(x0, xT, t) + gamma(t) z with gamma vanishing at both ends."""

    interpolant: Callable
    gamma: Callable[[float], float]
    T: float = 1.0


def interpolant_sample(spec: InterpolantSpec, x0, xT, t: float, seed: int) -> np.ndarray:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    xT = np.atleast_1d(np.asarray(xT, dtype=float))
    g = float(spec.gamma(t))
    if g < 0:
        raise ValueError(f"gamma({t}) = {g} is negative")
    base = np.asarray(spec.interpolant(x0, xT, t), dtype=float)
    if t == 0 or t == spec.T or g == 0:
        return base
    z = stream(seed, 0).standard_normal(base.shape)
    return base + g * z


def _control_deltas(ensemble: PathEnsemble, u, u_tilde) -> np.ndarray:
    """(u_tilde - u) evaluated at all (state, left grid time), shape of increments."""
    n_steps = ensemble.grid.shape[0] - 1
    delta = np.empty((ensemble.n_paths, n_steps, ensemble.dim))
    for k in range(n_steps):
        xk = ensemble.states[:, k]
        t = float(ensemble.grid[k])
        a = 0.0 if u is None else np.asarray(u(xk, t), dtype=float)
        b = 0.0 if u_tilde is None else np.asarray(u_tilde(xk, t), dtype=float)
        delta[:, k] = np.broadcast_to(b - a, xk.shape)
    return delta


def girsanov_log_rnd(ensemble: PathEnsemble, u, u_tilde,
                     ensemble_control="same-as-u") -> np.ndarray:
    """Per-path log Radon-Nikodym derivative of the u_tilde law w.r.t. the u law.

    -1/2 sum ||d||^2 dt + sum d . dB^u  with d = (u_tilde - u)(X_k, t_k),
    where dB^u are the u-measure Brownian increments of the path.  By default
    the ensemble is assumed simulated under u, so the retained increments are
    used directly.  If the ensemble was simulated under another control, pass
    it as ensemble_control; the increments are then shifted exactly by
    (v - u) dt, still a functional of the simulated noise.
    """
    if ensemble.brownian_increments is None:
        raise ValueError("ensemble lacks retained Brownian increments")
    delta = _control_deltas(ensemble, u, u_tilde)
    dt = ensemble.dt
    dB = ensemble.brownian_increments
    if ensemble_control != "same-as-u":
        dB = dB + _control_deltas(ensemble, u, ensemble_control) * dt
    quad = 0.5 * np.sum(delta ** 2, axis=(1, 2)) * dt
    mart = np.sum(delta * dB, axis=(1, 2))
    return -quad + mart


def path_kl_estimate(ensemble: PathEnsemble, u, u_tilde) -> float:
    """Monte-Carlo path KL  E[1/2 int ||u_tilde - u||^2 dt]  (ensemble under u_tilde)."""
    delta = _control_deltas(ensemble, u, u_tilde)
    return float(np.mean(0.5 * np.sum(delta ** 2, axis=(1, 2)) * ensemble.dt))


def reverse_drift(forward_drift, score, sigma_of_t, T: float):
    """Time-reversal: (x, s) -> -f(x, T-s) + sigma_{T-s}^2 score(x, T-s)."""

    def rev(x, s):
        t = T - s
        sig = float(sigma_of_t(t))
        f = 0.0 if forward_drift is None else np.asarray(forward_drift(x, t), dtype=float)
        return -f + sig ** 2 * np.asarray(score(x, t), dtype=float)

    return rev


# ---------------------------------------------------------------------------
# External interfaces
# ---------------------------------------------------------------------------

_BIN_MAGIC = b"BKEN"


def ensemble_to_bin(ensemble: PathEnsemble, path) -> None:
    """Header: n_paths, n_times, dim, seed (int64); then row-major states."""
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(struct.pack("<qqqq", ensemble.n_paths, ensemble.grid.shape[0],
                             ensemble.dim, ensemble.seed))
        fh.write(np.ascontiguousarray(ensemble.grid, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ensemble.states, dtype="<f8").tobytes())


def ensemble_from_bin(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        if fh.read(4) != _BIN_MAGIC:
            raise ValueError("not an ensemble file")
        n_paths, n_times, dim, seed = struct.unpack("<qqqq", fh.read(32))
        grid = np.frombuffer(fh.read(8 * n_times), dtype="<f8").copy()
        states = np.frombuffer(fh.read(8 * n_paths * n_times * dim),
                               dtype="<f8").reshape(n_paths, n_times, dim).copy()
    return PathEnsemble(grid=grid, states=states, brownian_increments=None, seed=seed)


def ensemble_to_csv(ensemble: PathEnsemble, path) -> None:
    """Small-run export: one row per (path, time) with the state coordinates."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "t"] + [f"x_{i}" for i in range(ensemble.dim)])
        for p in range(ensemble.n_paths):
            for k, t in enumerate(ensemble.grid):
                writer.writerow([p, repr(float(t))]
                                + [repr(float(v)) for v in ensemble.states[p, k]])


def histogram_to_csv(samples, n_bins: int, path, lo=None, hi=None) -> None:
    """1-D marginal histogram rows: bin_left, bin_right, density."""
    x = np.asarray(samples, dtype=float).ravel()
    lo = x.min() if lo is None else lo
    hi = x.max() if hi is None else hi
    density, edges = np.histogram(x, bins=n_bins, range=(lo, hi), density=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "density"])
        for i in range(n_bins):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])),
                             repr(float(density[i]))])
