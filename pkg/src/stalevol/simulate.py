"""Synthetic high-frequency panels with stochastic price staleness.

Generates the full Monte Carlo world used throughout: mean-reverting
covariate and staleness-factor paths, staleness probabilities through a
link function, Bernoulli staleness indicators, efficient log prices with
a low-rank systematic volatility structure plus banded idiosyncratic
correlation, and the stale observed prices.  Ground truth is retained for
evaluation.

Two clocks coexist.  Prices live on the mesh ``delta`` (so the horizon is
``T = n * delta``), while the covariate/factor drivers advance by
``stale_delta`` units of their own time per observation step.  The latter
defaults to 1.0, which keeps the staleness factors moving at stationarity
across the sample regardless of the price mesh.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .links import LinkKind, link_eval

__all__ = [
    "PathRole",
    "SimConfig",
    "Panel",
    "SimTruth",
    "substream",
    "ou_exact_path",
    "ou_params",
    "sqrt_vol_params",
    "simulate_ou_panel",
    "simulate_sqrt_vol",
    "simulate_staleness",
    "staleness_panel",
    "build_banded_correlation",
    "simulate_prices",
    "apply_staleness",
    "simulate_panel",
    "staleness_bias_factor",
]


class PathRole(str, Enum):
    COVARIATE = "covariate"
    STALENESS_FACTOR = "staleness_factor"


# Stable ids for counter-based substreams; one independent stream per
# stochastic ingredient so replications parallelize reproducibly.
_PATH_IDS = {
    "covariates": 0,
    "factors": 1,
    "loadings": 2,
    "bernoulli": 3,
    "sys_vol": 4,
    "idio_vol": 5,
    "price_bm": 6,
    "idio_bm": 7,
    "rho": 8,
}


def substream(seed, replication, path):
    """Independent generator for one (seed, replication, path) triple."""
    if path not in _PATH_IDS:
        raise ValueError(f"unknown path id {path!r}")
    ss = np.random.SeedSequence(entropy=seed,
                                spawn_key=(replication, _PATH_IDS[path]))
    return np.random.default_rng(ss)


@dataclass
class SimConfig:
    """Configuration of one simulated world.

    ``delta`` is the price mesh (T = n * delta); ``stale_delta`` is the
    time advanced per observation step by the covariate and staleness
    factor processes.
    """

    d: int = 100
    n: int = 1170
    delta: float = 1.0 / 390.0
    r_x: int = 1
    r_g: int = 3
    r: int = 3
    kind: LinkKind = LinkKind.LOGIT
    seed: int = 20240601
    replications: int = 20
    stale_delta: float = 1.0
    rho: float | None = None
    rho_mode: str = "shared"

    def __post_init__(self):
        self.kind = LinkKind.parse(self.kind)
        if self.d < 2:
            raise ValueError(f"d must be >= 2, got {self.d}")
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        if self.r_x < 1:
            raise ValueError(f"r_x must be >= 1, got {self.r_x}")
        if self.r_g < 1:
            raise ValueError(f"r_g must be >= 1, got {self.r_g}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not self.stale_delta > 0:
            raise ValueError(f"stale_delta must be > 0, got {self.stale_delta}")
        if self.rho_mode not in ("shared", "per_pair"):
            raise ValueError(f"rho_mode must be 'shared' or 'per_pair', got {self.rho_mode!r}")

    @property
    def horizon(self) -> float:
        return self.n * self.delta

    @property
    def grid(self) -> np.ndarray:
        return np.arange(self.n + 1) * self.delta


@dataclass
class Panel:
    """Observed data handed to the estimators.

    ``Y_eff`` is carried only by simulated panels; real data has None.
    """

    B: np.ndarray            # (n+1, d) binary staleness indicators
    X: np.ndarray            # (n+1, d, r_x) covariates
    Y_obs: np.ndarray        # (n+1, d) observed log prices
    grid: np.ndarray         # (n+1,) time stamps j * delta
    delta: float
    Y_eff: np.ndarray | None = None

    def __post_init__(self):
        n1, d = self.B.shape
        if self.X.shape[:2] != (n1, d):
            raise ValueError("X must have shape (n+1, d, r_x) matching B")
        if self.Y_obs.shape != (n1, d):
            raise ValueError("Y_obs must have the same shape as B")

    @property
    def n(self) -> int:
        return self.B.shape[0] - 1

    @property
    def d(self) -> int:
        return self.B.shape[1]

    @property
    def r_x(self) -> int:
        return self.X.shape[2]


@dataclass
class SimTruth:
    """Ground truth kept by the simulator for evaluation."""

    x_path: np.ndarray       # (n+1, d, r_x)
    g_path: np.ndarray       # (n+1, r_g)
    z_path: np.ndarray       # (n+1, d)
    p_path: np.ndarray       # (n+1, d)
    A: np.ndarray            # (d, r_x)
    Gamma: np.ndarray        # (d, r_g)
    sigma_sys: np.ndarray    # (n+1, d, r)
    sigma_idio: np.ndarray   # (n+1, d)
    rho_star: np.ndarray     # (d, d)
    Sigma_c: np.ndarray      # (d, d) integrated systematic
    Sigma_e: np.ndarray      # (d, d) integrated idiosyncratic
    rho: float | np.ndarray = field(default=0.0)

    def spot_matrices(self, j):
        """True spot (V_c, V_e) at grid index ``j``."""
        sig = self.sigma_sys[j]
        V_c = sig @ sig.T
        s = self.sigma_idio[j]
        V_e = np.outer(s, s) * self.rho_star
        return V_c, V_e

    def biased_targets(self, j=None):
        """Hadamard staleness-bias matrix at index j (or the time average).

        Off-diagonal entry (i, m) is phi(p_i, p_m); diagonals are 1.
        """
        if j is None:
            p = self.p_path
            d = p.shape[1]
            out = np.zeros((d, d))
            for t in range(p.shape[0]):
                out += staleness_bias_factor(p[t], p[t])
            return out / p.shape[0]
        return staleness_bias_factor(self.p_path[j], self.p_path[j])


def staleness_bias_factor(p_i, p_m):
    """Matrix of phi(p_i, p_m) = (1-p_i)(1-p_m)/(1-p_i p_m), 1 on diagonal.

    This is the factor by which staleness shrinks co-volatilities; the
    diagonal is exempt because realized variances are not biased.
    """
    p_i = np.atleast_1d(np.asarray(p_i, dtype=float))
    p_m = np.atleast_1d(np.asarray(p_m, dtype=float))
    num = np.outer(1.0 - p_i, 1.0 - p_m)
    den = 1.0 - np.outer(p_i, p_m)
    out = num / den
    if out.shape[0] == out.shape[1]:
        np.fill_diagonal(out, 1.0)
    return out


def ou_params(role, r_x, r_g):
    """Mean-reversion parameter vectors for the covariate/factor processes.

    Entries follow the published table: for covariates the l-th entries are
    kappa = 1 + l/(10 r_x), mu = -0.01 + l/(2 r_x), sigma = 0.5 + l/(10 r_g);
    for staleness factors kappa = 0.5 + 2l/r_g, mu = -0.03 + l/(2 r_g),
    sigma = 1 + l/(5 r_g).
    """
    role = PathRole(role)
    if role is PathRole.COVARIATE:
        l = np.arange(1, r_x + 1, dtype=float)
        kappa = 1.0 + l / (10.0 * r_x)
        mu = -0.01 + l / (2.0 * r_x)
        sigma = 0.5 + l / (10.0 * r_g)
    else:
        l = np.arange(1, r_g + 1, dtype=float)
        kappa = 0.5 + 2.0 * l / r_g
        mu = -0.03 + l / (2.0 * r_g)
        sigma = 1.0 + l / (5.0 * r_g)
    return kappa, mu, sigma


def ou_exact_path(kappa, mu, sigma, delta, n, rng, shape=()):
    """Sample an OU path by its exact transition law.

    x_{t+delta} = mu + (x_t - mu) e^{-kappa delta}
                  + sigma sqrt((1 - e^{-2 kappa delta}) / (2 kappa)) xi,
    with x_0 drawn from the stationary law N(mu, sigma^2 / (2 kappa)).
    ``shape`` prepends extra independent cross-sectional axes; parameter
    arrays broadcast against it.  Returns (n+1, *shape_b) with shape_b the
    broadcast of ``shape`` and the parameter shapes.
    """
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa <= 0.0):
        raise ValueError("kappa must be positive")
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    base = np.broadcast_shapes(shape, kappa.shape, mu.shape, sigma.shape)

    decay = np.exp(-kappa * delta)
    step_sd = sigma * np.sqrt((1.0 - np.exp(-2.0 * kappa * delta)) / (2.0 * kappa))
    stat_sd = sigma / np.sqrt(2.0 * kappa)

    out = np.empty((n + 1,) + base)
    out[0] = mu + stat_sd * rng.standard_normal(base)
    shocks = rng.standard_normal((n,) + base)
    for j in range(1, n + 1):
        out[j] = mu + (out[j - 1] - mu) * decay + step_sd * shocks[j - 1]
    return out


def simulate_ou_panel(config: SimConfig, role, rng):
    """Covariate panel (n+1, d, r_x) or factor path (n+1, r_g) via exact OU."""
    role = PathRole(role)
    kappa, mu, sigma = ou_params(role, config.r_x, config.r_g)
    if role is PathRole.COVARIATE:
        return ou_exact_path(kappa, mu, sigma, config.stale_delta, config.n,
                             rng, shape=(config.d, config.r_x))
    return ou_exact_path(kappa, mu, sigma, config.stale_delta, config.n,
                         rng, shape=(config.r_g,))


def sqrt_vol_params(d, r):
    """Square-root-process coefficient tables for the price volatilities.

    Returns (a, c, s0, v0) for the systematic part, each (r, d), plus
    (a_star, c_star, s0_star, v0_star) for the idiosyncratic part, each
    (d,).  The published table covers three systematic factors; indices
    beyond the third reuse the third row's template.
    """
    i = np.arange(1, d + 1, dtype=float)
    a_rows = [0.5 + i / d, 0.75 + i / d, 0.6 + i / d]
    c_rows = [0.03 + i / (100.0 * d), 0.05 + i / (100.0 * d), 0.08 + i / (100.0 * d)]
    s0_rows = [0.15 + i / (10.0 * d), 0.2 + i / (10.0 * d), 0.2 + i / (10.0 * d)]
    v0_vals = [0.04, 0.04, 0.03]
    a = np.stack([a_rows[min(l, 2)] for l in range(r)])
    c = np.stack([c_rows[min(l, 2)] for l in range(r)])
    s0 = np.stack([s0_rows[min(l, 2)] for l in range(r)])
    v0 = np.array([v0_vals[min(l, 2)] for l in range(r)])[:, None] * np.ones((r, d))

    a_star = 0.25 + i / d
    c_star = 0.08 + i / (100.0 * d)
    s0_star = 0.2 + i / (10.0 * d)
    v0_star = np.full(d, 0.03)
    return (a, c, s0, v0), (a_star, c_star, s0_star, v0_star)


def _cir_full_truncation(a, c, s0, v0, delta, n, rng):
    """Full-truncation Euler on the variance; returns sqrt(max(v, 0))."""
    v = np.empty((n + 1,) + v0.shape)
    v[0] = v0
    shocks = rng.standard_normal((n,) + v0.shape)
    sq_delta = np.sqrt(delta)
    for j in range(1, n + 1):
        vp = np.maximum(v[j - 1], 0.0)
        v[j] = v[j - 1] + c * (a - vp) * delta + s0 * np.sqrt(vp) * sq_delta * shocks[j - 1]
    return np.sqrt(np.maximum(v, 0.0))


def simulate_sqrt_vol(config: SimConfig, rng):
    """Spot volatility paths: systematic (n+1, d, r) and idiosyncratic (n+1, d)."""
    (a, c, s0, v0), (a_s, c_s, s0_s, v0_s) = sqrt_vol_params(config.d, config.r)
    sys = _cir_full_truncation(a, c, s0, v0, config.delta, config.n, rng)
    idio = _cir_full_truncation(a_s, c_s, s0_s, v0_s, config.delta, config.n, rng)
    # (n+1, r, d) -> (n+1, d, r)
    return np.swapaxes(sys, 1, 2), idio


def staleness_panel(x_path, g_path, A, Gamma, kind, rng):
    """Index, probability and indicator panels from given loadings.

    z[j, i] = A[i] . x[j, i] + Gamma[i] . g[j]; p = link(z);
    B[j, i] = 1 iff an independent uniform draw falls below p[j, i].
    """
    z = np.einsum("jik,ik->ji", x_path, A) + g_path @ Gamma.T
    p = link_eval(kind, z)
    u = rng.uniform(size=z.shape)
    B = (u <= p).astype(np.int8)
    return z, p, B


def simulate_staleness(config: SimConfig, x_path, g_path, rng):
    """Draw loadings (A ~ U(0,6), Gamma ~ N(0,1)) and the indicator panel."""
    A = rng.uniform(0.0, 6.0, size=(config.d, config.r_x))
    Gamma = rng.standard_normal((config.d, config.r_g))
    z, p, B = staleness_panel(x_path, g_path, A, Gamma, config.kind, rng)
    return A, Gamma, z, p, B


def build_banded_correlation(d, rng, rho=None, mode="shared"):
    """Banded idiosyncratic correlation: rho^|i-m| inside the band |i-m|<=5.

    ``rho`` is drawn once from U(0, 0.4) when not supplied.  ``per_pair``
    draws an independent symmetric rho for every pair instead of one
    shared value.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    offset = np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
    band = (offset <= 5).astype(float)
    if mode == "shared":
        if rho is None:
            rho = float(rng.uniform(0.0, 0.4))
        mat = (rho ** offset) * band
    elif mode == "per_pair":
        draws = rng.uniform(0.0, 0.4, size=(d, d))
        draws = np.triu(draws, 1)
        draws = draws + draws.T
        mat = np.where(offset > 0, draws ** offset, 1.0) * band
        rho = draws
    else:
        raise ValueError(f"unknown rho mode {mode!r}")
    np.fill_diagonal(mat, 1.0)
    return mat, rho


def simulate_prices(config: SimConfig, sigma_sys, sigma_idio, rho_star, rng):
    """Efficient prices by Euler increments plus the true integrated matrices.

    dY uses the left-endpoint volatilities, zero drift, systematic shocks
    ~ N(0, delta I_r) and idiosyncratic shocks ~ N(0, delta rho_star).
    Returns (Y_eff, Sigma_c, Sigma_e).
    """
    d, n, delta = config.d, config.n, config.delta
    eig_min = np.linalg.eigvalsh(rho_star)[0]
    if eig_min < -1e-10:
        raise ValueError("rho_star is not positive semidefinite")
    try:
        chol = np.linalg.cholesky(rho_star)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(rho_star)
        chol = v * np.sqrt(np.maximum(w, 0.0))

    sq_delta = np.sqrt(delta)
    dW = sq_delta * rng.standard_normal((n, config.r))
    dW_star = sq_delta * rng.standard_normal((n, d)) @ chol.T

    incr = np.einsum("jil,jl->ji", sigma_sys[:-1], dW) + sigma_idio[:-1] * dW_star
    Y = np.zeros((n + 1, d))
    np.cumsum(incr, axis=0, out=Y[1:])

    sig = sigma_sys[:-1]
    Sigma_c = delta * np.einsum("jil,jml->im", sig, sig)
    s = sigma_idio[:-1]
    Sigma_e = delta * (s.T @ s) * rho_star
    return Y, Sigma_c, Sigma_e


def apply_staleness(Y_eff, B):
    """Stale observed prices: carry the last value forward wherever B = 1.

    Row 0 is copied from the efficient path.
    """
    Y_eff = np.asarray(Y_eff, dtype=float)
    B = np.asarray(B)
    if Y_eff.shape != B.shape:
        raise ValueError("Y_eff and B must have the same shape")
    if not np.isin(B, (0, 1)).all():
        raise ValueError("B must be binary")
    out = np.empty_like(Y_eff)
    out[0] = Y_eff[0]
    for j in range(1, Y_eff.shape[0]):
        out[j] = np.where(B[j] == 1, out[j - 1], Y_eff[j])
    return out


def simulate_panel(config: SimConfig, replication=0):
    """One full replication of the simulated world.

    Returns (Panel, SimTruth).  Identical (config, replication) pairs give
    bitwise-identical output.
    """
    rng_x = substream(config.seed, replication, "covariates")
    rng_g = substream(config.seed, replication, "factors")
    rng_load = substream(config.seed, replication, "loadings")
    rng_b = substream(config.seed, replication, "bernoulli")
    rng_sv = substream(config.seed, replication, "sys_vol")
    rng_iv = substream(config.seed, replication, "idio_vol")
    rng_pb = substream(config.seed, replication, "price_bm")
    rng_rho = substream(config.seed, replication, "rho")

    x_path = simulate_ou_panel(config, PathRole.COVARIATE, rng_x)
    g_path = simulate_ou_panel(config, PathRole.STALENESS_FACTOR, rng_g)
    A = rng_load.uniform(0.0, 6.0, size=(config.d, config.r_x))
    Gamma = rng_load.standard_normal((config.d, config.r_g))
    z, p, B = staleness_panel(x_path, g_path, A, Gamma, config.kind, rng_b)

    sigma_sys, sigma_idio = simulate_sqrt_vol_pair(config, rng_sv, rng_iv)
    rho_star, rho = build_banded_correlation(config.d, rng_rho,
                                             rho=config.rho, mode=config.rho_mode)
    Y_eff, Sigma_c, Sigma_e = simulate_prices(config, sigma_sys, sigma_idio,
                                              rho_star, rng_pb)
    Y_obs = apply_staleness(Y_eff, B)

    panel = Panel(B=B, X=x_path, Y_obs=Y_obs, grid=config.grid,
                  delta=config.delta, Y_eff=Y_eff)
    truth = SimTruth(x_path=x_path, g_path=g_path, z_path=z, p_path=p,
                     A=A, Gamma=Gamma, sigma_sys=sigma_sys,
                     sigma_idio=sigma_idio, rho_star=rho_star,
                     Sigma_c=Sigma_c, Sigma_e=Sigma_e, rho=rho)
    return panel, truth


def simulate_sqrt_vol_pair(config: SimConfig, rng_sys, rng_idio):
    """Volatility paths with separate streams for the two stochastic parts."""
    (a, c, s0, v0), (a_s, c_s, s0_s, v0_s) = sqrt_vol_params(config.d, config.r)
    sys = _cir_full_truncation(a, c, s0, v0, config.delta, config.n, rng_sys)
    idio = _cir_full_truncation(a_s, c_s, s0_s, v0_s, config.delta, config.n, rng_idio)
    return np.swapaxes(sys, 1, 2), idio
