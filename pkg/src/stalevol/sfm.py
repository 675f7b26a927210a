"""Maximum likelihood estimation of the staleness factor model.

The model drives each asset's staleness probability through a monotone
link of a single index: per-asset covariate coefficients plus loadings on
a small number of latent factor paths whose increments are treated as
parameters.  Estimation alternates exact per-asset Newton solves with
exact per-time factor solves (block-coordinate ascent on the binary-panel
log likelihood), then rotates the factors into the identifying
normalization.

The per-time update defaults to the factor *levels*, under which the
likelihood separates across time points and a sweep costs O(n d).  A
literal sweep over factor *increments* (each update maximizing the tail
sum of the likelihood) is available via ``factor_update='increments'``;
it reaches the same stationary points at O(n^2 d) per sweep and exists
mainly for cross-checking.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .links import (LinkKind, P_CEIL, P_FLOOR, clip_probability, link_curvature,
                    link_deriv, link_eval, link_inverse, link_log_eval,
                    link_score)
from .simulate import Panel

__all__ = [
    "NumericalWarning",
    "FitOptions",
    "SfmFit",
    "SfmVariance",
    "log_likelihood",
    "initialize",
    "fit",
    "normalize_factors",
    "select_r_g",
    "select_r_from_eigenvalues",
    "variance_p",
    "integrated_functional",
    "best_rotation_distance",
]

_LOG_TINY = np.log(1e-300)


class NumericalWarning(UserWarning):
    """Raised when a numerically degenerate input forced a fallback."""


@dataclass
class FitOptions:
    epsilon: float = 1e-3          # sweep-to-sweep tolerance on parameter change
    max_sweeps: int = 200
    newton_tol: float = 1e-8
    newton_max_iter: int = 50
    z_cap: float = 15.0            # separation guard on the fitted index
    factor_update: str = "levels"  # or "increments"
    grad_tol_scale: float = 1e-6   # stationarity: max block gradient <= scale*d*(n+1)
    kbar: int | None = None        # initializer window, default ceil(sqrt(n))

    def __post_init__(self):
        if self.factor_update not in ("levels", "increments"):
            raise ValueError("factor_update must be 'levels' or 'increments'")


@dataclass
class SfmFit:
    A_hat: np.ndarray             # (d, r_x)
    Gamma_hat: np.ndarray         # (d, r_g)
    G_hat: np.ndarray             # (n+1, r_g) factor levels
    DeltaG_hat: np.ndarray        # (n+1, r_g), row 0 = g_0
    p_hat: np.ndarray             # (n+1, d)
    z_hat: np.ndarray             # (n+1, d)
    loglik_trace: np.ndarray      # per-sweep log likelihood
    iterations: int
    converged: bool
    kind: LinkKind
    flags: list = field(default_factory=list)

    @property
    def r_g(self) -> int:
        return self.Gamma_hat.shape[1]


@dataclass
class SfmVariance:
    Omega_u_i: np.ndarray         # (d, r_x+r_g, r_x+r_g)
    Omega_gamma_j: np.ndarray     # (n+1, r_g, r_g)
    Omega_p: np.ndarray           # (n+1, d) feasible variances of p_hat
    omega2: float                 # min(n, d)


def _theta_design(panel: Panel, G):
    """Per-asset stacked design u_it = (x_it', g_t')', shape (d, n+1, q)."""
    n1, d, r_x = panel.X.shape
    r_g = G.shape[1]
    U = np.empty((d, n1, r_x + r_g))
    U[:, :, :r_x] = np.moveaxis(panel.X, 1, 0)
    if r_g:
        U[:, :, r_x:] = G[None, :, :]
    return U


def _loglik_terms(kind, z, B):
    """Stable log Psi((2B-1) z); clamps at log(1e-300) with a warning."""
    sign = 2.0 * B - 1.0
    lp = link_log_eval(kind, sign * z)
    if np.any(lp < _LOG_TINY):
        warnings.warn("log-likelihood terms clamped at 1e-300; "
                      "fit is ill-conditioned", NumericalWarning)
        lp = np.maximum(lp, _LOG_TINY)
    return lp


def log_likelihood(A, Gamma, DeltaG, panel: Panel, kind) -> float:
    """Binary-panel log likelihood at the given parameters.

    The index is a_i'x_it plus the loadings applied to the running sum of
    the factor increments (row 0 of ``DeltaG`` is the time-0 level).
    """
    kind = LinkKind.parse(kind)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
    DeltaG = np.atleast_2d(np.asarray(DeltaG, dtype=float))
    G = np.cumsum(DeltaG, axis=0)
    z = np.einsum("jik,ik->ji", panel.X, A) + G @ Gamma.T
    return float(_loglik_terms(kind, z, panel.B).sum())


def initialize(panel: Panel, kind, r_g, kbar=None):
    """Rough starting values from local block averages of the indicators.

    Forward block means of B (window ``kbar``, shortened at the right
    edge) estimate the staleness probabilities; the inverse link maps them
    to rough index values.  The covariates receive the same smoothing so
    the per-asset regressions are not attenuated when the probabilities
    move within a window.  PCA on increments of the regression residual
    supplies factor loadings and increments.
    """
    n1 = panel.B.shape[0]
    if kbar is None:
        kbar = int(np.ceil(np.sqrt(max(n1 - 1, 1))))
    kbar = max(int(kbar), 2)
    p_tilde = _forward_block_mean(panel.B.astype(float), kbar)
    x_smooth = _forward_block_mean(panel.X, kbar)
    return _init_from_probs(p_tilde, x_smooth, kind, r_g)


def _forward_block_mean(arr, kbar):
    """Mean of arr[j:j+kbar] along axis 0, window truncated at the edge."""
    n1 = arr.shape[0]
    cs = np.concatenate([np.zeros((1,) + arr.shape[1:]), np.cumsum(arr, axis=0)])
    hi = np.minimum(np.arange(n1) + kbar, n1)
    lo = np.arange(n1)
    counts = (hi - lo).astype(float).reshape((-1,) + (1,) * (arr.ndim - 1))
    return (cs[hi] - cs[lo]) / counts


def _init_from_probs(p_tilde, x, kind, r_g):
    """Initializer core: invert probabilities, regress on x, PCA the rest."""
    kind = LinkKind.parse(kind)
    n1, d = p_tilde.shape
    r_x = x.shape[2]
    z_tilde = link_inverse(kind, clip_probability(p_tilde))

    A0 = np.empty((d, r_x))
    for i in range(d):
        xi = x[:, i, :]
        gram = xi.T @ xi
        try:
            A0[i] = np.linalg.solve(gram, xi.T @ z_tilde[:, i])
        except np.linalg.LinAlgError:
            warnings.warn(f"rank-deficient covariates for asset {i}; "
                          "ridge fallback", NumericalWarning)
            A0[i] = np.linalg.solve(gram + 1e-8 * np.eye(r_x),
                                    xi.T @ z_tilde[:, i])

    if r_g == 0:
        return A0, np.zeros((d, 0)), np.zeros((n1, 0))

    resid = z_tilde - np.einsum("jik,ik->ji", x, A0)
    d_resid = np.empty_like(resid)
    d_resid[0] = resid[0]
    d_resid[1:] = np.diff(resid, axis=0)
    gram = d_resid.T @ d_resid
    vals, vecs = np.linalg.eigh(gram)
    top = vecs[:, ::-1][:, :r_g]
    Gamma0 = np.sqrt(d) * top
    DeltaG0 = d_resid @ Gamma0 / d
    return A0, Gamma0, DeltaG0


def _stable_terms(kind, z, B):
    return link_log_eval(kind, (2.0 * B - 1.0) * z)


def _batched_solve(H, g):
    q = H.shape[-1]
    jitter = 1e-12 * np.trace(H, axis1=-2, axis2=-1) / q + 1e-300
    Hj = H + jitter[..., None, None] * np.eye(q)
    try:
        return np.linalg.solve(Hj, g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        Hj = H + (1e-8 * np.trace(H, axis1=-2, axis2=-1) / q + 1e-12)[..., None, None] * np.eye(q)
        return np.linalg.solve(Hj, g[..., None])[..., 0]


def _newton_blocks(z_fn, B, kind, design, theta, tol, max_iter, z_cap):
    """Damped Newton on a stack of independent blocks.

    ``design`` has shape (m, N, q); block b maximizes the likelihood of
    its slice over theta[b] (shape (m, q)).  z_fn(theta) -> (m, N).
    Step-halving enforces ascent and keeps max |z| per block from rising
    beyond ``z_cap``.  Returns (theta, capped_mask).
    """
    m = theta.shape[0]
    capped = np.zeros(m, dtype=bool)
    z = z_fn(theta)
    ll = _stable_terms(kind, z, B).sum(axis=1)
    zmax = np.abs(z).max(axis=1)
    for _ in range(max_iter):
        s = link_score(kind, z, B)
        c = link_curvature(kind, z, B)
        grad = np.einsum("mn,mnq->mq", s, design)
        H = np.einsum("mn,mnq,mnr->mqr", -c, design, design)
        step = _batched_solve(H, grad)
        if np.max(np.abs(step)) < tol:
            break
        t = np.ones(m)
        accepted = np.zeros(m, dtype=bool)
        cand = theta.copy()
        for _ in range(40):
            trial = theta + t[:, None] * step
            z_t = z_fn(trial)
            ll_t = _stable_terms(kind, z_t, B).sum(axis=1)
            zmax_t = np.abs(z_t).max(axis=1)
            ok = (~accepted) & (ll_t >= ll) & (zmax_t <= np.maximum(z_cap, zmax))
            cand[ok] = trial[ok]
            accepted |= ok
            if accepted.all():
                break
            t = np.where(accepted, t, t / 2.0)
        moved = np.abs(cand - theta).max(axis=1)
        theta = cand
        z = z_fn(theta)
        ll = _stable_terms(kind, z, B).sum(axis=1)
        zmax = np.abs(z).max(axis=1)
        if moved.max() < tol:
            break
    capped = zmax >= z_cap - 1e-6
    return theta, capped


def _update_assets(panel, kind, theta, G, opts):
    """Exact per-asset Newton solves given the factor path."""
    U = _theta_design(panel, G)
    B_T = panel.B.T.astype(float)

    def z_fn(th):
        return np.einsum("inq,iq->in", U, th)

    theta, capped = _newton_blocks(z_fn, B_T, kind, U, theta,
                                   opts.newton_tol, opts.newton_max_iter, opts.z_cap)
    return theta, capped


def _update_levels(panel, kind, A, Gamma, G, opts):
    """Exact per-time Newton solves for the factor levels given loadings.

    The likelihood separates across time points given the loadings, so
    every level is an independent r_g-dimensional block sharing Gamma as
    its design.
    """
    base = np.einsum("jik,ik->ji", panel.X, A)
    B = panel.B.astype(float)
    n1 = G.shape[0]

    def z_fn(g):
        return base + g @ Gamma.T

    design = np.broadcast_to(Gamma, (n1,) + Gamma.shape)
    G, _ = _newton_blocks(z_fn, B, kind, design, G.copy(),
                          opts.newton_tol, opts.newton_max_iter, opts.z_cap)
    return G


def _interior_gradient_max(panel, kind, A, Gamma, G, z_cap):
    """Largest gradient norm over blocks not pinned at the separation cap.

    Blocks whose fitted index touches the cap sit at a boundary stationary
    point of the capped problem; their raw gradient does not vanish and is
    excluded (they are flagged separately by the fit).
    """
    z = np.einsum("jik,ik->ji", panel.X, A) + G @ Gamma.T
    s = link_score(kind, z, panel.B.astype(float))
    at_cap = np.abs(z) >= z_cap - 1e-6
    asset_free = ~at_cap.any(axis=0)
    time_free = ~at_cap.any(axis=1)
    U = _theta_design(panel, G)
    g_theta = np.einsum("ji,ijq->iq", s, U)
    asset_norms = np.sqrt((g_theta ** 2).sum(axis=1))
    worst = asset_norms[asset_free].max() if asset_free.any() else 0.0
    if Gamma.shape[1]:
        g_time = s @ Gamma
        time_norms = np.sqrt((g_time ** 2).sum(axis=1))
        if time_free.any():
            worst = max(worst, time_norms[time_free].max())
    return worst


def _update_increments(panel, kind, A, Gamma, G, opts):
    """Literal factor-increment sweep: each Delta g_j maximizes the tail sum.

    O(n^2 d) per sweep; intended for cross-checks on small panels.
    """
    base = np.einsum("jik,ik->ji", panel.X, A)
    B = panel.B.astype(float)
    n1, r_g = G.shape
    DeltaG = np.empty_like(G)
    DeltaG[0] = G[0]
    DeltaG[1:] = np.diff(G, axis=0)
    z = base + G @ Gamma.T
    for j in range(n1):
        for _ in range(opts.newton_max_iter):
            zj = z[j:]
            Bj = B[j:]
            s = link_score(kind, zj, Bj)
            c = link_curvature(kind, zj, Bj)
            grad = Gamma.T @ s.sum(axis=0)
            H = Gamma.T @ (Gamma * -c.sum(axis=0)[:, None])
            step = _batched_solve(H[None], grad[None])[0]
            if np.max(np.abs(step)) < opts.newton_tol:
                break
            ll = _stable_terms(kind, zj, Bj).sum()
            zmax = np.abs(zj).max()
            t = 1.0
            moved = False
            for _ in range(40):
                shift = (Gamma @ (t * step))[None, :]
                z_t = zj + shift
                ll_t = _stable_terms(kind, z_t, Bj).sum()
                if ll_t >= ll and np.abs(z_t).max() <= max(opts.z_cap, zmax):
                    DeltaG[j] = DeltaG[j] + t * step
                    z[j:] = z_t
                    moved = True
                    break
                t /= 2.0
            if not moved:
                break
    return np.cumsum(DeltaG, axis=0)


def fit(panel: Panel, kind="logit", r_g=3, options: FitOptions | None = None,
        init=None) -> SfmFit:
    """Alternating block-coordinate MLE of the staleness factor model.

    ``r_g = 0`` degenerates to independent per-asset binary regressions.
    ``init`` optionally supplies (A0, Gamma0, DeltaG0) and skips the
    built-in initializer.
    """
    kind = LinkKind.parse(kind)
    opts = options or FitOptions()
    n1, d = panel.B.shape
    n = n1 - 1
    r_x = panel.X.shape[2]

    if init is None:
        A0, Gamma0, DeltaG0 = initialize(panel, kind, r_g, opts.kbar)
    else:
        A0, Gamma0, DeltaG0 = (np.array(a, dtype=float) for a in init)
    theta = np.concatenate([A0, Gamma0], axis=1)
    G = np.cumsum(DeltaG0, axis=0) if r_g else np.zeros((n1, 0))

    flags = []
    trace = []
    grad_tol = opts.grad_tol_scale * d * n1
    converged = False
    sweeps = 0
    plateau = 0
    prod_prev = G @ theta[:, r_x:].T if r_g else np.zeros((n1, d))
    a_prev = theta[:, :r_x].copy()

    for sweeps in range(1, opts.max_sweeps + 1):
        theta, capped = _update_assets(panel, kind, theta, G, opts)
        if capped.any() and "separation" not in flags:
            flags.append("separation")
        A = theta[:, :r_x]
        Gamma = theta[:, r_x:]
        if r_g:
            if opts.factor_update == "levels":
                G = _update_levels(panel, kind, A, Gamma, G, opts)
            else:
                G = _update_increments(panel, kind, A, Gamma, G, opts)

        z = np.einsum("jik,ik->ji", panel.X, A) + G @ Gamma.T
        trace.append(float(_stable_terms(kind, z, panel.B).sum()))

        prod = G @ Gamma.T if r_g else np.zeros((n1, d))
        crit = ((A - a_prev) ** 2).sum() / d
        crit += ((prod - prod_prev) ** 2).sum() / (n * d)
        a_prev = A.copy()
        prod_prev = prod
        if crit < opts.epsilon:
            plateau += 1
            if _interior_gradient_max(panel, kind, A, Gamma, G, opts.z_cap) <= grad_tol:
                converged = True
                break
            if plateau >= 10:
                flags.append("plateau_without_stationarity")
                break
        else:
            plateau = 0

    A = theta[:, :r_x].copy()
    Gamma = theta[:, r_x:].copy()
    if r_g:
        DeltaG = np.empty_like(G)
        DeltaG[0] = G[0]
        DeltaG[1:] = np.diff(G, axis=0)
        Gamma, DeltaG = normalize_factors(Gamma, DeltaG)
        G = np.cumsum(DeltaG, axis=0)
    else:
        DeltaG = np.zeros((n1, 0))

    z = np.einsum("jik,ik->ji", panel.X, A) + G @ Gamma.T
    p = link_eval(kind, z)
    return SfmFit(A_hat=A, Gamma_hat=Gamma, G_hat=G, DeltaG_hat=DeltaG,
                  p_hat=p, z_hat=z, loglik_trace=np.asarray(trace),
                  iterations=sweeps, converged=converged, kind=kind,
                  flags=flags)


def normalize_factors(Gamma_raw, DeltaG_raw):
    """Rotate loadings/increments into the identifying normalization.

    After the transform, Gamma'Gamma/d is the identity and
    DeltaG'DeltaG/(n+1) is diagonal with decreasing entries; the product
    Gamma DeltaG' is unchanged.  Column signs are fixed so each column's
    largest-magnitude loading is positive.
    """
    Gamma_raw = np.asarray(Gamma_raw, dtype=float)
    DeltaG_raw = np.asarray(DeltaG_raw, dtype=float)
    d = Gamma_raw.shape[0]
    n1 = DeltaG_raw.shape[0]
    r = Gamma_raw.shape[1]
    if r == 0:
        return Gamma_raw.copy(), DeltaG_raw.copy()

    S = Gamma_raw.T @ Gamma_raw / d
    w, v = np.linalg.eigh(S)
    if w.min() <= 0:
        raise np.linalg.LinAlgError("Gamma'Gamma/d is singular; cannot normalize")
    S_half = (v * np.sqrt(w)) @ v.T
    S_half_inv = (v / np.sqrt(w)) @ v.T

    M = S_half @ (DeltaG_raw.T @ DeltaG_raw / n1) @ S_half
    psi, Q = np.linalg.eigh(M)
    order = np.argsort(psi)[::-1]
    psi = psi[order]
    Q = Q[:, order]
    if r > 1 and np.min(np.abs(np.diff(psi))) < 1e-12:
        warnings.warn("factor scales are not distinct; rotation is not "
                      "identified", NumericalWarning)

    Gamma = Gamma_raw @ S_half_inv @ Q
    DeltaG = DeltaG_raw @ S_half @ Q
    signs = np.sign(Gamma[np.abs(Gamma).argmax(axis=0), np.arange(r)])
    signs[signs == 0] = 1.0
    return Gamma * signs, DeltaG * signs


def select_r_from_eigenvalues(eigvals, xi, chi, r_max):
    """Perturbed eigenvalue-ratio selector on a descending spectrum.

    Adds the slowly diverging perturbation ``xi`` to each eigenvalue and
    returns the largest k < r_max whose adjusted ratio exceeds 1 + chi,
    or 1 if none does.
    """
    lam = np.sort(np.asarray(eigvals, dtype=float))[::-1]
    if (lam > 0).sum() < 2:
        warnings.warn("fewer than two positive eigenvalues; selecting 1",
                      NumericalWarning)
        return 1
    if lam.size < r_max:
        lam = np.concatenate([lam, np.zeros(r_max - lam.size)])
    lam_hat = lam[:r_max] + xi
    ratios = lam_hat[:-1] / lam_hat[1:]
    hits = np.nonzero(ratios > 1.0 + chi)[0]
    return int(hits.max()) + 1 if hits.size else 1


def select_r_g(factor_product, r_g_max=8, chi=0.2, xi=None):
    """Number of staleness factors from the fitted loadings-times-increments.

    ``factor_product`` is Gamma_hat @ DeltaG_hat' (d x (n+1)); its squared
    singular values are the eigenvalues entering the perturbed ratio test.
    ``xi`` defaults to sqrt(d).
    """
    factor_product = np.asarray(factor_product, dtype=float)
    d = factor_product.shape[0]
    if r_g_max < 2:
        raise ValueError("r_g_max must be >= 2")
    if xi is None:
        xi = np.sqrt(d)
    sv = np.linalg.svd(factor_product, compute_uv=False)
    return select_r_from_eigenvalues(sv ** 2, xi, chi, r_g_max)


def variance_p(fit: SfmFit, panel: Panel, kind=None) -> SfmVariance:
    """Feasible asymptotic variances for the fitted probabilities.

    Plug-in weighted second-moment matrices with weights
    psi^2(z) / (Psi(z)(1 - Psi(z))), combined with omega^2 = min(n, d)
    into the per-cell variance of p_hat.
    """
    kind = LinkKind.parse(kind or fit.kind)
    z = fit.z_hat
    n1, d = z.shape
    n = n1 - 1
    r_x = panel.X.shape[2]
    r_g = fit.r_g
    q = r_x + r_g

    p = link_eval(kind, z)
    psi = link_deriv(kind, z, 1)
    w = psi ** 2 / (p * (1.0 - p))

    U = np.empty((n1, d, q))
    U[:, :, :r_x] = panel.X
    if r_g:
        U[:, :, r_x:] = fit.G_hat[:, None, :]

    Omega_u = np.einsum("ji,jiq,jir->iqr", w, U, U) / n1
    Omega_u_inv = _pd_inverse_stack(Omega_u, "per-asset information")
    qf_u = np.einsum("jiq,iqr,jir->ji", U, Omega_u_inv, U)

    omega2 = float(min(n, d))
    if r_g:
        Gm = fit.Gamma_hat
        Omega_g = np.einsum("ji,ik,il->jkl", w, Gm, Gm) / d
        Omega_g_inv = _pd_inverse_stack(Omega_g, "per-time information")
        qf_g = np.einsum("ik,jkl,il->ji", Gm, Omega_g_inv, Gm)
    else:
        Omega_g = np.zeros((n1, 0, 0))
        qf_g = np.zeros((n1, d))

    Omega_p = psi ** 2 * (omega2 / n * qf_u + omega2 / d * qf_g)
    return SfmVariance(Omega_u_i=Omega_u, Omega_gamma_j=Omega_g,
                       Omega_p=Omega_p, omega2=omega2)


def _pd_inverse_stack(mats, label):
    try:
        return np.linalg.inv(mats)
    except np.linalg.LinAlgError:
        warnings.warn(f"singular {label} matrix; ridge fallback",
                      NumericalWarning)
        q = mats.shape[-1]
        return np.linalg.inv(mats + 1e-10 * np.eye(q))


def confidence_intervals(fit: SfmFit, panel: Panel, level=0.95):
    """Per-cell intervals p_hat +/- q * sqrt(Omega_p) / omega_nd."""
    from scipy.stats import norm
    var = variance_p(fit, panel)
    half = norm.ppf(0.5 + level / 2.0) * np.sqrt(var.Omega_p) / np.sqrt(var.omega2)
    return fit.p_hat - half, fit.p_hat + half


def integrated_functional(fit: SfmFit, panel: Panel, i, m, phi,
                          dphi1=None, dphi2=None):
    """Riemann estimate of int phi(p_i, p_m) dt with a plug-in std error.

    The value is the left-endpoint Riemann sum delta * sum_{j<n} of
    phi(p_hat_i, p_hat_m).  Derivatives may be supplied; otherwise central
    finite differences are used.  Probabilities falling outside the
    admissible domain are clipped (with a warning) before evaluation.
    """
    if i == m:
        raise ValueError("integrated functionals are defined for i != m")
    n1 = fit.p_hat.shape[0]
    n = n1 - 1
    delta = panel.delta
    T = n * delta

    p_i = fit.p_hat[:, i]
    p_m = fit.p_hat[:, m]
    if np.any(p_i < P_FLOOR) or np.any(p_i > P_CEIL) or \
            np.any(p_m < P_FLOOR) or np.any(p_m > P_CEIL):
        warnings.warn("fitted probabilities clipped into the functional's "
                      "domain", NumericalWarning)
    p_i = clip_probability(p_i)
    p_m = clip_probability(p_m)

    value = delta * float(np.sum(phi(p_i[:-1], p_m[:-1])))

    h = 1e-6
    if dphi1 is None:
        def dphi1(x, y):
            return (phi(np.minimum(x + h, 1 - 1e-12), y) - phi(np.maximum(x - h, 1e-12), y)) / (2 * h)
    if dphi2 is None:
        def dphi2(x, y):
            return (phi(x, np.minimum(y + h, 1 - 1e-12)) - phi(x, np.maximum(y - h, 1e-12))) / (2 * h)

    var_i = _functional_variance(fit, panel, i, dphi1(p_i, p_m), T)
    var_m = _functional_variance(fit, panel, m, dphi2(p_i, p_m), T)
    stderr = float(np.sqrt(delta * (var_i + var_m)))
    return value, stderr


def _functional_variance(fit, panel, idx, dphi_vals, T):
    kind = fit.kind
    z = fit.z_hat[:, idx]
    p = link_eval(kind, z)
    psi = link_deriv(kind, z, 1)
    w = psi ** 2 / (p * (1.0 - p))
    r_x = panel.X.shape[2]
    u = np.concatenate([panel.X[:, idx, :], fit.G_hat], axis=1)
    W = (u * w[:, None]).T @ u
    b = (u * np.asarray(dphi_vals)[:, None]).sum(axis=0)
    try:
        sol = np.linalg.solve(W, b)
    except np.linalg.LinAlgError:
        warnings.warn("singular weighted information in functional variance; "
                      "ridge fallback", NumericalWarning)
        sol = np.linalg.solve(W + 1e-10 * np.eye(W.shape[0]), b)
    return panel.delta / np.sqrt(T) * float(b @ sol)


def best_rotation_distance(G_hat, G_true):
    """Relative factor-path error after the best orthogonal alignment."""
    C = G_true.T @ G_hat
    U, _, Vt = np.linalg.svd(C)
    R = U @ Vt
    return float(np.linalg.norm(G_hat - G_true @ R) / np.linalg.norm(G_true))
