"""Link functions mapping the staleness single index to a probability.

Two links are supported, logit and probit.  Both map the real line onto
(0, 1), are strictly increasing and three times differentiable, which is
what the likelihood machinery and the asymptotic variance formulas need.
All functions are pure and vectorized over numpy arrays.
"""

from enum import Enum

import numpy as np
from scipy import special

__all__ = [
    "LinkKind",
    "P_FLOOR",
    "P_CEIL",
    "clip_probability",
    "link_eval",
    "link_log_eval",
    "link_deriv",
    "link_inverse",
    "link_score",
    "link_curvature",
]

# Block averages of binary indicators can be exactly 0 or 1; probabilities are
# clipped into [P_FLOOR, P_CEIL] before inversion.  The ceiling mirrors the
# bounded-staleness assumption p <= p_bar < 1.
P_FLOOR = 1e-6
P_CEIL = 0.95


class LinkKind(str, Enum):
    """Supported link families; values double as CLI/config spellings."""

    LOGIT = "logit"
    PROBIT = "probit"

    @classmethod
    def parse(cls, value) -> "LinkKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown link kind {value!r}; use 'logit' or 'probit'")


def _check_finite(z):
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("link argument must be finite")
    return z


def clip_probability(p):
    """Clip probabilities into [P_FLOOR, P_CEIL] ahead of inversion."""
    return np.clip(np.asarray(p, dtype=float), P_FLOOR, P_CEIL)


def link_eval(kind, z):
    """Evaluate the link at ``z``: logistic CDF or standard normal CDF.

    Parameters
    ----------
    kind : LinkKind or str
    z : array_like
        Finite real values.

    Returns
    -------
    ndarray or float in (0, 1), strictly increasing in ``z``.
    """
    kind = LinkKind.parse(kind)
    z = _check_finite(z)
    if kind is LinkKind.LOGIT:
        out = special.expit(z)
    else:
        # ndtr is erfc-based with relative error ~1e-16; tail accuracy feeds
        # the Newton refinements downstream.
        out = special.ndtr(z)
    return out if out.ndim else float(out)


def link_log_eval(kind, z):
    """log(link(z)), evaluated stably in the far-left tail."""
    kind = LinkKind.parse(kind)
    z = np.asarray(z, dtype=float)
    if kind is LinkKind.LOGIT:
        return special.log_expit(z)
    return special.log_ndtr(z)


def link_deriv(kind, z, order=1):
    """Derivatives of the link: order k returns d^k link / dz^k.

    ``order`` must be 1, 2 or 3.  For the logit, the first derivative is
    ``link * (1 - link)``; higher orders follow by differentiating that
    identity.  For the probit they are the normal density and its
    derivatives.
    """
    kind = LinkKind.parse(kind)
    if order not in (1, 2, 3):
        raise ValueError(f"derivative order must be 1, 2 or 3, got {order}")
    z = _check_finite(z)
    if kind is LinkKind.LOGIT:
        p = special.expit(z)
        psi = p * (1.0 - p)
        if order == 1:
            out = psi
        elif order == 2:
            out = psi * (1.0 - 2.0 * p)
        else:
            out = psi * (1.0 - 6.0 * psi)
    else:
        phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
        if order == 1:
            out = phi
        elif order == 2:
            out = -z * phi
        else:
            out = (z * z - 1.0) * phi
    return out if out.ndim else float(out)


def link_inverse(kind, p):
    """Invert the link on probabilities.

    Callers are expected to clip block-average probabilities through
    :func:`clip_probability` first; any value outside (0, 1) raises.
    The round trip ``link_eval(kind, link_inverse(kind, p))`` holds to
    1e-12 relative on [P_FLOOR, P_CEIL].
    """
    kind = LinkKind.parse(kind)
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("probabilities must lie strictly inside (0, 1); "
                         "clip block averages with clip_probability first")
    if kind is LinkKind.LOGIT:
        out = special.logit(p)
    else:
        z = special.ndtri(p)
        # One Newton step on ndtr sharpens the rational approximation to
        # full double precision.
        z = z - (special.ndtr(z) - p) / link_deriv(kind, z, 1)
        out = z
    return out if out.ndim else float(out)


def link_score(kind, z, b):
    """d/dz of the Bernoulli log likelihood term at index value ``z``.

    ``b`` holds the binary outcomes.  Evaluated in a form that stays finite
    for |z| up to several hundred.
    """
    kind = LinkKind.parse(kind)
    z = np.asarray(z, dtype=float)
    b = np.asarray(b, dtype=float)
    if kind is LinkKind.LOGIT:
        return b - special.expit(z)
    # Inverse Mills ratios: phi/Phi(z) for b=1 and phi/Phi(-z) for b=0.
    log_phi = -0.5 * z * z - 0.5 * np.log(2.0 * np.pi)
    mills_pos = np.exp(log_phi - special.log_ndtr(z))
    mills_neg = np.exp(log_phi - special.log_ndtr(-z))
    return b * mills_pos - (1.0 - b) * mills_neg


def link_curvature(kind, z, b):
    """d^2/dz^2 of the Bernoulli log likelihood term (observed information).

    Non-positive for both links (the log likelihood is concave in ``z``),
    so per-block Newton systems built from it are positive semidefinite.
    """
    kind = LinkKind.parse(kind)
    z = np.asarray(z, dtype=float)
    b = np.asarray(b, dtype=float)
    if kind is LinkKind.LOGIT:
        p = special.expit(z)
        return -(p * (1.0 - p)) * np.ones_like(b)
    log_phi = -0.5 * z * z - 0.5 * np.log(2.0 * np.pi)
    mills_pos = np.exp(log_phi - special.log_ndtr(z))
    mills_neg = np.exp(log_phi - special.log_ndtr(-z))
    curv_pos = -mills_pos * (z + mills_pos)
    curv_neg = -mills_neg * (mills_neg - z)
    return b * curv_pos + (1.0 - b) * curv_neg
