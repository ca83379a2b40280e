"""Distribution families for distributional regression.

Each family maps K unconstrained predictors eta_1..eta_K to its parameter
vector theta through monotone response functions (identity, exp or
sigmoid), and provides the negative log-likelihood, its analytic gradient
with respect to each eta_k, sampling, CDF and quantile functions.

Parameterizations
-----------------
normal         theta = (mu = eta1, sigma = exp(eta2))
bernoulli      theta = (p = sigmoid(eta1))
poisson        theta = (rate = exp(eta1))
gamma          theta = (mean = exp(eta1), shape = exp(eta2)); rate = shape/mean
logistic       theta = (location = eta1, scale = exp(eta2))
inverse_gamma  theta = (mode = exp(eta1), shape = exp(eta2));
               scale = mode * (shape + 1)

Exponential and sigmoid responses clamp eta at +-ETA_CLAMP before
transforming; the number of clamped entries is surfaced so callers can
report it instead of overflowing silently.
"""

from __future__ import annotations

import numpy as np
from scipy import special

ETA_CLAMP = 30.0

_LOG_2PI = float(np.log(2.0 * np.pi))


class SupportError(ValueError):
    """Response values outside the family's support, with the first bad row."""

    def __init__(self, family: str, row: int, value):
        self.row = int(row)
        super().__init__(
            f"response value {value!r} at row {row} is outside the support "
            f"of family '{family}'"
        )


class NumericalError(ArithmeticError):
    """Non-finite intermediate in a likelihood computation."""


def _clamped(eta: np.ndarray) -> np.ndarray:
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)


def _n_clamped(eta: np.ndarray) -> int:
    return int(np.count_nonzero(np.abs(eta) > ETA_CLAMP))


def apply_response(link: str, eta: np.ndarray) -> tuple[np.ndarray, int]:
    """Map a predictor vector through a response function.

    Returns the parameter values and the number of clamped entries.
    """
    eta = np.asarray(eta, dtype=float)
    if link == "identity":
        return eta, 0
    if link == "exp":
        return np.exp(_clamped(eta)), _n_clamped(eta)
    if link == "sigmoid":
        return special.expit(_clamped(eta)), _n_clamped(eta)
    raise ValueError(f"unknown response function '{link}'")


class Family:
    """One K-parameter outcome distribution.

    Subclasses implement the per-row NLL, its gradient with respect to
    each predictor, the CDF and the quantile function. All array
    arguments are 1-d of common length n; ``eta`` is a list of K such
    vectors and ``theta`` an (n, K) array.
    """

    name: str = ""
    parameter_names: tuple[str, ...] = ()
    links: tuple[str, ...] = ()

    @property
    def n_parameters(self) -> int:
        return len(self.links)

    # -- support ------------------------------------------------------
    def _support_mask(self, y: np.ndarray) -> np.ndarray:
        """True where y is inside the support."""
        return np.isfinite(y)

    def check_support(self, y: np.ndarray):
        y = np.asarray(y, dtype=float)
        ok = self._support_mask(y)
        if not ok.all():
            row = int(np.argmin(ok))
            raise SupportError(self.name, row, y[row])

    # -- eta -> theta ---------------------------------------------------
    def theta_from_eta(self, eta: list[np.ndarray]) -> tuple[np.ndarray, int]:
        cols, clamped = [], 0
        for link, e in zip(self.links, eta):
            col, n_bad = apply_response(link, e)
            cols.append(col)
            clamped += n_bad
        return np.column_stack(cols), clamped

    # -- likelihood -----------------------------------------------------
    def nll_rows(self, y: np.ndarray, eta: list[np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    def dnll_deta_rows(self, y: np.ndarray, eta: list[np.ndarray]) -> list[np.ndarray]:
        raise NotImplementedError

    # -- distribution functions ------------------------------------------
    def cdf(self, x, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def quantile_theta(self, prob: float, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Concrete families
# ---------------------------------------------------------------------------
class Normal(Family):
    name = "normal"
    parameter_names = ("mu", "sigma")
    links = ("identity", "exp")

    def nll_rows(self, y, eta):
        mu, e2 = eta[0], _clamped(eta[1])
        return 0.5 * _LOG_2PI + e2 + 0.5 * (y - mu) ** 2 * np.exp(-2.0 * e2)

    def dnll_deta_rows(self, y, eta):
        mu, e2 = eta[0], _clamped(eta[1])
        inv_var = np.exp(-2.0 * e2)
        return [(mu - y) * inv_var, 1.0 - (y - mu) ** 2 * inv_var]

    def cdf(self, x, theta):
        mu, sigma = theta[:, 0], theta[:, 1]
        return special.ndtr((np.asarray(x, dtype=float) - mu) / sigma)

    def quantile_theta(self, prob, theta):
        return theta[:, 0] + theta[:, 1] * special.ndtri(prob)

    def sample(self, rng, theta):
        return rng.normal(theta[:, 0], theta[:, 1])


class Bernoulli(Family):
    name = "bernoulli"
    parameter_names = ("p",)
    links = ("sigmoid",)

    def _support_mask(self, y):
        return np.isfinite(y) & ((y == 0.0) | (y == 1.0))

    def nll_rows(self, y, eta):
        e1 = _clamped(eta[0])
        # softplus(eta) - y*eta, the stable sigmoid cross-entropy
        return np.logaddexp(0.0, e1) - y * e1

    def dnll_deta_rows(self, y, eta):
        return [special.expit(_clamped(eta[0])) - y]

    def cdf(self, x, theta):
        p = theta[:, 0]
        x = np.broadcast_to(np.asarray(x, dtype=float), p.shape)
        out = np.where(x < 0.0, 0.0, np.where(x < 1.0, 1.0 - p, 1.0))
        return out

    def quantile_theta(self, prob, theta):
        return (prob > 1.0 - theta[:, 0]).astype(float)

    def sample(self, rng, theta):
        return rng.binomial(1, theta[:, 0]).astype(float)


class Poisson(Family):
    name = "poisson"
    parameter_names = ("rate",)
    links = ("exp",)

    def _support_mask(self, y):
        return np.isfinite(y) & (y >= 0) & (y == np.floor(y))

    def nll_rows(self, y, eta):
        e1 = _clamped(eta[0])
        return np.exp(e1) - y * e1 + special.gammaln(y + 1.0)

    def dnll_deta_rows(self, y, eta):
        return [np.exp(_clamped(eta[0])) - y]

    def cdf(self, x, theta):
        rate = theta[:, 0]
        x = np.broadcast_to(np.asarray(x, dtype=float), rate.shape)
        k = np.floor(x)
        out = np.where(k < 0, 0.0, special.gammaincc(k + 1.0, rate))
        return out

    def quantile_theta(self, prob, theta):
        rate = theta[:, 0]
        return np.array([_poisson_quantile(prob, r) for r in rate], dtype=float)

    def sample(self, rng, theta):
        return rng.poisson(theta[:, 0]).astype(float)


def _poisson_quantile(prob: float, rate: float) -> float:
    """Smallest integer k with CDF(k) >= prob, by bracket and bisection."""
    if special.gammaincc(1.0, rate) >= prob:  # CDF(0)
        return 0.0
    hi = max(1, int(rate))
    while special.gammaincc(hi + 1.0, rate) < prob:
        hi *= 2
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if special.gammaincc(mid + 1.0, rate) >= prob:
            hi = mid
        else:
            lo = mid
    return float(hi)


class Gamma(Family):
    """Gamma in mean/shape form: mean = exp(eta1), shape = exp(eta2)."""

    name = "gamma"
    parameter_names = ("mean", "shape")
    links = ("exp", "exp")

    def _support_mask(self, y):
        return np.isfinite(y) & (y > 0)

    def nll_rows(self, y, eta):
        e1, e2 = _clamped(eta[0]), _clamped(eta[1])
        a = np.exp(e2)
        log_rate = e2 - e1
        return -a * log_rate - (a - 1.0) * np.log(y) + y * np.exp(log_rate) + special.gammaln(a)

    def dnll_deta_rows(self, y, eta):
        e1, e2 = _clamped(eta[0]), _clamped(eta[1])
        a = np.exp(e2)
        rate = np.exp(e2 - e1)  # shape / mean
        d1 = a - y * rate
        d2 = a * (-(e2 - e1) - 1.0 - np.log(y) + special.digamma(a)) + y * rate
        return [d1, d2]

    def cdf(self, x, theta):
        mean, a = theta[:, 0], theta[:, 1]
        x = np.broadcast_to(np.asarray(x, dtype=float), mean.shape)
        return np.where(x <= 0, 0.0, special.gammainc(a, a * np.maximum(x, 0.0) / mean))

    def quantile_theta(self, prob, theta):
        out = np.empty(theta.shape[0])
        for i, (mean, a) in enumerate(theta):
            out[i] = _cdf_root(lambda x: special.gammainc(a, a * x / mean), prob, scale=mean)
        return out

    def sample(self, rng, theta):
        mean, a = theta[:, 0], theta[:, 1]
        return rng.gamma(shape=a, scale=mean / a)


class Logistic(Family):
    name = "logistic"
    parameter_names = ("location", "scale")
    links = ("identity", "exp")

    def nll_rows(self, y, eta):
        mu, e2 = eta[0], _clamped(eta[1])
        z = (y - mu) * np.exp(-e2)
        return z + 2.0 * np.logaddexp(0.0, -z) + e2

    def dnll_deta_rows(self, y, eta):
        mu, e2 = eta[0], _clamped(eta[1])
        s = np.exp(e2)
        z = (y - mu) / s
        t = np.tanh(z / 2.0)
        return [-t / s, 1.0 - z * t]

    def cdf(self, x, theta):
        mu, s = theta[:, 0], theta[:, 1]
        return special.expit((np.asarray(x, dtype=float) - mu) / s)

    def quantile_theta(self, prob, theta):
        return theta[:, 0] + theta[:, 1] * np.log(prob / (1.0 - prob))

    def sample(self, rng, theta):
        return rng.logistic(theta[:, 0], theta[:, 1])


class InverseGamma(Family):
    """Inverse gamma located by its mode: mode = exp(eta1), shape = exp(eta2).

    The scale works out as mode * (shape + 1).
    """

    name = "inverse_gamma"
    parameter_names = ("mode", "shape")
    links = ("exp", "exp")

    def _support_mask(self, y):
        return np.isfinite(y) & (y > 0)

    @staticmethod
    def _ab(theta):
        mode, a = theta[:, 0], theta[:, 1]
        return a, mode * (a + 1.0)

    def nll_rows(self, y, eta):
        e1, e2 = _clamped(eta[0]), _clamped(eta[1])
        a = np.exp(e2)
        b = np.exp(e1) * (a + 1.0)
        return -a * np.log(b) + special.gammaln(a) + (a + 1.0) * np.log(y) + b / y

    def dnll_deta_rows(self, y, eta):
        e1, e2 = _clamped(eta[0]), _clamped(eta[1])
        m, a = np.exp(e1), np.exp(e2)
        b = m * (a + 1.0)
        d1 = -a + b / y
        d2 = a * (-np.log(b) + special.digamma(a) + np.log(y)) + a * m * (1.0 / y - a / b)
        return [d1, d2]

    def cdf(self, x, theta):
        a, b = self._ab(theta)
        x = np.broadcast_to(np.asarray(x, dtype=float), a.shape)
        return np.where(x <= 0, 0.0, special.gammaincc(a, b / np.maximum(x, np.finfo(float).tiny)))

    def quantile_theta(self, prob, theta):
        a_all, b_all = self._ab(theta)
        out = np.empty(theta.shape[0])
        for i, (a, b) in enumerate(zip(a_all, b_all)):
            out[i] = _cdf_root(lambda x: special.gammaincc(a, b / x), prob, scale=b / (a + 1.0))
        return out

    def sample(self, rng, theta):
        a, b = self._ab(theta)
        return 1.0 / rng.gamma(shape=a, scale=1.0 / b)


def _cdf_root(cdf, prob: float, scale: float) -> float:
    """Invert a continuous CDF on (0, inf) by bracketed root finding.

    Brackets geometrically around `scale`, then runs Brent's method; the
    result satisfies |cdf(x) - prob| <= 1e-8.
    """
    from scipy.optimize import brentq

    lo = hi = max(scale, np.finfo(float).tiny)
    for _ in range(2000):
        if cdf(lo) <= prob:
            break
        lo /= 2.0
    for _ in range(2000):
        if cdf(hi) >= prob:
            break
        hi *= 2.0
    if lo == hi:
        return lo
    x = brentq(lambda x: cdf(x) - prob, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps)
    if abs(cdf(x) - prob) > 1e-8:
        raise NumericalError(f"quantile root-find did not reach 1e-8 at prob={prob}")
    return float(x)


# ---------------------------------------------------------------------------
# Registry and functional surface
# ---------------------------------------------------------------------------
FAMILIES: dict[str, Family] = {
    f.name: f
    for f in (Normal(), Bernoulli(), Poisson(), Gamma(), Logistic(), InverseGamma())
}


def get_family(name) -> Family:
    if isinstance(name, Family):
        return name
    if name not in FAMILIES:
        raise ValueError(
            f"unknown family '{name}', choose from {sorted(FAMILIES)}"
        )
    return FAMILIES[name]


def _check_inputs(family, y, eta) -> tuple[Family, np.ndarray, list[np.ndarray]]:
    fam = get_family(family)
    y = np.asarray(y, dtype=float)
    eta = [np.asarray(e, dtype=float) for e in eta]
    if len(eta) != fam.n_parameters:
        raise ValueError(
            f"family '{fam.name}' expects {fam.n_parameters} predictors, got {len(eta)}"
        )
    fam.check_support(y)
    return fam, y, eta


def nll(family, y, eta) -> float:
    """Mean negative log-likelihood over observations."""
    fam, y, eta = _check_inputs(family, y, eta)
    rows = fam.nll_rows(y, eta)
    out = float(np.mean(rows))
    if not np.isfinite(out):
        raise NumericalError(
            f"non-finite NLL for family '{fam.name}' "
            f"(likely overflow in a response function)"
        )
    return out


def dnll_deta(family, y, eta) -> list[np.ndarray]:
    """Per-row dNLL_i/deta_k for each parameter k (no 1/n scaling)."""
    fam, y, eta = _check_inputs(family, y, eta)
    grads = fam.dnll_deta_rows(y, eta)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite NLL gradient for family '{fam.name}'")
    return grads


def quantile(family, prob: float, theta) -> np.ndarray:
    """Inverse CDF at `prob` for each row of `theta` (one row per observation)."""
    fam = get_family(family)
    if not (0.0 < prob < 1.0):
        raise ValueError(f"prob must be in (0, 1), got {prob}")
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if theta.shape[1] != fam.n_parameters:
        raise ValueError(
            f"theta needs {fam.n_parameters} columns for family '{fam.name}'"
        )
    return fam.quantile_theta(float(prob), theta)


def log_score(family, y, eta) -> float:
    """Mean NLL on held-out data; identical computation to `nll`."""
    return nll(family, y, eta)


def list_families() -> list[dict]:
    """Name, parameter names and response functions of every family."""
    return [
        {
            "name": fam.name,
            "n_parameters": fam.n_parameters,
            "parameters": list(fam.parameter_names),
            "links": list(fam.links),
        }
        for fam in FAMILIES.values()
    ]
