"""Anti-logistic circadian model with covariate-dependent amplitude and phase.

Implements the multi-subject likelihood, the covariate links, the prior
stack (hierarchical log-normal minima and shape parameters, scaled Beta for
the rest/active balance, half-Cauchy residual scales, l1-ball or Laplace
coefficient priors), the constrained/unconstrained transforms, and the
joint log posterior with its analytic gradient in unconstrained
coordinates. Two single-subject baselines (plain cosinor and the
anti-logistic extended cosinor) share the same interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import betaln
from scipy.special import expit as _scipy_expit

from . import l1ball

__all__ = [
    "SubjectSeries",
    "CovariateMatrix",
    "SubjectParams",
    "CoefficientVectors",
    "HyperParams",
    "ModelSpec",
    "ParameterState",
    "ConstrainedView",
    "CALCModel",
    "SingleSubjectModel",
    "build_model",
    "expit",
    "circadian_mean",
    "link_amplitude",
    "link_phase",
    "log_likelihood",
    "log_prior",
    "log_posterior",
    "grad_log_posterior",
    "posterior_predictive_draw",
]

HOURS_PER_CYCLE = 24.0
ANGULAR_RATE = 2.0 * np.pi / HOURS_PER_CYCLE
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

VARIANTS = ("calc_l1ball", "calc_blasso", "cosinor", "rar")
COSINE_FORMS = ("as_printed", "marler")


def expit(u):
    """Anti-logistic function exp(u) / (1 + exp(u)), saturating stably."""
    return _scipy_expit(u)


def link_amplitude(x, eta_a):
    """Log-linear amplitude link exp(x' eta); positivity is automatic."""
    x = np.asarray(x, dtype=float)
    eta_a = np.asarray(eta_a, dtype=float)
    if x.shape[-1] != eta_a.shape[0]:
        raise ValueError("covariate vector and coefficients disagree in length")
    return np.exp(x @ eta_a)


def link_phase(x, eta_phi):
    """Log-linear phase link exp(x' eta); range validity is the caller's check."""
    return link_amplitude(x, eta_phi)


@dataclass(frozen=True)
class SubjectSeries:
    """One subject's epoch-indexed observations on the modeling scale."""

    subject_id: str
    t_index: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_index, dtype=int)
        y = np.asarray(self.y, dtype=float)
        if t.ndim != 1 or y.shape != t.shape or t.size < 1:
            raise ValueError(f"subject {self.subject_id}: t_index and y must be equal-length 1-d arrays")
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"subject {self.subject_id}: t_index must be strictly increasing")
        object.__setattr__(self, "t_index", t)
        object.__setattr__(self, "y", y)

    @property
    def n_epochs(self) -> int:
        return self.t_index.size


def _is_binary(column: np.ndarray) -> bool:
    return bool(np.all((column == 0.0) | (column == 1.0)))


@dataclass
class CovariateMatrix:
    """N x Q design matrix with per-column standardization metadata."""

    values: np.ndarray
    column_names: list[str]
    standardization: list[tuple[float, float] | None] = None
    intercept_column: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("covariate values must be a 2-d array")
        n, q = self.values.shape
        if len(self.column_names) != q:
            raise ValueError("column_names must match the number of columns")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("covariates must be complete; impute missing values upstream")
        if self.standardization is None:
            self.standardization = [None] * q
        if len(self.standardization) != q:
            raise ValueError("standardization metadata must match the number of columns")
        for j, meta in enumerate(self.standardization):
            if meta is None:
                continue
            col = self.values[:, j]
            if _is_binary(col):
                raise ValueError(f"column {self.column_names[j]!r} is binary and must not be standardized")
            if abs(col.mean()) > 1e-10:
                raise ValueError(f"column {self.column_names[j]!r} marked standardized but mean is {col.mean():.2e}")
            if abs(col.var() - 1.0) > 1e-8:
                raise ValueError(f"column {self.column_names[j]!r} marked standardized but variance is {col.var():.8f}")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SubjectParams:
    """One subject's curve parameters in their natural (constrained) space."""

    m: float
    alpha: float
    beta: float
    sigma: float
    amplitude: float
    phase: float

    def validate(self):
        if not (self.m > 0):
            raise ValueError("minimum expected activity m must be positive")
        if not (-1.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (-1, 1)")
        if not (self.beta > 0):
            raise ValueError("transition sharpness beta must be positive")
        if not (self.sigma > 0):
            raise ValueError("residual sd sigma must be positive")
        if not (self.amplitude >= 0):
            raise ValueError("amplitude must be non-negative")
        if not (0.0 <= self.phase <= HOURS_PER_CYCLE):
            raise ValueError("phase must lie in [0, 24] hours")


@dataclass(frozen=True)
class CoefficientVectors:
    """Amplitude and phase coefficients; exact zeros mark excluded covariates."""

    eta_a: np.ndarray
    eta_phi: np.ndarray


@dataclass(frozen=True)
class HyperParams:
    """Fixed prior constants.

    Second moments of the normal hyperpriors are variances (sigma^2
    convention); Cauchy entries are scales and tau/lambda are the Laplace
    scale and exponential rate of the coefficient prior.
    """

    lmu_m_loc: float = 0.0
    lmu_m_var: float = 10.0
    lmu_beta_loc: float = 5.0
    lmu_beta_var: float = 3.0
    sigma_m_scale: float = 1.0
    sigma_beta_scale: float = 1.0
    beta_prior_a: float = 1.0
    beta_prior_b: float = 1.0
    gamma_sigma: float = 1.0
    tau_a: float = 1.0
    tau_phi: float = 1.0
    lambda_a: float = 1.0
    lambda_phi: float = 1.0

    def __post_init__(self):
        for name in ("lmu_m_var", "lmu_beta_var", "sigma_m_scale", "sigma_beta_scale",
                     "beta_prior_a", "beta_prior_b", "gamma_sigma",
                     "tau_a", "tau_phi", "lambda_a", "lambda_phi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class ModelSpec:
    """Model variant, epochs-per-hour sampling rate, and prior constants."""

    variant: str = "calc_l1ball"
    R: int = 12
    hyper: HyperParams = field(default_factory=HyperParams)
    cosine_form: str = "as_printed"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not (isinstance(self.R, (int, np.integer)) and self.R > 0):
            raise ValueError("R (epochs per hour) must be a positive integer")
        if self.cosine_form not in COSINE_FORMS:
            raise ValueError(f"cosine_form must be one of {COSINE_FORMS}")

    @property
    def uses_covariates(self) -> bool:
        return self.variant in ("calc_l1ball", "calc_blasso")


def _transition_argument(cos_term, beta, alpha, cosine_form):
    if cosine_form == "as_printed":
        return beta * cos_term - alpha
    return beta * (cos_term - alpha)


def circadian_mean(t, params: SubjectParams, spec: ModelSpec):
    """Expected activity at epoch ``t`` (scalar or array) for one subject.

    Under the calc/rar variants this is m + a * expit(...) with the chosen
    cosine form; under the cosinor variant the curve is the plain cosine
    with midline m + a/2 and half-amplitude a/2.
    """
    params.validate()
    t = np.asarray(t, dtype=float)
    angle = ANGULAR_RATE * (t / spec.R - params.phase)
    cos_term = np.cos(angle)
    if spec.variant == "cosinor":
        return (params.m + 0.5 * params.amplitude) + 0.5 * params.amplitude * cos_term
    arg = _transition_argument(cos_term, params.beta, params.alpha, spec.cosine_form)
    return params.m + params.amplitude * expit(arg)


@dataclass
class ConstrainedView:
    """Decoded parameters: subject blocks, population block, coefficients."""

    m: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    sigma: np.ndarray
    amplitude: np.ndarray
    phase: np.ndarray
    lmu_m: float | None = None
    lmu_beta: float | None = None
    sigma_m: float | None = None
    sigma_beta: float | None = None
    psi_a: np.ndarray | None = None
    psi_phi: np.ndarray | None = None
    eta_a: np.ndarray | None = None
    eta_phi: np.ndarray | None = None
    r_a: float | None = None
    r_phi: float | None = None

    def subject(self, i: int) -> SubjectParams:
        return SubjectParams(
            m=float(self.m[i]), alpha=float(self.alpha[i]), beta=float(self.beta[i]),
            sigma=float(self.sigma[i]), amplitude=float(self.amplitude[i]),
            phase=float(self.phase[i]),
        )

    def coefficients(self) -> CoefficientVectors:
        if self.eta_a is None:
            raise ValueError("this variant has no covariate coefficients")
        return CoefficientVectors(eta_a=self.eta_a, eta_phi=self.eta_phi)


@dataclass
class ParameterState:
    """A point in unconstrained space together with its decoded view."""

    unconstrained: np.ndarray
    view: ConstrainedView
    log_jacobian: float


class _ObservationLayout:
    """Flat observation arrays shared by every variant's likelihood."""

    def __init__(self, data: list[SubjectSeries], R: int):
        if len(data) == 0:
            raise ValueError("need at least one subject")
        self.n_subjects = len(data)
        counts = np.array([s.n_epochs for s in data])
        self.counts = counts.astype(float)
        self.starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.intp)
        self.sidx = np.repeat(np.arange(self.n_subjects), counts)
        self.y = np.concatenate([s.y for s in data])
        hours = np.concatenate([s.t_index for s in data]).astype(float) / R
        self.hours = hours
        angle = ANGULAR_RATE * hours
        self.cos_base = np.cos(angle)
        self.sin_base = np.sin(angle)

    def segment_sum(self, values: np.ndarray) -> np.ndarray:
        return np.add.reduceat(values, self.starts)


def _cos_shifted(layout: _ObservationLayout, phase_rep: np.ndarray):
    """cos/sin of (angular hours - angular phase) from precomputed bases."""
    cos_p = np.cos(ANGULAR_RATE * phase_rep)
    sin_p = np.sin(ANGULAR_RATE * phase_rep)
    cos_term = layout.cos_base * cos_p + layout.sin_base * sin_p
    sin_term = layout.sin_base * cos_p - layout.cos_base * sin_p
    return cos_term, sin_term


def _all_positive_finite(*arrays) -> bool:
    for arr in arrays:
        if not np.all(np.isfinite(arr)) or np.any(np.asarray(arr) <= 0):
            return False
    return True


class CALCModel:
    """Joint multi-subject model with covariate-linked amplitude and phase.

    Handles the l1-ball variant (latent psi vectors plus radii, coefficients
    via projection) and the Bayesian-lasso variant (Laplace prior directly on
    the coefficients, projection bypassed).
    """

    def __init__(self, data: list[SubjectSeries], X: CovariateMatrix, spec: ModelSpec):
        if spec.variant not in ("calc_l1ball", "calc_blasso"):
            raise ValueError("CALCModel handles the calc variants only")
        if X is None:
            raise ValueError("calc variants require a covariate matrix")
        if X.n_rows != len(data):
            raise ValueError(f"covariate rows ({X.n_rows}) must match subjects ({len(data)})")
        if X.n_cols < 1:
            raise ValueError("calc variants require at least one covariate")
        self.data = list(data)
        self.X = X
        self.spec = spec
        self.layout = _ObservationLayout(data, spec.R)
        self.n_subjects = len(data)
        self.n_covariates = X.n_cols
        self._Xv = X.values
        self._with_radius = spec.variant == "calc_l1ball"
        n, q = self.n_subjects, self.n_covariates
        self._s_zm = slice(0, n)
        self._s_ua = slice(n, 2 * n)
        self._s_zb = slice(2 * n, 3 * n)
        self._s_ls = slice(3 * n, 4 * n)
        self._i_lmu_m = 4 * n
        self._i_lmu_b = 4 * n + 1
        self._i_lsm = 4 * n + 2
        self._i_lsb = 4 * n + 3
        self._s_psi_a = slice(4 * n + 4, 4 * n + 4 + q)
        self._s_psi_p = slice(4 * n + 4 + q, 4 * n + 4 + 2 * q)
        self._i_lra = 4 * n + 4 + 2 * q if self._with_radius else None
        self._i_lrp = 4 * n + 5 + 2 * q if self._with_radius else None
        self.dim = 4 * n + 4 + 2 * q + (2 if self._with_radius else 0)
        hp = spec.hyper
        self._betaln_ab = betaln(hp.beta_prior_a, hp.beta_prior_b)

    # -- transforms ----------------------------------------------------

    def _raw_decode(self, z: np.ndarray):
        """Unchecked transform pass; overflow becomes inf for the validity gate."""
        hp = self.spec.hyper
        with np.errstate(over="ignore", invalid="ignore"):
            sigma_m = math.exp(min(z[self._i_lsm], 700.0))
            sigma_b = math.exp(min(z[self._i_lsb], 700.0))
            lmu_m = z[self._i_lmu_m]
            lmu_b = z[self._i_lmu_b]
            lm = lmu_m + sigma_m * z[self._s_zm]
            lb = lmu_b + sigma_b * z[self._s_zb]
            m = np.exp(lm)
            beta = np.exp(lb)
            alpha = np.tanh(0.5 * z[self._s_ua])
            sigma = np.exp(z[self._s_ls])
            psi_a = z[self._s_psi_a]
            psi_p = z[self._s_psi_p]
            if self._with_radius:
                r_a = math.exp(min(z[self._i_lra], 700.0))
                r_p = math.exp(min(z[self._i_lrp], 700.0))
                proj_a = l1ball.project(psi_a, r_a) if r_a > 0 and np.isfinite(r_a) else None
                proj_p = l1ball.project(psi_p, r_p) if r_p > 0 and np.isfinite(r_p) else None
                eta_a = proj_a.eta if proj_a is not None else np.full_like(psi_a, np.nan)
                eta_p = proj_p.eta if proj_p is not None else np.full_like(psi_p, np.nan)
            else:
                r_a = r_p = None
                proj_a = proj_p = None
                eta_a = psi_a
                eta_p = psi_p
            amplitude = np.exp(self._Xv @ eta_a)
            phase = np.exp(self._Xv @ eta_p)
        return dict(
            sigma_m=sigma_m, sigma_b=sigma_b, lmu_m=lmu_m, lmu_b=lmu_b,
            lm=lm, lb=lb, m=m, beta=beta, alpha=alpha, sigma=sigma,
            psi_a=psi_a, psi_p=psi_p, r_a=r_a, r_p=r_p,
            proj_a=proj_a, proj_p=proj_p, eta_a=eta_a, eta_p=eta_p,
            amplitude=amplitude, phase=phase,
        )

    def _is_valid(self, d) -> bool:
        if not _all_positive_finite(d["m"], d["beta"], d["sigma"], d["amplitude"]):
            return False
        if not (np.isfinite(d["sigma_m"]) and d["sigma_m"] > 0 and np.isfinite(d["sigma_b"]) and d["sigma_b"] > 0):
            return False
        if self._with_radius:
            if d["proj_a"] is None or d["proj_p"] is None:
                return False
        if not np.all(np.isfinite(d["phase"])) or np.any(d["phase"] > HOURS_PER_CYCLE):
            return False
        if np.any(np.abs(d["alpha"]) >= 1.0):
            return False
        return True

    def decode(self, z) -> ParameterState:
        """Map an unconstrained vector to its constrained view."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ValueError(f"expected unconstrained vector of length {self.dim}")
        d = self._raw_decode(z)
        view = ConstrainedView(
            m=d["m"], alpha=d["alpha"], beta=d["beta"], sigma=d["sigma"],
            amplitude=d["amplitude"], phase=d["phase"],
            lmu_m=float(d["lmu_m"]), lmu_beta=float(d["lmu_b"]),
            sigma_m=float(d["sigma_m"]), sigma_beta=float(d["sigma_b"]),
            psi_a=d["psi_a"].copy(), psi_phi=d["psi_p"].copy(),
            eta_a=d["eta_a"].copy(), eta_phi=d["eta_p"].copy(),
            r_a=d["r_a"], r_phi=d["r_p"],
        )
        n = self.n_subjects
        # log |d(constrained)/d(unconstrained)|, accumulated in log space
        log_jac = (
            float(np.sum(d["lm"])) + n * z[self._i_lsm]
            + float(np.sum(d["lb"])) + n * z[self._i_lsb]
            + float(np.sum(np.log1p(-d["alpha"] ** 2) - math.log(2.0)))
            + float(np.sum(z[self._s_ls]))
            + z[self._i_lsm] + z[self._i_lsb]
        )
        if self._with_radius:
            log_jac += z[self._i_lra] + z[self._i_lrp]
        return ParameterState(unconstrained=z.copy(), view=view, log_jacobian=float(log_jac))

    def encode(self, view: ConstrainedView) -> np.ndarray:
        """Inverse of :meth:`decode` on valid constrained views."""
        z = np.empty(self.dim)
        z[self._s_zm] = (np.log(view.m) - view.lmu_m) / view.sigma_m
        z[self._s_ua] = 2.0 * np.arctanh(view.alpha)
        z[self._s_zb] = (np.log(view.beta) - view.lmu_beta) / view.sigma_beta
        z[self._s_ls] = np.log(view.sigma)
        z[self._i_lmu_m] = view.lmu_m
        z[self._i_lmu_b] = view.lmu_beta
        z[self._i_lsm] = math.log(view.sigma_m)
        z[self._i_lsb] = math.log(view.sigma_beta)
        z[self._s_psi_a] = view.psi_a
        z[self._s_psi_p] = view.psi_phi
        if self._with_radius:
            z[self._i_lra] = math.log(view.r_a)
            z[self._i_lrp] = math.log(view.r_phi)
        return z

    # -- densities ------------------------------------------------------

    def _z_of(self, state) -> np.ndarray:
        if isinstance(state, ParameterState):
            return state.unconstrained
        return np.asarray(state, dtype=float)

    def log_likelihood(self, state) -> float:
        """Gaussian log likelihood; -inf when any phase leaves [0, 24]."""
        z = self._z_of(state)
        d = self._raw_decode(z)
        if not self._is_valid(d):
            return -np.inf
        return self._log_likelihood_from(d)

    def _log_likelihood_from(self, d) -> float:
        lay = self.layout
        cos_term, _ = _cos_shifted(lay, d["phase"][lay.sidx])
        arg = _transition_argument(cos_term, d["beta"][lay.sidx], d["alpha"][lay.sidx], self.spec.cosine_form)
        mu = d["m"][lay.sidx] + d["amplitude"][lay.sidx] * expit(arg)
        resid = lay.y - mu
        rss = lay.segment_sum(resid * resid)
        sig2 = d["sigma"] ** 2
        terms = -(lay.counts * (HALF_LOG_2PI + np.log(d["sigma"])) + rss / (2.0 * sig2))
        return math.fsum(terms.tolist())

    def log_prior(self, state) -> float:
        """Prior log density over unconstrained coordinates (Jacobians included)."""
        z = self._z_of(state)
        d = self._raw_decode(z)
        if not self._is_valid(d):
            return -np.inf
        return self._log_prior_from(z, d)

    def _log_prior_from(self, z, d) -> float:
        hp = self.spec.hyper
        n, q = self.n_subjects, self.n_covariates
        zm = z[self._s_zm]
        zb = z[self._s_zb]
        ua = z[self._s_ua]
        total = -0.5 * float(zm @ zm) - n * HALF_LOG_2PI
        total += -0.5 * float(zb @ zb) - n * HALF_LOG_2PI
        # scaled Beta on alpha folded with the tanh Jacobian:
        # a*log expit(u) + b*log expit(-u) - log B(a, b)
        log_b = -np.logaddexp(0.0, -ua)
        log_1mb = -np.logaddexp(0.0, ua)
        total += float(np.sum(hp.beta_prior_a * log_b + hp.beta_prior_b * log_1mb)) - n * self._betaln_ab
        # half-Cauchy residual scales plus the exp Jacobian
        u_sig = d["sigma"] / hp.gamma_sigma
        total += float(np.sum(math.log(2.0 / (math.pi * hp.gamma_sigma)) - np.log1p(u_sig**2) + z[self._s_ls]))
        total += -0.5 * math.log(2.0 * math.pi * hp.lmu_m_var) - (d["lmu_m"] - hp.lmu_m_loc) ** 2 / (2.0 * hp.lmu_m_var)
        total += -0.5 * math.log(2.0 * math.pi * hp.lmu_beta_var) - (d["lmu_b"] - hp.lmu_beta_loc) ** 2 / (2.0 * hp.lmu_beta_var)
        for sig_val, lsig, scale in (
            (d["sigma_m"], z[self._i_lsm], hp.sigma_m_scale),
            (d["sigma_b"], z[self._i_lsb], hp.sigma_beta_scale),
        ):
            total += math.log(2.0 / (math.pi * scale)) - math.log1p((sig_val / scale) ** 2) + lsig
        total += -q * math.log(2.0 * hp.tau_a) - float(np.abs(d["psi_a"]).sum()) / hp.tau_a
        total += -q * math.log(2.0 * hp.tau_phi) - float(np.abs(d["psi_p"]).sum()) / hp.tau_phi
        if self._with_radius:
            total += math.log(hp.lambda_a) - hp.lambda_a * d["r_a"] + z[self._i_lra]
            total += math.log(hp.lambda_phi) - hp.lambda_phi * d["r_p"] + z[self._i_lrp]
        return total

    def log_posterior(self, state) -> float:
        logp, _ = self._evaluate(self._z_of(state), want_grad=False)
        return logp

    def grad_log_posterior(self, state) -> np.ndarray:
        logp, grad = self._evaluate(self._z_of(state), want_grad=True)
        if grad is None:
            raise ValueError("gradient undefined: state rejected or non-finite")
        return grad

    def logp_and_grad(self, z):
        return self._evaluate(np.asarray(z, dtype=float), want_grad=True)

    def _evaluate(self, z, want_grad: bool):
        d = self._raw_decode(z)
        if not self._is_valid(d):
            return -np.inf, None
        hp = self.spec.hyper
        lay = self.layout
        n, q = self.n_subjects, self.n_covariates
        sidx = lay.sidx

        m, beta, alpha, sigma = d["m"], d["beta"], d["alpha"], d["sigma"]
        amplitude, phase = d["amplitude"], d["phase"]
        cos_term, sin_term = _cos_shifted(lay, phase[sidx])
        beta_rep = beta[sidx]
        alpha_rep = alpha[sidx]
        arg = _transition_argument(cos_term, beta_rep, alpha_rep, self.spec.cosine_form)
        p = expit(arg)
        mu = m[sidx] + amplitude[sidx] * p
        resid = lay.y - mu
        rss = lay.segment_sum(resid * resid)
        sig2 = sigma**2
        ll_terms = -(lay.counts * (HALF_LOG_2PI + z[self._s_ls]) + rss / (2.0 * sig2))
        logp = math.fsum(ll_terms.tolist()) + self._log_prior_from(z, d)
        if not np.isfinite(logp):
            return -np.inf, None
        if not want_grad:
            return logp, None

        grad = np.empty(self.dim)
        w = resid / sig2[sidx]
        d_m = lay.segment_sum(w)
        d_amp = lay.segment_sum(w * p)
        gate = w * amplitude[sidx] * p * (1.0 - p)
        if self.spec.cosine_form == "as_printed":
            d_beta = lay.segment_sum(gate * cos_term)
            d_alpha = -lay.segment_sum(gate)
        else:
            d_beta = lay.segment_sum(gate * (cos_term - alpha_rep))
            d_alpha = -beta * lay.segment_sum(gate)
        d_phase = lay.segment_sum(gate * beta_rep * (ANGULAR_RATE * sin_term))
        d_ls_lik = -lay.counts + rss / sig2

        sigma_m, sigma_b = d["sigma_m"], d["sigma_b"]
        zm, zb, ua = z[self._s_zm], z[self._s_zb], z[self._s_ua]
        b_half = expit(ua)
        grad[self._s_zm] = d_m * m * sigma_m - zm
        grad[self._s_ua] = d_alpha * (2.0 * b_half * (1.0 - b_half)) + (
            hp.beta_prior_a * (1.0 - b_half) - hp.beta_prior_b * b_half
        )
        grad[self._s_zb] = d_beta * beta * sigma_b - zb
        u_sig = sig2 / hp.gamma_sigma**2
        grad[self._s_ls] = d_ls_lik + 1.0 - 2.0 * u_sig / (1.0 + u_sig)
        grad[self._i_lmu_m] = float(np.sum(d_m * m)) - (d["lmu_m"] - hp.lmu_m_loc) / hp.lmu_m_var
        grad[self._i_lmu_b] = float(np.sum(d_beta * beta)) - (d["lmu_b"] - hp.lmu_beta_loc) / hp.lmu_beta_var
        u_sm = (sigma_m / hp.sigma_m_scale) ** 2
        grad[self._i_lsm] = float(np.sum(d_m * m * zm)) * sigma_m + 1.0 - 2.0 * u_sm / (1.0 + u_sm)
        u_sb = (sigma_b / hp.sigma_beta_scale) ** 2
        grad[self._i_lsb] = float(np.sum(d_beta * beta * zb)) * sigma_b + 1.0 - 2.0 * u_sb / (1.0 + u_sb)

        cot_a = self._Xv.T @ (d_amp * amplitude)
        cot_p = self._Xv.T @ (d_phase * phase)
        if self._with_radius:
            dpsi_a, dra = l1ball.project_vjp(d["psi_a"], d["r_a"], d["proj_a"], cot_a)
            dpsi_p, drp = l1ball.project_vjp(d["psi_p"], d["r_p"], d["proj_p"], cot_p)
            grad[self._s_psi_a] = dpsi_a - np.sign(d["psi_a"]) / hp.tau_a
            grad[self._s_psi_p] = dpsi_p - np.sign(d["psi_p"]) / hp.tau_phi
            grad[self._i_lra] = dra * d["r_a"] + 1.0 - hp.lambda_a * d["r_a"]
            grad[self._i_lrp] = drp * d["r_p"] + 1.0 - hp.lambda_phi * d["r_p"]
        else:
            grad[self._s_psi_a] = cot_a - np.sign(d["psi_a"]) / hp.tau_a
            grad[self._s_psi_p] = cot_p - np.sign(d["psi_p"]) / hp.tau_phi
        if not np.all(np.isfinite(grad)):
            return logp, None
        return logp, grad

    # -- reporting -------------------------------------------------------

    @property
    def param_names(self) -> list[str]:
        n, q = self.n_subjects, self.n_covariates
        names = []
        for base in ("m", "alpha", "beta", "sigma"):
            names += [f"{base}[{i + 1}]" for i in range(n)]
        names += ["lmu_m", "lmu_beta", "sigma_m", "sigma_beta"]
        names += [f"psi_a[{l + 1}]" for l in range(q)]
        names += [f"psi_phi[{l + 1}]" for l in range(q)]
        if self._with_radius:
            names += ["r_a", "r_phi"]
        names += [f"eta_a[{l + 1}]" for l in range(q)]
        names += [f"eta_phi[{l + 1}]" for l in range(q)]
        names += [f"a[{i + 1}]" for i in range(n)]
        names += [f"phi[{i + 1}]" for i in range(n)]
        return names

    def constrain_draws(self, draws: np.ndarray) -> np.ndarray:
        """Decode a (n_draws, dim) matrix to the named constrained columns."""
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        out = np.empty((draws.shape[0], len(self.param_names)))
        for row, z in enumerate(draws):
            d = self._raw_decode(z)
            cols = [d["m"], d["alpha"], d["beta"], d["sigma"],
                    [d["lmu_m"], d["lmu_b"], d["sigma_m"], d["sigma_b"]],
                    d["psi_a"], d["psi_p"]]
            if self._with_radius:
                cols.append([d["r_a"], d["r_p"]])
            cols += [d["eta_a"], d["eta_p"], d["amplitude"], d["phase"]]
            out[row] = np.concatenate([np.atleast_1d(c) for c in cols])
        return out

    def posterior_predictive_draw(self, state, subject: int, horizon=None,
                                  rng: np.random.Generator | None = None,
                                  truncate_at_zero: bool = False) -> np.ndarray:
        """Simulate one predictive series for ``subject`` over ``horizon`` epochs."""
        if rng is None:
            rng = np.random.default_rng()
        z = self._z_of(state)
        d = self._raw_decode(z)
        if not self._is_valid(d):
            raise ValueError("cannot draw predictives from an invalid state")
        if horizon is None:
            t = self.data[subject].t_index
        else:
            t = np.arange(1, int(horizon) + 1)
        params = SubjectParams(
            m=float(d["m"][subject]), alpha=float(d["alpha"][subject]),
            beta=float(d["beta"][subject]), sigma=float(d["sigma"][subject]),
            amplitude=float(d["amplitude"][subject]), phase=float(d["phase"][subject]),
        )
        mu = circadian_mean(t, params, self.spec)
        draw = mu + params.sigma * rng.standard_normal(t.size)
        if truncate_at_zero:
            draw = np.maximum(draw, 0.0)
        return draw

    # -- initialization ----------------------------------------------------

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        """Data-driven start: empirical minima, ranges, and peak hours."""
        hp = self.spec.hyper
        m0 = np.array([max(np.quantile(s.y, 0.05), 1e-3) for s in self.data])
        lm0 = np.log(m0)
        lmu_m0 = float(np.mean(lm0))
        sigma_m0 = float(max(np.std(lm0), 0.05))
        sigma_b0 = 0.1
        z = np.zeros(self.dim)
        z[self._s_zm] = (lm0 - lmu_m0) / sigma_m0
        z[self._s_ua] = 0.0
        z[self._s_zb] = 0.0
        z[self._s_ls] = np.log(np.maximum(
            [0.5 * np.std(s.y) for s in self.data], 1e-2))
        z[self._i_lmu_m] = lmu_m0
        z[self._i_lmu_b] = 1.0
        z[self._i_lsm] = math.log(sigma_m0)
        z[self._i_lsb] = math.log(sigma_b0)
        psi_a0 = 0.1 * rng.standard_normal(self.n_covariates)
        psi_p0 = 0.1 * rng.standard_normal(self.n_covariates)
        ic = self.X.intercept_column
        if ic is not None:
            ranges = [np.quantile(s.y, 0.975) - np.quantile(s.y, 0.025) for s in self.data]
            psi_a0[ic] = math.log(max(float(np.median(ranges)), 0.1))
            psi_p0[ic] = math.log(float(np.clip(np.median(_peak_hours(self.data, self.spec.R)), 0.5, 23.5)))
        z[self._s_psi_a] = psi_a0
        z[self._s_psi_p] = psi_p0
        if self._with_radius:
            z[self._i_lra] = math.log(1.0 / hp.lambda_a)
            z[self._i_lrp] = math.log(1.0 / hp.lambda_phi)
        return z


def _peak_hours(data: list[SubjectSeries], R: int) -> np.ndarray:
    """Empirical peak hour of each subject's 24h-binned mean profile."""
    peaks = np.empty(len(data))
    for i, s in enumerate(data):
        hour_of_day = (s.t_index / R) % HOURS_PER_CYCLE
        bins = np.floor(hour_of_day).astype(int) % 24
        sums = np.bincount(bins, weights=s.y, minlength=24)
        counts = np.maximum(np.bincount(bins, minlength=24), 1)
        peaks[i] = np.argmax(sums / counts) + 0.5
    return peaks


class SingleSubjectModel:
    """Per-subject cosinor / extended-cosinor baselines, jointly sampled.

    Subjects are a priori independent with fixed diffuse priors, so the
    posterior factorizes and the cohort marginal likelihood is the sum of
    the per-subject ones.
    """

    def __init__(self, data: list[SubjectSeries], X, spec: ModelSpec):
        if spec.variant not in ("cosinor", "rar"):
            raise ValueError("SingleSubjectModel handles cosinor and rar only")
        self.data = list(data)
        self.spec = spec
        self.layout = _ObservationLayout(data, spec.R)
        self.n_subjects = len(data)
        self._has_shape = spec.variant == "rar"
        n = self.n_subjects
        self._s_lm = slice(0, n)
        self._s_la = slice(n, 2 * n)
        self._s_uphi = slice(2 * n, 3 * n)
        if self._has_shape:
            self._s_ua = slice(3 * n, 4 * n)
            self._s_lb = slice(4 * n, 5 * n)
            self._s_ls = slice(5 * n, 6 * n)
            self.dim = 6 * n
        else:
            self._s_ua = None
            self._s_lb = None
            self._s_ls = slice(3 * n, 4 * n)
            self.dim = 4 * n
        self.dim_per_subject = 6 if self._has_shape else 4

    def _raw_decode(self, z):
        with np.errstate(over="ignore", invalid="ignore"):
            m = np.exp(z[self._s_lm])
            amplitude = np.exp(z[self._s_la])
            phase = HOURS_PER_CYCLE * expit(z[self._s_uphi])
            sigma = np.exp(z[self._s_ls])
            if self._has_shape:
                alpha = np.tanh(0.5 * z[self._s_ua])
                beta = np.exp(z[self._s_lb])
            else:
                alpha = np.zeros(self.n_subjects)
                beta = np.zeros(self.n_subjects)
        return dict(m=m, amplitude=amplitude, phase=phase, sigma=sigma, alpha=alpha, beta=beta)

    def _is_valid(self, d) -> bool:
        ok = _all_positive_finite(d["m"], d["amplitude"], d["sigma"])
        if ok and self._has_shape:
            ok = np.all(np.isfinite(d["alpha"])) and np.all(np.abs(d["alpha"]) < 1.0) and _all_positive_finite(d["beta"])
        return bool(ok and np.all(np.isfinite(d["phase"])))

    def _mu_terms(self, d):
        lay = self.layout
        sidx = lay.sidx
        cos_term, sin_term = _cos_shifted(lay, d["phase"][sidx])
        if self._has_shape:
            arg = _transition_argument(cos_term, d["beta"][sidx], d["alpha"][sidx], self.spec.cosine_form)
            p = expit(arg)
            mu = d["m"][sidx] + d["amplitude"][sidx] * p
        else:
            p = None
            mu = d["m"][sidx] + 0.5 * d["amplitude"][sidx] * (1.0 + cos_term)
        return mu, cos_term, sin_term, p

    def log_likelihood(self, state) -> float:
        z = self._z_of(state)
        d = self._raw_decode(z)
        if not self._is_valid(d):
            return -np.inf
        lay = self.layout
        mu, _, _, _ = self._mu_terms(d)
        resid = lay.y - mu
        rss = lay.segment_sum(resid * resid)
        terms = -(lay.counts * (HALF_LOG_2PI + np.log(d["sigma"])) + rss / (2.0 * d["sigma"] ** 2))
        return math.fsum(terms.tolist())

    def _z_of(self, state):
        if isinstance(state, ParameterState):
            return state.unconstrained
        return np.asarray(state, dtype=float)

    def _log_prior_from(self, z, d) -> float:
        hp = self.spec.hyper
        lm, la = z[self._s_lm], z[self._s_la]
        total = float(np.sum(-0.5 * math.log(2.0 * math.pi * 10.0) - lm**2 / 20.0))
        total += float(np.sum(-0.5 * math.log(2.0 * math.pi * 10.0) - la**2 / 20.0))
        # uniform phase on [0, 24] folded with the scaled-logit Jacobian
        uphi = z[self._s_uphi]
        total += float(np.sum(-np.logaddexp(0.0, -uphi) - np.logaddexp(0.0, uphi)))
        u_sig = (d["sigma"] / hp.gamma_sigma) ** 2
        total += float(np.sum(math.log(2.0 / (math.pi * hp.gamma_sigma)) - np.log1p(u_sig) + z[self._s_ls]))
        if self._has_shape:
            ua = z[self._s_ua]
            total += float(np.sum(-np.logaddexp(0.0, -ua) - np.logaddexp(0.0, ua)))
            lb = z[self._s_lb]
            total += float(np.sum(-0.5 * math.log(2.0 * math.pi * 3.0) - (lb - 5.0) ** 2 / 6.0))
        return total

    def log_prior(self, state) -> float:
        z = self._z_of(state)
        d = self._raw_decode(z)
        if not self._is_valid(d):
            return -np.inf
        return self._log_prior_from(z, d)

    def log_posterior(self, state) -> float:
        logp, _ = self._evaluate(self._z_of(state), want_grad=False)
        return logp

    def grad_log_posterior(self, state) -> np.ndarray:
        logp, grad = self._evaluate(self._z_of(state), want_grad=True)
        if grad is None:
            raise ValueError("gradient undefined: state rejected or non-finite")
        return grad

    def logp_and_grad(self, z):
        return self._evaluate(np.asarray(z, dtype=float), want_grad=True)

    def _evaluate(self, z, want_grad: bool):
        d = self._raw_decode(z)
        if not self._is_valid(d):
            return -np.inf, None
        lay = self.layout
        sidx = lay.sidx
        mu, cos_term, sin_term, p = self._mu_terms(d)
        resid = lay.y - mu
        rss = lay.segment_sum(resid * resid)
        sig2 = d["sigma"] ** 2
        ll_terms = -(lay.counts * (HALF_LOG_2PI + z[self._s_ls]) + rss / (2.0 * sig2))
        logp = math.fsum(ll_terms.tolist()) + self._log_prior_from(z, d)
        if not np.isfinite(logp):
            return -np.inf, None
        if not want_grad:
            return logp, None

        hp = self.spec.hyper
        grad = np.empty(self.dim)
        w = resid / sig2[sidx]
        amplitude, phase = d["amplitude"], d["phase"]
        if self._has_shape:
            beta, alpha = d["beta"], d["alpha"]
            d_m = lay.segment_sum(w)
            d_amp = lay.segment_sum(w * p)
            gate = w * amplitude[sidx] * p * (1.0 - p)
            if self.spec.cosine_form == "as_printed":
                d_beta = lay.segment_sum(gate * cos_term)
                d_alpha = -lay.segment_sum(gate)
            else:
                d_beta = lay.segment_sum(gate * (cos_term - alpha[sidx]))
                d_alpha = -beta * lay.segment_sum(gate)
            d_phase = lay.segment_sum(gate * beta[sidx] * (ANGULAR_RATE * sin_term))
        else:
            d_m = lay.segment_sum(w)
            d_amp = 0.5 * lay.segment_sum(w * (1.0 + cos_term))
            half_amp = 0.5 * amplitude
            d_phase = half_amp * lay.segment_sum(w * (ANGULAR_RATE * sin_term))
        grad[self._s_lm] = d_m * d["m"] - z[self._s_lm] / 10.0
        grad[self._s_la] = d_amp * amplitude - z[self._s_la] / 10.0
        b_phi = expit(z[self._s_uphi])
        grad[self._s_uphi] = d_phase * (HOURS_PER_CYCLE * b_phi * (1.0 - b_phi)) + (1.0 - 2.0 * b_phi)
        u_sig = sig2 / hp.gamma_sigma**2
        grad[self._s_ls] = (-lay.counts + rss / sig2) + 1.0 - 2.0 * u_sig / (1.0 + u_sig)
        if self._has_shape:
            b_a = expit(z[self._s_ua])
            grad[self._s_ua] = d_alpha * (2.0 * b_a * (1.0 - b_a)) + (1.0 - 2.0 * b_a)
            grad[self._s_lb] = d_beta * d["beta"] - (z[self._s_lb] - 5.0) / 3.0
        if not np.all(np.isfinite(grad)):
            return logp, None
        return logp, grad

    @property
    def param_names(self) -> list[str]:
        n = self.n_subjects
        names = [f"m[{i + 1}]" for i in range(n)]
        names += [f"a[{i + 1}]" for i in range(n)]
        names += [f"phi[{i + 1}]" for i in range(n)]
        if self._has_shape:
            names += [f"alpha[{i + 1}]" for i in range(n)]
            names += [f"beta[{i + 1}]" for i in range(n)]
        names += [f"sigma[{i + 1}]" for i in range(n)]
        if not self._has_shape:
            names += [f"M[{i + 1}]" for i in range(n)]
            names += [f"A[{i + 1}]" for i in range(n)]
        return names

    def constrain_draws(self, draws: np.ndarray) -> np.ndarray:
        draws = np.atleast_2d(np.asarray(draws, dtype=float))
        out = np.empty((draws.shape[0], len(self.param_names)))
        for row, z in enumerate(draws):
            d = self._raw_decode(z)
            cols = [d["m"], d["amplitude"], d["phase"]]
            if self._has_shape:
                cols += [d["alpha"], d["beta"]]
            cols.append(d["sigma"])
            if not self._has_shape:
                cols += [d["m"] + 0.5 * d["amplitude"], 0.5 * d["amplitude"]]
            out[row] = np.concatenate(cols)
        return out

    def decode(self, z) -> ParameterState:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ValueError(f"expected unconstrained vector of length {self.dim}")
        d = self._raw_decode(z)
        view = ConstrainedView(
            m=d["m"], alpha=d["alpha"], beta=d["beta"], sigma=d["sigma"],
            amplitude=d["amplitude"], phase=d["phase"],
        )
        b_phi = expit(z[self._s_uphi])
        log_jac = (
            float(np.sum(z[self._s_lm])) + float(np.sum(z[self._s_la]))
            + float(np.sum(np.log(HOURS_PER_CYCLE * b_phi * (1.0 - b_phi))))
            + float(np.sum(z[self._s_ls]))
        )
        if self._has_shape:
            log_jac += float(np.sum(np.log1p(-d["alpha"] ** 2) - math.log(2.0)))
            log_jac += float(np.sum(z[self._s_lb]))
        return ParameterState(unconstrained=z.copy(), view=view, log_jacobian=log_jac)

    def encode(self, view: ConstrainedView) -> np.ndarray:
        z = np.empty(self.dim)
        z[self._s_lm] = np.log(view.m)
        z[self._s_la] = np.log(view.amplitude)
        frac = np.asarray(view.phase) / HOURS_PER_CYCLE
        z[self._s_uphi] = np.log(frac) - np.log1p(-frac)
        z[self._s_ls] = np.log(view.sigma)
        if self._has_shape:
            z[self._s_ua] = 2.0 * np.arctanh(view.alpha)
            z[self._s_lb] = np.log(view.beta)
        return z

    def subject_indices(self, i: int) -> np.ndarray:
        """Unconstrained coordinate indices belonging to subject ``i``."""
        n = self.n_subjects
        idx = [i, n + i, 2 * n + i]
        if self._has_shape:
            idx += [3 * n + i, 4 * n + i, 5 * n + i]
        else:
            idx += [3 * n + i]
        return np.array(idx, dtype=int)

    def subject_log_posterior(self, i: int):
        """Log posterior of subject ``i`` alone as a closure over its coords."""
        sub = SingleSubjectModel([self.data[i]], None, self.spec)

        def logp(z_i):
            return sub.log_posterior(z_i)

        return logp

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        z = np.zeros(self.dim)
        m0 = np.array([max(np.quantile(s.y, 0.05), 1e-3) for s in self.data])
        ranges = np.array([max(np.quantile(s.y, 0.975) - np.quantile(s.y, 0.025), 0.1) for s in self.data])
        peaks = np.clip(_peak_hours(self.data, self.spec.R), 0.5, 23.5)
        z[self._s_lm] = np.log(m0)
        z[self._s_la] = np.log(ranges)
        frac = peaks / HOURS_PER_CYCLE
        z[self._s_uphi] = np.log(frac) - np.log1p(-frac)
        z[self._s_ls] = np.log(np.maximum([0.5 * np.std(s.y) for s in self.data], 1e-2))
        if self._has_shape:
            z[self._s_ua] = 0.0
            z[self._s_lb] = 1.0
        return z

    def posterior_predictive_draw(self, state, subject: int, horizon=None,
                                  rng: np.random.Generator | None = None,
                                  truncate_at_zero: bool = False) -> np.ndarray:
        if rng is None:
            rng = np.random.default_rng()
        z = self._z_of(state)
        d = self._raw_decode(z)
        if not self._is_valid(d):
            raise ValueError("cannot draw predictives from an invalid state")
        t = self.data[subject].t_index if horizon is None else np.arange(1, int(horizon) + 1)
        if self._has_shape:
            params = SubjectParams(
                m=float(d["m"][subject]), alpha=float(d["alpha"][subject]),
                beta=float(d["beta"][subject]), sigma=float(d["sigma"][subject]),
                amplitude=float(d["amplitude"][subject]), phase=float(d["phase"][subject]),
            )
            mu = circadian_mean(t, params, self.spec)
        else:
            params = SubjectParams(
                m=float(d["m"][subject]), alpha=0.0, beta=1.0,
                sigma=float(d["sigma"][subject]),
                amplitude=float(d["amplitude"][subject]), phase=float(d["phase"][subject]),
            )
            mu = circadian_mean(t, params, self.spec)
        draw = mu + float(d["sigma"][subject]) * rng.standard_normal(np.size(t))
        if truncate_at_zero:
            draw = np.maximum(draw, 0.0)
        return draw


def build_model(data: list[SubjectSeries], X: CovariateMatrix | None, spec: ModelSpec):
    """Instantiate the model class matching ``spec.variant``."""
    if spec.uses_covariates:
        return CALCModel(data, X, spec)
    return SingleSubjectModel(data, X, spec)


# Functional wrappers mirroring the operation-style surface; the model
# classes above are the efficient entry points.

def log_likelihood(state, data, X, spec) -> float:
    return build_model(data, X, spec).log_likelihood(state)


def log_prior(state, data, X, spec) -> float:
    return build_model(data, X, spec).log_prior(state)


def log_posterior(state, data, X, spec) -> float:
    return build_model(data, X, spec).log_posterior(state)


def grad_log_posterior(state, data, X, spec) -> np.ndarray:
    return build_model(data, X, spec).grad_log_posterior(state)


def posterior_predictive_draw(state, subject, horizon, rng, data, X, spec,
                              truncate_at_zero: bool = False) -> np.ndarray:
    model = build_model(data, X, spec)
    return model.posterior_predictive_draw(state, subject, horizon, rng, truncate_at_zero)
