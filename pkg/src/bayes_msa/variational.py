"""Mean-field Gaussian posteriors and the divergences used to train them.

Each weight tensor carries a posterior N(mu, softplus(rho)^2) and a zero-mean
Gaussian prior with scale ``prior_sigma``. Three divergence routes are
available:

* closed-form KL(q || p) between diagonal Gaussians,
* a Monte-Carlo estimate of the scale-invariant alpha-beta divergence, with
  every expectation taken under q and evaluated in log space,
* the collapsed coefficient form, kept for verification only: its scalar
  coefficient is identically zero (see :func:`ab_coefficient`).
"""

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .errors import DomainError, InvalidValue, ShapeError

LOG_2PI = math.log(2.0 * math.pi)


class DivergenceKind(str, enum.Enum):
    KL_CLOSED_FORM = "kl_closed_form"
    AB_MONTE_CARLO = "ab_monte_carlo"
    AB_COLLAPSED_EQ21 = "ab_collapsed_eq21"
    NONE = "none"


@dataclass(frozen=True)
class DivergenceSpec:
    kind: DivergenceKind = DivergenceKind.AB_MONTE_CARLO
    alpha: float = 1.0
    beta: float = 2.0
    mc_samples: int = 16

    def __post_init__(self):
        object.__setattr__(self, "kind", DivergenceKind(self.kind))
        if self.mc_samples < 1:
            raise InvalidValue("mc_samples must be >= 1")
        if self.kind in (DivergenceKind.AB_MONTE_CARLO, DivergenceKind.AB_COLLAPSED_EQ21):
            _check_ab(self.alpha, self.beta)

    def to_dict(self):
        return {"kind": self.kind.value, "alpha": self.alpha, "beta": self.beta,
                "mc_samples": self.mc_samples}


def _check_ab(alpha, beta):
    if alpha == 0 or beta == 0 or alpha + beta == 0:
        raise DomainError(f"alpha-beta divergence undefined for alpha={alpha}, beta={beta}")


class VariationalGaussian:
    """Posterior N(mu, softplus(rho)^2) over one weight tensor, prior N(0, prior_sigma^2)."""

    def __init__(self, mu, rho, prior_sigma=1.0):
        self.mu = mu if isinstance(mu, ad.Node) else ad.leaf(mu)
        self.rho = rho if isinstance(rho, ad.Node) else ad.leaf(rho)
        if self.mu.shape != self.rho.shape:
            raise ShapeError(f"mu {self.mu.shape} and rho {self.rho.shape} differ")
        if not prior_sigma > 0:
            raise InvalidValue("prior_sigma must be positive")
        self.prior_sigma = float(prior_sigma)

    @property
    def shape(self):
        return self.mu.shape

    @property
    def size(self):
        return self.mu.value.size

    def sigma(self):
        return ad.softplus(self.rho)

    def parameters(self):
        return [self.mu, self.rho]

    def __repr__(self):
        return f"VariationalGaussian(shape={self.shape}, prior_sigma={self.prior_sigma})"


def sample_weights(vg, noise):
    """Reparameterised draw mu + softplus(rho) * noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != vg.shape:
        raise ShapeError(f"noise shape {noise.shape} != posterior shape {vg.shape}")
    return ad.add(vg.mu, ad.mul(vg.sigma(), ad.constant(noise)))


def kl_gaussian(vg):
    """Closed-form KL(N(mu, sigma_p^2) || N(0, sigma_i^2)) summed over entries."""
    sp = vg.sigma()
    s2 = vg.prior_sigma ** 2
    per_entry = ad.add(
        ad.scale(ad.log(sp), -1.0),
        ad.scale(ad.add(ad.square(sp), ad.square(vg.mu)), 1.0 / (2.0 * s2)),
    )
    const = vg.size * (math.log(vg.prior_sigma) - 0.5)
    return ad.add(ad.sum(per_entry), ad.constant(const))


def ab_coefficient(alpha, beta):
    """The bracketed scalar of the collapsed alpha-beta expression.

    (a+b-1)/(b(a+b)) - (a+b-1)/(ab) - 1/(a(a+b)) + 1/a, evaluated literally.
    """
    _check_ab(alpha, beta)
    a, b = float(alpha), float(beta)
    return ((a + b - 1) / (b * (a + b)) - (a + b - 1) / (a * b)
            - 1 / (a * (a + b)) + 1 / a)


def ab_coefficient_exact(alpha, beta):
    """Same coefficient in exact rational arithmetic (oracle for the float path)."""
    a, b = Fraction(alpha), Fraction(beta)
    if a == 0 or b == 0 or a + b == 0:
        raise DomainError("alpha-beta coefficient undefined")
    return (a + b - 1) / (b * (a + b)) - (a + b - 1) / (a * b) - 1 / (a * (a + b)) + 1 / a


# -- log densities on stacked draws -------------------------------------------


def _flat(node):
    r, c = node.shape
    return node if r == 1 else ad.reshape(node, (1, r * c))


def _stacked_draws(vg, noise):
    """Draws as an S x n node (rows are MC draws, columns flattened entries)."""
    mu, sigma = _flat(vg.mu), _flat(vg.sigma())
    return ad.add(mu, ad.mul(sigma, ad.constant(noise))), mu, sigma


def log_q_entries(draws, mu, sigma):
    """Elementwise log N(draws; mu, sigma^2) for stacked draws."""
    z2 = ad.square(ad.div(ad.sub(draws, mu), sigma))
    return ad.add(ad.scale(ad.add(z2, ad.constant(LOG_2PI)), -0.5), ad.negate(ad.log(sigma)))


def gaussian_prior_log_joint(prior_sigmas):
    """A per-entry log_joint equal to the zero-mean Gaussian prior of each tensor."""

    def log_joint(draws):
        out = []
        for d, s in zip(draws, prior_sigmas):
            const = -0.5 * LOG_2PI - math.log(s)
            out.append(ad.add(ad.scale(ad.square(d), -0.5 / (s * s)), ad.constant(const)))
        return out

    return log_joint


def _log_mean_exp(node, samples):
    return ad.sub(ad.logsumexp(node, axis=0), ad.constant(math.log(samples)))


class _FlatPosterior:
    """All tensors of a set viewed as one 1 x n posterior (shares the leaves)."""

    def __init__(self, vg_set):
        self.vg_set = vg_set
        self.size = int(np.sum([vg.size for vg in vg_set]))

    def mu_sigma(self):
        mus = [_flat(vg.mu) for vg in self.vg_set]
        rhos = [_flat(vg.rho) for vg in self.vg_set]
        mu = mus[0] if len(mus) == 1 else ad.concat_cols(*mus)
        rho = rhos[0] if len(rhos) == 1 else ad.concat_cols(*rhos)
        return mu, ad.softplus(rho)


def ab_divergence_prior(vg_set, spec, rng):
    """AB divergence to each tensor's own zero-mean Gaussian prior.

    Same estimator as :func:`ab_divergence_mc` with the prior as target,
    evaluated on one flattened vector so the graph stays small.
    """
    _check_ab(spec.alpha, spec.beta)
    a, b = float(spec.alpha), float(spec.beta)
    S = spec.mc_samples
    flat = _FlatPosterior(vg_set)
    mu, sigma = flat.mu_sigma()
    prior_sd = np.concatenate([np.full(vg.size, vg.prior_sigma) for vg in vg_set])[None]
    prior_const = ad.constant(-0.5 * LOG_2PI - np.log(prior_sd))
    inv_var = ad.constant(-0.5 / prior_sd ** 2)
    total = None
    for which, w in enumerate(_ab_weights(a, b)):
        draws = ad.add(mu, ad.mul(sigma, ad.constant(rng.standard_normal((S, flat.size)))))
        lq = log_q_entries(draws, mu, sigma)
        if which == 1:
            integrand = ad.scale(lq, a + b - 1)
        else:
            lp = ad.add(ad.mul(ad.square(draws), inv_var), prior_const)
            if which == 0:
                integrand = ad.sub(ad.scale(lp, a + b), lq)
            else:
                integrand = ad.add(ad.scale(lq, a - 1), ad.scale(lp, b))
        term = ad.scale(ad.sum(_log_mean_exp(integrand, S)), w)
        total = term if total is None else ad.add(total, term)
    return total


def _ab_terms(vg_set, log_joint, spec, rng):
    """Per-term log-expectations and the raw log-integrands used for them.

    Each of the three expectations gets its own independent batch of
    ``spec.mc_samples`` draws. If ``log_joint`` returns one S x n node per
    tensor the estimate factorises over weight entries (valid for any
    target that factorises the same way); if it returns a single S x 1 node
    it is treated as the joint over all entries.
    """
    if spec.mc_samples < 1:
        raise InvalidValue("mc_samples must be >= 1")
    _check_ab(spec.alpha, spec.beta)
    a, b = float(spec.alpha), float(spec.beta)
    S = spec.mc_samples
    terms, raws = [], []
    for which in range(3):
        draws, log_q = [], []
        for vg in vg_set:
            noise = rng.standard_normal((S, vg.size))
            d, mu, sigma = _stacked_draws(vg, noise)
            draws.append(d)
            log_q.append(log_q_entries(d, mu, sigma))
        log_p = log_joint(draws)
        if isinstance(log_p, ad.Node):
            if log_p.shape != (S, 1):
                raise ShapeError(f"joint log_joint must be {S}x1, got {log_p.shape}")
            log_p = [log_p]
            log_q = [ad.sum(ad.concat_cols(*log_q), axis=1)]
        elif len(log_p) != len(log_q):
            raise ShapeError("log_joint returned the wrong number of tensors")
        term = None
        raw_parts = []
        for lp, lq in zip(log_p, log_q):
            if lp.shape != lq.shape:
                raise ShapeError(f"log_joint entry shape {lp.shape} != {lq.shape}")
            if not np.all(np.isfinite(lp.value)):
                raise InvalidValue("log_joint returned non-finite values")
            if which == 0:
                integrand = ad.sub(ad.scale(lp, a + b), lq)
            elif which == 1:
                integrand = ad.scale(lq, a + b - 1)
            else:
                integrand = ad.add(ad.scale(lq, a - 1), ad.scale(lp, b))
            raw_parts.append(integrand.value)
            t = ad.sum(_log_mean_exp(integrand, S))
            term = t if term is None else ad.add(term, t)
        terms.append(term)
        raws.append(raw_parts)
    return terms, raws


def _ab_weights(a, b):
    return 1.0 / (a * (a + b)), 1.0 / (b * (a + b)), -1.0 / (a * b)


def ab_divergence_mc(vg_set, log_joint, spec, rng):
    """Monte-Carlo scale-invariant alpha-beta divergence D(q || p) as a node."""
    return ab_divergence_mc_with_se(vg_set, log_joint, spec, rng)[0]


def _log_mean_se(raw):
    # delta-method standard error of log(mean(exp(raw))) along axis 0
    w = np.exp(raw - raw.max(axis=0, keepdims=True))
    S = raw.shape[0]
    m = w.mean(axis=0)
    sd = w.std(axis=0, ddof=1) if S > 1 else np.full_like(m, np.inf)
    return sd / (math.sqrt(S) * m)


def ab_divergence_mc_with_se(vg_set, log_joint, spec, rng):
    """Estimate plus its Monte-Carlo standard error (delta method, independent terms)."""
    terms, raws = _ab_terms(vg_set, log_joint, spec, rng)
    weights = _ab_weights(float(spec.alpha), float(spec.beta))
    total = None
    var = 0.0
    for w, t, raw_parts in zip(weights, terms, raws):
        scaled = ad.scale(t, w)
        total = scaled if total is None else ad.add(total, scaled)
        for raw in raw_parts:
            var += w * w * float(np.sum(_log_mean_se(raw) ** 2))
    return total, math.sqrt(var)


def expected_log_q(vg_set, samples, rng):
    """MC estimate of E_q[log q(theta)] summed over all tensors."""
    total = None
    for vg in vg_set:
        noise = rng.standard_normal((samples, vg.size))
        d, mu, sigma = _stacked_draws(vg, noise)
        t = ad.scale(ad.sum(log_q_entries(d, mu, sigma)), 1.0 / samples)
        total = t if total is None else ad.add(total, t)
    return total


def divergence(vg_set, log_joint, spec, rng):
    """Dispatch on ``spec.kind``; returns a scalar node."""
    kind = spec.kind
    if kind is DivergenceKind.NONE or not vg_set:
        return ad.constant(0.0)
    if kind is DivergenceKind.KL_CLOSED_FORM:
        total = kl_gaussian(vg_set[0])
        for vg in vg_set[1:]:
            total = ad.add(total, kl_gaussian(vg))
        return total
    if kind is DivergenceKind.AB_MONTE_CARLO:
        if log_joint is None:
            return ab_divergence_prior(vg_set, spec, rng)
        return ab_divergence_mc(vg_set, log_joint, spec, rng)
    if kind is DivergenceKind.AB_COLLAPSED_EQ21:
        coef = ab_coefficient(spec.alpha, spec.beta)
        return ad.scale(expected_log_q(vg_set, spec.mc_samples, rng), coef)
    raise InvalidValue(f"unknown divergence kind {kind!r}")
