"""Stochastic EM estimation of the latent-effect claim model.

Each iteration runs ``mh_steps`` Metropolis-Hastings sweeps over the buyer,
seller and policy effects (in that order), keeps the draws listed in
``retain``, imputes reporting gaps and claim indicators for those draws, and
updates the three parameter blocks: logistic ``(alpha, beta)``, Gamma
``(gamma, nu)`` then ``psi``, and ``rho``.  The estimate is the average of the
final ``avg_window`` iterates.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, sparse, special
from scipy.sparse import linalg as sparse_linalg

from .errors import InitializationError, NumericalError, ValidationError
from .likelihood import (ETA_BOUND, ConnectionData, LatentState, ParameterSet, gap_cdf, gap_density,
                         gap_sf, inv_logit, log_inv_logit, obs_loglik_terms)

log = logging.getLogger(__name__)

# stream tags for counter-based RNG keys
MH_STREAM, GAP_STREAM, INIT_STREAM = 1, 2, 3
FAMILIES = ("buyer", "seller", "policy")


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator identified by ``(seed, key)``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 200
    mh_steps: int = 20
    retain: tuple = (15, 20)
    lam: float = 1e-5
    seed: int = 0
    irls_tol: float = 1e-8
    irls_max_iter: int = 50
    avg_window: int = 10
    workers: int = 1
    early_stop: float | None = None
    random_effects: bool = True

    def __post_init__(self):
        object.__setattr__(self, "retain", tuple(sorted(set(int(m) for m in self.retain))))

    def validate(self) -> "FitConfig":
        if self.iterations < 1 or self.mh_steps < 1:
            raise ValidationError("iterations and mh_steps must be positive")
        if not self.retain or min(self.retain) < 1 or max(self.retain) > self.mh_steps:
            raise ValidationError(f"retain must be a non-empty subset of 1..{self.mh_steps}")
        if not self.lam >= 0:
            raise ValidationError("lambda must be non-negative")
        if self.avg_window < 1:
            raise ValidationError("avg_window must be positive")
        if self.workers < 1:
            raise ValidationError("workers must be positive")
        return self

    def echo(self) -> dict:
        # worker count is deliberately left out: it never affects results
        d = asdict(self)
        d.pop("workers")
        d["retain"] = list(self.retain)
        return d


# -- parallel elementwise evaluation -------------------------------------------

class _Pool:
    """Chunked map over connections; results never depend on the worker count."""

    MIN_CHUNK = 4096

    def __init__(self, workers: int):
        self.workers = int(workers)
        self._ex = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def terms(self, z, t, c, eta_p, eta_mu, psi) -> np.ndarray:
        n = len(z)
        if self._ex is None or n < 2 * self.MIN_CHUNK:
            return obs_loglik_terms(z, t, c, eta_p, eta_mu, psi)
        edges = np.linspace(0, n, min(self.workers, n // self.MIN_CHUNK) + 1).astype(int)
        parts = self._ex.map(lambda ab: obs_loglik_terms(z[ab[0]:ab[1]], t[ab[0]:ab[1]], c[ab[0]:ab[1]],
                                                         eta_p[ab[0]:ab[1]], eta_mu[ab[0]:ab[1]], psi),
                             zip(edges[:-1], edges[1:]))
        return np.concatenate(list(parts))

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()


# -- Metropolis-Hastings over latent effects -------------------------------------

class LatentSampler:
    """Random-walk MH over the three latent families with cached likelihood terms.

    The likelihood footprints of two different buyers (sellers, policies) are
    disjoint, so a whole family is updated at once: one proposal per unit,
    one evaluation of every connection's term, per-unit sums by ``bincount``.
    """

    def __init__(self, data: ConnectionData, params: ParameterSet, latents: LatentState,
                 workers: int = 1, pool: _Pool | None = None):
        self.data = data
        self.latents = latents.copy()
        self.pool = pool or _Pool(workers)
        self.index = (data.buyer, data.seller, data.policy)
        self.sizes = (data.n_entities, data.n_entities, data.n_policies)
        self.accepted = np.zeros(3)
        self.proposed = np.zeros(3)
        self.nonfinite = 0
        self.set_params(params)

    def values(self, family: int) -> np.ndarray:
        return (self.latents.B, self.latents.S, self.latents.P)[family]

    def set_params(self, params: ParameterSet) -> None:
        self.params = params
        d = self.data
        self.L = d.latent_columns(self.latents)
        self.eta_p = d.X @ params.alpha + self.L @ params.beta
        self.eta_mu = d.X @ params.gamma + self.L @ params.nu
        self.ll = self.pool.terms(d.z_obs, d.t_obs, d.window, self.eta_p, self.eta_mu, params.psi)

    def set_latents(self, latents: LatentState) -> None:
        self.latents = latents.copy()
        self.set_params(self.params)

    def _log_prior_delta(self, family: int, cur: np.ndarray, prop: np.ndarray) -> np.ndarray:
        if family == 2:
            return -0.5 * (prop * prop - cur * cur)
        rho = self.params.rho
        other = self.latents.S if family == 0 else self.latents.B
        return -(prop * prop - cur * cur - 2.0 * rho * other * (prop - cur)) / (2.0 * (1.0 - rho * rho))

    def update_family(self, family: int, step: np.ndarray, log_u: np.ndarray) -> np.ndarray:
        """One MH update of every unit in ``family``; returns the acceptance mask."""
        th, d = self.params, self.data
        cur = self.values(family)
        prop = cur + step
        log_ratio = self._log_prior_delta(family, cur, prop)
        b, v = th.beta[family], th.nu[family]
        idx = self.index[family]
        if (b != 0.0 or v != 0.0) and d.n:
            delta = step[idx]
            eta_p = self.eta_p + b * delta
            eta_mu = self.eta_mu + v * delta
            with np.errstate(invalid="ignore", over="ignore"):
                ll = self.pool.terms(d.z_obs, d.t_obs, d.window, eta_p, eta_mu, th.psi)
                log_ratio = log_ratio + np.bincount(idx, ll - self.ll, minlength=len(cur))
        finite = np.isfinite(log_ratio)
        self.nonfinite += int(np.sum(~finite))
        acc = finite & (log_u < np.where(finite, log_ratio, -np.inf))
        cur[acc] = prop[acc]
        if (b != 0.0 or v != 0.0) and d.n:
            rows = acc[idx]
            self.eta_p[rows] = eta_p[rows]
            self.eta_mu[rows] = eta_mu[rows]
            self.ll[rows] = ll[rows]
        self.L[:, family] = cur[idx]
        self.accepted[family] += acc.sum()
        self.proposed[family] += len(cur)
        return acc

    def sweep(self, steps, log_us) -> None:
        for family in range(3):
            self.update_family(family, steps[family], log_us[family])

    def run(self, rng_for_family, n_sweeps: int, keep=None, callback=None) -> None:
        """Run ``n_sweeps`` sweeps with noise from ``rng_for_family(family)``.

        Noise is drawn in blocks of whole sweeps so each unit's proposal
        depends only on the stream and its position.  ``callback(m, self)``
        is called after sweep ``m`` (1-based) when ``m`` is in ``keep``.
        """
        rngs = [rng_for_family(f) for f in range(3)]
        block = max(1, min(n_sweeps, 2_000_000 // max(1, max(self.sizes))))
        done = 0
        while done < n_sweeps:
            nb = min(block, n_sweeps - done)
            steps = [r.standard_normal((nb, n)) for r, n in zip(rngs, self.sizes)]
            log_us = [np.log(r.random((nb, n))) if n else np.zeros((nb, 0)) for r, n in zip(rngs, self.sizes)]
            for s in range(nb):
                self.sweep([a[s] for a in steps], [a[s] for a in log_us])
                m = done + s + 1
                if callback is not None and (keep is None or m in keep):
                    callback(m, self)
            done += nb

    def acceptance_rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.proposed > 0, self.accepted / np.maximum(self.proposed, 1), np.nan)

    def reset_counters(self) -> None:
        self.accepted[:] = 0
        self.proposed[:] = 0


# -- data augmentation -----------------------------------------------------------

def sample_left_truncated_gamma(rng: np.random.Generator, mu, psi: float, c) -> np.ndarray:
    """Draw ``T ~ Gamma(mean mu, dispersion psi)`` conditioned on ``T > c``.

    Inverse-CDF on the upper tail; where the tail mass is below 1e-12 an
    exponential-envelope rejection sampler takes over.
    """
    mu = np.asarray(mu, dtype=float)
    c = np.broadcast_to(np.asarray(c, dtype=float), mu.shape)
    a = 1.0 / psi
    scale = psi * mu
    y0 = c / scale
    sf = special.gammaincc(a, y0)
    u = rng.random(mu.shape)
    out = np.empty(mu.shape)
    deep = sf < 1e-12
    ok = ~deep
    out[ok] = scale[ok] * special.gammainccinv(a, u[ok] * sf[ok])
    if np.any(deep):
        out[deep] = scale[deep] * _tail_rejection(rng, a, y0[deep])
    # inverse-CDF round-off can land a hair below the cut-off
    return np.maximum(out, np.nextafter(c, np.inf))


def _tail_rejection(rng, a: float, y0: np.ndarray) -> np.ndarray:
    rate = 1.0 - max(a - 1.0, 0.0) / y0
    rate = np.where(rate > 0, rate, 1e-3)
    out = np.empty_like(y0)
    todo = np.arange(len(y0))
    while todo.size:
        y = y0[todo] + rng.exponential(1.0, todo.size) / rate[todo]
        log_acc = (a - 1.0) * np.log(y / y0[todo]) - (1.0 - rate[todo]) * (y - y0[todo])
        acc = np.log(rng.random(todo.size)) < log_acc
        out[todo[acc]] = y[acc]
        todo = todo[~acc]
    return out


def unreported_ratio(p, sf):
    """``p (1 - F) / (p (1 - F) + 1 - p)``: claim probability given no report within the window."""
    num = p * sf
    return num / (num + (1.0 - p))


def e_quantities(p, sf, z_obs) -> np.ndarray:
    """Posterior claim indicator given the observed outcome."""
    return np.where(np.asarray(z_obs) == 1, 1.0, unreported_ratio(p, sf))


def augment_gaps(rng, mu, psi, window, z_obs, t_obs) -> np.ndarray:
    """Reported rows keep their gap; unreported rows get a gap beyond their window."""
    t = np.array(t_obs, dtype=float)
    open_ = np.asarray(z_obs) != 1
    if np.any(open_):
        t[open_] = sample_left_truncated_gamma(rng, np.asarray(mu)[open_], psi, np.asarray(window)[open_])
    return t


@dataclass
class RetainedDraw:
    L: np.ndarray     # (n, 3) latent value used by each connection
    Z: np.ndarray     # E-quantity per connection
    T: np.ndarray     # gap: observed or imputed


# -- M-step ---------------------------------------------------------------------

def _solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Newton direction ``-H^{-1} g`` with one ridge-boosted retry."""
    for ridge in (0.0, 1e-8):
        A = -H + ridge * np.eye(len(g))
        try:
            step = np.linalg.solve(A, g)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(step)):
            return step
    raise NumericalError("singular Hessian in M-step")


class _Block:
    """Penalised objective over ``(fixed, latent)`` coefficients for a set of retained draws."""

    def __init__(self, X, draws, lam: float, n_conn: int):
        self.X = X
        self.draws = draws
        self.M = len(draws)
        self.p = X.shape[1]
        self.pen = lam * n_conn

    def penalty(self, theta):
        b = theta[self.p:]
        return self.pen * float(b @ b)

    def etas(self, theta):
        base = self.X @ theta[:self.p]
        return [base + d.L @ theta[self.p:] for d in self.draws]

    def gram(self, weights, resid):
        X, M, p = self.X, self.M, self.p
        wsum = np.add.reduce(weights) / M
        H = np.empty((p + 3, p + 3))
        H[:p, :p] = (X * wsum[:, None]).T @ X
        xl = np.zeros((p, 3))
        ll = np.zeros((3, 3))
        g = np.zeros(p + 3)
        g[:p] = X.T @ (np.add.reduce(resid) / M)
        for d, w, r in zip(self.draws, weights, resid):
            wl = d.L * w[:, None]
            xl += X.T @ wl
            ll += d.L.T @ wl
            g[p:] += d.L.T @ r
        H[:p, p:] = xl / M
        H[p:, :p] = H[:p, p:].T
        H[p:, p:] = ll / M
        g[p:] /= M
        return g, -H

    def penalised(self, theta, g, H):
        g = g.copy()
        H = H.copy()
        g[self.p:] -= 2.0 * self.pen * theta[self.p:]
        H[self.p:, self.p:] -= 2.0 * self.pen * np.eye(3)
        return g, H


class LogisticBlock(_Block):
    def value(self, theta) -> float:
        tot = 0.0
        for d, eta in zip(self.draws, self.etas(theta)):
            lp, lq = log_inv_logit(eta)
            tot += float(np.sum(d.Z * lp + (1.0 - d.Z) * lq))
        return tot / self.M - self.penalty(theta)

    def grad_hess(self, theta):
        ps = [inv_logit(e) for e in self.etas(theta)]
        g, H = self.gram([p * (1 - p) for p in ps], [d.Z - p for d, p in zip(self.draws, ps)])
        return self.penalised(theta, g, H)


class GammaBlock(_Block):
    """``psi``-scaled Gamma objective in ``(gamma, nu)`` for fixed ``psi``."""

    def __init__(self, X, draws, lam, n_conn, psi):
        super().__init__(X, draws, lam, n_conn)
        self.psi = psi

    def value(self, theta) -> float:
        tot = 0.0
        for d, eta in zip(self.draws, self.etas(theta)):
            eta = np.clip(eta, -ETA_BOUND, ETA_BOUND)
            tot += float(np.sum(d.Z * (-eta - d.T * np.exp(-eta))))
        return tot / (self.M * self.psi) - self.penalty(theta)

    def grad_hess(self, theta):
        ratios = [d.T * np.exp(-np.clip(e, -ETA_BOUND, ETA_BOUND)) for d, e in zip(self.draws, self.etas(theta))]
        g, H = self.gram([d.Z * r / self.psi for d, r in zip(self.draws, ratios)],
                         [d.Z * (r - 1.0) / self.psi for d, r in zip(self.draws, ratios)])
        return self.penalised(theta, g, H)


def newton_ascent(block, theta0, tol=1e-8, max_iter=50, cap: float | None = None):
    """Maximise ``block.value`` by Newton steps with up to 20 step halvings.

    A step is only taken if it does not decrease the objective, so the
    returned point is never worse than ``theta0``.  With ``cap`` set,
    iteration stops once a coefficient exceeds ``cap`` in magnitude and the
    coefficients are clipped (separation guard).
    """
    theta = np.array(theta0, dtype=float)
    f = block.value(theta)
    if not np.isfinite(f):
        raise NumericalError("non-finite objective at the M-step starting point")
    converged = False
    capped = False
    for _ in range(max_iter):
        g, H = block.grad_hess(theta)
        step = _solve(H, g)
        s = 1.0
        for _halving in range(21):
            cand = theta + s * step
            fc = block.value(cand)
            if np.isfinite(fc) and fc >= f:
                break
            s *= 0.5
        else:
            converged = True
            break
        moved = float(np.max(np.abs(cand - theta)))
        theta, f = cand, fc
        if cap is not None and np.max(np.abs(theta)) > cap:
            theta = np.clip(theta, -cap, cap)
            capped = True
            break
        if moved < tol:
            converged = True
            break
    return theta, {"converged": converged, "capped": capped, "value": block.value(theta)}


def mstep_logistic(X, draws, theta0, lam, tol=1e-8, max_iter=50, n_conn=None):
    block = LogisticBlock(X, draws, lam, len(X) if n_conn is None else n_conn)
    return newton_ascent(block, theta0, tol, max_iter)


def mstep_gamma(X, draws, theta0, psi, lam, tol=1e-8, max_iter=50, n_conn=None):
    if sum(float(np.sum(d.Z)) for d in draws) == 0.0:
        log.warning("all claim weights are zero; Gamma coefficients left unchanged")
        return np.array(theta0, dtype=float), {"converged": True, "capped": False, "value": 0.0}
    block = GammaBlock(X, draws, lam, len(X) if n_conn is None else n_conn, psi)
    return newton_ascent(block, theta0, tol, max_iter)


@dataclass
class GapStats:
    """Weighted sufficient statistics of the Gamma objective as a function of ``psi``."""

    W: float
    s_eta: float
    s_logt: float
    s_ratio: float

    @classmethod
    def collect(cls, X, draws, coef) -> "GapStats":
        p = X.shape[1]
        base = X @ coef[:p]
        W = s_eta = s_logt = s_ratio = 0.0
        for d in draws:
            eta = np.clip(base + d.L @ coef[p:], -ETA_BOUND, ETA_BOUND)
            w = d.Z
            hit = w > 0
            W += float(np.sum(w))
            s_eta += float(np.sum(w * eta))
            s_logt += float(np.sum(w[hit] * np.log(d.T[hit])))
            s_ratio += float(np.sum(w[hit] * d.T[hit] * np.exp(-eta[hit])))
        M = len(draws)
        return cls(W / M, s_eta / M, s_logt / M, s_ratio / M)

    def q(self, psi) -> float:
        a = 1.0 / psi
        return (-self.W * special.gammaln(a) - a * self.W * math.log(psi) - a * self.s_eta
                + (a - 1.0) * self.s_logt - a * self.s_ratio)


def maximize_psi(stats: GapStats, psi0: float, tol: float = 1e-8) -> float:
    """Golden-section search on ``log psi`` with a bracket grown from ``psi0 * {1/8, 8}``."""
    if stats.W <= 0:
        log.warning("no claim weight; dispersion left unchanged")
        return float(psi0)
    f = lambda x: -stats.q(math.exp(x))
    lo, hi = math.log(psi0) - math.log(8.0), math.log(psi0) + math.log(8.0)
    for _ in range(12):
        grid = np.linspace(lo, hi, 17)
        vals = np.array([f(x) for x in grid])
        if not np.all(np.isfinite(vals)):
            vals = np.where(np.isfinite(vals), vals, np.inf)
        i = int(np.argmin(vals))
        if 0 < i < len(grid) - 1:
            res = optimize.minimize_scalar(f, bracket=(grid[i - 1], grid[i], grid[i + 1]),
                                           method="golden", tol=tol)
            return float(math.exp(res.x))
        width = hi - lo
        lo, hi = (lo - width, hi) if i == 0 else (lo, hi + width)
    raise NumericalError("could not bracket the dispersion maximum")


# -- correlation update -----------------------------------------------------------

def rho_cubic(rho, s_bb, s_ss, s_bs):
    return -rho ** 3 + s_bs * rho ** 2 + (1.0 - s_bb - s_ss) * rho + s_bs


def q_rho(rho, s_bb, s_ss, s_bs) -> float:
    """Per-entity expected bivariate-normal log-density, up to a constant."""
    one_m = 1.0 - rho * rho
    return -0.5 * math.log(one_m) - (s_bb - 2.0 * rho * s_bs + s_ss) / (2.0 * one_m)


def _cubic_real_roots(s_bb, s_ss, s_bs) -> list[float]:
    # rho^3 + a rho^2 + b rho + c = 0 after dividing by -1
    a, b, c = -s_bs, s_bb + s_ss - 1.0, -s_bs
    p = b - a * a / 3.0
    q = 2.0 * a ** 3 / 27.0 - a * b / 3.0 + c
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    shift = -a / 3.0
    if disc > 0:
        sq = math.sqrt(disc)
        roots = [math.copysign(abs(-q / 2 + sq) ** (1 / 3), -q / 2 + sq)
                 + math.copysign(abs(-q / 2 - sq) ** (1 / 3), -q / 2 - sq) + shift]
    elif p == 0.0:
        roots = [shift]
    else:
        r = 2.0 * math.sqrt(-p / 3.0)
        arg = max(-1.0, min(1.0, 3.0 * q / (p * r)))
        phi = math.acos(arg) / 3.0
        roots = [r * math.cos(phi - 2.0 * math.pi * k / 3.0) + shift for k in range(3)]
    polished = []
    for x in roots:
        for _ in range(50):
            fx = rho_cubic(x, s_bb, s_ss, s_bs)
            d = -3.0 * x * x + 2.0 * s_bs * x + (1.0 - s_bb - s_ss)
            if d == 0.0:
                break
            nx = x - fx / d
            if nx == x:
                break
            x = nx
        polished.append(x)
    return polished


def solve_rho_cubic(s_bb: float, s_ss: float, s_bs: float) -> float:
    """Root in (-1, 1) of the correlation score equation that maximises the objective.

    When ``s_bb + s_ss == 2`` the cubic factors as
    ``(s_bs - rho)(rho^2 + 1)`` and the root is ``s_bs`` exactly.
    """
    if s_bb + s_ss == 2.0:
        roots = [s_bs]
    else:
        roots = _cubic_real_roots(s_bb, s_ss, s_bs)
    inside = [r for r in roots if -1.0 < r < 1.0]
    if not inside:
        emp = s_bs / math.sqrt(s_bb * s_ss) if s_bb > 0 and s_ss > 0 else 0.0
        emp = max(-0.999, min(0.999, emp))
        log.warning("no admissible root for rho; using the empirical correlation %.4f", emp)
        return emp
    return max(inside, key=lambda r: q_rho(r, s_bb, s_ss, s_bs))


def latent_moments(samples) -> tuple[float, float, float]:
    """Average ``B^2``, ``S^2`` and ``B S`` over retained draws and entities."""
    bb = np.mean([np.mean(B * B) for B, _ in samples])
    ss = np.mean([np.mean(S * S) for _, S in samples])
    bs = np.mean([np.mean(B * S) for B, S in samples])
    return float(bb), float(ss), float(bs)


def mstep_rho(samples) -> float:
    if not samples or len(samples[0][0]) == 0:
        raise ValidationError("rho update needs at least one retained draw over at least one entity")
    return solve_rho_cubic(*latent_moments(samples))


# -- fitting -----------------------------------------------------------------------

@dataclass
class SemTrace:
    names: list
    params: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)
    q: list = field(default_factory=list)

    def __len__(self):
        return len(self.params)

    def to_frame(self, smooth: int = 10):
        import pandas as pd

        df = pd.DataFrame(np.array(self.params), columns=self.names)
        df.insert(0, "iteration", np.arange(1, len(df) + 1))
        acc = np.array(self.acceptance).reshape(-1, 3)
        for j, fam in enumerate(FAMILIES):
            df[f"accept_{fam}"] = acc[:, j]
        df["q"] = self.q
        df["q_smoothed"] = df["q"].rolling(smooth, min_periods=1).mean()
        return df


@dataclass
class FitResult:
    params: ParameterSet
    se: ParameterSet
    columns: tuple
    scaling: dict
    weight_scheme: str
    config: FitConfig
    trace: SemTrace
    latents: LatentState
    entity_ids: np.ndarray
    policy_ids: np.ndarray
    converged: bool = True

    @property
    def random_effects(self) -> bool:
        return self.config.random_effects

    def coefficient_table(self):
        import pandas as pd

        rows = []
        th, se = self.params, self.se
        for comp, est, err, lat, lat_se in (("logistic", th.alpha, se.alpha, th.beta, se.beta),
                                            ("gamma", th.gamma, se.gamma, th.nu, se.nu)):
            rows += [(comp, n, e, s) for n, e, s in zip(self.columns, est, err)]
            rows += [(comp, f"latent_{f}", e, s) for f, e, s in zip(FAMILIES, lat, lat_se)]
        rows += [("gamma", "psi", th.psi, se.psi), ("latent", "rho", th.rho, se.rho)]
        return pd.DataFrame(rows, columns=["component", "name", "estimate", "std_error"])


def parameter_names(columns) -> list[str]:
    return ([f"alpha[{c}]" for c in columns] + [f"beta[{f}]" for f in FAMILIES]
            + [f"gamma[{c}]" for c in columns] + [f"nu[{f}]" for f in FAMILIES] + ["psi", "rho"])


def _glm_fit_logistic(X, z, tol, max_iter):
    n = len(z)
    draws = [RetainedDraw(L=np.zeros((n, 3)), Z=np.asarray(z, dtype=float), T=np.ones(n))]
    block = LogisticBlock(X, draws, 1.0, 1)  # penalty pins the (absent) latent block at 0
    theta0 = np.zeros(X.shape[1] + 3)
    zbar = np.clip(np.mean(z), 1e-6, 1 - 1e-6)
    theta0[0] = math.log(zbar / (1 - zbar))
    theta, info = newton_ascent(block, theta0, tol, max_iter, cap=ETA_BOUND)
    if info["capped"]:
        log.warning("logistic initialisation diverges (separable data); coefficients capped at %g", ETA_BOUND)
    return theta[:X.shape[1]]


def _glm_fit_gamma(X, t, tol, max_iter):
    n = len(t)
    draws = [RetainedDraw(L=np.zeros((n, 3)), Z=np.ones(n), T=np.asarray(t, dtype=float))]
    theta = np.zeros(X.shape[1] + 3)
    theta[0] = math.log(np.mean(t))
    psi = 1.0
    for _ in range(3):
        theta, _ = newton_ascent(GammaBlock(X, draws, 1.0, 1, psi), theta, tol, max_iter)
        psi = maximize_psi(GapStats.collect(X, draws, theta), psi)
    return theta[:X.shape[1]], psi


def initialize(data: ConnectionData, seed: int = 0, tol: float = 1e-8, max_iter: int = 50,
               random_effects: bool = True) -> tuple[ParameterSet, LatentState]:
    """Starting values from fixed-effect GLMs that ignore truncation; zero latents."""
    rep = data.z_obs == 1
    if not np.any(rep):
        raise InitializationError("no reported claims: the Gamma initialisation is undefined")
    alpha = _glm_fit_logistic(data.X, data.z_obs, tol, max_iter)
    gamma, psi = _glm_fit_gamma(data.X[rep], data.t_obs[rep], tol, max_iter)
    rng = stream(seed, INIT_STREAM)
    if random_effects:
        beta = rng.uniform(0.0, 0.01, 3)
        beta[0] = max(beta[0], 1e-6)
        nu = rng.uniform(0.0, 0.01, 3)
        rho = float(rng.uniform(-0.01, 0.01))
    else:
        beta, nu, rho = np.zeros(3), np.zeros(3), 0.0
    params = ParameterSet(alpha, beta, gamma, nu, psi, rho)
    return params, LatentState.zeros(data.n_entities, data.n_policies)


def canonicalize(params: ParameterSet, latents: LatentState) -> tuple[ParameterSet, LatentState]:
    """Make every ``beta`` component non-negative by joint sign flips (likelihood-invariant)."""
    latents = latents.copy()
    for family in range(3):
        if params.beta[family] < 0:
            params = params.flip(family)
            arr = (latents.B, latents.S, latents.P)[family]
            arr *= -1
    return params, latents


def _retained_draw(data, params, L, rng) -> RetainedDraw:
    eta_p = data.X @ params.alpha + L @ params.beta
    eta_mu = np.clip(data.X @ params.gamma + L @ params.nu, -ETA_BOUND, ETA_BOUND)
    mu = np.exp(eta_mu)
    p = inv_logit(eta_p)
    sf = gap_sf(data.window, mu, params.psi)
    Z = e_quantities(p, sf, data.z_obs)
    T = augment_gaps(rng, mu, params.psi, data.window, data.z_obs, data.t_obs)
    return RetainedDraw(L=L.copy(), Z=Z, T=T)


def _mstep(data, params, draws, samples, config: FitConfig) -> tuple[ParameterSet, float]:
    p = data.X.shape[1]
    th_l, info_l = mstep_logistic(data.X, draws, np.concatenate([params.alpha, params.beta]),
                                  config.lam, config.irls_tol, config.irls_max_iter)
    th_g, info_g = mstep_gamma(data.X, draws, np.concatenate([params.gamma, params.nu]), params.psi,
                               config.lam, config.irls_tol, config.irls_max_iter)
    stats = GapStats.collect(data.X, draws, th_g)
    psi = maximize_psi(stats, params.psi)
    if config.random_effects:
        rho = mstep_rho(samples)
        s = latent_moments(samples)
        q3 = data.n_entities * q_rho(rho, *s)
    else:
        th_l[p:] = 0.0
        th_g[p:] = 0.0
        rho, q3 = 0.0, 0.0
    new = ParameterSet(th_l[:p], th_l[p:], th_g[:p], th_g[p:], psi, rho)
    q = info_l["value"] + stats.q(psi) + q3
    if not np.isfinite(q):
        raise NumericalError("non-finite Q value")
    return new, q


def eta_derivatives(z_obs, t_obs, window, eta_p, eta_mu, psi):
    """First and second derivatives of each observed-data term in ``(eta_p, eta_mu)``.

    Returns ``(g_p, g_m, h_pp, h_pm, h_mm)``.  Reported claims separate into
    a logistic and a Gamma part; an open connection's term ``log(1 - p F(c))``
    couples the two predictors.
    """
    p = inv_logit(eta_p)
    mu = np.exp(np.clip(eta_mu, -ETA_BOUND, ETA_BOUND))
    dp = p * (1.0 - p)
    rep = z_obs == 1
    g_p = np.where(rep, 1.0 - p, 0.0)
    h_pp = -dp.copy()
    r = np.where(rep, t_obs, 0.0) / mu
    g_m = np.where(rep, (r - 1.0) / psi, 0.0)
    h_mm = np.where(rep, -r / psi, 0.0)
    h_pm = np.zeros_like(p)
    op = ~rep
    if np.any(op):
        c, m, po, dpo = window[op], mu[op], p[op], dp[op]
        F = gap_cdf(c, m, psi)
        F_m = -c * gap_density(c, m, psi)
        F_mm = F_m * (c / (psi * m) - 1.0 / psi)
        surv = 1.0 - po * F
        g_p[op] = -F * dpo / surv
        h_pp[op] = -F * dpo * (1.0 - 2.0 * po) / surv - (F * dpo / surv) ** 2
        g_m[op] = -po * F_m / surv
        h_mm[op] = -po * F_mm / surv - (po * F_m / surv) ** 2
        h_pm[op] = -F_m * dpo / surv ** 2
    return g_p, g_m, h_pp, h_pm, h_mm


def eta_fisher(window, eta_p, eta_mu, psi):
    """Expected information of one connection's observed outcome in ``(eta_p, eta_mu)``.

    The outcome is either "open" or a claim reported at ``t <= c``; the
    reported-claim moments use ``int_0^c t^k f(t) dt`` in incomplete-gamma
    form.  Returns ``(i_pp, i_pm, i_mm)``; every 2x2 block is positive
    semidefinite.
    """
    p = inv_logit(eta_p)
    mu = np.exp(np.clip(eta_mu, -ETA_BOUND, ETA_BOUND))
    a = 1.0 / psi
    x = window / (psi * mu)
    F = special.gammainc(a, x)
    m1 = special.gammainc(a + 1.0, x)            # E[t 1{t <= c}] / mu
    m2 = (1.0 + psi) * special.gammainc(a + 2.0, x)  # E[t^2 1{t <= c}] / mu^2
    q = 1.0 - p * F
    F_m = -window * gap_density(window, mu, psi)
    with np.errstate(divide="ignore", invalid="ignore"):
        g_p = np.where(q > 0, -F * p * (1.0 - p) / q, 0.0)
        g_m = np.where(q > 0, -p * F_m / q, 0.0)
    i_pp = q * g_p * g_p + p * (1.0 - p) ** 2 * F
    i_pm = q * g_p * g_m + p * (1.0 - p) * (m1 - F) / psi
    i_mm = q * g_m * g_m + p * (m2 - 2.0 * m1 + F) / psi ** 2
    return i_pp, i_pm, i_mm


class _LatentLayout:
    """Stacked latent vector ``u = (B, S, P)`` and the sparse maps from ``u`` to each connection."""

    def __init__(self, data: ConnectionData):
        self.data = data
        ne, npol = data.n_entities, data.n_policies
        self.offsets = (0, ne, 2 * ne)
        self.size = 2 * ne + npol
        n = data.n
        rows = np.arange(n)
        self.cols = [data.buyer, ne + data.seller, 2 * ne + data.policy]
        self.E = [sparse.csr_matrix((np.ones(n), (rows, c)), shape=(n, self.size)) for c in self.cols]

    def stack(self, latents: LatentState) -> np.ndarray:
        return np.concatenate([latents.B, latents.S, latents.P])

    def split(self, u: np.ndarray) -> LatentState:
        ne = self.data.n_entities
        return LatentState(u[:ne].copy(), u[ne:2 * ne].copy(), u[2 * ne:].copy())

    def prior_precision(self, rho: float) -> sparse.csr_matrix:
        ne, npol = self.data.n_entities, self.data.n_policies
        k = 1.0 / (1.0 - rho * rho)
        diag = np.concatenate([np.full(2 * ne, k), np.ones(npol)])
        off = np.full(ne, -rho * k)
        i = np.arange(ne)
        return sparse.csr_matrix((np.concatenate([diag, off, off]),
                                  (np.concatenate([np.arange(self.size), i, ne + i]),
                                   np.concatenate([np.arange(self.size), ne + i, i]))),
                                 shape=(self.size, self.size))

    def jacobians(self, est: ParameterSet):
        Jp = sum(est.beta[f] * self.E[f] for f in range(3))
        Jm = sum(est.nu[f] * self.E[f] for f in range(3))
        return sparse.csr_matrix(Jp), sparse.csr_matrix(Jm)


def _solve_spd(A, B, rtol: float = 1e-10) -> np.ndarray:
    """Solve ``A X = B`` for sparse symmetric positive definite ``A`` by Jacobi-preconditioned CG."""
    A = sparse.csr_matrix(A)
    M = sparse.diags(1.0 / A.diagonal())
    B = np.asarray(B, dtype=float)
    cols = B.reshape(len(B), -1)
    out = np.empty_like(cols)
    for k in range(cols.shape[1]):
        x, info = sparse_linalg.cg(A, cols[:, k], M=M, rtol=rtol, maxiter=20 * A.shape[0])
        if info != 0:
            raise NumericalError("conjugate gradients did not converge on the latent system")
        out[:, k] = x
    return out.reshape(B.shape)


def latent_mode(data: ConnectionData, est: ParameterSet, start: LatentState | None = None,
                tol: float = 1e-8, max_iter: int = 500) -> LatentState:
    """Posterior mode of the latent effects at fixed parameters.

    Open connections make the log-posterior locally non-concave, so this is
    a trust-region Newton-CG search using sparse Hessian-vector products.
    """
    lay = _LatentLayout(data)
    Q = lay.prior_precision(est.rho)
    Jp, Jm = lay.jacobians(est)
    base_p, base_mu = data.X @ est.alpha, data.X @ est.gamma
    memo: dict = {}

    def at(u):
        if memo.get("u") is None or not np.array_equal(memo["u"], u):
            eta_p, eta_mu = base_p + Jp @ u, base_mu + Jm @ u
            ll = obs_loglik_terms(data.z_obs, data.t_obs, data.window, eta_p, eta_mu, est.psi)
            g_p, g_m, h_pp, h_pm, h_mm = eta_derivatives(data.z_obs, data.t_obs, data.window, eta_p, eta_mu,
                                                         est.psi)
            Qu = Q @ u
            memo.update(u=u.copy(), f=-(float(np.sum(ll)) - 0.5 * float(u @ Qu)),
                        g=-(Jp.T @ g_p + Jm.T @ g_m - Qu),
                        H=sparse.csr_matrix(Q - _latent_hessian(Jp, Jm, h_pp, h_pm, h_mm)))
        return memo

    u0 = lay.stack(start) if start is not None else np.zeros(lay.size)
    res = optimize.minimize(lambda u: at(u)["f"], u0, jac=lambda u: at(u)["g"], hessp=lambda u, v: at(u)["H"] @ v,
                            method="trust-ncg", options={"gtol": tol, "maxiter": max_iter})
    # trust-ncg reports precision loss once the gradient is at rounding level
    if np.abs(at(res.x)["g"]).max() > 1e3 * tol:
        log.warning("latent mode search stopped early: %s", res.message)
    return lay.split(res.x)


def _latent_hessian(Jp, Jm, h_pp, h_pm, h_mm):
    D = sparse.diags
    return Jp.T @ D(h_pp) @ Jp + Jp.T @ D(h_pm) @ Jm + Jm.T @ D(h_pm) @ Jp + Jm.T @ D(h_mm) @ Jm


def fixed_effect_information(data: ConnectionData, est: ParameterSet, latents: LatentState | None = None,
                             random_effects: bool = True, expected: bool = True) -> np.ndarray:
    """Information for ``(alpha, gamma)`` with the latent effects integrated out.

    The integral over the latents is taken in its Laplace form at the latent
    mode: the joint curvature of log-likelihood plus latent log-prior,
    reduced by its Schur complement in the latent block.  ``expected`` uses
    each connection's expected information, which keeps the result positive
    semidefinite; otherwise the observed curvature is used.  Without random
    effects this is the information of the two GLMs.
    """
    X = data.X
    p = X.shape[1]
    if random_effects:
        mode = latent_mode(data, est, latents)
        L = data.latent_columns(mode)
    else:
        L = np.zeros((len(X), 3))
    eta_p = X @ est.alpha + L @ est.beta
    eta_mu = X @ est.gamma + L @ est.nu
    if expected:
        h_pp, h_pm, h_mm = (-v for v in eta_fisher(data.window, eta_p, eta_mu, est.psi))
    else:
        _, _, h_pp, h_pm, h_mm = eta_derivatives(data.z_obs, data.t_obs, data.window, eta_p, eta_mu, est.psi)
    H = np.block([[(X * h_pp[:, None]).T @ X, (X * h_pm[:, None]).T @ X],
                  [(X * h_pm[:, None]).T @ X, (X * h_mm[:, None]).T @ X]])
    if random_effects:
        lay = _LatentLayout(data)
        Jp, Jm = lay.jacobians(est)
        D = sparse.diags
        cross = np.hstack([(D(h_pp) @ Jp + D(h_pm) @ Jm).T @ X, (D(h_pm) @ Jp + D(h_mm) @ Jm).T @ X])
        neg_uu = lay.prior_precision(est.rho) - _latent_hessian(Jp, Jm, h_pp, h_pm, h_mm)
        H += cross.T @ _solve_spd(neg_uu, cross)
    return -H


def _inverse_diag(info: np.ndarray) -> np.ndarray:
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    diag = np.diag(cov)
    if np.any(diag < 0):
        log.warning("information matrix is not positive definite; some standard errors are undefined")
    return np.sqrt(np.where(diag >= 0, diag, np.nan))


def _standard_errors(data, est: ParameterSet, latents, draws, samples, config) -> ParameterSet:
    """Standard errors of all parameters.

    ``alpha`` and ``gamma`` use the expected information with the latents
    integrated out around their posterior mode.  ``beta``, ``nu``, ``psi`` and ``rho`` use the curvature
    of their own Q-function block over the retained draws, which treats the
    latents as known and so is on the optimistic side.
    """
    p = data.X.shape[1]
    ag = _inverse_diag(fixed_effect_information(data, est, latents, config.random_effects))
    se_beta = se_nu = np.full(3, np.nan)
    se_rho = np.nan
    if config.random_effects:
        n = data.n
        _, H1 = LogisticBlock(data.X, draws, config.lam, n).grad_hess(np.concatenate([est.alpha, est.beta]))
        _, H2 = GammaBlock(data.X, draws, config.lam, n, est.psi).grad_hess(np.concatenate([est.gamma, est.nu]))
        se_beta = _inverse_diag(-H1)[p:]
        se_nu = _inverse_diag(-H2)[p:]
        s = latent_moments(samples)
        se_rho = _scalar_se(lambda r: data.n_entities * q_rho(r, *s), est.rho)
    stats = GapStats.collect(data.X, draws, np.concatenate([est.gamma, est.nu]))
    se_psi = _scalar_se(stats.q, est.psi)
    return ParameterSet(ag[:p], se_beta, ag[p:], se_nu, se_psi, se_rho)


def monte_carlo_variance(history, window: int, max_batches: int = 10) -> np.ndarray:
    """Variance of a ``window``-iterate average, from batch means over the trailing iterates.

    Zero when fewer than two full batches are available.
    """
    H = np.asarray(history, dtype=float)
    n_b = min(max_batches, len(H) // window)
    if n_b < 2:
        return np.zeros(H.shape[1] if H.ndim == 2 else 0)
    means = H[len(H) - n_b * window:].reshape(n_b, window, -1).mean(axis=1)
    return means.var(axis=0, ddof=1)


def _with_monte_carlo_error(se: ParameterSet, history, window: int, p: int) -> ParameterSet:
    var = monte_carlo_variance(history, window)
    if not var.size:
        return se
    total = np.sqrt(np.square(se.vector()) + var)
    return ParameterSet.from_vector(total, p)


def _scalar_se(f, x: float) -> float:
    h = 1e-4 * max(abs(x), 1e-2)
    d2 = (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
    return float(1.0 / math.sqrt(-d2)) if d2 < 0 else float("nan")


def fit(design, config: FitConfig = FitConfig(), data: ConnectionData | None = None,
        start: tuple[ParameterSet, LatentState] | None = None) -> FitResult:
    """Fit the model to a :class:`~tcinet.features.DesignTable`.

    ``start`` overrides the GLM-based starting point.  Results are bitwise
    reproducible for a fixed seed, independent of ``config.workers``.
    """
    config.validate()
    data = data or ConnectionData.from_design(design)
    if start is None:
        params, latents = initialize(data, config.seed, config.irls_tol, config.irls_max_iter,
                                     config.random_effects)
    else:
        params, latents = start[0].copy(), start[1].copy()
    names = parameter_names(design.columns)
    trace = SemTrace(names=names)
    pool = _Pool(config.workers)
    sampler = LatentSampler(data, params, latents, pool=pool)
    history = []
    avg = min(config.avg_window, config.iterations)
    window_draws: list = []
    window_samples: list = []
    keep = set(config.retain)
    converged = False
    try:
        for it in range(1, config.iterations + 1):
            sampler.reset_counters()
            sampler.set_params(params)
            draws, samples = [], []
            gap_rng = stream(config.seed, GAP_STREAM, it)

            def record(m, s):
                draws.append(_retained_draw(data, params, s.L, gap_rng))
                samples.append((s.latents.B.copy(), s.latents.S.copy()))

            if config.random_effects:
                sampler.run(lambda f: stream(config.seed, MH_STREAM, it, f), config.mh_steps, keep, record)
            else:
                for m in config.retain:
                    record(m, sampler)
            params, q = _mstep(data, params, draws, samples, config)
            params, flipped = canonicalize(params, sampler.latents)
            sampler.latents = flipped
            history.append(params.vector())
            trace.params.append(params.vector())
            trace.acceptance.append(sampler.acceptance_rates() if config.random_effects else np.full(3, np.nan))
            trace.q.append(q)
            window_draws = (window_draws + draws)[-avg * len(config.retain):]
            window_samples = (window_samples + samples)[-avg * len(config.retain):]
            if config.early_stop and it >= 2 * config.avg_window:
                w = config.avg_window
                drift = np.max(np.abs(np.mean(history[-w:], axis=0) - np.mean(history[-2 * w:-w], axis=0)))
                if drift < config.early_stop:
                    converged = True
                    break
    finally:
        pool.close()
    p = data.X.shape[1]
    est = ParameterSet.from_vector(np.mean(history[-avg:], axis=0), p)
    est, final_latents = canonicalize(est, sampler.latents)
    se = _standard_errors(data, est, final_latents, window_draws, window_samples, config)
    se = _with_monte_carlo_error(se, history, avg, p)
    return FitResult(params=est, se=se, columns=tuple(design.columns), scaling=dict(design.scaling),
                     weight_scheme=design.weight_scheme, config=config, trace=trace,
                     latents=final_latents, entity_ids=data.entity_ids, policy_ids=data.policy_ids,
                     converged=converged or config.early_stop is None)
