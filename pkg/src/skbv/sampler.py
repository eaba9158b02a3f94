"""Spike-and-slab MCMC engine with knockoff-augmented indicators.

One chain is a single-threaded state machine.  Per sweep: one indicator
move (add/delete/swap, optionally compounded into a small-world
proposal), one knockoff-swap move, conjugate Gibbs updates, and
adaptively tuned random-walk updates for the non-conjugate scalars.
Rao-Blackwellized inclusion probabilities and knockoff statistics are
accumulated every ``n_thin`` iterations after burn-in.

Indicator moves are collapsed: the effect of a newly added column is
drawn from its conditional posterior N(a* b*, a*), which folds into the
closed-form marginal likelihood, so acceptance ratios never depend on
the drawn value.  The slab variance is a deterministic function of
(h, delta, delta~): sigma2_a = h/(1-h) / (sum of active-column sample
variances), and every indicator change therefore also reweights the
prior density of all other included effects.
"""

from __future__ import annotations

import csv
import json
import math
from bisect import bisect_left, insort
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import expit

from .errors import NumericalError
from .preprocess import MarginalRanks, marginal_pvalues
from .spatial import PiField, SpatialBasis, logit_pi

_LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SamplerConfig:
    n_iter: int = 20_000
    n_burn: int = 10_000
    n_thin: int = 10
    # move mixture
    p_add: float = 0.45
    p_delete: float = 0.45
    p_swap: float = 0.10
    p_sw: float = 0.3
    n_sw: int = 10
    # ranked-add mixture: w_geom * Geometric(geom_p) + (1 - w_geom) * Uniform
    w_geom: float = 0.7
    geom_p: float = 0.05
    # sparsity: log-uniform prior support is [log(1/n_u), log(M/n_u)]
    sparsity_cap: float = 100.0
    mean_logit_cap: float | None = None
    # hyperpriors
    beta_sd: float = 100.0
    ig_shape: float = 0.001
    ig_rate: float = 0.001
    mu_pi_mean: float = -7.0
    mu_pi_sd: float = 2.25
    rho: float = 0.999
    # adaptive tuning
    adapt_batch: int = 50
    target_accept_uni: float = 0.44
    target_accept_block: float = 0.234
    # fixed-parameter modes (used by oracle tests and diagnostics)
    fixed_sigma2_e: float | None = None
    fixed_sigma2_a: float | None = None
    fixed_pi: float | None = None
    update_beta: bool = True
    seed: int = 0
    trace_path: str | None = None
    trace_every: int = 100
    refresh_every: int = 512
    validate_every: int = 0

    def __post_init__(self):
        if abs(self.p_add + self.p_delete + self.p_swap - 1.0) > 1e-12:
            raise ValueError("move probabilities must sum to 1")
        if not 0 <= self.p_sw < 1:
            raise ValueError("p_sw must be in [0, 1)")
        if self.n_sw < 2:
            raise ValueError("n_sw must be >= 2")


@dataclass
class PosteriorAccumulator:
    """Running Rao-Blackwellized posterior summaries."""

    n_u: int
    n_acc: int = 0
    rb_incl: np.ndarray = None
    rb_incl_tilde: np.ndarray = None
    w_bar: np.ndarray = None
    effect_mean: np.ndarray = None
    effect_m2: np.ndarray = None
    acceptance: dict = field(default_factory=dict)
    chromosome: np.ndarray | None = None
    positions: np.ndarray | None = None

    def __post_init__(self):
        z = lambda: np.zeros(self.n_u)
        if self.rb_incl is None:
            self.rb_incl = z()
            self.rb_incl_tilde = z()
            self.w_bar = z()
            self.effect_mean = z()
            self.effect_m2 = z()

    def update(self, w, rb, rb_tilde, effect_draw):
        self.n_acc += 1
        inv = 1.0 / self.n_acc
        self.w_bar += (w - self.w_bar) * inv
        self.rb_incl += (rb - self.rb_incl) * inv
        self.rb_incl_tilde += (rb_tilde - self.rb_incl_tilde) * inv
        delta = effect_draw - self.effect_mean
        self.effect_mean += delta * inv
        self.effect_m2 += delta * (effect_draw - self.effect_mean)

    @property
    def effect_sd(self) -> np.ndarray:
        if self.n_acc < 2:
            return np.zeros(self.n_u)
        return np.sqrt(self.effect_m2 / (self.n_acc - 1))

    def acceptance_rates(self) -> dict:
        return {
            k: (acc / tot if tot else 0.0) for k, (acc, tot) in self.acceptance.items()
        }

    def to_json(self) -> str:
        chrom = self.chromosome if self.chromosome is not None else np.zeros(self.n_u, int)
        pos = self.positions if self.positions is not None else np.arange(self.n_u)
        sd = self.effect_sd
        rows = [
            {
                "id": int(j),
                "chrom": int(chrom[j]),
                "pos": int(pos[j]),
                "rb_incl": float(self.rb_incl[j]),
                "rb_incl_tilde": float(self.rb_incl_tilde[j]),
                "w_bar": float(self.w_bar[j]),
                "effect_mean": float(self.effect_mean[j]),
                "effect_sd": float(sd[j]),
            }
            for j in range(self.n_u)
        ]
        return json.dumps(
            {
                "n_acc": self.n_acc,
                "acceptance": self.acceptance_rates(),
                "snps": rows,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PosteriorAccumulator":
        d = json.loads(text)
        rows = d["snps"]
        n_u = len(rows)
        acc = cls(n_u=n_u, n_acc=d.get("n_acc", 0))
        for j, r in enumerate(rows):
            acc.rb_incl[j] = r["rb_incl"]
            acc.rb_incl_tilde[j] = r["rb_incl_tilde"]
            acc.w_bar[j] = r["w_bar"]
            acc.effect_mean[j] = r["effect_mean"]
        acc.chromosome = np.asarray([r["chrom"] for r in rows])
        acc.positions = np.asarray([r["pos"] for r in rows])
        return acc


def marginal_like_terms(residual, column, sigma2_e, sigma2_a):
    """Closed-form pieces of the single-column marginal likelihood.

    a* = (K'K/s2e + 1/s2a)^{-1}, b* = eps'K/s2e; the log marginal is the
    Gaussian integral over the column effect.
    """
    residual = np.asarray(residual, dtype=float).ravel()
    column = np.asarray(column, dtype=float).ravel()
    n = residual.size
    a_star = 1.0 / (column @ column / sigma2_e + 1.0 / sigma2_a)
    b_star = residual @ column / sigma2_e
    log_marginal = (
        -0.5 * n * math.log(2.0 * math.pi * sigma2_e)
        - 0.5 * (residual @ residual) / sigma2_e
        + 0.5 * math.log(a_star / sigma2_a)
        + 0.5 * a_star * b_star * b_star
    )
    return a_star, b_star, log_marginal


def _norm_logpdf(x, mean, var):
    return -0.5 * (_LOG2PI + math.log(var)) - 0.5 * (x - mean) ** 2 / var


class Chain:
    """Mutable state of one MCMC chain.

    Built from projected column matrices K, K~ (observation space) plus
    the per-column linked sample variances.
    """

    def __init__(
        self,
        y,
        K,
        K_tilde,
        s2,
        s2_tilde,
        config: SamplerConfig,
        X=None,
        R=None,
        basis: SpatialBasis | None = None,
        ranks: MarginalRanks | None = None,
    ):
        self.cfg = config
        self.rng = np.random.default_rng(config.seed)
        self.y = np.asarray(y, dtype=float).ravel()
        self.n = self.y.size
        self.K = np.asfortranarray(np.asarray(K, dtype=float))
        self.Kt = np.asfortranarray(np.asarray(K_tilde, dtype=float))
        self.n_u = self.K.shape[1]
        self.s2 = np.asarray(s2, dtype=float).ravel()
        self.s2t = np.asarray(s2_tilde, dtype=float).ravel()
        self.cn2 = np.einsum("ij,ij->j", self.K, self.K)
        self.cn2t = np.einsum("ij,ij->j", self.Kt, self.Kt)
        self.X = np.zeros((self.n, 0)) if X is None else np.atleast_2d(np.asarray(X, float))
        self.R = np.zeros((self.n, 0)) if R is None else np.atleast_2d(np.asarray(R, float))
        self.p = self.X.shape[1]
        self.n_R = self.R.shape[1]
        self.basis = basis
        self.eligible = (self.s2 > 0) & (self.s2t > 0)

        if ranks is None:
            ranks = marginal_pvalues(
                self.y, self.K, X=self.X, R=self.R, columns_tilde=self.Kt
            )
        self.order_o = np.argsort(ranks.ranks)  # snp index per rank position
        self.pos_o = ranks.ranks - 1  # 0-based rank position per snp
        if ranks.ranks_tilde is not None:
            self.order_t = np.argsort(ranks.ranks_tilde)
            self.pos_t = ranks.ranks_tilde - 1
        else:
            self.order_t = self.order_o
            self.pos_t = self.pos_o

        # indicator state
        self.nu = np.zeros(self.n_u, dtype=bool)
        self.is_knock = np.zeros(self.n_u, dtype=bool)
        self.effect = np.zeros(self.n_u)
        self.incl: list[int] = []
        self.incl_pos_o: list[int] = []  # rank positions of included SNPs (original order)
        self.incl_pos_t: list[int] = []
        self.S = 0.0  # sum of active-column sample variances
        self.SSU = 0.0  # sum of squared included effects

        # scalar parameters
        self.beta = np.zeros(self.p)
        self.theta = np.zeros(self.n_R)
        self.sigma2_e = (
            config.fixed_sigma2_e
            if config.fixed_sigma2_e is not None
            else max(float(np.var(self.y)), 1e-8)
        )
        self.sigma2_theta = 1.0
        self.h = 0.25
        self.tau = 1.0
        # sparsity model
        # support must stay a probability: cap M/n_u below 1 for tiny n_u
        self.log_pi_hi = math.log(min(config.sparsity_cap / self.n_u, 0.95))
        self.log_pi_lo = min(math.log(1.0 / self.n_u), self.log_pi_hi - 1e-6)
        if basis is None:
            if config.fixed_pi is not None:
                self.pi_scalar = float(config.fixed_pi)
            else:
                self.pi_scalar = math.exp(0.5 * (self.log_pi_lo + self.log_pi_hi))
            self.pi_field = None
            self.pi_vec = None
        else:
            mu0 = np.full(basis.n_blocks, config.mu_pi_mean)
            self.pi_field = PiField(mu_pi=mu0, alpha=np.zeros(basis.n_alpha))
            self._refresh_pi()

        self.eps = self._recompute_residual()
        self.log_post = self.log_posterior()

        # adaptive proposal scales (log scale) and batch counters
        self._scales = {"h": 0.0, "pi": 0.0}
        self._acc_batch = {"h": [0, 0], "pi": [0, 0]}
        if basis is not None:
            for b in range(basis.n_blocks):
                self._scales[f"mu{b}"] = 0.0
                self._scales[f"alpha{b}"] = 0.0
                self._acc_batch[f"mu{b}"] = [0, 0]
                self._acc_batch[f"alpha{b}"] = [0, 0]
        self._batch_no = 0
        self._adapting = True
        self.counters = {
            "add": [0, 0],
            "delete": [0, 0],
            "swap": [0, 0],
            "small_world": [0, 0],
            "knockoff_swap": [0, 0],
        }

    # -- basic quantities ------------------------------------------------

    def sigma2_a(self, S: float) -> float:
        if self.cfg.fixed_sigma2_a is not None:
            return self.cfg.fixed_sigma2_a
        if S <= 0:
            return math.inf
        return self.h / (1.0 - self.h) / S

    @property
    def k(self) -> int:
        return len(self.incl)

    def _col(self, j: int, knock: bool) -> np.ndarray:
        return self.Kt[:, j] if knock else self.K[:, j]

    def _s2c(self, j: int, knock: bool) -> float:
        return self.s2t[j] if knock else self.s2[j]

    def _cn2c(self, j: int, knock: bool) -> float:
        return self.cn2t[j] if knock else self.cn2[j]

    def pi_of(self, j: int) -> float:
        if self.pi_field is None:
            return self.pi_scalar
        return self.pi_vec[j]

    def _refresh_pi(self):
        self.pi_vec = logit_pi(self.pi_field, self.basis)

    def _logprod(self, k: int, ssu: float, sa: float) -> float:
        """log prod of k centered-normal effect densities with variance sa."""
        if k == 0:
            return 0.0
        return -0.5 * k * (_LOG2PI + math.log(sa)) - 0.5 * ssu / sa

    def _recompute_residual(self) -> np.ndarray:
        eps = self.y - self.X @ self.beta - self.R @ self.theta
        for j in self.incl:
            eps = eps - self._col(j, self.is_knock[j]) * self.effect[j]
        return eps

    def log_posterior(self, cached_residual: bool = False) -> float:
        """Full log joint density (up to additive constants in the
        flat/uniform priors).  ``cached_residual`` reuses self.eps instead
        of rebuilding the residual from scratch."""
        eps = self.eps if cached_residual else self._recompute_residual()
        lp = -0.5 * self.n * (_LOG2PI + math.log(self.sigma2_e))
        lp -= 0.5 * (eps @ eps) / self.sigma2_e
        sa = self.sigma2_a(self.S)
        lp += self._logprod(self.k, self.SSU, sa)
        # indicator prior
        if self.pi_field is None:
            pi = self.pi_scalar
            lp += self.k * (math.log(pi) + math.log(0.5))
            lp += (self.n_u - self.k) * math.log1p(-pi)
        else:
            logp = np.log(self.pi_vec)
            log1m = np.log1p(-self.pi_vec)
            lp += float(np.sum(np.where(self.nu, logp + math.log(0.5), log1m)))
            # mu_pi and alpha priors
            for b in range(self.basis.n_blocks):
                lp += _norm_logpdf(
                    self.pi_field.mu_pi[b], self.cfg.mu_pi_mean, self.cfg.mu_pi_sd**2
                )
            quad = self.basis.alpha_quad(self.pi_field.alpha)
            lp += -0.5 * quad / self.tau - 0.5 * self.basis.n_alpha * math.log(self.tau)
        # scalar priors
        if self.p:
            lp += float(np.sum(-0.5 * self.beta**2 / self.cfg.beta_sd**2))
        if self.n_R:
            lp += float(
                np.sum(-0.5 * self.theta**2 / self.sigma2_theta)
                - 0.5 * self.n_R * math.log(self.sigma2_theta)
            )
            lp += _ig_logpdf(self.sigma2_theta, self.cfg.ig_shape, self.cfg.ig_rate)
        if self.cfg.fixed_sigma2_e is None:
            lp += _ig_logpdf(self.sigma2_e, self.cfg.ig_shape, self.cfg.ig_rate)
        if self.pi_field is not None:
            lp += _ig_logpdf(self.tau, self.cfg.ig_shape, self.cfg.ig_rate)
        return lp

    def validate(self, tol: float = 1e-8):
        """Debug sweep over the state invariants."""
        assert np.all(self.effect[~self.nu] == 0.0)
        assert self.k == int(self.nu.sum())
        S = sum(self._s2c(j, self.is_knock[j]) for j in self.incl)
        assert abs(S - self.S) < 1e-9 * max(1.0, abs(S))
        ssu = float(np.sum(self.effect[self.nu] ** 2))
        assert abs(ssu - self.SSU) < 1e-9 * max(1.0, ssu)
        eps = self._recompute_residual()
        assert np.max(np.abs(eps - self.eps)) < tol

    # -- collapsed pair ratio --------------------------------------------

    def _pair_f(self, j, knock, eps0, S0, SSU0, k0):
        """Collapsed add-direction log ratio for copy (j, knock) relative
        to a state (eps0, S0, SSU0, k0) that excludes SNP j.

        Returns (f, a_star, b_star); f = -inf for ineligible columns.
        """
        s2c = self._s2c(j, knock)
        if s2c <= 0 or not self.eligible[j]:
            return -math.inf, 0.0, 0.0
        sa1 = self.sigma2_a(S0 + s2c)
        a_star = 1.0 / (self._cn2c(j, knock) / self.sigma2_e + 1.0 / sa1)
        b_star = float(eps0 @ self._col(j, knock)) / self.sigma2_e
        f = 0.5 * math.log(a_star / sa1) + 0.5 * a_star * b_star * b_star
        if k0 > 0 and self.cfg.fixed_sigma2_a is None:
            sa0 = self.sigma2_a(S0)
            f += self._logprod(k0, SSU0, sa1) - self._logprod(k0, SSU0, sa0)
        pi = self.pi_of(j)
        f += math.log(pi) - math.log1p(-pi) + math.log(0.5)
        return f, a_star, b_star

    # -- rank proposal machinery -----------------------------------------

    def _log_rank_pmf(self, r: int, n_excl: int) -> float:
        cfg = self.cfg
        p = cfg.geom_p
        gn = 1.0 - (1.0 - p) ** n_excl
        geom = (1.0 - p) ** (r - 1) * p / gn
        return math.log(cfg.w_geom * geom + (1.0 - cfg.w_geom) / n_excl)

    def _draw_rank(self, n_excl: int) -> int:
        cfg = self.cfg
        if self.rng.random() < cfg.w_geom:
            p = cfg.geom_p
            gn = 1.0 - (1.0 - p) ** n_excl
            u = self.rng.random()
            r = int(math.ceil(math.log1p(-u * gn) / math.log1p(-p)))
            return min(max(r, 1), n_excl)
        return int(self.rng.integers(1, n_excl + 1))

    def _excluded_at(self, r: int, knock: bool) -> int:
        """SNP at excluded-rank r (1-based) in the given type's order."""
        incl_pos = self.incl_pos_t if knock else self.incl_pos_o
        order = self.order_t if knock else self.order_o
        r0 = r - 1
        for p in incl_pos:
            if p <= r0:
                r0 += 1
            else:
                break
        return int(order[r0])

    def _excluded_rank_of(self, j: int, knock: bool) -> int:
        incl_pos = self.incl_pos_t if knock else self.incl_pos_o
        pos = int(self.pos_t[j] if knock else self.pos_o[j])
        return pos - bisect_left(incl_pos, pos) + 1

    # -- state mutation ---------------------------------------------------

    def _apply_add(self, j, knock, v):
        self.nu[j] = True
        self.is_knock[j] = knock
        self.effect[j] = v
        self.incl.append(j)
        insort(self.incl_pos_o, int(self.pos_o[j]))
        insort(self.incl_pos_t, int(self.pos_t[j]))
        self.S += self._s2c(j, knock)
        self.SSU += v * v
        self.eps -= self._col(j, knock) * v

    def _apply_delete(self, j):
        knock = bool(self.is_knock[j])
        v = self.effect[j]
        self.eps += self._col(j, knock) * v
        self.nu[j] = False
        self.effect[j] = 0.0
        self.incl.remove(j)
        self.incl_pos_o.remove(int(self.pos_o[j]))
        self.incl_pos_t.remove(int(self.pos_t[j]))
        self.S -= self._s2c(j, knock)
        self.SSU -= v * v

    def _snapshot(self):
        return (
            self.eps.copy(),
            self.S,
            self.SSU,
            self.log_post,
            list(self.incl),
            list(self.incl_pos_o),
            list(self.incl_pos_t),
            self.nu.copy(),
            self.is_knock.copy(),
            self.effect.copy(),
        )

    def _restore(self, snap):
        (
            self.eps,
            self.S,
            self.SSU,
            self.log_post,
            self.incl,
            self.incl_pos_o,
            self.incl_pos_t,
            self.nu,
            self.is_knock,
            self.effect,
        ) = snap
        self.eps = self.eps.copy()  # snapshot stays pristine if reused

    # -- elementary proposals (apply immediately, return log ratio) -------

    def _elementary_add(self):
        n_excl = self.n_u - self.k
        if n_excl == 0:
            return None
        knock = bool(self.rng.random() < 0.5)
        r = self._draw_rank(n_excl)
        log_pmf = self._log_rank_pmf(r, n_excl)
        j = self._excluded_at(r, knock)
        f, a_star, b_star = self._pair_f(j, knock, self.eps, self.S, self.SSU, self.k)
        if not math.isfinite(f):
            return None
        k_before = self.k
        v = a_star * b_star + math.sqrt(a_star) * self.rng.standard_normal()
        self._apply_add(j, knock, v)
        self.log_post += f + _norm_logpdf(v, a_star * b_star, a_star)
        return f - math.log(k_before + 1) - math.log(0.5) - log_pmf

    def _elementary_delete(self):
        if self.k == 0:
            return None
        j = self.incl[int(self.rng.integers(self.k))]
        knock = bool(self.is_knock[j])
        v = self.effect[j]
        eps0 = self.eps + self._col(j, knock) * v
        S0 = self.S - self._s2c(j, knock)
        SSU0 = self.SSU - v * v
        f, a_star, b_star = self._pair_f(j, knock, eps0, S0, SSU0, self.k - 1)
        k_before = self.k
        self._apply_delete(j)
        self.log_post += -f - _norm_logpdf(v, a_star * b_star, a_star)
        r = self._excluded_rank_of(j, knock)
        log_pmf = self._log_rank_pmf(r, self.n_u - self.k)
        return -f + math.log(k_before) + math.log(0.5) + log_pmf

    # -- full moves -------------------------------------------------------

    def _accept(self, name: str, log_ratio: float | None, snap) -> bool:
        acc, tot = self.counters[name]
        self.counters[name][1] = tot + 1
        if log_ratio is None:
            self._restore(snap)
            return False
        if not math.isfinite(self.log_post):
            raise NumericalError("non-finite log posterior; state dump: " + self.dump())
        if log_ratio >= 0 or self.rng.random() < math.exp(log_ratio):
            self.counters[name][0] = acc + 1
            return True
        self._restore(snap)
        return False

    def _move_add(self):
        snap = self._snapshot()
        self._accept("add", self._elementary_add(), snap)

    def _move_delete(self):
        snap = self._snapshot()
        self._accept("delete", self._elementary_delete(), snap)

    def _move_swap(self):
        snap = self._snapshot()
        if self.k == 0 or self.k == self.n_u:
            self._accept("swap", None, snap)
            return
        n_excl = self.n_u - self.k
        knock_in = bool(self.rng.random() < 0.5)
        r_in = self._draw_rank(n_excl)
        log_pmf_in = self._log_rank_pmf(r_in, n_excl)
        j_in = self._excluded_at(r_in, knock_in)
        j_out = self.incl[int(self.rng.integers(self.k))]
        knock_out = bool(self.is_knock[j_out])
        v_out = self.effect[j_out]

        f_in, a_in, b_in = self._pair_f(j_in, knock_in, self.eps, self.S, self.SSU, self.k)
        if not math.isfinite(f_in):
            self._accept("swap", None, snap)
            return
        v_in = a_in * b_in + math.sqrt(a_in) * self.rng.standard_normal()
        self._apply_add(j_in, knock_in, v_in)
        self.log_post += f_in + _norm_logpdf(v_in, a_in * b_in, a_in)

        eps0 = self.eps + self._col(j_out, knock_out) * v_out
        S0 = self.S - self._s2c(j_out, knock_out)
        SSU0 = self.SSU - v_out * v_out
        f_out, a_out, b_out = self._pair_f(j_out, knock_out, eps0, S0, SSU0, self.k - 1)
        self._apply_delete(j_out)
        self.log_post += -f_out - _norm_logpdf(v_out, a_out * b_out, a_out)

        r_out = self._excluded_rank_of(j_out, knock_out)
        log_pmf_out = self._log_rank_pmf(r_out, self.n_u - self.k)
        self._accept("swap", f_in - f_out + log_pmf_out - log_pmf_in, snap)

    def _move_small_world(self):
        snap = self._snapshot()
        m = int(self.rng.integers(2, self.cfg.n_sw + 1))
        total = 0.0
        for _ in range(m):
            if self.rng.random() < 0.5:
                part = self._elementary_add()
            else:
                part = self._elementary_delete()
            if part is None:
                self._accept("small_world", None, snap)
                return
            total += part
        self._accept("small_world", total, snap)

    def _move_knockoff_swap(self):
        if self.k == 0:
            return
        self.counters["knockoff_swap"][1] += 1
        j = self.incl[int(self.rng.integers(self.k))]
        knock = bool(self.is_knock[j])
        v = self.effect[j]
        col_old = self._col(j, knock)
        col_new = self._col(j, not knock)
        eps_new = self.eps + (col_old - col_new) * v
        dS = self._s2c(j, not knock) - self._s2c(j, knock)
        sa_old = self.sigma2_a(self.S)
        sa_new = self.sigma2_a(self.S + dS)
        delta = -0.5 * (float(eps_new @ eps_new) - float(self.eps @ self.eps)) / self.sigma2_e
        if self.cfg.fixed_sigma2_a is None:
            delta += self._logprod(self.k, self.SSU, sa_new) - self._logprod(
                self.k, self.SSU, sa_old
            )
        if delta >= 0 or self.rng.random() < math.exp(delta):
            self.counters["knockoff_swap"][0] += 1
            self.is_knock[j] = not knock
            self.eps = eps_new
            self.S += dS
            self.log_post += delta

    # -- Gibbs updates ----------------------------------------------------

    def _gibbs(self):
        cfg = self.cfg
        # included effects
        sa = self.sigma2_a(self.S)
        for j in self.incl:
            knock = bool(self.is_knock[j])
            col = self._col(j, knock)
            v_old = self.effect[j]
            self.eps += col * v_old
            a_star = 1.0 / (self._cn2c(j, knock) / self.sigma2_e + 1.0 / sa)
            b_star = float(self.eps @ col) / self.sigma2_e
            v = a_star * b_star + math.sqrt(a_star) * self.rng.standard_normal()
            self.effect[j] = v
            self.SSU += v * v - v_old * v_old
            self.eps -= col * v
        # covariate coefficients
        if self.p and cfg.update_beta:
            y_adj = self.eps + self.X @ self.beta
            prec = self.X.T @ self.X / self.sigma2_e + np.eye(self.p) / cfg.beta_sd**2
            chol = np.linalg.cholesky(prec)
            rhs = self.X.T @ y_adj / self.sigma2_e
            mean = np.linalg.solve(prec, rhs)
            z = self.rng.standard_normal(self.p)
            self.beta = mean + np.linalg.solve(chol.T, z)
            self.eps = y_adj - self.X @ self.beta
        # relatedness coefficients (R orthonormal -> diagonal posterior)
        if self.n_R:
            y_adj_proj = self.R.T @ self.eps + self.theta
            var = 1.0 / (1.0 / self.sigma2_e + 1.0 / self.sigma2_theta)
            mean = var * y_adj_proj / self.sigma2_e
            theta_new = mean + math.sqrt(var) * self.rng.standard_normal(self.n_R)
            self.eps += self.R @ (self.theta - theta_new)
            self.theta = theta_new
            self.sigma2_theta = _draw_ig(
                self.rng,
                cfg.ig_shape + 0.5 * self.n_R,
                cfg.ig_rate + 0.5 * float(self.theta @ self.theta),
            )
        # noise variance
        if cfg.fixed_sigma2_e is None:
            self.sigma2_e = _draw_ig(
                self.rng,
                cfg.ig_shape + 0.5 * self.n,
                cfg.ig_rate + 0.5 * float(self.eps @ self.eps),
            )
        # spatial scale
        if self.pi_field is not None:
            quad = self.basis.alpha_quad(self.pi_field.alpha)
            self.tau = _draw_ig(
                self.rng,
                cfg.ig_shape + 0.5 * self.basis.n_alpha,
                cfg.ig_rate + 0.5 * quad,
            )

    # -- adaptive random-walk updates -------------------------------------

    def _rw_step(self, key: str, dim: int = 1):
        return math.exp(self._scales[key]) * self.rng.standard_normal(
            dim if dim > 1 else None
        )

    def _record(self, key: str, accepted: bool):
        self._acc_batch[key][1] += 1
        if accepted:
            self._acc_batch[key][0] += 1

    def _adaptive_updates(self):
        cfg = self.cfg
        if cfg.fixed_sigma2_a is None:
            h_new = self.h + self._rw_step("h")
            ok = 0.0 < h_new < 1.0
            if ok:
                delta = self._logprod(
                    self.k, self.SSU, _sa_of(h_new, self.S)
                ) - self._logprod(self.k, self.SSU, self.sigma2_a(self.S))
                if delta >= 0 or self.rng.random() < math.exp(delta):
                    self.h = h_new
                    self.log_post += delta
                    self._record("h", True)
                else:
                    self._record("h", False)
            else:
                self._record("h", False)
        if self.pi_field is None:
            if cfg.fixed_pi is None:
                lp = math.log(self.pi_scalar)
                lp_new = lp + self._rw_step("pi")
                if self.log_pi_lo <= lp_new <= self.log_pi_hi:
                    pi_new = math.exp(lp_new)
                    delta = self.k * (lp_new - lp) + (self.n_u - self.k) * (
                        math.log1p(-pi_new) - math.log1p(-self.pi_scalar)
                    )
                    if delta >= 0 or self.rng.random() < math.exp(delta):
                        self.pi_scalar = pi_new
                        self.log_post += delta
                        self._record("pi", True)
                    else:
                        self._record("pi", False)
                else:
                    self._record("pi", False)
        else:
            self._spatial_field_updates()
        self._maybe_adapt()

    def _spatial_field_updates(self):
        cfg = self.cfg
        basis = self.basis
        self._cached_logits = self.pi_field.logits(basis)
        for b in range(basis.n_blocks):
            mask = basis.chrom_of_snp == b
            # intercept
            key = f"mu{b}"
            step = self._rw_step(key)
            mu_new = self.pi_field.mu_pi[b] + step
            old_block = self._cached_logits[mask].copy()
            self._cached_logits[mask] = old_block + step
            if self._cap_ok():
                ll_old = self._block_bern(mask, old_block)
                ll_new = self._block_bern(mask, self._cached_logits[mask])
                delta = (
                    ll_new
                    - ll_old
                    + _norm_logpdf(mu_new, cfg.mu_pi_mean, cfg.mu_pi_sd**2)
                    - _norm_logpdf(self.pi_field.mu_pi[b], cfg.mu_pi_mean, cfg.mu_pi_sd**2)
                )
                if delta >= 0 or self.rng.random() < math.exp(delta):
                    self.pi_field.mu_pi[b] = mu_new
                    self._record(key, True)
                else:
                    self._cached_logits[mask] = old_block
                    self._record(key, False)
            else:
                self._cached_logits[mask] = old_block
                self._record(key, False)
            # basis coefficients, blocked proposal
            cols = basis.chrom_of_col == b
            nb = int(cols.sum())
            if nb == 0:
                continue
            key = f"alpha{b}"
            z = math.exp(self._scales[key]) * self.rng.standard_normal(nb)
            alpha_new = self.pi_field.alpha.copy()
            alpha_new[cols] += z
            Bb = basis.B[np.ix_(mask, cols)]
            new_block = self._cached_logits[mask] + Bb @ z
            old_block = self._cached_logits[mask].copy()
            self._cached_logits[mask] = new_block
            if self._cap_ok():
                ll_old = self._block_bern(mask, old_block)
                ll_new = self._block_bern(mask, new_block)
                c, low = basis.prior_factors[b]
                q_old = float(
                    self.pi_field.alpha[cols]
                    @ cho_solve((c, low), self.pi_field.alpha[cols])
                )
                q_new = float(alpha_new[cols] @ cho_solve((c, low), alpha_new[cols]))
                delta = ll_new - ll_old - 0.5 * (q_new - q_old) / self.tau
                if delta >= 0 or self.rng.random() < math.exp(delta):
                    self.pi_field.alpha = alpha_new
                    self._record(key, True)
                else:
                    self._cached_logits[mask] = old_block
                    self._record(key, False)
            else:
                self._cached_logits[mask] = old_block
                self._record(key, False)
        self._refresh_pi()

    def _block_bern(self, mask, logits):
        pi = np.clip(expit(logits), 1e-12, 1 - 1e-12)
        nu = self.nu[mask]
        return float(np.sum(np.where(nu, np.log(pi), np.log1p(-pi))))

    def _cap_ok(self) -> bool:
        if self.cfg.mean_logit_cap is None:
            return True
        return float(np.mean(self._cached_logits)) <= self.cfg.mean_logit_cap

    def _maybe_adapt(self):
        trigger = any(tot >= self.cfg.adapt_batch for _, tot in self._acc_batch.values())
        if not trigger or not self._adapting:
            if trigger:
                for v in self._acc_batch.values():
                    v[0] = v[1] = 0
            return
        self._batch_no += 1
        step = min(0.1, 1.0 / math.sqrt(self._batch_no))
        for key, (acc, tot) in self._acc_batch.items():
            if tot == 0:
                continue
            target = (
                self.cfg.target_accept_block
                if key.startswith("alpha")
                else self.cfg.target_accept_uni
            )
            if acc / tot > target:
                self._scales[key] += step
            else:
                self._scales[key] -= step
            self._acc_batch[key] = [0, 0]

    # -- Rao-Blackwellized accumulation -----------------------------------

    def rb_sweep(self):
        """Closed-form per-SNP inclusion quantities at the current state.

        Returns (w, rb_incl, rb_incl_tilde, effect_draw); overflow-safe by
        working entirely in log space.
        """
        sig2e = self.sigma2_e
        eK = self.K.T @ self.eps
        eKt = self.Kt.T @ self.eps
        S_minus = np.full(self.n_u, self.S)
        SSU_minus = np.full(self.n_u, self.SSU)
        k_minus = np.full(self.n_u, self.k, dtype=float)
        for j in self.incl:
            knock = bool(self.is_knock[j])
            col = self._col(j, knock)
            v = self.effect[j]
            eK[j] += v * float(col @ self.K[:, j])
            eKt[j] += v * float(col @ self.Kt[:, j])
            S_minus[j] -= self._s2c(j, knock)
            SSU_minus[j] -= v * v
            k_minus[j] -= 1.0

        elig = self.eligible
        if self.cfg.fixed_sigma2_a is not None:
            sa1 = np.full(self.n_u, self.cfg.fixed_sigma2_a)
            sa1t = sa1
            corr = corr_t = 0.0
        else:
            hh = self.h / (1.0 - self.h)
            sa1 = hh / np.where(elig, S_minus + self.s2, 1.0)
            sa1t = hh / np.where(elig, S_minus + self.s2t, 1.0)
            with np.errstate(divide="ignore"):
                inv_sa0 = S_minus / hh
                log_sa0 = np.where(S_minus > 0, np.log(hh) - np.log(np.maximum(S_minus, 1e-300)), 0.0)
            corr = _dens_corr(k_minus, SSU_minus, np.log(sa1), 1.0 / sa1, log_sa0, inv_sa0, S_minus)
            corr_t = _dens_corr(k_minus, SSU_minus, np.log(sa1t), 1.0 / sa1t, log_sa0, inv_sa0, S_minus)

        astar = 1.0 / (self.cn2 / sig2e + 1.0 / sa1)
        astart = 1.0 / (self.cn2t / sig2e + 1.0 / sa1t)
        bstar = eK / sig2e
        bstart = eKt / sig2e
        log_eta = 0.5 * np.log(astar / sa1) + 0.5 * astar * bstar**2 + corr
        log_eta_t = 0.5 * np.log(astart / sa1t) + 0.5 * astart * bstart**2 + corr_t

        if self.pi_field is None:
            pi = np.full(self.n_u, self.pi_scalar)
        else:
            pi = self.pi_vec
        log_prior_odds = np.log(pi) - np.log1p(-pi)
        log_lam = np.logaddexp(log_eta, log_eta_t) + math.log(0.5) + log_prior_odds
        p_nu = np.where(elig, expit(log_lam), 0.0)
        p_delta = np.where(elig, expit(log_eta - log_eta_t), 0.5)
        w = (2.0 * p_delta - 1.0) * p_nu
        rb = p_delta * p_nu
        rb_t = (1.0 - p_delta) * p_nu
        draw = astar * bstar + np.sqrt(astar) * self.rng.standard_normal(self.n_u)
        if np.any(~np.isfinite(w)):
            raise NumericalError("NaN in Rao-Blackwellized sweep")
        return w, rb, rb_t, draw

    # -- main loop ---------------------------------------------------------

    def run(self, accumulator: PosteriorAccumulator | None = None) -> PosteriorAccumulator:
        cfg = self.cfg
        acc = accumulator or PosteriorAccumulator(n_u=self.n_u)
        trace = None
        writer = None
        if cfg.trace_path is not None:
            trace = open(cfg.trace_path, "w", newline="")
            writer = csv.writer(trace)
            writer.writerow(
                ["iteration", "model_size", "sigma2_e", "h", "log_post", "accept_add", "accept_small_world"]
            )
        try:
            for it in range(cfg.n_iter):
                if it == cfg.n_burn:
                    self._adapting = False
                if self.rng.random() < cfg.p_sw:
                    self._move_small_world()
                else:
                    u = self.rng.random()
                    if u < cfg.p_add:
                        self._move_add()
                    elif u < cfg.p_add + cfg.p_delete:
                        self._move_delete()
                    else:
                        self._move_swap()
                self._move_knockoff_swap()
                self._gibbs()
                self._adaptive_updates()
                self.log_post = self.log_posterior(cached_residual=True)
                if cfg.refresh_every and (it + 1) % cfg.refresh_every == 0:
                    self.eps = self._recompute_residual()
                if cfg.validate_every and (it + 1) % cfg.validate_every == 0:
                    self.validate()
                if it >= cfg.n_burn and (it - cfg.n_burn) % cfg.n_thin == 0:
                    w, rb, rb_t, draw = self.rb_sweep()
                    acc.update(w, rb, rb_t, draw)
                if writer is not None and it % cfg.trace_every == 0:
                    rates = {
                        k: (a / t if t else 0.0) for k, (a, t) in self.counters.items()
                    }
                    writer.writerow(
                        [
                            it,
                            self.k,
                            f"{self.sigma2_e:.6g}",
                            f"{self.h:.6g}",
                            f"{self.log_post:.6g}",
                            f"{rates['add']:.4f}",
                            f"{rates['small_world']:.4f}",
                        ]
                    )
        finally:
            if trace is not None:
                trace.close()
        acc.acceptance = {k: tuple(v) for k, v in self.counters.items()}
        return acc

    def dump(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "sigma2_e": self.sigma2_e,
                "h": self.h,
                "S": self.S,
                "SSU": self.SSU,
                "incl": self.incl[:50],
            }
        )


def _sa_of(h, S):
    if S <= 0:
        return math.inf
    return h / (1.0 - h) / S


def _dens_corr(k_minus, ssu_minus, log_sa1, inv_sa1, log_sa0, inv_sa0, S_minus):
    """Vectorized effect-density reweighting between slab variances."""
    corr = -0.5 * k_minus * (log_sa1 - log_sa0) - 0.5 * ssu_minus * (inv_sa1 - inv_sa0)
    return np.where(k_minus > 0, corr, 0.0)


def _ig_logpdf(x, shape, rate):
    return -(shape + 1.0) * math.log(x) - rate / x


def _draw_ig(rng, shape, rate):
    return 1.0 / rng.gamma(shape, 1.0 / rate)


def run_chain(
    y,
    K,
    K_tilde,
    s2,
    s2_tilde,
    config: SamplerConfig,
    X=None,
    R=None,
    basis: SpatialBasis | None = None,
    ranks: MarginalRanks | None = None,
) -> PosteriorAccumulator:
    """Run one chain and return the accumulated posterior summaries."""
    chain = Chain(
        y, K, K_tilde, s2, s2_tilde, config, X=X, R=R, basis=basis, ranks=ranks
    )
    return chain.run()


def fit_dataset(
    dataset,
    pair,
    config: SamplerConfig,
    model: str = "nonspatial",
    R=None,
    basis: SpatialBasis | None = None,
    spatial_kwargs: dict | None = None,
) -> PosteriorAccumulator:
    """End-to-end fit: project columns, build the spatial basis if asked,
    run one chain, and attach SNP coordinates to the accumulator."""
    from .preprocess import restricted_projection
    from .spatial import build_spatial_basis

    if model not in ("nonspatial", "spatial"):
        raise ValueError(f"unknown model {model!r}")
    R_mat = R.R if hasattr(R, "R") else R
    Z = None if dataset.identity_link else dataset.Z
    if R_mat is not None and np.size(R_mat):
        K, Kt = restricted_projection(R_mat, Z, pair.G, pair.G_tilde)
    else:
        R_mat = None
        K = pair.G if Z is None else Z @ pair.G
        Kt = pair.G_tilde if Z is None else Z @ pair.G_tilde
    if model == "spatial" and basis is None:
        basis = build_spatial_basis(
            dataset.positions,
            dataset.chromosome,
            rho=config.rho,
            **(spatial_kwargs or {}),
        )
    acc = run_chain(
        dataset.y,
        K,
        Kt,
        pair.s2,
        pair.s2_tilde,
        config,
        X=dataset.X,
        R=R_mat,
        basis=basis if model == "spatial" else None,
    )
    acc.chromosome = dataset.chromosome
    acc.positions = dataset.positions
    return acc
