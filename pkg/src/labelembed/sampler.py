"""Random-walk Metropolis sampling over per-instance log posteriors.

One chain owns one RNG stream derived from a 64-bit seed, so results are
bit-reproducible and independent of how many chains run side by side.  The
batch entry point advances many chains in lockstep with vectorized proposal
and acceptance steps; the single-chain entry point is the same engine with a
batch of one, so both paths share acceptance logic exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import DomainError

# Robbins-Monro target for the acceptance rate of a random-walk proposal.
TARGET_ACCEPTANCE = 0.234

_BLOCK_STEPS = 1024
_SCALE_BOUND = 1e3  # adaptation may move proposal_scale by at most this factor


@dataclass(frozen=True)
class McmcConfig:
    """Chain length and proposal settings.

    Defaults (1000 retained, burn-in 50, thinning 20) reproduce the reference
    run configuration; burn_in=500 with thin=5 is a more conservative profile
    for unfamiliar targets.
    """

    n_retained: int = 1000
    burn_in: int = 50
    thin: int = 20
    proposal_scale: float = 0.5
    adapt: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_retained < 1:
            raise DomainError("n_retained must be >= 1")
        if self.burn_in < 0:
            raise DomainError("burn_in must be >= 0")
        if self.thin < 1:
            raise DomainError("thin must be >= 1")
        if not (self.proposal_scale > 0):
            raise DomainError("proposal_scale must be > 0")
        if not (0 <= int(self.seed) < 2**64):
            raise DomainError("seed must fit in 64 unsigned bits")

    @property
    def total_steps(self) -> int:
        return self.burn_in + self.n_retained * self.thin


@dataclass(frozen=True)
class PosteriorDraws:
    """Retained states of one chain plus run diagnostics.

    ``acceptance_warning`` is set when the post-burn-in acceptance rate falls
    outside [0.05, 0.95]; it never aborts a run.
    """

    draws: np.ndarray
    acceptance_rate: float
    seed_used: int
    acceptance_warning: bool = False
    proposal_scale_final: float = float("nan")

    @property
    def n_retained(self) -> int:
        return self.draws.shape[0]

    @property
    def K(self) -> int:
        return self.draws.shape[1]


def derive_seed(run_seed: int, index: int) -> int:
    """Per-chain 64-bit seed from a run seed and a chain index.

    Uses the splittable SeedSequence scheme, so chains are statistically
    independent and their identity does not depend on scheduling order.
    """
    ss = np.random.SeedSequence(entropy=int(run_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def _fill_blocks(gens, n_steps, K):
    """Per-chain standard-normal increments and log-uniforms for a block."""
    P = len(gens)
    eps = np.empty((P, n_steps, K))
    logu = np.empty((P, n_steps))
    for p, g in enumerate(gens):
        eps[p] = g.standard_normal((n_steps, K))
        logu[p] = np.log(g.random(n_steps))
    return eps, logu


def rw_metropolis_batch(
    target_rows: Callable[[np.ndarray], np.ndarray],
    inits: np.ndarray,
    config: McmcConfig,
    seeds: Sequence[int],
) -> list[PosteriorDraws]:
    """Run one random-walk Metropolis chain per row of ``inits`` in lockstep.

    ``target_rows`` maps a (P, K) state matrix to the P log densities.  Each
    chain consumes only its own seeded stream, so chain p's draws depend on
    (target row p, inits[p], config, seeds[p]) and nothing else.
    """
    inits = np.atleast_2d(np.asarray(inits, dtype=float))
    P, K = inits.shape
    if len(seeds) != P:
        raise DomainError(f"got {len(seeds)} seeds for {P} chains")
    lp = np.asarray(target_rows(inits), dtype=float).reshape(P)
    if not np.all(np.isfinite(lp)):
        bad = int(np.flatnonzero(~np.isfinite(lp))[0])
        raise DomainError(f"target is not finite at the initial state (chain {bad})")

    gens = [np.random.default_rng(int(s)) for s in seeds]
    Z = inits.copy()
    scales = np.full(P, config.proposal_scale)
    log_scales = np.log(scales)
    lo, hi = np.log(config.proposal_scale / _SCALE_BOUND), np.log(
        config.proposal_scale * _SCALE_BOUND
    )

    total = config.total_steps
    draws = np.empty((P, config.n_retained, K))
    accepted_post = np.zeros(P, dtype=np.int64)
    n_kept = 0

    step = 0
    while step < total:
        b = min(_BLOCK_STEPS, total - step)
        eps, logu = _fill_blocks(gens, b, K)
        for i in range(b):
            t = step + i
            Zp = Z + scales[:, None] * eps[:, i, :]
            lpp = np.asarray(target_rows(Zp), dtype=float).reshape(P)
            acc = logu[:, i] < (lpp - lp)  # NaN proposals compare False
            if acc.any():
                Z[acc] = Zp[acc]
                lp[acc] = lpp[acc]
            if t < config.burn_in:
                if config.adapt:
                    gamma = (t + 1.0) ** -0.6
                    log_scales = np.clip(
                        log_scales + gamma * (acc - TARGET_ACCEPTANCE), lo, hi
                    )
                    scales = np.exp(log_scales)
            else:
                accepted_post += acc
                if (t - config.burn_in + 1) % config.thin == 0:
                    draws[:, n_kept, :] = Z
                    n_kept += 1
        step += b

    n_post = config.n_retained * config.thin
    rates = accepted_post / max(n_post, 1)
    out = []
    for p in range(P):
        rate = float(rates[p])
        out.append(
            PosteriorDraws(
                draws=draws[p],
                acceptance_rate=rate,
                seed_used=int(seeds[p]),
                acceptance_warning=not (0.05 <= rate <= 0.95),
                proposal_scale_final=float(scales[p]),
            )
        )
    return out


def rw_metropolis(
    target: Callable[[np.ndarray], float], init, config: McmcConfig
) -> PosteriorDraws:
    """Sample a single K-dimensional log density by random-walk Metropolis.

    Runs burn_in + n_retained*thin isotropic Gaussian proposal steps and
    keeps every thin-th post-burn-in state; bit-identical for a fixed seed.
    """
    init = np.asarray(init, dtype=float).reshape(1, -1)

    def rows(Z):
        return np.array([target(Z[0])], dtype=float)

    return rw_metropolis_batch(rows, init, config, [config.seed])[0]


def _draw_matrix(draws) -> np.ndarray:
    if isinstance(draws, PosteriorDraws):
        return draws.draws
    return np.atleast_2d(np.asarray(draws, dtype=float))


def posterior_mean(draws) -> np.ndarray:
    """Column-wise mean of the retained draws."""
    mat = _draw_matrix(draws)
    if mat.shape[0] < 1:
        raise DomainError("need at least one retained draw")
    return mat.mean(axis=0)


def posterior_covariance(draws) -> np.ndarray:
    """Unbiased sample covariance of the retained draws (symmetrized)."""
    mat = _draw_matrix(draws)
    if mat.shape[0] < 2:
        raise DomainError("need at least two retained draws")
    cov = np.cov(mat, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return 0.5 * (cov + cov.T)


def effective_sample_size(x) -> float:
    """ESS of a 1-D chain via Geyer's initial positive sequence estimator."""
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.size
    if n < 4:
        return float(n)
    xc = x - x.mean()
    var = float(xc @ xc) / n
    if var <= 0:
        return float(n)
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n].real / n
    rho = acov / acov[0]
    # sum consecutive lag pairs while they stay positive
    tau = 1.0
    for k in range(1, n // 2):
        pair = rho[2 * k - 1] + rho[2 * k]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / tau)
