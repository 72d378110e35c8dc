"""Seeded generation of clustered micro-randomized trial panels.

Each panel is reproducible from ``ScenarioConfig.seed``: cluster-level random
effects come from the substream (seed, 0, cluster) and each individual's
states, treatments and outcome uniforms from (seed, 1, cluster, individual),
so clusters can be generated in any order or in parallel.

Scenarios I-IV follow the proximal (lag-1) generative models; LAG-I..III make
the proximal outcome at decision s depend on the treatment at s-1 as well, so
the lag-2 outcome Y_{t,2} is the proximal outcome recorded at t+1.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri

from .panel import ClusterPanel
from .weights import ReferencePolicy

SCENARIOS = ("I", "II", "III", "IV", "LAG-I", "LAG-II", "LAG-III")
BASE_RATES = np.array([0.1, 0.25, 0.2])
TRANSITION = np.array([[0.5, 0.25, 0.25], [0.25, 0.5, 0.25], [0.25, 0.25, 0.5]])
EFFECT = (0.1, 0.3)
LAG_EFFECT = (0.05, 0.065)


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class TruncatedNormalParams:
    mu: float = 0.0
    sigma: float = 0.5
    a: float = -1.0
    b: float = 1.0

    def __post_init__(self):
        if not self.a < self.b:
            raise SimulationError("truncation bounds need a < b")
        if self.sigma < 0:
            raise SimulationError("sigma must be >= 0")


@dataclass(frozen=True)
class ScenarioConfig:
    """Generative model selector.

    ``sigma``, ``a`` and ``b`` parameterize the truncated normal of the
    cluster random effect (``a``/``b`` default to -1/1 for I-IV and
    -0.8/0.8 for the LAG scenarios). ``sigma=0`` switches the random effect
    off. ``overflow`` decides what happens when a Bernoulli mean reaches 1:
    ``"error"`` raises, ``"clip"`` truncates it at 1.
    """

    scenario: str = "I"
    M: int = 25
    G: int = 5
    T: int = 30
    p_rand: float = 0.2
    mu: float = 0.0
    sigma: float = 0.5
    a: float | None = None
    b: float | None = None
    beta20: float = -0.1
    seed: int = 0
    overflow: str = "error"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise SimulationError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if min(self.M, self.G, self.T) < 1:
            raise SimulationError("M, G and T must be >= 1")
        if self.is_lag and self.T < 2:
            raise SimulationError("lag scenarios need T >= 2")
        if not 0 < self.p_rand < 1:
            raise SimulationError("p_rand must lie in (0, 1)")
        if self.overflow not in ("error", "clip"):
            raise SimulationError("overflow must be 'error' or 'clip'")
        if self.seed < 0:
            raise SimulationError("seed must be non-negative")
        self.truncation  # validates a < b, sigma

    @property
    def is_lag(self) -> bool:
        return self.scenario.startswith("LAG")

    @property
    def truncation(self) -> TruncatedNormalParams:
        default = 0.8 if self.is_lag else 1.0
        a = -default if self.a is None else self.a
        b = default if self.b is None else self.b
        return TruncatedNormalParams(self.mu, self.sigma, a, b)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise SimulationError(f"unknown scenario config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# random primitives


def substream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, *key)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def sample_markov_states(T: int, rng: np.random.Generator) -> np.ndarray:
    """Three-state chain, uniform start, stay w.p. 1/2, else move to either
    other state w.p. 1/4.

    The transition matrix is circulant, so the chain is (s0 + cumsum K) mod 3
    with i.i.d. increments K in {0, 1, 2} of probability (1/2, 1/4, 1/4).
    """
    if T < 1:
        raise SimulationError("T must be >= 1")
    s0 = int(rng.integers(3))
    u = rng.random(T - 1)
    steps = (u >= 0.5).astype(np.int64) + (u >= 0.75)
    return (s0 + np.concatenate(([0], np.cumsum(steps)))) % 3


def _tn_bounds(params: TruncatedNormalParams):
    lo = (params.a - params.mu) / params.sigma
    hi = (params.b - params.mu) / params.sigma
    return lo, hi


def sample_truncated_normal(params: TruncatedNormalParams, rng: np.random.Generator, size=None):
    """Inverse-CDF draw from N(mu, sigma^2) truncated to [a, b]."""
    u = rng.random(size)
    return truncated_normal_ppf(params, u)


def truncated_normal_ppf(params: TruncatedNormalParams, u):
    if params.sigma == 0:
        return np.clip(np.full_like(np.asarray(u, dtype=float), params.mu), params.a, params.b)[()]
    lo, hi = _tn_bounds(params)
    plo, phi_ = ndtr(lo), ndtr(hi)
    x = ndtri(plo + np.asarray(u) * (phi_ - plo)) * params.sigma + params.mu
    return np.clip(x, params.a, params.b)[()]


def truncated_normal_moments(params: TruncatedNormalParams) -> tuple[float, float]:
    """Mean and standard deviation of the truncated normal."""
    lo, hi = _tn_bounds(params)
    z = ndtr(hi) - ndtr(lo)
    dlo = math.exp(-lo * lo / 2) / math.sqrt(2 * math.pi)
    dhi = math.exp(-hi * hi / 2) / math.sqrt(2 * math.pi)
    mean = params.mu + params.sigma * (dlo - dhi) / z
    var = params.sigma**2 * (1 + (lo * dlo - hi * dhi) / z - ((dlo - dhi) / z) ** 2)
    return mean, math.sqrt(var)


def shift_constant(params: TruncatedNormalParams) -> float:
    """Additive c with E[exp(e + c)] = 1 for e ~ TN(0, sigma^2; a, b)."""
    if params.mu != 0:
        raise SimulationError("shift constant assumes mu = 0")
    s = params.sigma
    if s == 0:
        return 0.0
    num = ndtr(params.b / s - s) - ndtr(params.a / s - s)
    den = ndtr(params.b / s) - ndtr(params.a / s)
    return -(s * s) / 2 - math.log(num / den)


def indirect_normalizer(p: float, beta20: float, m: int) -> float:
    """gamma = (p e^beta20 + 1 - p)^(m - 2)."""
    if m < 2:
        raise SimulationError("cluster size must be >= 2")
    return (p * math.exp(beta20) + (1 - p)) ** (m - 2)


# --------------------------------------------------------------------------
# conditional mean models


def _random_effect(config: ScenarioConfig, u):
    params = config.truncation
    return truncated_normal_ppf(params, u) + shift_constant(params)


def direct_mean(config: ScenarioConfig, Z, Zbar, A, k, e, b):
    """E(Y | H_t, A) for Scenarios I-IV.

    ``k`` counts treated others in the cluster, ``e`` and ``b`` are the
    shifted cluster intercepts (non-interacting and treatment-interacting).
    """
    c = BASE_RATES[Z]
    s = config.scenario
    if s == "I":
        expo = A * (EFFECT[0] + EFFECT[1] * Z) + e
    elif s == "II":
        expo = A * (EFFECT[0] + EFFECT[1] * Z + b)
    elif s in ("III", "IV"):
        expo = A * (EFFECT[0] + EFFECT[1] * Zbar + b)
        if s == "IV":
            expo = expo + config.beta20 * k
    else:
        raise SimulationError(f"{s} is a lag scenario")
    mean = c * np.exp(expo)
    if s == "IV":
        mean = mean / indirect_normalizer(config.p_rand, config.beta20, config.G)
    return mean


def lag_mean(config: ScenarioConfig, Z_now, A_now, Z_prev, Zbar_prev, A_prev, e, b):
    """Proximal outcome mean at decision s for the LAG scenarios; the
    ``*_prev`` arguments refer to decision s-1 (A_prev = 0 at s = 1)."""
    c = BASE_RATES[Z_now]
    s = config.scenario
    now = A_now * (EFFECT[0] + EFFECT[1] * Z_now)
    if s == "LAG-I":
        lag = LAG_EFFECT[0] + LAG_EFFECT[1] * Z_prev
        extra = e
    elif s == "LAG-II":
        lag = LAG_EFFECT[0] + LAG_EFFECT[1] * Z_prev + b
        extra = 0.0
    elif s == "LAG-III":
        lag = LAG_EFFECT[0] + LAG_EFFECT[1] * Zbar_prev + b
        extra = 0.0
    else:
        raise SimulationError(f"{s} is not a lag scenario")
    return c * np.exp(now + A_prev * lag + extra)


def _check_mean(config: ScenarioConfig, mean, cluster: int):
    bad = ~((mean > 0) & (mean < 1))
    if not bad.any():
        return mean
    if config.overflow == "clip" and np.all(mean[bad] >= 1):
        return np.minimum(mean, 1.0)
    j, t = np.argwhere(bad)[0]
    raise SimulationError(
        f"scenario {config.scenario}: Bernoulli mean {mean[j, t]:.6g} outside (0,1) "
        f"at cluster {cluster}, individual {j}, t={t + 1}"
    )


# --------------------------------------------------------------------------
# panel generation


def _generate_cluster(config: ScenarioConfig, m: int) -> dict:
    G, T = config.G, config.T
    crng = substream(config.seed, 0, m)
    u_e, u_b = crng.random(2)
    e = float(_random_effect(config, u_e)) if config.scenario in ("I", "LAG-I") else 0.0
    b = float(_random_effect(config, u_b)) if config.scenario not in ("I", "LAG-I") else 0.0

    Z = np.empty((G, T), dtype=np.int64)
    A = np.empty((G, T), dtype=np.int64)
    U = np.empty((G, T))
    for j in range(G):
        rng = substream(config.seed, 1, m, j)
        Z[j] = sample_markov_states(T, rng)
        A[j] = rng.random(T) < config.p_rand
        U[j] = rng.random(T)
    Zbar = np.broadcast_to(Z.mean(axis=0), (G, T))
    k = A.sum(axis=0)[None, :] - A

    if config.is_lag:
        A_prev = np.zeros_like(A)
        A_prev[:, 1:] = A[:, :-1]
        Z_prev = np.zeros_like(Z)
        Z_prev[:, 1:] = Z[:, :-1]
        Zbar_prev = np.zeros((G, T))
        Zbar_prev[:, 1:] = Zbar[:, :-1]
        mean = lag_mean(config, Z, A, Z_prev, Zbar_prev, A_prev, e, b)
    else:
        mean = direct_mean(config, Z, Zbar, A, k, e, b)
    mean = _check_mean(config, mean, m)
    Y = (U < mean).astype(np.int64)
    return {"Z": Z, "Zbar": np.array(Zbar), "k": k, "A": A, "Y": Y, "e": e, "b": b}


def generate_scenario(config: ScenarioConfig, jobs: int = 1) -> ClusterPanel:
    """Simulate a panel; identical output for any ``jobs``."""
    M, G, T = config.M, config.G, config.T
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(lambda m: _generate_cluster(config, m), range(M)))
    else:
        parts = [_generate_cluster(config, m) for m in range(M)]

    def stack(key, dtype=None):
        return np.concatenate([p[key].reshape(-1) for p in parts]).astype(dtype or parts[0][key].dtype)

    n = M * G * T
    cluster = np.repeat(np.arange(M), G * T)
    user = np.tile(np.repeat(np.arange(G), T), M)
    t = np.tile(np.arange(1, T + 1), M * G)
    return ClusterPanel(
        cluster=cluster,
        user=user,
        t=t,
        A=stack("A"),
        prob=np.full(n, config.p_rand),
        avail=np.ones(n, dtype=np.int64),
        Y=stack("Y"),
        states={
            "Z": stack("Z", float),
            "Zbar": stack("Zbar", float),
            "n_treated_others": stack("k", float),
        },
    )


def cluster_effects(config: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
    """Shifted cluster random effects (e', b') exactly as the generator draws
    them, zero where the scenario does not use one."""
    e = np.zeros(config.M)
    b = np.zeros(config.M)
    for m in range(config.M):
        u_e, u_b = substream(config.seed, 0, m).random(2)
        if config.scenario in ("I", "LAG-I"):
            e[m] = _random_effect(config, u_e)
        else:
            b[m] = _random_effect(config, u_b)
    return e, b


# --------------------------------------------------------------------------
# true effects


def closed_form_effect() -> float:
    """Marginal log relative risk of Scenarios I/II at the uniform stationary law."""
    z = np.arange(3)
    return float(np.log(np.sum(BASE_RATES * np.exp(EFFECT[0] + EFFECT[1] * z)) / BASE_RATES.sum()))


def true_marginal_effect(
    config: ScenarioConfig,
    policy: ReferencePolicy | str = "otd",
    estimand: str | None = None,
    n_draws: int | None = None,
    oracle_seed: int = 0,
) -> float:
    """Fully marginal effect targeted by the estimators for ``config``.

    ``estimand`` is ``"direct"`` or ``"indirect"``; Scenario IV defaults to
    the indirect effect, everything else to the direct one. ``policy`` is
    the lag-window reference policy (LAG scenarios only). Values come from
    exact enumeration; pass ``n_draws`` to use the Monte Carlo oracle instead.
    """
    s = config.scenario
    if estimand is None:
        estimand = "indirect" if s == "IV" else "direct"
    if estimand == "indirect":
        if s != "IV":
            raise SimulationError("indirect truth is defined for Scenario IV only")
        return float(config.beta20)
    if estimand != "direct":
        raise SimulationError(f"unknown estimand {estimand!r}")
    if n_draws is not None:
        if config.is_lag:
            return monte_carlo_lag_effect(config, policy, n_draws, oracle_seed)
        return monte_carlo_direct_effect(config, n_draws, oracle_seed)
    if config.is_lag:
        return exact_lag_effect(config, policy)
    return exact_direct_effect(config)


def effect_mean(config: ScenarioConfig, base):
    """E[min(1, base * exp(r))] over the shifted cluster effect r.

    Without clipping this is ``base`` because E[exp(r)] = 1. With clipping
    the truncated-normal integral splits at the point where the mean hits 1
    and both pieces have closed forms.
    """
    base = np.asarray(base, dtype=float)
    if config.overflow != "clip":
        return base
    tn = config.truncation
    c = shift_constant(tn)
    sd = tn.sigma
    if sd == 0:
        return np.minimum(1.0, base * math.exp(c))
    z = ndtr(tn.b / sd) - ndtr(tn.a / sd)
    with np.errstate(divide="ignore"):
        x0 = np.clip(-np.log(base) - c, tn.a, tn.b)
    below = base * math.exp(c + sd * sd / 2) * (ndtr(x0 / sd - sd) - ndtr(tn.a / sd - sd)) / z
    above = (ndtr(tn.b / sd) - ndtr(x0 / sd)) / z
    return below + above


def _sum_pmf(n: int) -> np.ndarray:
    """pmf of a sum of n independent uniform draws on {0, 1, 2}."""
    pmf = np.array([1.0])
    for _ in range(n):
        pmf = np.convolve(pmf, np.full(3, 1 / 3))
    return pmf


def exact_direct_effect(config: ScenarioConfig) -> float:
    """Direct marginal effect for Scenarios I-IV by enumeration.

    At a fixed decision point the individuals' states are independent and
    uniform, so the sum of the other G-1 states has a convolution pmf and the
    number of treated others is Binomial(G-1, p). The cluster effect is
    integrated out by ``effect_mean``.
    """
    s = config.scenario
    if config.is_lag:
        raise SimulationError(f"{s} is a lag scenario")
    G = config.G
    z = np.arange(3)[:, None, None]
    others = np.arange(2 * (G - 1) + 1)[None, :, None]
    w = _sum_pmf(G - 1)[None, :, None] / 3
    if s == "IV":
        k = np.arange(G)[None, None, :]
        w = w * stats.binom.pmf(k, G - 1, config.p_rand)
    else:
        k = np.zeros((1, 1, 1), dtype=np.int64)
    Zbar = (z + others) / G
    base1 = direct_mean(config, z, Zbar, 1, k, 0.0, 0.0)
    base0 = direct_mean(config, z, Zbar, 0, k, 0.0, 0.0)
    m1 = effect_mean(config, base1)
    m0 = effect_mean(config, base0) if s == "I" else _clip(config, base0)
    return float(np.log(np.sum(w * m1) / np.sum(w * m0)))


def exact_lag_effect(config: ScenarioConfig, policy: ReferencePolicy | str = "otd") -> float:
    """Lag-2 marginal effect by enumerating (Z_t, Z_{t+1}, sum of others' Z_t)
    and the reference-policy treatment at t+1."""
    if not config.is_lag:
        raise SimulationError("exact lag truth covers the LAG scenarios")
    pi1 = float(ReferencePolicy.parse(policy).treat_prob(config.p_rand))
    G = config.G
    z = np.arange(3)[:, None, None]
    z_next = np.arange(3)[None, :, None]
    if config.scenario == "LAG-III":
        others = np.arange(2 * (G - 1) + 1)[None, None, :]
        w = TRANSITION[z, z_next] / 3 * _sum_pmf(G - 1)[None, None, :]
        Zbar = (z + others) / G
    else:
        w = TRANSITION[z, z_next] / 3
        Zbar = z.astype(float)
    values = []
    for a in (0, 1):
        v = 0.0
        for a_next, p_next in ((0, 1 - pi1), (1, pi1)):
            if p_next == 0:
                continue
            base = lag_mean(config, z_next, a_next, z, Zbar, a, 0.0, 0.0)
            random = config.scenario == "LAG-I" or a == 1
            v = v + p_next * (effect_mean(config, base) if random else _clip(config, base))
        values.append(np.sum(w * v))
    return float(np.log(values[1] / values[0]))


def _oracle_clusters(config: ScenarioConfig, n_draws: int, rng):
    n_cl = max(1, math.ceil(n_draws / config.G))
    e = _random_effect(config, rng.random(n_cl))[:, None]
    b = _random_effect(config, rng.random(n_cl))[:, None]
    if config.scenario in ("I", "LAG-I"):
        b = np.zeros_like(b)
    else:
        e = np.zeros_like(e)
    return n_cl, e, b


def _clip(config, mean):
    return np.minimum(mean, 1.0) if config.overflow == "clip" else mean


def monte_carlo_direct_effect(config: ScenarioConfig, n_draws: int = 1_000_000, oracle_seed: int = 0) -> float:
    """log of E[E(Y|H, A=1)] / E[E(Y|H, A=0)] by stationary Monte Carlo."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(oracle_seed)))
    n_cl, e, b = _oracle_clusters(config, n_draws, rng)
    G = config.G
    Z = rng.integers(0, 3, size=(n_cl, G))
    Zbar = Z.mean(axis=1, keepdims=True)
    k = rng.binomial(G - 1, config.p_rand, size=(n_cl, G)) if config.scenario == "IV" else 0
    m1 = _clip(config, direct_mean(config, Z, Zbar, 1, k, e, b))
    m0 = _clip(config, direct_mean(config, Z, Zbar, 0, k, e, b))
    return float(np.log(m1.mean() / m0.mean()))


def monte_carlo_lag_effect(
    config: ScenarioConfig,
    policy: ReferencePolicy | str = "otd",
    n_draws: int = 1_000_000,
    oracle_seed: int = 0,
) -> float:
    """Lag-2 marginal effect: treatment at t+1 follows the reference policy,
    states are stationary, and E over A_{t+1} is taken exactly."""
    policy = ReferencePolicy.parse(policy)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(oracle_seed)))
    n_cl, e, b = _oracle_clusters(config, n_draws, rng)
    G = config.G
    Z_t = rng.integers(0, 3, size=(n_cl, G))
    u = rng.random((n_cl, G))
    Z_next = (Z_t + (u >= 0.5) + (u >= 0.75)) % 3
    Zbar_t = Z_t.mean(axis=1, keepdims=True)
    pi1 = float(policy.treat_prob(config.p_rand))
    values = []
    for a in (0, 1):
        v = 0.0
        for a_next, w in ((0, 1 - pi1), (1, pi1)):
            if w == 0:
                continue
            v = v + w * _clip(config, lag_mean(config, Z_next, a_next, Z_t, Zbar_t, a, e, b))
        values.append(np.mean(v))
    return float(np.log(values[1] / values[0]))
