"""Mask-and-uniform categorical diffusion over codebook indices.

States 0..K-1 are codebook entries and state K is [MASK]. One forward step
keeps a real token with probability alpha_t, resamples it uniformly over the
K entries with probability beta_t and masks it with probability gamma_t:

    Q_t[i, j] = alpha_t * [i == j] + beta_t / K     (i, j < K)
    Q_t[i, K] = gamma_t                             (i < K)
    Q_t[K, :] = one-hot at K

so the real diagonal is 1 - gamma_t - (K - 1) * beta_t / K. The family is
closed under products: the t-step matrix has the same form with the
cumulative triple (alpha_bar, beta_bar, gamma_bar).
"""
import itertools
import logging
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from ._typings import FloatArray, IntArray, SlotsT
from .autodiff import Tensor
from .config import ScheduleConfig
from .errors import ConfigError, InconsistentStateError, ScheduleError
from .helper import Helper
from .patch_codec import TokenMap

__all__ = [
    "EPS",
    "LOG_FLOOR",
    "SCHEDULE_KINDS",
    "DiffusionSchedule",
    "apply_cfg",
    "build_schedule",
    "elbo",
    "exact_nll",
    "forward_marginal",
    "log_onehot",
    "posterior",
    "posterior_entropy_floor",
    "posterior_tensor",
    "q_sample",
    "reverse_distribution",
    "reverse_step",
    "sample_categorical",
    "schedule_from_config",
    "training_loss",
]

logger = logging.getLogger(__name__)

EPS: float = 1e-30
LOG_FLOOR: float = float(np.log(EPS))
SCHEDULE_KINDS: Tuple[str, ...] = ("linear-cumulative", "constant", "custom")
# the mask probability at T must reach this for the chain to count as fully corrupting
FULL_CORRUPTION: float = 1.0 - 1e-9
REACHABLE_MASS: float = 1e-20

# (s_t indices (N,), t) -> log p(s0_hat | s_t) of shape (N, K)
DenoiserFn = Callable[[IntArray, int], FloatArray]


class DiffusionSchedule:
    """Per step and cumulative (alpha, beta, gamma) for t = 0..T; t = 0 is the identity"""

    __slots__: SlotsT = [
        "__weakref__",
        "T",
        "K",
        "kind",
        "alpha",
        "beta",
        "gamma",
        "alpha_bar",
        "beta_bar",
        "gamma_bar",
    ]

    def __init__(
        self, K: int, alpha: FloatArray, beta: FloatArray, gamma: FloatArray, kind: str = "custom"
    ) -> None:
        alpha, beta, gamma = (np.asarray(v, dtype=np.float64) for v in (alpha, beta, gamma))
        if K < 2:
            raise ScheduleError(f"K must be at least 2, got {K}")
        if not alpha.shape == beta.shape == gamma.shape or alpha.ndim != 1 or alpha.size < 1:
            raise ScheduleError("alpha, beta and gamma must be 1-d arrays of equal length T >= 1")
        self.T: int = int(alpha.size)
        self.K: int = int(K)
        self.kind: str = kind
        self.alpha: FloatArray = np.concatenate([[1.0], alpha])
        self.beta: FloatArray = np.concatenate([[0.0], beta])
        self.gamma: FloatArray = np.concatenate([[0.0], gamma])
        self.alpha_bar: FloatArray = np.cumprod(self.alpha)
        self.gamma_bar: FloatArray = 1.0 - np.cumprod(1.0 - self.gamma)
        self.beta_bar: FloatArray = 1.0 - self.alpha_bar - self.gamma_bar
        self._validate()

    def _validate(self) -> None:
        tol = 1e-12
        for name in ("alpha", "beta", "gamma", "alpha_bar", "beta_bar", "gamma_bar"):
            values = getattr(self, name)
            if not np.all(np.isfinite(values)) or values.min() < -tol or values.max() > 1 + tol:
                raise ScheduleError(f"{name} leaves [0, 1]: {values.min()}..{values.max()}")
        diag = 1.0 - self.gamma - (self.K - 1) * self.beta / self.K
        if diag.min() < -tol:
            raise ScheduleError(f"negative diagonal transition probability {diag.min()}")
        # clip rounding noise so matrices are exactly non negative
        self.beta_bar = np.clip(self.beta_bar, 0.0, 1.0)
        # a chain that never resamples must not reach other real entries
        if not np.any(self.beta > 0):
            self.beta_bar = np.zeros_like(self.beta_bar)

    @property
    def mask_index(self) -> int:
        return self.K

    @property
    def states(self) -> int:
        return self.K + 1

    @property
    def keep_probability(self) -> FloatArray:
        """1 - gamma_t: probability that a real token is not masked by step t"""
        return 1.0 - self.gamma

    @property
    def fully_corrupting(self) -> bool:
        """True when no information about s_0 survives at t = T"""
        return bool(self.alpha_bar[self.T] <= 1e-12)

    @property
    def fully_masked(self) -> bool:
        return bool(self.gamma_bar[self.T] >= FULL_CORRUPTION)

    def _check_t(self, t: Any, lowest: int = 0) -> None:
        ts = np.asarray(t)
        if ts.size and (ts.min() < lowest or ts.max() > self.T):
            raise ValueError(f"timestep out of range [{lowest}, {self.T}]: {ts.min()}..{ts.max()}")

    @staticmethod
    def _matrices(K: int, a: FloatArray, b: FloatArray, g: FloatArray) -> FloatArray:
        a, b, g = (np.asarray(v, dtype=np.float64) for v in (a, b, g))
        out = np.zeros(a.shape + (K + 1, K + 1))
        out[..., :K, :K] = b[..., None, None] / K
        idx = np.arange(K)
        out[..., idx, idx] += a[..., None]
        out[..., :K, K] = g[..., None]
        out[..., K, K] = 1.0
        return out

    def step_matrix(self, t: Any) -> FloatArray:
        """Q_t, or a stack of them for an array of timesteps"""
        self._check_t(t, 1)
        return self._matrices(self.K, self.alpha[t], self.beta[t], self.gamma[t])

    def cumulative_matrix(self, t: Any) -> FloatArray:
        """Q_bar_t = Q_1 ... Q_t in closed form; Q_bar_0 is the identity"""
        self._check_t(t, 0)
        return self._matrices(self.K, self.alpha_bar[t], self.beta_bar[t], self.gamma_bar[t])

    def prior(self) -> FloatArray:
        """p(s_T): the all-mask point mass when gamma_bar_T = 1, else the uniform-s_0 marginal"""
        if self.fully_masked:
            p = np.zeros(self.states)
            p[self.K] = 1.0
            return p
        return self.cumulative_matrix(self.T)[: self.K].mean(axis=0)

    def dump(self) -> str:
        lines = ["t\talpha\tbeta\tgamma\talpha_bar\tbeta_bar\tgamma_bar"]
        for t in range(1, self.T + 1):
            row = (
                self.alpha[t],
                self.beta[t],
                self.gamma[t],
                self.alpha_bar[t],
                self.beta_bar[t],
                self.gamma_bar[t],
            )
            lines.append(f"{t}\t" + "\t".join(f"{v:.8f}" for v in row))
        return "\n".join(lines) + "\n"

    def __str__(self) -> str:
        return f"DiffusionSchedule(T={self.T}, K={self.K}, kind={self.kind}, gamma_bar_T={self.gamma_bar[self.T]:.4f})"

    def __repr__(self) -> str:
        return self.__str__()


def build_schedule(
    T: int,
    K: int,
    kind: str = "linear-cumulative",
    mask_final: float = 0.9,
    uniform_final: float = 0.1,
    gamma: Union[float, Sequence[float]] = 0.1,
    beta: Union[float, Sequence[float]] = 0.0,
    strict: bool = False,
) -> DiffusionSchedule:
    """Build a schedule

    :param T: Number of steps
    :param K: Codebook size
    :param kind: ``linear-cumulative``: gamma_bar_t = mask_final * t / T and
        beta_bar_t = uniform_final * t / T with per step values recovered from
        the recurrences; ``constant``: every step uses the scalars gamma and
        beta; ``custom``: gamma and beta are per step sequences of length T
    :param strict: Reject schedules that are not fully corrupting at T
    """
    if T < 1 or K < 2:
        raise ScheduleError(f"need T >= 1 and K >= 2, got T={T}, K={K}")
    if kind == "linear-cumulative":
        frac = np.arange(1, T + 1) / T
        g_bar = np.concatenate([[0.0], mask_final * frac])
        a_bar = np.concatenate([[1.0], 1.0 - (mask_final + uniform_final) * frac])
        if a_bar.min() < -1e-12 or g_bar.max() > 1.0:
            raise ScheduleError(
                f"mask_final + uniform_final must not exceed 1: {mask_final} + {uniform_final}"
            )
        a_bar = np.clip(a_bar, 0.0, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = np.where(a_bar[:-1] > 0, a_bar[1:] / a_bar[:-1], 0.0)
            keep = np.where(g_bar[:-1] < 1.0, (1.0 - g_bar[1:]) / (1.0 - g_bar[:-1]), 1.0)
        gammas = 1.0 - keep
        betas = 1.0 - alpha - gammas
    elif kind == "constant":
        gammas = np.full(T, float(gamma))  # type: ignore
        betas = np.full(T, float(beta))  # type: ignore
        alpha = 1.0 - gammas - betas
    elif kind == "custom":
        gammas = np.asarray(gamma, dtype=np.float64).reshape(-1)
        betas = np.asarray(beta, dtype=np.float64).reshape(-1)
        if gammas.size != T or betas.size != T:
            raise ScheduleError(f"custom schedules need {T} gamma and beta values")
        alpha = 1.0 - gammas - betas
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")
    if np.any(alpha < -1e-12) or np.any(betas < -1e-12) or np.any(gammas < -1e-12):
        raise ScheduleError(f"{kind} schedule yields negative probabilities")
    schedule = DiffusionSchedule(
        K, np.clip(alpha, 0.0, 1.0), np.clip(betas, 0.0, 1.0), np.clip(gammas, 0.0, 1.0), kind
    )
    if not schedule.fully_corrupting:
        if strict:
            raise ScheduleError(f"{schedule} keeps information about s_0 at t = T")
        logger.warning("%s is not fully corrupting at t = T", schedule)
    return schedule


def log_onehot(indices: Any, states: int) -> FloatArray:
    """Log one-hot vectors floored at log(1e-30)"""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.full(idx.shape + (states,), LOG_FLOOR)
    np.put_along_axis(out, idx[..., None], 0.0, axis=-1)
    return out


def sample_categorical(probs: FloatArray, rng: np.random.Generator) -> IntArray:
    """Inverse CDF sampling along the last axis, one uniform draw per row"""
    p = np.asarray(probs, dtype=np.float64)
    cdf = np.cumsum(p, axis=-1)
    cdf /= cdf[..., -1:]
    u = np.asarray(rng.random(p.shape[:-1]))
    idx = np.sum(cdf <= u[..., None], axis=-1)
    return np.minimum(idx, p.shape[-1] - 1).astype(np.int64)


def _as_indices(s: Union[TokenMap, Any]) -> IntArray:
    if isinstance(s, TokenMap):
        return s.indices
    return np.asarray(s, dtype=np.int64)


def q_probs(s0: Any, t: Any, schedule: DiffusionSchedule) -> FloatArray:
    """q(s_t | s_0) per position; t is a scalar or one timestep per leading row"""
    idx = _as_indices(s0)
    if idx.size and idx.max() >= schedule.K:
        raise ValueError("s_0 must not contain [MASK]")
    cum = schedule.cumulative_matrix(np.asarray(t))
    if cum.ndim == 2:
        return cum[idx]
    return np.take_along_axis(cum, idx.reshape(idx.shape[0], -1)[..., None], axis=1).reshape(
        idx.shape + (schedule.states,)
    )


def q_sample(s0: Any, t: Any, schedule: DiffusionSchedule, rng: np.random.Generator) -> IntArray:
    return sample_categorical(q_probs(s0, t, schedule), rng)


def forward_marginal(
    s0: TokenMap, t: int, schedule: DiffusionSchedule, seed: int
) -> Tuple[TokenMap, FloatArray]:
    """Sample s_t ~ q(s_t | s_0) independently per position

    :return: The corrupted map and the (N, K + 1) distribution it was drawn from
    """
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must lie in [1, {schedule.T}], got {t}")
    probs = q_probs(s0.indices, t, schedule)
    return s0.copy(sample_categorical(probs, Helper.rng(seed))), probs


def _gather_columns(mats: FloatArray, states: IntArray) -> FloatArray:
    """mats[..., :, s] for every s in states: (B, S, S) x (B, N) -> (B, N, S)"""
    cols = np.swapaxes(mats, -1, -2)
    return np.take_along_axis(cols, states[..., None], axis=-2)


def _posterior_terms(
    s_t: IntArray, t: IntArray, schedule: DiffusionSchedule
) -> Tuple[FloatArray, FloatArray, FloatArray]:
    K = schedule.K
    step_col = _gather_columns(schedule.step_matrix(t), s_t)
    denom = _gather_columns(schedule.cumulative_matrix(t), s_t)[..., :K]
    with np.errstate(divide="ignore"):
        inv = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), 0.0)
    prev = schedule.cumulative_matrix(t - 1)[..., :K, :]
    return step_col, inv, prev


def _batched(s_t: Any, t: Any) -> Tuple[IntArray, IntArray, bool]:
    st = np.asarray(s_t, dtype=np.int64)
    single = st.ndim == 1
    if single:
        st = st[None]
    ts = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (st.shape[0],)).copy()
    return st, ts, single


def posterior(
    s_t: Any, s0: Any, t: Any, schedule: DiffusionSchedule, s0_is_log_probs: bool = False
) -> FloatArray:
    """log q(s_{t-1} | s_t, s_0) or its expectation over a distribution of s_0

    :param s_t: (N,) or (B, N) state indices, [MASK] allowed
    :param s0: Indices of s_0 with the shape of s_t, or log-probabilities over
        the K real entries of shape s_t.shape + (K,) when ``s0_is_log_probs``
    :param t: Timestep, or one timestep per row of a (B, N) batch
    :return: Normalized log-probabilities of shape s_t.shape + (K + 1,)
    """
    schedule._check_t(t, 1)
    st, ts, single = _batched(s_t, t)
    K = schedule.K
    if s0_is_log_probs:
        p0 = np.exp(np.asarray(s0, dtype=np.float64)).reshape(st.shape + (K,))
    else:
        idx = np.asarray(s0, dtype=np.int64).reshape(st.shape)
        if idx.size and idx.max() >= K:
            raise ValueError("s_0 must not contain [MASK]")
        p0 = np.zeros(st.shape + (K,))
        np.put_along_axis(p0, idx[..., None], 1.0, axis=-1)
    step_col, inv, prev = _posterior_terms(st, ts, schedule)
    w = p0 * inv
    mix = np.matmul(w, prev) * step_col
    total = mix.sum(axis=-1)
    if np.any(total <= 0):
        raise InconsistentStateError(
            f"s_t cannot be reached from s_0 at t={ts[np.nonzero(total <= 0)[0][0]]}"
        )
    logp = np.log(np.maximum(mix, EPS))
    logp = logp - logsumexp(logp, axis=-1, keepdims=True)
    return logp[0] if single else logp


def posterior_tensor(
    s_t: IntArray, log_p0: Tensor, t: IntArray, schedule: DiffusionSchedule
) -> Tensor:
    """Differentiable log p(s_{t-1} | s_t) = log sum_s0 q(s_{t-1} | s_t, s_0) p(s_0 | s_t)

    :param s_t: (B, N) indices
    :param log_p0: (B, N, K) predicted log-probabilities of s_0
    :param t: (B,) timesteps
    """
    step_col, inv, prev = _posterior_terms(np.asarray(s_t), np.asarray(t), schedule)
    w = ad.exp(log_p0) * inv
    mix = ad.matmul(w, prev) * step_col
    logp = ad.log(ad.clamp_min(mix, EPS))
    return logp - ad.logsumexp(logp, axis=-1, keepdims=True)


def reverse_distribution(
    log_p0: FloatArray, s_t: Any, t: Any, schedule: DiffusionSchedule
) -> FloatArray:
    """log p_theta(s_{t-1} | s_t) from the denoiser's log p_theta(s0_hat | s_t)"""
    return posterior(s_t, log_p0, t, schedule, s0_is_log_probs=True)


def reverse_step(
    log_p0: FloatArray,
    s_t: Any,
    t: int,
    schedule: DiffusionSchedule,
    seed: Union[int, np.random.Generator],
) -> IntArray:
    """Draw s_{t-1}; at t = 1 return argmax p_theta(s_0 | s_1) (lowest index on ties)"""
    lp = np.asarray(log_p0, dtype=np.float64)
    if lp.shape[-1] != schedule.K:
        raise ValueError(f"denoiser must predict {schedule.K} categories, got {lp.shape[-1]}")
    if t == 1:
        return np.argmax(lp, axis=-1).astype(np.int64)
    rng = seed if isinstance(seed, np.random.Generator) else Helper.rng(seed)
    return sample_categorical(np.exp(reverse_distribution(lp, s_t, t, schedule)), rng)


def _kl(q: FloatArray, log_p: FloatArray) -> FloatArray:
    """KL(q || p) along the last axis with 0 log 0 = 0; clipped at 0"""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * (np.log(np.where(q > 0, q, 1.0)) - log_p), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def _prior_kl(s0: IntArray, schedule: DiffusionSchedule) -> float:
    q = q_probs(s0, schedule.T, schedule)
    log_prior = np.log(np.maximum(schedule.prior(), EPS))
    return float(_kl(q, log_prior).sum())


def _joint_states(
    probs: FloatArray, limit: int
) -> List[Tuple[Tuple[int, ...], float]]:
    support = [np.nonzero(row > 0)[0] for row in probs]
    count = int(np.prod([s.size for s in support]))
    if count > limit:
        raise ValueError(f"exact enumeration needs {count} joint states, limit is {limit}")
    out = []
    for combo in itertools.product(*support):
        prob = float(np.prod([probs[n, s] for n, s in enumerate(combo)]))
        out.append((tuple(int(s) for s in combo), prob))
    return out


def elbo(
    s0: Union[TokenMap, Any],
    denoiser: DenoiserFn,
    schedule: DiffusionSchedule,
    seed: int = 0,
    exact: bool = False,
    limit: int = 4096,
) -> Dict[str, Any]:
    """Upper bound on -log p_theta(s_0), summed over positions

    KL(q(s_T | s_0) || p(s_T)) + sum_t E_q(s_t | s_0) KL(q(s_{t-1} | s_t, s_0) || p_theta(s_{t-1} | s_t)).
    The expectation is estimated with one sample of s_t per t, or evaluated
    by enumerating every joint s_t when ``exact`` is set.

    :return: dict with ``total``, ``prior`` and the per step ``terms`` (index t - 1)
    """
    idx = _as_indices(s0)
    prior = _prior_kl(idx, schedule)
    terms: List[float] = []
    for t in range(1, schedule.T + 1):
        probs = q_probs(idx, t, schedule)
        if exact:
            draws = _joint_states(probs, limit)
        else:
            rng = Helper.rng(Helper.derive_seed(seed, "elbo", t))
            draws = [(tuple(sample_categorical(probs, rng)), 1.0)]
        value = 0.0
        for state, weight in draws:
            st = np.asarray(state, dtype=np.int64)
            q_post = np.exp(posterior(st, idx, t, schedule))
            p_rev = reverse_distribution(denoiser(st, t), st, t, schedule)
            value += weight * float(_kl(q_post, p_rev).sum())
        terms.append(value)
    return dict(total=prior + float(np.sum(terms)), prior=prior, terms=terms)


def exact_nll(
    s0: Union[TokenMap, Any], denoiser: DenoiserFn, schedule: DiffusionSchedule, limit: int = 4096
) -> float:
    """-log p_theta(s_0) by summing the reverse chain over every joint state"""
    idx = _as_indices(s0)
    n = idx.size
    states = list(itertools.product(range(schedule.states), repeat=n))
    if len(states) > limit:
        raise ValueError(f"exact likelihood needs {len(states)} joint states, limit is {limit}")
    index = {s: i for i, s in enumerate(states)}
    prior = schedule.prior()
    mass = np.array([np.prod([prior[v] for v in s]) for s in states])
    for t in range(schedule.T, 0, -1):
        nxt = np.zeros(len(states))
        for s, m in zip(states, mass):
            # states reached only through the log floor carry no real mass
            if m <= REACHABLE_MASS:
                continue
            st = np.asarray(s, dtype=np.int64)
            rev = np.exp(reverse_distribution(denoiser(st, t), st, t, schedule))
            for prev in states:
                p = np.prod([rev[k, v] for k, v in enumerate(prev)])
                nxt[index[prev]] += m * p
        mass = nxt
    return float(-np.log(max(mass[index[tuple(int(v) for v in idx)]], EPS)))


def posterior_entropy_floor(s0: Union[TokenMap, Any], schedule: DiffusionSchedule) -> float:
    """Expected entropy of q(s_{t-1} | s_t, s_0) per position, t uniform on 1..T

    This is the value of the main training loss for a denoiser that always
    predicts the true s_0.
    """
    idx = _as_indices(s0).reshape(-1)
    total = 0.0
    for t in range(1, schedule.T + 1):
        probs = q_probs(idx, t, schedule)
        for n, s in enumerate(idx):
            for state in np.nonzero(probs[n] > 0)[0]:
                logp = posterior(np.array([state]), np.array([s]), t, schedule)[0]
                p = np.exp(logp)
                entropy = -float(np.sum(np.where(p > 0, p * logp, 0.0)))
                total += probs[n, state] * entropy
    return total / (schedule.T * idx.size)


def training_loss(
    s0: Any,
    denoiser: Callable[[IntArray, IntArray], Tensor],
    schedule: DiffusionSchedule,
    aux_weight: float = 1e-3,
    rng: Optional[np.random.Generator] = None,
    main: str = "sampled",
    t: Optional[IntArray] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """Main reverse-step likelihood loss plus the weighted auxiliary s_0 loss

    :param s0: (B, N) clean indices
    :param denoiser: Maps (s_t (B, N), t (B,)) to (B, N, K) log-probabilities of s_0
    :param aux_weight: Weight of the auxiliary term
    :param main: ``sampled`` uses -log p_theta at an s_{t-1} drawn from the
        true posterior; ``expected`` uses the cross entropy against the whole
        true posterior
    :param t: Optional fixed timesteps, drawn uniformly from 1..T otherwise
    """
    if aux_weight < 0:
        raise ValueError(f"aux_weight must be non negative: {aux_weight}")
    if main not in ("sampled", "expected"):
        raise ValueError(f"unknown main loss {main!r}")
    rng = rng if rng is not None else Helper.rng(0)
    x0 = np.asarray(s0, dtype=np.int64)
    if x0.ndim == 1:
        x0 = x0[None]
    b = x0.shape[0]
    ts = rng.integers(1, schedule.T + 1, size=b) if t is None else np.asarray(t, dtype=np.int64)
    st = q_sample(x0, ts, schedule, rng)
    q_post = np.exp(posterior(st, x0, ts, schedule))

    log_p0 = denoiser(st, ts)
    log_prev = posterior_tensor(st, log_p0, ts, schedule)
    if main == "sampled":
        prev = sample_categorical(q_post, rng)
        l_main = -ad.gather(log_prev, prev[..., None]).mean()
    else:
        l_main = -(log_prev * q_post).sum(axis=-1).mean()
    l_aux = -ad.gather(log_p0, x0[..., None]).mean()
    loss = l_main + l_aux * aux_weight
    return loss, dict(main=l_main.item(), aux=l_aux.item(), loss=loss.item())


def apply_cfg(log_cond: Any, log_uncond: Any, w: float) -> FloatArray:
    """(1 + w) log p(s0 | s_t, y) - w log p(s0 | s_t, empty), floored and renormalized

    w = 0 returns the conditional log-probabilities unchanged.
    """
    if w < 0:
        raise ValueError(f"guidance weight must be non negative: {w}")
    lc = np.asarray(log_cond, dtype=np.float64)
    if w == 0:
        return lc.copy()
    lu = np.asarray(log_uncond, dtype=np.float64)
    mixed = np.maximum((1.0 + w) * lc - w * lu, LOG_FLOOR)
    return mixed - logsumexp(mixed, axis=-1, keepdims=True)


def schedule_from_config(config: ScheduleConfig, K: int, strict: bool = False) -> DiffusionSchedule:
    if config.kind == "custom":
        raise ConfigError("custom schedules take per step arrays and cannot be read from a config file")
    return build_schedule(
        config.steps,
        K,
        config.kind,
        mask_final=config.mask_final,
        uniform_final=config.uniform_final,
        gamma=config.gamma,
        beta=config.beta,
        strict=strict,
    )
