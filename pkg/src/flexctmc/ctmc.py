"""Rate matrices, forward-equation verification, and the two samplers.

The generating CTMC of the variable-length interpolant has two transition
families out of a state x: unmask a masked position i to a token v at rate
betadot/(1-beta) * P(hidden token = v | x), and insert one mask into gap i at
rate alphadot/(1-alpha) * E[gap i size | x]. The fixed-length chain keeps
only the unmasking family with weight alphadot/(1-alpha). Diagonal entries
are minus the total off-diagonal rate.

kfe_residual checks the Kolmogorov forward equation d/dt p_t(x) =
sum_y p_t(y) R_t(y, x) by comparing a central difference of the exact state
marginal (summed over index sets via the joint closed form) against the
rate-side sum, over every reachable state.

Simulation is tau-leaping on a uniform grid with the final rate evaluation
clamped to T_MAX, followed by a forced completion pass at t=1 that unmasks
remaining positions from the terminal posterior and never inserts. The total
event count per step is drawn once from the superposed Poisson law and split
multinomially across event categories, which reproduces the independent
per-category Poisson counts exactly.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .interpolant import joint_marginal
from .oracle import MdmOracle, OracleContext, UnreachableStateError, mdm_unmask_marginal
from .schedule import T_MAX, Schedule, SchedulePair
from .sequence import MASK, delete_at, insert_at, mask_positions, replace_at
from .target import TargetDistribution

DEFAULT_STATE_CAP = 100_000

STRATEGIES = (
    "vanilla",
    "topk_confidence",
    "topk_sliding_window",
    "leftmost",
    "random_order",
)


class StateCapExceeded(RuntimeError):
    """Reachable state enumeration is larger than the configured cap."""


def state_cap(override=None) -> int:
    if override is not None:
        return int(override)
    return int(os.environ.get("FLEXCTMC_STATE_CAP", DEFAULT_STATE_CAP))


@dataclass(frozen=True)
class AdaptiveConfig:
    """Sampler configuration: strategy, window parameters, grid size."""

    strategy: str = "vanilla"
    gamma1: float = 5.0
    gamma2: int = 64
    steps: int = 512

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.gamma1 <= 0:
            raise ValueError("gamma1 must be positive")
        if self.gamma2 < 1:
            raise ValueError("gamma2 must be >= 1")


@dataclass
class RateBundle:
    """Off-diagonal rates out of one state at one time.

    unmask maps (position, token) to a rate, insert maps gap position to a
    rate; the diagonal is implicitly minus the total. Flattened categories
    for the tau-leap draw are cached on first use.
    """

    state: tuple
    time: float
    unmask: dict
    insert: dict
    _cats: tuple = field(default=None, repr=False, compare=False)

    def total_rate(self) -> float:
        return sum(self.unmask.values()) + sum(self.insert.values())

    def _categories(self):
        if self._cats is None:
            groups = {}
            for (i, v), r in self.unmask.items():
                if r > 0:
                    groups.setdefault(i, []).append((v, r))
            rates, owners = [], []
            for i in sorted(groups):
                for v, r in sorted(groups[i]):
                    owners.append(("u", i, v))
                    rates.append(r)
            for g in sorted(self.insert):
                r = self.insert[g]
                if r > 0:
                    owners.append(("g", g, None))
                    rates.append(r)
            lam = np.asarray(rates, dtype=float)
            total = float(lam.sum())
            pvals = lam / total if total > 0 else lam
            self._cats = (owners, pvals, total)
        return self._cats


def flex_rates(source, t: float, x: tuple) -> RateBundle:
    """Variable-length rate bundle from any head source (oracle or model)."""
    if t > T_MAX:
        raise ValueError(f"rates are evaluated only up to T_MAX = {T_MAX}")
    w_unmask, w_insert = _step_weights(source.pair, t)
    return _flex_bundle(source, t, x, w_unmask, w_insert)


def _flex_bundle(source, t, x, w_unmask, w_insert) -> RateBundle:
    unmask = {}
    for i in mask_positions(x):
        dist = source.unmask_dist(t, x, i)
        for v, p in enumerate(dist):
            if p > 0.0:
                unmask[(i, int(v))] = w_unmask * float(p)
    insert = {}
    for g in range(len(x) + 1):
        mean = source.gap_mean(t, x, g)
        if mean > 0.0:
            insert[g] = w_insert * float(mean)
    return RateBundle(x, t, unmask, insert)


def mdm_rates(target: TargetDistribution, sch: Schedule, t: float, x: tuple) -> RateBundle:
    """Fixed-length rate bundle: unmasking entries only."""
    if t > T_MAX:
        raise ValueError(f"rates are evaluated only up to T_MAX = {T_MAX}")
    av, ad = sch.eval(t)
    return _mdm_bundle(target, t, x, ad / (1.0 - av))


def _mdm_bundle(target, t, x, w_unmask) -> RateBundle:
    unmask = {}
    for i in mask_positions(x):
        dist = mdm_unmask_marginal(target, t, x, i)
        for v, p in enumerate(dist):
            if p > 0.0:
                unmask[(i, int(v))] = w_unmask * float(p)
    return RateBundle(x, t, unmask, {})


def vanilla_step(rates: RateBundle, tau: float, rng) -> tuple:
    """One tau-leap: batch all Poisson events in [t, t+tau] against rates.

    A masked position is unmasked to v only when exactly one token at that
    position has event count 1 and the rest have 0. Gap g gains as many
    masks as its Poisson count; gaps are applied rightmost first so pre-step
    indices stay valid. All decisions read the pre-step state.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    owners, pvals, total = rates._categories()
    if total <= 0.0:
        return rates.state
    k_total = int(rng.poisson(total * tau))
    if k_total == 0:
        return rates.state
    counts = rng.multinomial(k_total, pvals)
    x = list(rates.state)
    pos = 0
    while pos < len(owners):
        kind, i, v = owners[pos]
        if kind == "g":
            break
        # scan this position's token block for the exactly-one-event rule
        hit_v, hits, total_events = None, 0, 0
        while pos < len(owners) and owners[pos][0] == "u" and owners[pos][1] == i:
            c = int(counts[pos])
            if c:
                hits += 1
                total_events += c
                hit_v = owners[pos][2]
            pos += 1
        if hits == 1 and total_events == 1:
            x[i] = hit_v
    inserts = [
        (g, int(counts[j]))
        for j, (kind, g, _) in enumerate(owners)
        if kind == "g" and counts[j]
    ]
    for g, ell in sorted(inserts, reverse=True):
        x[g:g] = [MASK] * ell
    return tuple(x)


def _draw_index(weights: np.ndarray, rng) -> int:
    c = np.cumsum(weights)
    return int(np.searchsorted(c, rng.random() * c[-1], side="right"))


def adaptive_step(source, t: float, x: tuple, cfg: AdaptiveConfig, rng, tau: float) -> tuple:
    """One any-order step: choose positions by strategy, reveal sequentially.

    K ~ Poisson(tau * betadot/(1-beta) * #masked) positions are selected
    (capped at the candidate count), then revealed left to right, each drawn
    from the unmasking posterior of the state updated by the previous
    reveals. Insertions then follow the tau-leap rule against the
    post-reveal state at the step's start time.
    """
    return _adaptive_step(source, t, x, cfg, rng, tau, _step_weights(source.pair, t))


def _step_weights(pair: SchedulePair, t: float) -> tuple:
    av, ad = pair.insertion.eval(t)
    bv, bd = pair.unmasking.eval(t)
    return bd / (1.0 - bv), ad / (1.0 - av)


def _adaptive_step(source, t, x, cfg, rng, tau, weights) -> tuple:
    w_unmask, w_insert = weights
    masked = list(mask_positions(x))
    if masked:
        k = int(rng.poisson(tau * w_unmask * len(masked)))
        if k > 0:
            chosen = _select_positions(source, t, x, masked, k, cfg, rng)
            for i in sorted(chosen):
                dist = source.unmask_dist(t, x, i)
                x = replace_at(x, i, _draw_index(dist, rng))
    # insertion half against the post-reveal state
    if hasattr(source, "expected_extra_len"):
        total_mean = source.expected_extra_len(t, x)
        k_ins = int(rng.poisson(tau * w_insert * total_mean)) if total_mean > 0 else 0
        if k_ins:
            gaps = np.maximum(np.asarray(source.gap_expectations(t, x)), 0.0)
            offset = len(x) + 1 - len(gaps)  # clamped gaps carry no rate
            counts = rng.multinomial(k_ins, gaps / gaps.sum())
            for g in range(len(counts) - 1, -1, -1):
                if counts[g]:
                    x = x[: g + offset] + (MASK,) * int(counts[g]) + x[g + offset :]
    else:
        for g in range(len(x), -1, -1):
            mean = source.gap_mean(t, x, g)
            if mean > 0:
                ell = int(rng.poisson(tau * w_insert * mean))
                if ell:
                    x = x[:g] + (MASK,) * ell + x[g:]
    return x


def _select_positions(source, t, x, masked, k, cfg, rng):
    if cfg.strategy == "leftmost":
        return masked[:k]
    if cfg.strategy == "random_order":
        k = min(k, len(masked))
        picks = rng.choice(len(masked), size=k, replace=False)
        return [masked[int(j)] for j in picks]
    cands = masked
    if cfg.strategy == "topk_sliding_window":
        window = min(int(cfg.gamma1 * len(x)), cfg.gamma2)
        cands = [i for i in masked if i < window]
        if not cands:
            return []
    scored = sorted(
        ((-float(np.max(source.unmask_dist(t, x, i))), i) for i in cands)
    )
    return [i for _, i in scored[:k]]


def _tail_gap_vector(source, t, x):
    """Gap-mean vector and its index offset for the clamped positions."""
    if hasattr(source, "gap_expectations"):
        gaps = np.maximum(np.asarray(source.gap_expectations(t, x)), 0.0)
        return gaps, len(x) + 1 - len(gaps)
    gaps = np.array([max(source.gap_mean(t, x, g), 0.0) for g in range(len(x) + 1)])
    return gaps, 0


def _exact_tail_window(source, a: float, b: float, x: tuple, rng) -> tuple:
    """Event-driven simulation of the variable-length chain over [a, b].

    The window ending at the time clamp carries the integrable singularity
    of both schedule weights; a frozen-rate leap cannot represent it (its
    Poisson counts overshoot while the state should self-limit), so the
    terminal window draws each jump at its exact inverse-hazard time and
    re-queries the heads after every event. Head factors are held constant
    between events; the time factor is exact. Events that would leave the
    reachable set (possible for inexact heads) are redrawn and then skipped,
    mirroring the leap-window redraw rule. A hard event cap keeps runaway
    sources (a model whose gap head never decays) finite.
    """
    pair = source.pair
    alpha, beta = pair.insertion, pair.unmasking
    can_check = hasattr(source, "reachable")
    t = a
    for _ in range(100_000):
        masked = mask_positions(x)
        m = len(masked)
        gaps, offset = _tail_gap_vector(source, t, x)
        total_gap = float(gaps.sum())
        t_unmask = t_insert = math.inf
        if m > 0:
            surv = (1.0 - beta.value(t)) * math.exp(-rng.exponential() / m)
            t_unmask = beta.inverse(1.0 - surv)
        if total_gap > 0.0:
            surv = (1.0 - alpha.value(t)) * math.exp(-rng.exponential() / total_gap)
            t_insert = alpha.inverse(1.0 - surv)
        s = min(t_unmask, t_insert)
        if s > b:
            return x
        if t_unmask <= t_insert:
            i = masked[int(rng.integers(m))]
            dist = source.unmask_dist(s, x, i)
            for _ in range(100):
                y = replace_at(x, i, _draw_index(dist, rng))
                if not can_check or source.reachable(y):
                    x = y
                    break
        else:
            gaps, offset = _tail_gap_vector(source, s, x)
            if gaps.sum() > 0.0:
                g = _draw_index(gaps, rng) + offset
                x = x[:g] + (MASK,) + x[g:]
        t = s
    warnings.warn(
        "terminal window exceeded the event cap; continuing to forced completion",
        stacklevel=2,
    )
    return x


def _force_complete(source, x: tuple, rng) -> tuple:
    """Unmask every remaining position from the terminal posterior.

    Insertions never happen here. If no same-length completion exists (an
    undershoot at coarse grids), the state is returned as-is with a warning.
    """
    while MASK in x:
        i = x.index(MASK)
        try:
            dist = source.unmask_dist(1.0, x, i)
        except UnreachableStateError:
            warnings.warn(
                f"forced completion found no terminal posterior for {x}; "
                "returning the state unchanged",
                stacklevel=2,
            )
            return x
        x = replace_at(x, i, _draw_index(dist, rng))
    return x


def run_sampler(source, cfg: AdaptiveConfig, rng, bundle_cache: dict | None = None) -> tuple:
    """Simulate one trajectory from the base state to a terminal sample.

    The grid is t_k = k/(steps-1) with every window clamped to T_MAX;
    steps=1 degenerates to forced completion of the base state alone.
    Leap windows evaluate rates at the window start (instantaneous, a
    lower bound on the growing intensity: deficits are healed by later
    re-queries while excess insertions would commit irreversibly).
    Oracle-driven runs redraw a step (up to 100 times, else keep the
    state) when the proposal has zero probability under the target; such
    proposals are pure discretization artifacts (the exact chain never
    makes them) and vanish as the grid refines.

    Variable-length runs simulate the terminal window event by event
    (_exact_tail_window): insertions have no terminal rescue (forced
    completion only unmasks), so the singular insertion tail must be
    walked exactly for completion to be almost sure; a frozen leap there
    either starves or floods the state. Fixed-length runs need no guard
    because forced completion already realizes their terminal unmasking.
    """
    x = source.init_state()
    mdm = not hasattr(source, "gap_mean")
    if mdm and cfg.strategy != "vanilla":
        raise ValueError("the fixed-length sampler supports only the vanilla strategy")
    n = cfg.steps
    if n == 1:
        target = getattr(source, "target", None)
        if target is None or x not in target.support:
            warnings.warn(
                "a one-point grid has no leap windows; forced completion "
                "cannot insert, so the output is the base state",
                stacklevel=2,
            )
    if bundle_cache is None:
        bundle_cache = {}
    can_check = hasattr(source, "reachable")
    vanilla = cfg.strategy == "vanilla"
    for k in range(n - 1):
        a = min(k / (n - 1), T_MAX)
        b = min((k + 1) / (n - 1), T_MAX)
        if b <= a:
            continue
        if not mdm and k == n - 2:
            # the terminal window holds the singular tail; leap-free
            x = _exact_tail_window(source, a, b, x, rng)
            continue
        tau = b - a
        weights = bundle_cache.get(("w", k))
        if weights is None:
            if mdm:
                av, ad = source.sch.eval(a)
                weights = (ad / (1.0 - av), 0.0)
            else:
                weights = _step_weights(source.pair, a)
            bundle_cache[("w", k)] = weights
        for attempt in range(100):
            if vanilla:
                key = (x, k)
                bundle = bundle_cache.get(key)
                if bundle is None:
                    if mdm:
                        bundle = _mdm_bundle(source.target, a, x, weights[0])
                    else:
                        bundle = _flex_bundle(source, a, x, weights[0], weights[1])
                    bundle_cache[key] = bundle
                proposal = vanilla_step(bundle, tau, rng)
            else:
                proposal = _adaptive_step(source, a, x, cfg, rng, tau, weights)
            if proposal == x or not can_check or source.reachable(proposal):
                x = proposal
                break
        # all attempts rejected: keep the current state for this step
    return _force_complete(source, x, rng)


def sample_many(source, cfg: AdaptiveConfig, n_samples: int, seed, threads: int = 1):
    """n_samples independent trajectories with per-trajectory seed streams.

    Results are ordered by trajectory index, so the output is byte-stable
    for a given (config, seed) regardless of thread count.
    """
    from .rand import spawn_rngs

    rngs = spawn_rngs(seed, n_samples)
    cache: dict = {}
    if threads <= 1:
        return [run_sampler(source, cfg, r, cache) for r in rngs]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(run_sampler, source, cfg, r, cache) for r in rngs]
        return [f.result() for f in futures]


# Forward-equation verification.


def enumerate_flex_states(target: TargetDistribution, cap=None) -> list:
    """Every state with nonzero probability under the joint interpolant.

    For each atom suffix: all subsequences with every kept position either
    masked or clean, prefixed by the clamp. Errors beyond the state cap.
    """
    limit = state_cap(cap)
    prefix = target.prefix
    states = set()
    for atom in target.support:
        suffix = atom[target.clamp_prefix_len :]
        n = len(suffix)
        for m in range(n + 1):
            for s in combinations(range(n), m):
                base = [suffix[j] for j in s]
                for pattern in range(1 << m):
                    xs = tuple(
                        MASK if pattern >> k & 1 else base[k] for k in range(m)
                    )
                    states.add(prefix + xs)
                    if len(states) > limit:
                        raise StateCapExceeded(
                            f"more than {limit} reachable states"
                        )
    return sorted(states, key=lambda s: (len(s), s))


def enumerate_mdm_states(target: TargetDistribution, cap=None) -> list:
    """Every mask pattern of every fixed-length atom (clamp kept clean)."""
    limit = state_cap(cap)
    k0 = target.clamp_prefix_len
    states = set()
    for atom in target.support:
        free = len(atom) - k0
        for pattern in range(1 << free):
            x = atom[:k0] + tuple(
                MASK if pattern >> j & 1 else atom[k0 + j] for j in range(free)
            )
            states.add(x)
            if len(states) > limit:
                raise StateCapExceeded(f"more than {limit} reachable states")
    return sorted(states)


def _flex_state_marginal(target, pair, t, x) -> float:
    """p_t(x) summed over index sets via the joint closed form."""
    k0 = target.clamp_prefix_len
    total = 0.0
    m = len(x)
    for atom, p in target.atoms:
        n = len(atom)
        if m > n:
            continue
        free = tuple(range(k0, n))
        for s_free in combinations(free, m - k0):
            s = tuple(range(k0)) + s_free
            total += p * joint_marginal(atom, t, pair, s, x, k0)
    return total


def _mdm_state_marginal(target, sch, t, x) -> float:
    av = sch.value(t)
    k0 = target.clamp_prefix_len
    total = 0.0
    for atom, p in target.atoms:
        if len(atom) != len(x):
            continue
        prob = p
        ok = True
        for j in range(len(x)):
            if x[j] == MASK:
                if j < k0:
                    ok = False
                    break
                prob *= 1.0 - av
            elif x[j] == atom[j]:
                if j >= k0:
                    prob *= av
            else:
                ok = False
                break
        if ok:
            total += prob
    return total


def kfe_residual(
    ctx: OracleContext, t: float, h: float = 1e-4, family: str = "flex", cap=None
) -> float:
    """Max |d/dt p_t(x) - sum_y p_t(y) R_t(y,x)| over all reachable states.

    The time derivative is a central difference of the exact state marginal;
    the rate side enumerates the incoming unmask and insertion transitions
    plus the diagonal outflow. Requires 0 < t-h and t+h < 1.
    """
    if not (0.0 < t - h and t + h < 1.0):
        raise ValueError("need 0 < t-h and t+h < 1")
    target, pair = ctx.target, ctx.pair
    k0 = target.clamp_prefix_len
    if family == "flex":
        states = enumerate_flex_states(target, cap)
        marginal = lambda tt, x: _flex_state_marginal(target, pair, tt, x)
        alpha, beta = pair.insertion, pair.unmasking
        av, ad = alpha.eval(t)
        bv, bd = beta.eval(t)
        w_unmask = bd / (1.0 - bv)
        w_insert = ad / (1.0 - av)
    elif family == "mdm":
        states = enumerate_mdm_states(target, cap)
        sch = pair.insertion
        marginal = lambda tt, x: _mdm_state_marginal(target, sch, tt, x)
        av, ad = sch.eval(t)
        w_unmask = ad / (1.0 - av)
        w_insert = 0.0
    else:
        raise ValueError(f"unknown family {family!r}")
    worst = 0.0
    for x in states:
        dp_dt = (marginal(t + h, x) - marginal(t - h, x)) / (2.0 * h)
        inflow = 0.0
        n_masked = len(mask_positions(x))
        for k, tok in enumerate(x):
            if k < k0:
                continue
            if tok != MASK:
                y = replace_at(x, k, MASK)
                if family == "flex":
                    dist = ctx.unmask_marginal(t, y, k)
                else:
                    dist = mdm_unmask_marginal(target, t, y, k)
                inflow += marginal(t, y) * w_unmask * float(dist[tok])
            elif family == "flex":
                y = delete_at(x, k)
                inflow += marginal(t, y) * w_insert * ctx.insertion_expectation(t, y, k)
        out_rate = w_unmask * n_masked
        if family == "flex":
            out_rate += w_insert * ctx.expected_extra_len(t, x)
        residual = abs(dp_dt - (inflow - marginal(t, x) * out_rate))
        worst = max(worst, residual)
    return worst
