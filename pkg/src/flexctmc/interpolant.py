"""Forward sampling of the masked interpolants and the joint closed form.

The fixed-length interpolant independently masks each position of a clean
sequence with probability 1 - alpha_t. The variable-length joint interpolant
gives every source position an insertion time T1 (density alphadot) and an
unmasking time T2 >= T1 (density betadot/(1-beta_{T1}) after T1); at time t a
position is absent (T1 > t), masked (T1 <= t < T2), or clean (T2 <= t). The
index-tracking variable s_t records which source positions are present, so a
sampled pair (x_t, s_t) carries the training targets for both heads: the
hidden clean token of every masked position and the gap sizes
s[i] - s[i-1] - 1 with boundaries s[-1] = -1 and s[len] = n.

Positions inside a clamped prefix bypass the interpolant entirely: they are
always present and clean.
"""

from __future__ import annotations

from dataclasses import dataclass

from .schedule import SchedulePair, Schedule, gamma
from .sequence import MASK, IndexSet


@dataclass(frozen=True)
class JointState:
    """A draw (x_t, s_t) of the joint interpolant from a known source."""

    xt: tuple
    st: IndexSet
    source_len: int

    def gap_sizes(self) -> tuple:
        return self.st.gap_sizes(self.source_len)


def sample_flex(
    x1: tuple, t: float, pair: SchedulePair, rng, clamp_prefix_len: int = 0
) -> JointState:
    """One draw of the joint interpolant at time t from clean source x1.

    Inverse-CDF sampling: T1 = alpha^{-1}(u1) with presence iff u1 <= alpha_t;
    the unmasking comparison T2 <= t reduces to u2 <= (beta_t - beta_{T1}) /
    (1 - beta_{T1}), so no beta inverse is needed. The first clamp_prefix_len
    positions are always present and clean.
    """
    alpha, beta = pair.insertion, pair.unmasking
    alpha_t = alpha.value(t)
    beta_t = beta.value(t)
    xt = []
    st = []
    for i, tok in enumerate(x1):
        if i < clamp_prefix_len:
            st.append(i)
            xt.append(tok)
            continue
        u1 = rng.random()
        if u1 > alpha_t:
            continue
        st.append(i)
        t1 = alpha.inverse(u1)
        beta_t1 = beta.value(t1)
        if beta_t1 >= 1.0:
            xt.append(tok)
            continue
        u2 = rng.random()
        if u2 * (1.0 - beta_t1) <= beta_t - beta_t1:
            xt.append(tok)
        else:
            xt.append(MASK)
    return JointState(tuple(xt), IndexSet(tuple(st)), len(x1))


def sample_mdm(
    x1: tuple, t: float, sch: Schedule, rng, clamp_prefix_len: int = 0
) -> tuple:
    """Fixed-length interpolant: keep each token with probability alpha_t."""
    alpha_t = sch.value(t)
    return tuple(
        tok if i < clamp_prefix_len or rng.random() <= alpha_t else MASK
        for i, tok in enumerate(x1)
    )


def joint_marginal(
    x1: tuple, t: float, pair: SchedulePair, s, x: tuple, clamp_prefix_len: int = 0
) -> float:
    """Exact probability of the joint event (s_t = s, x_t = x) given x1.

    Independence across positions gives
    (1-alpha_t)^(#absent) * prod over present positions of I_i, with
    I_i = 1 - gamma_t for a masked position and alpha_t + gamma_t - 1 for a
    clean one. Returns 0 for any (s, x) inconsistent with x1 (token
    mismatches, or a clamped position absent or altered).
    """
    s = tuple(s)
    if len(s) != len(x):
        raise ValueError("index set and state must have equal length")
    n = len(x1)
    if any(not 0 <= j < n for j in s) or any(b <= a for a, b in zip(s, s[1:])):
        raise ValueError("index set must be strictly increasing within the source")
    if s[:clamp_prefix_len] != tuple(range(clamp_prefix_len)):
        return 0.0
    for k, j in enumerate(s):
        if j < clamp_prefix_len and x[k] != x1[j]:
            return 0.0
        if x[k] != MASK and x[k] != x1[j]:
            return 0.0
    alpha_t = pair.insertion.value(t)
    g = gamma(pair, t)
    p_absent = 1.0 - alpha_t
    p_mask = max(1.0 - g, 0.0)
    p_clean = max(alpha_t + g - 1.0, 0.0)
    free = n - clamp_prefix_len
    present_free = len(s) - clamp_prefix_len
    prob = p_absent ** (free - present_free)
    for k in range(clamp_prefix_len, len(s)):
        prob *= p_mask if x[k] == MASK else p_clean
    return prob
