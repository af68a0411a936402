"""Exact posteriors and insertion expectations over an explicit target.

These are the ground-truth stand-ins for the two learned prediction heads:
the unmasking posterior (distribution of the clean token hidden under a
masked position) and the insertion expectation (expected number of source
tokens still missing in a gap). Both follow from the embedding-count form of
the clean-sequence posterior

    q_t(x* | x)  proportional to  p(x*) (1-alpha_t)^(|x*|-|x|) #{S: x in x*|_S}

which depends on the insertion schedule only; the unmasking schedule never
enters (any-order inference rests on exactly this). At t=1 the posterior
degenerates to same-length atoms matching x outside its masks.

Clamped prefixes are handled by stripping: the interpolant never touches the
prompt, so embeddings are counted between the suffix of the state and the
suffixes of the atoms.

Everything brute-forces over atoms with the counting DP; per-state count
vectors are memoized (they are time-independent), and assembled results are
memoized on (x, t quantized to 1e-6).
"""

from __future__ import annotations

import numpy as np

from .schedule import Schedule, SchedulePair
from .sequence import (
    MASK,
    embed_count_token_all,
    embed_tables,
    gap_counts_all,
    mask_positions,
)
from .target import TargetDistribution


class UnreachableStateError(ValueError):
    """No target atom embeds the state: the state has zero probability."""


def _t_key(t: float) -> int:
    return round(t * 1e6)


class OracleContext:
    """Shared exact-oracle state over one target and one schedule pair.

    The unmasking schedule in `pair` is carried for rate construction only;
    no posterior computed here reads it.
    """

    def __init__(self, target: TargetDistribution, pair: SchedulePair):
        self.target = target
        self.pair = pair
        self.clamp = target.clamp_prefix_len
        self._atoms = [seq for seq, _ in target.atoms]
        self._suffixes = [seq[self.clamp :] for seq in self._atoms]
        self._priors = np.array([p for _, p in target.atoms])
        self._suffix_lens = np.array([len(s) for s in self._suffixes])
        self._embed = {}  # x_suffix -> int64 array of per-atom embedding counts
        self._gaps = {}  # x_suffix -> (n_atoms, n_gaps) int64 array
        self._token = {}  # (x_suffix, i) -> list of per-atom {v: count}
        self._memo = {}  # assembled results keyed (op, x, extra, t_key)

    # -- state bookkeeping -------------------------------------------------

    def _suffix(self, x: tuple) -> tuple:
        k = self.clamp
        if k and x[:k] != self.target.prefix:
            raise UnreachableStateError(
                f"state unreachable: {x} does not start with the clamped prefix"
            )
        return x[k:]

    def _embed_counts(self, xs: tuple) -> np.ndarray:
        counts = self._embed.get(xs)
        if counts is None:
            counts = np.array(
                [
                    _fast_embed_count(xs, ys) if len(xs) <= len(ys) else 0
                    for ys in self._suffixes
                ],
                dtype=np.int64,
            )
            self._embed[xs] = counts
        return counts

    def _gap_count_rows(self, xs: tuple) -> np.ndarray:
        rows = self._gaps.get(xs)
        if rows is None:
            rows = np.array(
                [
                    gap_counts_all(xs, ys)
                    if len(xs) <= len(ys)
                    else [0] * (len(xs) + 1)
                    for ys in self._suffixes
                ],
                dtype=np.int64,
            )
            self._gaps[xs] = rows
        return rows

    def _token_counts(self, xs: tuple, i: int) -> list:
        key = (xs, i)
        maps = self._token.get(key)
        if maps is None:
            maps = [
                embed_count_token_all(xs, i, ys) if len(xs) <= len(ys) else {}
                for ys in self._suffixes
            ]
            self._token[key] = maps
        return maps

    def _atom_weights(self, t: float, x: tuple) -> np.ndarray:
        """Unnormalized posterior weight of each atom given x at time t < 1."""
        xs = self._suffix(x)
        counts = self._embed_counts(xs)
        one_minus_alpha = 1.0 - self.pair.insertion.value(t)
        delta = self._suffix_lens - len(xs)
        if one_minus_alpha <= 0.0:
            scale = (delta == 0).astype(float)
        else:
            scale = np.where(delta >= 0, one_minus_alpha ** np.maximum(delta, 0), 0.0)
        return self._priors * scale * counts

    def _terminal_mask(self, x: tuple) -> np.ndarray:
        """Indicator per atom of the t=1 rule: same length, clean match."""
        xs = self._suffix(x)
        out = np.zeros(len(self._suffixes))
        for j, ys in enumerate(self._suffixes):
            if len(ys) == len(xs) and all(
                a == MASK or a == b for a, b in zip(xs, ys)
            ):
                out[j] = 1.0
        return out

    def reachable(self, x: tuple) -> bool:
        """True when some atom embeds x (the state has nonzero probability)."""
        try:
            xs = self._suffix(x)
        except UnreachableStateError:
            return False
        return bool(self._embed_counts(xs).any())

    def init_state(self) -> tuple:
        """The base state at t=0: the clamped prompt (empty when unclamped)."""
        return self.target.prefix

    # -- posteriors ----------------------------------------------------------

    def posterior_clean(self, t: float, x: tuple) -> dict:
        """Normalized posterior over atoms given the partial state x."""
        key = ("post", x, None, _t_key(t))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        w = self._terminal_mask(x) if t >= 1.0 else self._atom_weights(t, x)
        total = float(w.sum())
        if total <= 0.0:
            raise UnreachableStateError(f"state unreachable: {x}")
        out = {
            atom: wj / total for atom, wj in zip(self._atoms, w.tolist()) if wj > 0.0
        }
        self._memo[key] = out
        return out

    def unmask_marginal(self, t: float, x: tuple, i: int) -> np.ndarray:
        """Distribution of the clean token under masked position i of x.

        Returned as an array indexed by token id. Independent of the
        unmasking schedule by construction.
        """
        if not 0 <= i < len(x):
            raise ValueError(f"position {i} out of range for length {len(x)}")
        if x[i] != MASK:
            raise ValueError(f"position {i} of {x} is not masked")
        key = ("unmask", x, i, _t_key(t))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        xs = self._suffix(x)
        isuf = i - self.clamp
        token_maps = self._token_counts(xs, isuf)
        weights = np.zeros(self.target.vocab_size)
        if t >= 1.0:
            keep = self._terminal_mask(x)
            for j, ys in enumerate(self._suffixes):
                if keep[j]:
                    weights[ys[isuf]] += self._priors[j]
        else:
            one_minus_alpha = 1.0 - self.pair.insertion.value(t)
            delta = self._suffix_lens - len(xs)
            for j, counts in enumerate(token_maps):
                if not counts or delta[j] < 0:
                    continue
                scale = self._priors[j] * one_minus_alpha ** int(delta[j])
                for v, c in counts.items():
                    weights[v] += scale * c
        total = weights.sum()
        if total <= 0.0:
            raise UnreachableStateError(f"state unreachable: {x}")
        out = weights / total
        out.flags.writeable = False
        self._memo[key] = out
        return out

    def insertion_expectation(self, t: float, x: tuple, i: int) -> float:
        """Expected count of source tokens hidden in gap i of x at time t < 1."""
        if not 0 <= i <= len(x):
            raise ValueError(f"gap position {i} out of range for length {len(x)}")
        if t >= 1.0:
            raise ValueError("insertion expectation is not evaluated at t = 1")
        if i < self.clamp:
            return 0.0
        return float(self.gap_expectations(t, x)[i - self.clamp])

    def gap_expectations(self, t: float, x: tuple) -> np.ndarray:
        """Insertion expectations of every non-clamped gap of x at once."""
        key = ("gaps", x, None, _t_key(t))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        xs = self._suffix(x)
        w = self._atom_weights(t, x)
        total = w.sum()
        if total <= 0.0:
            raise UnreachableStateError(f"state unreachable: {x}")
        counts = self._embed_counts(xs)
        rows = self._gap_count_rows(xs)
        # per-atom weight independent of the embedding count, times gap sums
        base = np.where(counts > 0, w / np.maximum(counts, 1), 0.0)
        out = base @ rows / total
        out.flags.writeable = False
        self._memo[key] = out
        return out

    def expected_extra_len(self, t: float, x: tuple) -> float:
        """Sum of all gap expectations: posterior mean of |x1| - |x|."""
        key = ("extra", x, None, _t_key(t))
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        w = self._atom_weights(t, x)
        total = w.sum()
        if total <= 0.0:
            raise UnreachableStateError(f"state unreachable: {x}")
        xs = self._suffix(x)
        out = float((w * (self._suffix_lens - len(xs))).sum() / total)
        self._memo[key] = out
        return out

    # -- protocol used by the samplers and losses ---------------------------

    def unmask_dist(self, t: float, x: tuple, i: int) -> np.ndarray:
        return self.unmask_marginal(t, x, i)

    def gap_mean(self, t: float, x: tuple, i: int) -> float:
        return self.insertion_expectation(t, x, i)


def _fast_embed_count(x: tuple, y: tuple) -> int:
    pre, _ = embed_tables(x, y)
    return int(pre[len(x)][len(y)])


def mdm_unmask_marginal(
    target: TargetDistribution, t: float, x: tuple, i: int
) -> np.ndarray:
    """Fixed-length unmasking posterior at masked position i of x.

    Atoms must share a common length (pad beforehand). The result is
    schedule-free: proportional to the prior mass of atoms matching x outside
    its masks and carrying each token v at position i.
    """
    if not 0 <= i < len(x):
        raise ValueError(f"position {i} out of range for length {len(x)}")
    if x[i] != MASK:
        raise ValueError(f"position {i} of {x} is not masked")
    del t  # the fixed-length posterior does not depend on time
    weights = np.zeros(target.vocab_size)
    for atom, p in target.atoms:
        if len(atom) == len(x) and all(
            a == MASK or a == b for a, b in zip(x, atom)
        ):
            weights[atom[i]] += p
    total = weights.sum()
    if total <= 0.0:
        raise UnreachableStateError(f"state unreachable: {x}")
    out = weights / total
    out.flags.writeable = False
    return out


class MdmOracle:
    """Exact fixed-length oracle bundling a padded target and its schedule."""

    def __init__(self, target: TargetDistribution, sch: Schedule):
        if len({len(seq) for seq in target.support}) != 1:
            raise ValueError("fixed-length oracle requires equal-length atoms")
        self.target = target
        self.sch = sch
        self.width = target.max_len
        self._memo = {}

    def init_state(self) -> tuple:
        k = self.target.clamp_prefix_len
        return self.target.prefix + (MASK,) * (self.width - k)

    def reachable(self, x: tuple) -> bool:
        return any(
            len(atom) == len(x)
            and all(a == MASK or a == b for a, b in zip(x, atom))
            for atom in self.target.support
        )

    def unmask_dist(self, t: float, x: tuple, i: int) -> np.ndarray:
        key = (x, i)
        hit = self._memo.get(key)
        if hit is None:
            hit = mdm_unmask_marginal(self.target, t, x, i)
            self._memo[key] = hit
        return hit


def perturbed_oracle(ctx: OracleContext, f_mix: float = 0.1, g_scale: float = 1.2):
    """A deliberately suboptimal head pair: f mixed with uniform, g rescaled.

    Used to verify that the exact oracle uniquely minimizes the variational
    losses and that the KL bound holds with slack.
    """
    return _PerturbedOracle(ctx, f_mix, g_scale)


class _PerturbedOracle:
    def __init__(self, ctx: OracleContext, f_mix: float, g_scale: float):
        self.ctx = ctx
        self.target = ctx.target
        self.pair = ctx.pair
        self.f_mix = f_mix
        self.g_scale = g_scale

    def init_state(self) -> tuple:
        return self.ctx.init_state()

    def reachable(self, x: tuple) -> bool:
        return self.ctx.reachable(x)

    def unmask_dist(self, t: float, x: tuple, i: int) -> np.ndarray:
        base = self.ctx.unmask_marginal(t, x, i)
        return (1.0 - self.f_mix) * base + self.f_mix / len(base)

    def gap_mean(self, t: float, x: tuple, i: int) -> float:
        return self.g_scale * self.ctx.insertion_expectation(t, x, i)

    def gap_expectations(self, t: float, x: tuple) -> np.ndarray:
        return self.g_scale * self.ctx.gap_expectations(t, x)

    def expected_extra_len(self, t: float, x: tuple) -> float:
        return self.g_scale * self.ctx.expected_extra_len(t, x)
