"""Token and sequence primitives for masked variable-length sequences.

Tokens are plain ints. Clean vocabulary tokens are nonnegative ids; the
distinguished sentinel ``MASK`` (-1) is never a vocabulary member. Sequences
are tuples of token ids, 0-based, and the empty tuple is a valid sequence.

The workhorse here is the order-preserving subsequence embedding count:
the number of strictly increasing index sets S with |S| = len(x) such that
for every k either x[k] == MASK or x[k] == y[S[k]]. All exact posteriors and
insertion expectations reduce to these counts and two weighted variants
(embeddings that pin a token value at one position, and embedding-weighted
gap sizes). Counts are exact: a numpy int64 dynamic program is used when the
host sequence is short enough that overflow is provably impossible, and
arbitrary-precision Python ints otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

MASK = -1

# Largest host length for the int64 fast path. Every intermediate in the
# tables is bounded by (len(y)+1) * C(len(y), len(y)//2); at 58 that is
# ~1.8e18 < 2^63-1, so the fast path cannot overflow.
_INT64_SAFE_LEN = 58


def _check_seq(x, name="x"):
    if not isinstance(x, tuple):
        raise ValueError(f"{name} must be a tuple of token ids, got {type(x).__name__}")
    for tok in x:
        if not isinstance(tok, (int, np.integer)):
            raise ValueError(f"{name} contains a non-integer token: {tok!r}")
        if tok != MASK and tok < 0:
            raise ValueError(f"{name} contains an invalid token id: {tok!r}")


def _check_clean(y, name="y"):
    _check_seq(y, name)
    if MASK in y:
        raise ValueError(f"{name} must be clean (no MASK tokens)")


def is_clean(x: tuple) -> bool:
    """True when x contains no MASK token."""
    return MASK not in x


def mask_positions(x: tuple) -> tuple:
    """Positions of x holding the MASK sentinel, ascending."""
    return tuple(i for i, tok in enumerate(x) if tok == MASK)


@dataclass(frozen=True)
class IndexSet:
    """Strictly increasing nonnegative indices with boundary conventions.

    ``at(k, n)`` extends lookups so that index -1 maps to -1 and index
    len(self) maps to n, the caller-supplied source length. Gap sizes between
    consecutive (boundary-extended) entries are what the insertion head of
    the variable-length interpolant predicts.
    """

    indices: tuple

    def __post_init__(self):
        idx = self.indices
        if any(i < 0 for i in idx):
            raise ValueError("IndexSet entries must be nonnegative")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("IndexSet entries must be strictly increasing")

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __getitem__(self, k):
        return self.indices[k]

    def at(self, k: int, source_len: int) -> int:
        if k == -1:
            return -1
        if k == len(self.indices):
            return source_len
        return self.indices[k]

    def gap_sizes(self, source_len: int) -> tuple:
        """Gap sizes s[i] - s[i-1] - 1 for i in 0..len(self), with boundaries."""
        if self.indices and self.indices[-1] >= source_len:
            raise ValueError("IndexSet entry exceeds source length")
        ext = (-1,) + self.indices + (source_len,)
        return tuple(b - a - 1 for a, b in zip(ext, ext[1:]))


def insert_at(x: tuple, i: int, v: int) -> tuple:
    """Insert token v before position i (i == len(x) appends)."""
    if not 0 <= i <= len(x):
        raise ValueError(f"insert position {i} out of range for length {len(x)}")
    return x[:i] + (v,) + x[i:]


def replace_at(x: tuple, i: int, v: int) -> tuple:
    """Replace the token at position i with v."""
    if not 0 <= i < len(x):
        raise ValueError(f"position {i} out of range for length {len(x)}")
    return x[:i] + (v,) + x[i + 1 :]


def delete_at(x: tuple, i: int) -> tuple:
    """Remove the token at position i."""
    if not 0 <= i < len(x):
        raise ValueError(f"position {i} out of range for length {len(x)}")
    return x[:i] + x[i + 1 :]


def restrict(y: tuple, indices) -> tuple:
    """The subsequence y|_S for an ascending index set S."""
    idx = tuple(indices)
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValueError("restrict requires strictly increasing indices")
    if idx and (idx[0] < 0 or idx[-1] >= len(y)):
        raise ValueError("restrict index out of range")
    return tuple(y[j] for j in idx)


def _match(a: int, b: int) -> bool:
    return a == MASK or a == b


def embed_tables(x: tuple, y: tuple):
    """Prefix and suffix embedding-count tables for x against clean y.

    Returns (pre, suf) where pre[k][j] counts embeddings of x[:k] into y[:j]
    and suf[k][j] counts embeddings of x[k:] into y[j:]. MASK matches any
    token of y. Tables are numpy int64 when len(y) <= 58 (no overflow
    possible at that size), Python-int lists otherwise.
    """
    m, n = len(x), len(y)
    if n <= _INT64_SAFE_LEN:
        yarr = np.asarray(y, dtype=np.int64) if n else np.zeros(0, dtype=np.int64)
        pre = np.zeros((m + 1, n + 1), dtype=np.int64)
        pre[0, :] = 1
        for k in range(1, m + 1):
            hit = (yarr == x[k - 1]) | (x[k - 1] == MASK)
            np.cumsum(hit * pre[k - 1, :-1], out=pre[k, 1:])
        suf = np.zeros((m + 1, n + 1), dtype=np.int64)
        suf[m, :] = 1
        for k in range(m - 1, -1, -1):
            hit = (yarr == x[k]) | (x[k] == MASK)
            suf[k, :-1] = np.cumsum((hit * suf[k + 1, 1:])[::-1])[::-1]
        return pre, suf
    pre = [[0] * (n + 1) for _ in range(m + 1)]
    pre[0] = [1] * (n + 1)
    for k in range(1, m + 1):
        row, prev = pre[k], pre[k - 1]
        for j in range(1, n + 1):
            row[j] = row[j - 1] + (prev[j - 1] if _match(x[k - 1], y[j - 1]) else 0)
    suf = [[0] * (n + 1) for _ in range(m + 1)]
    suf[m] = [1] * (n + 1)
    for k in range(m - 1, -1, -1):
        row, nxt = suf[k], suf[k + 1]
        for j in range(n - 1, -1, -1):
            row[j] = row[j + 1] + (nxt[j + 1] if _match(x[k], y[j]) else 0)
    return pre, suf


def embed_count(x: tuple, y: tuple) -> int:
    """Number of order-preserving embeddings of x into clean y.

    MASK positions of x match any token of y; clean positions must match
    exactly. Exact integer result.
    """
    _check_seq(x)
    _check_clean(y)
    if len(x) > len(y):
        return 0
    pre, _ = embed_tables(x, y)
    return int(pre[len(x)][len(y)])


def embed_count_token_at(x: tuple, i: int, v: int, y: tuple) -> int:
    """Embeddings of x into y whose i-th mapped position carries token v.

    Requires x[i] == MASK and a vocabulary token v. Equal by construction to
    embed_count(replace_at(x, i, v), y), computed here as a prefix-table x
    suffix-table product over the candidate host positions j with y[j] == v.
    """
    _check_seq(x)
    _check_clean(y)
    if not 0 <= i < len(x):
        raise ValueError(f"position {i} out of range for length {len(x)}")
    if x[i] != MASK:
        raise ValueError(f"position {i} is not masked")
    if v == MASK or v < 0:
        raise ValueError("v must be a clean vocabulary token")
    pre, suf = embed_tables(x, y)
    total = 0
    for j, tok in enumerate(y):
        if tok == v:
            total += int(pre[i][j]) * int(suf[i + 1][j + 1])
    return total


def embed_count_token_all(x: tuple, i: int, y: tuple) -> dict:
    """Counts of embeddings pinning each token value at masked position i.

    Returns {v: count} over the token values of y actually reachable at
    position i (absent values have count 0). One table pass serves every v.
    """
    _check_seq(x)
    _check_clean(y)
    if not 0 <= i < len(x):
        raise ValueError(f"position {i} out of range for length {len(x)}")
    if x[i] != MASK:
        raise ValueError(f"position {i} is not masked")
    pre, suf = embed_tables(x, y)
    out = {}
    for j, tok in enumerate(y):
        c = int(pre[i][j]) * int(suf[i + 1][j + 1])
        if c:
            out[tok] = out.get(tok, 0) + c
    return out


def _gap_endpoint_weights(x, y, i, pre, suf):
    """Arrays E (over a in -1..len(y)-1) and F (over b in 0..len(y)).

    E[a] counts embeddings of x[:i] whose last element maps exactly to a;
    F[b] counts embeddings of x[i:] whose first element maps exactly to b.
    Boundary conventions: an empty left part pins a = -1, an empty right
    part pins b = len(y).
    """
    m, n = len(x), len(y)
    e = [0] * (n + 1)  # e[a + 1] holds E[a]
    if i == 0:
        e[0] = 1
    else:
        for a in range(n):
            if _match(x[i - 1], y[a]):
                e[a + 1] = int(pre[i - 1][a])
    f = [0] * (n + 1)  # f[b] holds F[b]
    if i == m:
        f[n] = 1
    else:
        for b in range(n):
            if _match(x[i], y[b]):
                f[b] = int(suf[i + 1][b + 1])
    return e, f


def _gap_sum(e, f, n):
    # sum over a < b of E[a] * F[b] * (b - a - 1) via prefix moments
    total = 0
    s0 = 0  # sum of E[a] over a < b
    s1 = 0  # sum of a * E[a] over a < b
    for b in range(n + 1):
        s0 += e[b]  # admits a = b - 1
        s1 += (b - 1) * e[b]
        if f[b]:
            total += f[b] * ((b - 1) * s0 - s1)
    return total


def gap_count(x: tuple, i: int, y: tuple) -> int:
    """Sum over embeddings of x into y of the i-th gap size.

    The i-th gap of an embedding S is S[i] - S[i-1] - 1 with the boundary
    conventions S[-1] = -1 and S[len(x)] = len(y): the number of host tokens
    strictly between the images of x[i-1] and x[i]. Computed directly as the
    endpoint-weighted sum, independently of the identity relating it to
    embed_count(insert_at(x, i, MASK), y).
    """
    _check_seq(x)
    _check_clean(y)
    if not 0 <= i <= len(x):
        raise ValueError(f"gap position {i} out of range for length {len(x)}")
    pre, suf = embed_tables(x, y)
    e, f = _gap_endpoint_weights(x, y, i, pre, suf)
    return _gap_sum(e, f, len(y))


def gap_counts_all(x: tuple, y: tuple) -> tuple:
    """gap_count(x, i, y) for every gap i in 0..len(x), sharing one table pass."""
    _check_seq(x)
    _check_clean(y)
    pre, suf = embed_tables(x, y)
    n = len(y)
    return tuple(
        _gap_sum(*_gap_endpoint_weights(x, y, i, pre, suf), n)
        for i in range(len(x) + 1)
    )


# Brute-force enumeration: the oracle-of-the-oracle, for tests only.


def _enumerate_embeddings(x, y):
    for s in combinations(range(len(y)), len(x)):
        if all(_match(a, y[j]) for a, j in zip(x, s)):
            yield s


def _embed_count_brute(x, y):
    return sum(1 for _ in _enumerate_embeddings(x, y))


def _embed_count_token_at_brute(x, i, v, y):
    return sum(1 for s in _enumerate_embeddings(x, y) if y[s[i]] == v)


def _gap_count_brute(x, i, y):
    total = 0
    for s in _enumerate_embeddings(x, y):
        ext = (-1,) + s + (len(y),)
        total += ext[i + 1] - ext[i] - 1
    return total
