"""Explicit finite target distributions, including the maze planning task.

A TargetDistribution is a finite, fully enumerated distribution over clean
token sequences. Everything downstream (exact posteriors, rate matrices,
losses) brute-forces over its atoms, so supports stay small by design.

The maze benchmark builds a recursive-division maze and a conditional
planning distribution over (subgoals, SEP, path) sequences: the model is
prompted with K subgoal cells plus a separator and must produce a valid path
visiting them in order. Conditioning on a prompt is realized by restricting
atoms to that prompt and renormalizing, with the prompt tokens clamped
(exempt from the interpolant).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .rand import make_rng
from .sequence import MASK

_NORM_TOL = 1e-12


@dataclass(frozen=True)
class TargetDistribution:
    """Normalized distribution over clean sequences with optional clamping.

    atoms maps sequence -> probability (strictly positive, summing to 1
    within 1e-12); token ids live in {0, ..., vocab_size-1}; when
    clamp_prefix_len > 0 every atom shares the same first tokens and those
    positions bypass the interpolant.
    """

    atoms: tuple  # ((seq, prob), ...) sorted lexicographically by seq
    vocab_size: int
    clamp_prefix_len: int = 0
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.atoms:
            raise ValueError("empty support")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        total = 0.0
        for seq, p in self.atoms:
            if not isinstance(seq, tuple):
                raise ValueError("atom sequences must be tuples")
            if any(tok == MASK for tok in seq):
                raise ValueError("atoms must not contain MASK")
            if any(not 0 <= tok < self.vocab_size for tok in seq):
                raise ValueError(f"atom {seq} has a token id outside the vocabulary")
            if p <= 0.0:
                raise ValueError("atom probabilities must be strictly positive")
            total += p
        if abs(total - 1.0) > _NORM_TOL * max(1, len(self.atoms)):
            raise ValueError(f"atom probabilities sum to {total!r}, not 1")
        k = self.clamp_prefix_len
        if k < 0:
            raise ValueError("clamp_prefix_len must be nonnegative")
        if k > 0:
            prefix = self.atoms[0][0][:k]
            if len(prefix) < k or any(seq[:k] != prefix for seq, _ in self.atoms):
                raise ValueError("all atoms must share the clamped prefix")
        object.__setattr__(self, "_index", {seq: p for seq, p in self.atoms})

    @staticmethod
    def from_weights(pairs, vocab_size: int, clamp_prefix_len: int = 0) -> "TargetDistribution":
        """Normalize (sequence, weight) pairs into a TargetDistribution."""
        pairs = list(pairs)
        if not pairs:
            raise ValueError("empty support")
        merged = {}
        for seq, w in pairs:
            seq = tuple(int(t) for t in seq)
            if w < 0:
                raise ValueError(f"negative weight for atom {seq}")
            if w > 0:
                merged[seq] = merged.get(seq, 0.0) + float(w)
        if not merged:
            raise ValueError("empty support")
        total = sum(merged.values())
        atoms = tuple(sorted((seq, w / total) for seq, w in merged.items()))
        return TargetDistribution(atoms, vocab_size, clamp_prefix_len)

    @property
    def support(self) -> tuple:
        return tuple(seq for seq, _ in self.atoms)

    @property
    def vocab(self) -> tuple:
        return tuple(range(self.vocab_size))

    @property
    def prefix(self) -> tuple:
        return self.atoms[0][0][: self.clamp_prefix_len]

    @property
    def max_len(self) -> int:
        return max(len(seq) for seq, _ in self.atoms)

    def prob(self, seq: tuple) -> float:
        return self._index.get(seq, 0.0)

    def sample(self, rng) -> tuple:
        u = rng.random()
        acc = 0.0
        for seq, p in self.atoms:
            acc += p
            if u < acc:
                return seq
        return self.atoms[-1][0]


def load_pmf(doc: dict) -> TargetDistribution:
    """Build a TargetDistribution from a config document.

    Two atom encodings are accepted: a mapping from glyph strings to weights
    together with a "glyphs" alphabet (glyph i stands for token id i), or a
    list of [token_id_list, weight] pairs with an explicit "vocab_size".
    """
    if "glyphs" in doc:
        glyphs = doc["glyphs"]
        if len(set(glyphs)) != len(glyphs):
            raise ValueError("glyph alphabet has duplicates")
        ids = {ch: i for i, ch in enumerate(glyphs)}
        vocab_size = len(glyphs)
        raw = doc.get("atoms", {})
        if not isinstance(raw, dict):
            raise ValueError("glyph-form atoms must be a mapping from string to weight")
        pairs = []
        for text, w in raw.items():
            try:
                seq = tuple(ids[ch] for ch in text)
            except KeyError as exc:
                raise ValueError(f"atom {text!r} uses a glyph outside the alphabet") from exc
            pairs.append((seq, w))
    else:
        vocab_size = int(doc["vocab_size"])
        pairs = [(tuple(seq), w) for seq, w in doc.get("atoms", [])]
    return TargetDistribution.from_weights(
        pairs, vocab_size, int(doc.get("clamp_prefix_len", 0))
    )


def length_marginal(target: TargetDistribution) -> dict:
    """Exact probability of each atom length."""
    out = {}
    for seq, p in target.atoms:
        out[len(seq)] = out.get(len(seq), 0.0) + p
    return out


def condition_on_prefix(target: TargetDistribution, prefix: tuple) -> TargetDistribution:
    """Restrict to atoms starting with prefix, renormalize, clamp the prefix."""
    prefix = tuple(prefix)
    kept = [(seq, p) for seq, p in target.atoms if seq[: len(prefix)] == prefix]
    if not kept:
        raise ValueError(f"no atom starts with prefix {prefix}")
    return TargetDistribution.from_weights(kept, target.vocab_size, len(prefix))


def mdm_pad_target(target: TargetDistribution):
    """Fixed-length variant: atoms padded with a fresh pad token.

    Returns (padded_target, pad_id). The pad id extends the vocabulary by
    one, so token_id < vocab_size still holds.
    """
    pad_id = target.vocab_size
    width = target.max_len
    pairs = [(seq + (pad_id,) * (width - len(seq)), p) for seq, p in target.atoms]
    return (
        TargetDistribution.from_weights(pairs, pad_id + 1, target.clamp_prefix_len),
        pad_id,
    )


def strip_pad(seq: tuple, pad_id: int) -> tuple:
    """Tokens before the first pad (decoding a fixed-length sample)."""
    if pad_id in seq:
        return seq[: seq.index(pad_id)]
    return seq


def bundled_targets() -> dict:
    """The small distributions every verification suite runs against."""
    return {
        "two_atom": TargetDistribution.from_weights(
            [((0, 1), 1.0), ((1,), 1.0)], vocab_size=2
        ),
        "three_atom": TargetDistribution.from_weights(
            [((0,), 2.0), ((1,), 1.0), ((0, 1), 1.0)], vocab_size=2
        ),
        "mixed_len": TargetDistribution.from_weights(
            [((2,), 0.15), ((0, 1), 0.35), ((1, 2, 0), 0.30), ((0, 1, 2, 0), 0.20)],
            vocab_size=3,
        ),
    }


# Maze construction: recursive division with optional extra doorways.


@dataclass(frozen=True)
class MazeGrid:
    """(2m+1) x (2n+1) bitmap, 1 = wall and 0 = open, border all wall."""

    bitmap: tuple  # tuple of row tuples
    seed: int
    extra_door_frac: float

    @property
    def height(self) -> int:
        return len(self.bitmap)

    @property
    def width(self) -> int:
        return len(self.bitmap[0])

    def is_open(self, r: int, c: int) -> bool:
        return 0 <= r < self.height and 0 <= c < self.width and self.bitmap[r][c] == 0

    def open_cells(self) -> list:
        return [
            (r, c)
            for r in range(self.height)
            for c in range(self.width)
            if self.bitmap[r][c] == 0
        ]

    def cell_id(self, r: int, c: int) -> int:
        return r * self.width + c

    def cell_rc(self, cell: int):
        return divmod(cell, self.width)

    def as_text(self) -> str:
        return "\n".join(
            "".join("#" if v else "." for v in row) for row in self.bitmap
        )


def _divide(g, top, left, h, w, rng):
    if h <= 2 or w <= 2:
        return
    if w < h:  # split the longer dimension; ties split vertically
        ys = range(top + 1, top + h - 1, 2)
        y = ys[int(rng.integers(len(ys)))]
        gaps = range(left, left + w, 2)
        gap = gaps[int(rng.integers(len(gaps)))]
        g[y, left : left + w] = 1
        g[y, gap] = 0
        _divide(g, top, left, y - top, w, rng)
        _divide(g, y + 1, left, top + h - y - 1, w, rng)
    else:
        xs = range(left + 1, left + w - 1, 2)
        x = xs[int(rng.integers(len(xs)))]
        gaps = range(top, top + h, 2)
        gap = gaps[int(rng.integers(len(gaps)))]
        g[top : top + h, x] = 1
        g[gap, x] = 0
        _divide(g, top, left, h, x - left, rng)
        _divide(g, top, x + 1, h, left + w - x - 1, rng)


def maze_generate(m: int, n: int, seed: int, extra_door_frac: float = 0.0) -> MazeGrid:
    """Recursive-division maze over m x n cells, optionally with extra doors.

    The bitmap is (2m+1) x (2n+1): border all wall, odd-odd cells always
    open rooms, walls on even-offset lines with one odd-offset gap per
    division. extra_door_frac converts that fraction of the straight-wall
    candidates (walls separating two passages orthogonally) into doors,
    introducing loops.
    """
    if m < 1 or n < 1:
        raise ValueError("maze needs at least one cell in each dimension")
    if not 0.0 <= extra_door_frac <= 1.0:
        raise ValueError("extra_door_frac must be in [0, 1]")
    rng = make_rng(seed)
    height, width = 2 * m + 1, 2 * n + 1
    g = np.zeros((height, width), dtype=np.uint8)
    g[0, :] = g[height - 1, :] = 1
    g[:, 0] = g[:, width - 1] = 1
    _divide(g, 1, 1, height - 2, width - 2, rng)
    if extra_door_frac > 0:
        candidates = []
        for r in range(1, height - 1):
            for c in range(1, width - 1):
                if g[r, c] == 1:
                    if g[r - 1, c] == 0 and g[r + 1, c] == 0:
                        candidates.append((r, c))
                    elif g[r, c - 1] == 0 and g[r, c + 1] == 0:
                        candidates.append((r, c))
        k = int(len(candidates) * extra_door_frac)
        if k:
            for idx in rng.choice(len(candidates), size=k, replace=False):
                r, c = candidates[int(idx)]
                g[r, c] = 0
    bitmap = tuple(tuple(int(v) for v in row) for row in g)
    return MazeGrid(bitmap, seed, extra_door_frac)


def _bfs_path(grid: MazeGrid, start, goal, forbidden_edge=None):
    """Shortest open-cell path start -> goal, or None; 4-neighbor moves."""
    if start == goal:
        return [start]
    prev = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        r, c = cur
        for nxt in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if nxt in prev or not grid.is_open(*nxt):
                continue
            if forbidden_edge is not None and {cur, nxt} == forbidden_edge:
                continue
            prev[nxt] = cur
            if nxt == goal:
                path = [nxt]
                while path[-1] is not None:
                    path.append(prev[path[-1]])
                return path[-2::-1]
            queue.append(nxt)
    return None


def _detour_paths(grid: MazeGrid, shortest, max_paths: int):
    """Shortest path plus detours from single-edge removals, deduplicated.

    Detours exceeding 1.5x the shortest length are dropped; the kept list is
    deterministic (ordered by length, then lexicographically) and capped.
    """
    limit = 1.5 * len(shortest)
    seen = {tuple(shortest)}
    extras = []
    for u, v in zip(shortest, shortest[1:]):
        alt = _bfs_path(grid, shortest[0], shortest[-1], forbidden_edge={u, v})
        if alt is None or len(alt) > limit:
            continue
        key = tuple(alt)
        if key not in seen:
            seen.add(key)
            extras.append(key)
    extras.sort(key=lambda p: (len(p), p))
    return [tuple(shortest)] + extras[: max(0, max_paths - 1)]


def maze_target(
    grid: MazeGrid,
    K: int = 2,
    n_pairs: int = 20,
    max_paths_per_pair: int = 10,
    seed: int = 0,
) -> TargetDistribution:
    """Uniform distribution over (subgoals, SEP, path) planning sequences.

    Endpoint pairs are sampled among distinct odd-odd rooms; each pair
    contributes its BFS shortest path plus controlled detours (one shortest
    edge forbidden at a time, within 1.5x the shortest length, capped at
    max_paths_per_pair). For K > 2 the intermediate subgoals are K-2 cells
    drawn uniformly at random along the shortest path; a pair's atoms are the
    kept paths that visit its subgoals in order. Tokens are cell ids r*W + c;
    the separator id is H*W. Unreachable or too-short pairs are skipped with
    a warning (an error if every pair is skipped).
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = make_rng(seed)
    rooms = [
        (r, c)
        for r in range(1, grid.height, 2)
        for c in range(1, grid.width, 2)
        if grid.is_open(r, c)
    ]
    sep = grid.height * grid.width
    skipped = 0
    atom_weights = {}
    for _ in range(n_pairs):
        i, j = rng.choice(len(rooms), size=2, replace=False)
        start, goal = rooms[int(i)], rooms[int(j)]
        shortest = _bfs_path(grid, start, goal)
        if shortest is None or len(shortest) < K:
            skipped += 1
            continue
        interior = list(range(1, len(shortest) - 1))
        if len(interior) < K - 2:
            skipped += 1
            continue
        picks = (
            sorted(int(q) for q in rng.choice(interior, size=K - 2, replace=False))
            if K > 2
            else []
        )
        subgoal_cells = [start] + [shortest[q] for q in picks] + [goal]
        subgoal_ids = [grid.cell_id(r, c) for r, c in subgoal_cells]
        prompt = tuple(subgoal_ids) + (sep,)
        for path in _detour_paths(grid, shortest, max_paths_per_pair):
            if not _visits_in_order(path, subgoal_cells):
                continue
            seq = prompt + tuple(grid.cell_id(r, c) for r, c in path)
            atom_weights[seq] = 1.0
    if not atom_weights:
        raise ValueError("every sampled endpoint pair was unusable")
    if skipped:
        import warnings

        warnings.warn(f"skipped {skipped} unusable endpoint pair(s)", stacklevel=2)
    return TargetDistribution.from_weights(
        atom_weights.items(), vocab_size=sep + 1, clamp_prefix_len=0
    )


def _visits_in_order(path, subgoal_cells) -> bool:
    """True when path starts at the first subgoal, ends at the last, and
    passes through the rest in order."""
    if not path or path[0] != subgoal_cells[0] or path[-1] != subgoal_cells[-1]:
        return False
    k = 0
    for cell in path:
        if k < len(subgoal_cells) and cell == subgoal_cells[k]:
            k += 1
    return k == len(subgoal_cells)


def maze_prompts(target: TargetDistribution) -> list:
    """Distinct (subgoals, SEP) prefixes of a maze target's atoms."""
    sep = target.vocab_size - 1
    prompts = {seq[: seq.index(sep) + 1] for seq in target.support}
    return sorted(prompts)
