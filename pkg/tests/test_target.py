"""Target PMFs, padding, conditioning, and the maze benchmark generator."""

from collections import deque

import pytest

from flexctmc.rand import make_rng
from flexctmc.sequence import MASK
from flexctmc.target import (
    TargetDistribution,
    bundled_targets,
    condition_on_prefix,
    length_marginal,
    load_pmf,
    maze_generate,
    maze_prompts,
    maze_target,
    mdm_pad_target,
    strip_pad,
)


class TestLoadPmf:
    def test_glyph_normalization(self):
        tgt = load_pmf({"glyphs": "ab", "atoms": {"ab": 1, "b": 1}})
        assert tgt.prob((0, 1)) == pytest.approx(0.5)
        assert tgt.prob((1,)) == pytest.approx(0.5)

    def test_three_atom_normalization(self):
        tgt = load_pmf({"glyphs": "ab", "atoms": {"a": 2, "b": 1, "ab": 1}})
        assert tgt.prob((0,)) == pytest.approx(0.5)
        assert tgt.prob((1,)) == pytest.approx(0.25)
        assert tgt.prob((0, 1)) == pytest.approx(0.25)

    def test_id_form(self):
        tgt = load_pmf({"vocab_size": 3, "atoms": [[[0, 2], 3], [[1], 1]]})
        assert tgt.prob((0, 2)) == pytest.approx(0.75)

    def test_empty_support_rejected(self):
        with pytest.raises(ValueError, match="empty support"):
            load_pmf({"glyphs": "ab", "atoms": {}})

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            load_pmf({"vocab_size": 2, "atoms": [[[0], -1.0]]})

    def test_unknown_glyph_rejected(self):
        with pytest.raises(ValueError, match="glyph"):
            load_pmf({"glyphs": "ab", "atoms": {"ac": 1}})

    def test_duplicate_glyphs_rejected(self):
        with pytest.raises(ValueError, match="duplicates"):
            load_pmf({"glyphs": "aa", "atoms": {"a": 1}})


class TestTargetDistribution:
    def test_mask_in_atom_rejected(self):
        with pytest.raises(ValueError, match="MASK"):
            TargetDistribution.from_weights([((MASK,), 1.0)], vocab_size=2)

    def test_token_outside_vocab_rejected(self):
        with pytest.raises(ValueError, match="vocabulary"):
            TargetDistribution.from_weights([((5,), 1.0)], vocab_size=2)

    def test_clamp_prefix_mismatch_rejected(self):
        with pytest.raises(ValueError, match="prefix"):
            TargetDistribution.from_weights(
                [((0, 1), 1.0), ((1, 1), 1.0)], vocab_size=2, clamp_prefix_len=1
            )

    def test_prefix_and_max_len(self):
        tgt = TargetDistribution.from_weights(
            [((0, 1), 1.0), ((0, 1, 1), 1.0)], vocab_size=2, clamp_prefix_len=2
        )
        assert tgt.prefix == (0, 1)
        assert tgt.max_len == 3

    def test_sampling_frequencies(self, two_atom):
        rng = make_rng(4)
        draws = [two_atom.sample(rng) for _ in range(20_000)]
        assert draws.count((0, 1)) / 20_000 == pytest.approx(0.5, abs=0.02)

    def test_bundled_targets_valid(self):
        bundle = bundled_targets()
        assert set(bundle) == {"two_atom", "three_atom", "mixed_len"}
        for tgt in bundle.values():
            assert sum(p for _, p in tgt.atoms) == pytest.approx(1.0)


class TestLengthMarginal:
    def test_two_atom(self, two_atom):
        assert length_marginal(two_atom) == pytest.approx({2: 0.5, 1: 0.5})

    def test_point_mass(self, single_atom):
        assert length_marginal(single_atom) == {1: 1.0}

    def test_sums_to_one(self, mixed_len):
        assert sum(length_marginal(mixed_len).values()) == pytest.approx(1.0)


class TestPadding:
    def test_pad_extends_vocab(self, mixed_len):
        padded, pad_id = mdm_pad_target(mixed_len)
        assert pad_id == mixed_len.vocab_size
        assert {len(s) for s in padded.support} == {mixed_len.max_len}

    def test_strip_pad_roundtrip(self, mixed_len):
        padded, pad_id = mdm_pad_target(mixed_len)
        stripped = {strip_pad(s, pad_id) for s in padded.support}
        assert stripped == set(mixed_len.support)

    def test_strip_pad_without_pad(self):
        assert strip_pad((0, 1), 5) == (0, 1)


class TestConditioning:
    def test_condition_sets_clamp(self, mixed_len):
        cond = condition_on_prefix(mixed_len, (0, 1))
        assert cond.clamp_prefix_len == 2
        assert set(cond.support) == {(0, 1), (0, 1, 2, 0)}
        assert sum(p for _, p in cond.atoms) == pytest.approx(1.0)

    def test_no_match_rejected(self, mixed_len):
        with pytest.raises(ValueError):
            condition_on_prefix(mixed_len, (2, 2, 2))

    def test_marginalizing_prompts_recovers_lengths(self, mixed_len):
        # mixture over one-token prompts weighted by their prior mass
        prompts = sorted({s[:1] for s in mixed_len.support})
        mixture: dict = {}
        for prompt in prompts:
            mass = sum(p for s, p in mixed_len.atoms if s[:1] == prompt)
            for length, q in length_marginal(
                condition_on_prefix(mixed_len, prompt)
            ).items():
                mixture[length] = mixture.get(length, 0.0) + mass * q
        assert mixture == pytest.approx(length_marginal(mixed_len))


def _passage_edges(grid):
    """Corridor connections between odd-odd rooms (via open even cells)."""
    edges = set()
    for r in range(1, grid.height, 2):
        for c in range(1, grid.width, 2):
            for dr, dc in ((0, 2), (2, 0)):
                rr, cc = r + dr, c + dc
                if rr < grid.height and cc < grid.width:
                    if grid.is_open(r + dr // 2, c + dc // 2):
                        edges.add(((r, c), (rr, cc)))
    return edges


def _rooms_connected(grid):
    rooms = [(r, c) for r in range(1, grid.height, 2) for c in range(1, grid.width, 2)]
    adj: dict = {room: [] for room in rooms}
    for a, b in _passage_edges(grid):
        adj[a].append(b)
        adj[b].append(a)
    seen = {rooms[0]}
    queue = deque([rooms[0]])
    while queue:
        for nxt in adj[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(rooms)


class TestMazeGenerate:
    @pytest.mark.parametrize("seed", range(20))
    def test_perfect_maze_invariants(self, seed):
        grid = maze_generate(4, 5, seed=seed)
        assert (grid.height, grid.width) == (9, 11)
        for c in range(grid.width):
            assert not grid.is_open(0, c) and not grid.is_open(grid.height - 1, c)
        for r in range(grid.height):
            assert not grid.is_open(r, 0) and not grid.is_open(r, grid.width - 1)
        for r in range(1, grid.height, 2):
            for c in range(1, grid.width, 2):
                assert grid.is_open(r, c)
        # spanning tree over rooms: connected with exactly rooms-1 passages
        assert _rooms_connected(grid)
        assert len(_passage_edges(grid)) == 4 * 5 - 1

    def test_extra_doors_add_cycles(self):
        base = maze_generate(5, 5, seed=2)
        loopy = maze_generate(5, 5, seed=2, extra_door_frac=0.5)
        assert len(_passage_edges(loopy)) > len(_passage_edges(base))
        assert _rooms_connected(loopy)

    def test_deterministic_in_seed(self):
        a = maze_generate(3, 3, seed=7)
        b = maze_generate(3, 3, seed=7)
        assert a.as_text() == b.as_text()
        assert a.as_text() != maze_generate(3, 3, seed=8).as_text()

    def test_text_art_shape(self):
        art = maze_generate(2, 2, seed=0).as_text().splitlines()
        assert len(art) == 5 and all(len(row) == 5 for row in art)


class TestMazeTarget:
    def test_paths_walk_open_adjacent_cells(self):
        grid = maze_generate(5, 5, seed=11, extra_door_frac=0.2)
        tgt = maze_target(grid, K=3, n_pairs=10, max_paths_per_pair=6, seed=1)
        sep = grid.height * grid.width
        for atom in tgt.support:
            k = atom.index(sep)
            subgoals, path = atom[:k], atom[k + 1 :]
            cells = [grid.cell_rc(c) for c in path]
            assert all(grid.is_open(r, c) for r, c in cells)
            assert all(
                abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1
                for a, b in zip(cells, cells[1:])
            )
            assert path[0] == subgoals[0] and path[-1] == subgoals[-1]
            want = list(subgoals)
            for c in path:
                if want and c == want[0]:
                    want.pop(0)
            assert not want  # subgoals visited in order

    def test_prompt_conditioning(self):
        grid = maze_generate(4, 4, seed=3)
        tgt = maze_target(grid, K=2, n_pairs=8, max_paths_per_pair=4, seed=9)
        prompts = maze_prompts(tgt)
        assert prompts
        cond = condition_on_prefix(tgt, prompts[0])
        assert cond.clamp_prefix_len == len(prompts[0])
        assert all(s[: len(prompts[0])] == tuple(prompts[0]) for s in cond.support)

    def test_uniform_over_collected_paths(self):
        grid = maze_generate(4, 4, seed=5)
        tgt = maze_target(grid, K=2, n_pairs=6, max_paths_per_pair=4, seed=2)
        probs = {p for _, p in tgt.atoms}
        assert len(probs) == 1
