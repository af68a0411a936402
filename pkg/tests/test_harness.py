"""Metric helpers and the acceptance-suite plumbing."""

import pytest

from flexctmc.harness import (
    CriterionResult,
    empirical_tv,
    length_tv,
    maze_success,
    run_acceptance,
    tv_margin,
)
from flexctmc.rand import make_rng
from flexctmc.sequence import MASK
from flexctmc.target import _bfs_path, maze_generate, maze_target


class TestEmpiricalTv:
    def test_exact_proportions_give_zero(self, two_atom):
        samples = [(0, 1)] * 50 + [(1,)] * 50
        assert empirical_tv(samples, two_atom) == pytest.approx(0.0)

    def test_collapsed_sampler_gives_half(self, two_atom):
        assert empirical_tv([(0, 1)] * 80, two_atom) == pytest.approx(0.5)

    def test_off_support_mass_is_charged(self, two_atom):
        assert empirical_tv([(9, 9)] * 10, two_atom) == pytest.approx(1.0)

    def test_empty_rejected(self, two_atom):
        with pytest.raises(ValueError):
            empirical_tv([], two_atom)


class TestLengthTv:
    def test_exact_length_mix_gives_zero(self, mixed_len):
        samples = (
            [(9,)] * 15 + [(9, 9)] * 35 + [(9, 9, 9)] * 30 + [(9, 9, 9, 9)] * 20
        )
        assert length_tv(samples, mixed_len) == pytest.approx(0.0)

    def test_shifted_lengths_detected(self, mixed_len):
        assert length_tv([(9,)] * 10, mixed_len) == pytest.approx(0.85)

    def test_empty_rejected(self, mixed_len):
        with pytest.raises(ValueError):
            length_tv([], mixed_len)


class TestTvMargin:
    @pytest.mark.parametrize("n", [1000, 10_000])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_bounds_exact_sampler_fluctuation(self, mixed_len, n, seed):
        rng = make_rng(seed)
        samples = [mixed_len.sample(rng) for _ in range(n)]
        assert empirical_tv(samples, mixed_len) <= tv_margin(
            len(mixed_len.support), n
        )

    def test_shrinks_with_n(self):
        assert tv_margin(4, 40_000) == pytest.approx(0.04)
        assert tv_margin(4, 10_000) == pytest.approx(0.08)


class TestMazeSuccess:
    @pytest.fixture
    def grid(self):
        return maze_generate(3, 3, seed=1)

    def make_case(self, grid):
        rooms = [
            (r, c)
            for r in range(1, grid.height, 2)
            for c in range(1, grid.width, 2)
        ]
        start, goal = rooms[0], rooms[-1]
        path = _bfs_path(grid, start, goal)
        assert path is not None
        sep = grid.height * grid.width
        prompt = (grid.cell_id(*start), grid.cell_id(*goal), sep)
        out = prompt + tuple(grid.cell_id(r, c) for r, c in path)
        return prompt, out

    def test_valid_path_counts(self, grid):
        prompt, out = self.make_case(grid)
        assert maze_success([out], grid, [prompt]) == 1.0

    def test_wall_step_fails(self, grid):
        prompt, out = self.make_case(grid)
        # (0, 0) is a border wall; splicing it in breaks the walk
        bad = out[: len(prompt) + 1] + (grid.cell_id(0, 0),) + out[len(prompt) + 1 :]
        assert maze_success([bad], grid, [prompt]) == 0.0

    def test_teleport_fails(self, grid):
        prompt, out = self.make_case(grid)
        # dropping an interior cell leaves a non-adjacent hop
        bad = out[: len(prompt) + 1] + out[len(prompt) + 2 :]
        assert maze_success([bad], grid, [prompt]) == 0.0

    def test_prompt_must_be_echoed(self, grid):
        prompt, out = self.make_case(grid)
        assert maze_success([out[len(prompt) :]], grid, [prompt]) == 0.0

    def test_mask_fails(self, grid):
        prompt, out = self.make_case(grid)
        assert maze_success([out + (MASK,)], grid, [prompt]) == 0.0

    def test_wrong_endpoint_fails(self, grid):
        prompt, out = self.make_case(grid)
        assert maze_success([out[:-1]], grid, [prompt]) == 0.0

    def test_empty_path_fails(self, grid):
        prompt, _ = self.make_case(grid)
        assert maze_success([prompt], grid, [prompt]) == 0.0

    def test_target_atoms_all_succeed(self, grid):
        tgt = maze_target(grid, K=2, n_pairs=6, seed=0)
        sep = grid.height * grid.width
        outs = list(tgt.support)
        prompts = [seq[: seq.index(sep) + 1] for seq in outs]
        assert maze_success(outs, grid, prompts) == 1.0

    def test_requires_one_output_per_prompt(self, grid):
        prompt, out = self.make_case(grid)
        with pytest.raises(ValueError):
            maze_success([out, out], grid, [prompt])


class TestSuitePlumbing:
    def test_result_line_format(self):
        res = CriterionResult("demo", True, "all good", 1.23)
        assert res.line() == "[PASS] demo: all good [1.2s]"
        res = CriterionResult("demo", False, "off by one", 0.5, retried=True)
        assert res.line() == "[FAIL] demo: off by one (after retry) [0.5s]"

    def test_name_filter_and_offset(self):
        results = run_acceptance(names=["gap_count_identity"], seed_offset=1)
        assert [r.name for r in results] == ["gap_count_identity"]
        assert results[0].passed
