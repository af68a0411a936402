"""Sequence edits and the embedding/gap counting DP against brute force."""

from itertools import combinations, product

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexctmc.sequence import (
    MASK,
    IndexSet,
    delete_at,
    embed_count,
    embed_count_token_all,
    embed_count_token_at,
    gap_count,
    gap_counts_all,
    insert_at,
    is_clean,
    mask_positions,
    replace_at,
    restrict,
    _embed_count_brute,
    _gap_count_brute,
)

A, B, C, D = 0, 1, 2, 3
M = MASK


class TestEdits:
    def test_insert_front(self):
        assert insert_at((A, B, C), 0, D) == (D, A, B, C)

    def test_insert_back(self):
        assert insert_at((A, B, C), 3, D) == (A, B, C, D)

    def test_insert_out_of_range(self):
        with pytest.raises(ValueError):
            insert_at((A, B), 3, D)

    def test_replace(self):
        assert replace_at((A, M), 1, B) == (A, B)
        with pytest.raises(ValueError):
            replace_at((A,), 1, B)

    def test_delete(self):
        assert delete_at((A, B, C), 1) == (A, C)

    def test_restrict(self):
        assert restrict((A, B, C), (0, 2)) == (A, C)
        with pytest.raises(ValueError):
            restrict((A, B, C), (0, 3))

    def test_predicates(self):
        assert is_clean((A, B)) and not is_clean((A, M))
        assert mask_positions((M, A, M)) == (0, 2)


class TestIndexSet:
    def test_boundaries(self):
        s = IndexSet((1, 3))
        assert s.at(-1, 5) == -1
        assert s.at(2, 5) == 5
        assert s.at(0, 5) == 1

    def test_gap_sizes(self):
        assert IndexSet((1, 3)).gap_sizes(5) == (1, 1, 1)
        assert IndexSet(()).gap_sizes(2) == (2,)

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            IndexSet((2, 1))
        with pytest.raises(ValueError):
            IndexSet((-1,))


class TestEmbedCount:
    @pytest.mark.parametrize(
        "x, y, expected",
        [
            ((), (A, B), 1),
            ((M,), (A, B), 2),
            ((M, M), (A, B), 1),
            ((A,), (B, A), 1),
            ((M,), (A, A), 2),
        ],
    )
    def test_known_values(self, x, y, expected):
        assert embed_count(x, y) == expected

    def test_rejects_mask_in_y(self):
        with pytest.raises(ValueError):
            embed_count((A,), (A, M))

    def test_longer_x_has_no_embedding(self):
        assert embed_count((A, A, A), (A, A)) == 0


class TestTokenAt:
    @pytest.mark.parametrize(
        "x, i, v, y, expected",
        [
            ((M,), 0, A, (A, B), 1),
            ((M,), 0, B, (A, B), 1),
            ((M, M), 0, B, (A, B), 0),
        ],
    )
    def test_known_values(self, x, i, v, y, expected):
        assert embed_count_token_at(x, i, v, y) == expected

    def test_equals_replace_then_count(self):
        x, y = (M, A, M), (B, A, B, A)
        for i in (0, 2):
            for v in (A, B):
                assert embed_count_token_at(x, i, v, y) == embed_count(
                    replace_at(x, i, v), y
                )

    def test_preconditions(self):
        with pytest.raises(ValueError):
            embed_count_token_at((A,), 0, B, (A, B))  # not masked
        with pytest.raises(ValueError):
            embed_count_token_at((M,), 0, M, (A, B))  # v must be clean


class TestGapCount:
    @pytest.mark.parametrize(
        "x, i, y, expected",
        [
            ((), 0, (A, B), 2),
            ((B,), 0, (A, B), 1),
            ((A, B), 0, (A, B), 0),
        ],
    )
    def test_known_values(self, x, i, y, expected):
        assert gap_count(x, i, y) == expected

    def test_gap_position_range(self):
        with pytest.raises(ValueError):
            gap_count((A,), 2, (A, B))


def _all_patterns(y, max_len):
    """Every x (clean-or-masked subsequence pattern) up to max_len tokens."""
    alphabet = sorted(set(y)) + [M]
    for n in range(min(max_len, len(y)) + 1):
        yield from product(alphabet, repeat=n)


class TestBruteForceAgreement:
    def test_exhaustive_binary_alphabet(self):
        for ylen in range(5):
            for y in product((A, B), repeat=ylen):
                for x in _all_patterns(y, 4):
                    assert embed_count(x, y) == _embed_count_brute(x, y)
                    for i in range(len(x) + 1):
                        assert gap_count(x, i, y) == _gap_count_brute(x, i, y)

    @settings(max_examples=300, deadline=None)
    @given(st.data())
    def test_random_ternary_alphabet(self, data):
        y = tuple(data.draw(st.lists(st.integers(0, 2), min_size=0, max_size=8)))
        x = tuple(
            data.draw(
                st.lists(st.sampled_from([0, 1, 2, M]), min_size=0, max_size=len(y))
            )
        )
        assert embed_count(x, y) == _embed_count_brute(x, y)
        i = data.draw(st.integers(0, len(x)))
        assert gap_count(x, i, y) == _gap_count_brute(x, i, y)


class TestIdentities:
    cases = [
        ((M,), (A, B, A)),
        ((M, B), (A, B, B, A)),
        ((A, M), (A, A, B)),
        ((), (B, A, B)),
        ((M, M), (A, B, A, B)),
    ]

    @pytest.mark.parametrize("x, y", cases)
    def test_gap_sum_identity(self, x, y):
        total = sum(gap_count(x, i, y) for i in range(len(x) + 1))
        assert total == (len(y) - len(x)) * embed_count(x, y)

    @pytest.mark.parametrize("x, y", cases)
    def test_gap_equals_mask_insertion(self, x, y):
        for i in range(len(x) + 1):
            assert gap_count(x, i, y) == embed_count(insert_at(x, i, MASK), y)

    @pytest.mark.parametrize("x, y", cases)
    def test_token_marginal_sums_to_embed_count(self, x, y):
        for i in mask_positions(x):
            by_token = embed_count_token_all(x, i, y)
            assert sum(by_token.values()) == embed_count(x, y)

    @pytest.mark.parametrize("x, y", cases)
    def test_gap_counts_all_matches_scalar(self, x, y):
        assert gap_counts_all(x, y) == tuple(
            gap_count(x, i, y) for i in range(len(x) + 1)
        )
