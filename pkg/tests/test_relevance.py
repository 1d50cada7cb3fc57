"""Relevance, part-of-speech relevance, and margin arithmetic."""

import numpy as np
import pytest

from conftest import random_annotations
from relmargin.relevance import (
    CaptionAnnotation,
    RelevanceMatrix,
    margin_for,
    pairwise_jaccard,
    pairwise_margin,
    pairwise_relevance,
    pos_relevance,
    relevance,
    relevance_matrix,
    shares_any_class,
)


def ann(i, verbs, nouns):
    return CaptionAnnotation(item_id=f"x{i}", verbs=verbs, nouns=nouns)


def set_jaccard(a, b):
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


class TestScalarRelevance:
    def test_identical_is_exactly_one(self):
        a = ann(0, (3,), (1, 7, 2))
        b = ann(1, (3,), (2, 1, 7))  # same sets, different order
        assert relevance(a, b) == 1.0

    def test_disjoint_is_zero(self):
        assert relevance(ann(0, (0,), (1,)), ann(1, (2,), (3, 4))) == 0.0

    def test_partial_overlap_value(self):
        # verbs match (J=1), nouns share 1 of 3 (J=1/3)
        a = ann(0, (0,), (1, 2))
        b = ann(1, (0,), (2, 3))
        assert relevance(a, b) == 0.5 * (1.0 + 1 / 3)

    def test_empty_sets(self):
        # both empty -> that part counts as fully matching
        assert relevance(ann(0, (), (5,)), ann(1, (), (5,))) == 1.0
        # one empty -> that part contributes zero
        assert relevance(ann(0, (0,), ()), ann(1, (0,), (2,))) == 0.5

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(11)
        anns = random_annotations(rng, 40, allow_empty=True)
        for i in range(0, 40, 3):
            for j in range(1, 40, 7):
                r = relevance(anns[i], anns[j])
                assert r == relevance(anns[j], anns[i])
                assert 0.0 <= r <= 1.0

    def test_matches_set_arithmetic(self):
        rng = np.random.default_rng(5)
        anns = random_annotations(rng, 60, allow_empty=True)
        for a in anns[:20]:
            for b in anns[20:40]:
                want = 0.5 * (
                    set_jaccard(set(a.verbs), set(b.verbs))
                    + set_jaccard(set(a.nouns), set(b.nouns))
                )
                assert relevance(a, b) == want


class TestPosRelevance:
    def test_opposite_part_counts_as_match(self):
        a = ann(0, (0,), (1, 2))
        b = ann(1, (5,), (2, 3))
        assert pos_relevance(a, b, "verb") == 0.5  # J_verb = 0
        assert pos_relevance(a, b, "noun") == 0.5 * (1 / 3 + 1.0)

    def test_range_floor(self):
        # always >= 0.5 because the opposite part contributes 1
        rng = np.random.default_rng(2)
        anns = random_annotations(rng, 30)
        for a, b in zip(anns[:15], anns[15:]):
            for part in ("verb", "noun"):
                assert 0.5 <= pos_relevance(a, b, part) <= 1.0

    def test_bad_part(self):
        with pytest.raises(ValueError):
            pos_relevance(ann(0, (0,), (1,)), ann(1, (0,), (1,)), "adjective")


class TestMargins:
    def test_levels(self):
        a = ann(0, (0,), (1, 2))
        b = ann(1, (0,), (2, 3))
        assert margin_for(a, b, "global") == 1.0 - relevance(a, b)
        assert margin_for(a, b, "verb") == 1.0 - pos_relevance(a, b, "verb")
        assert margin_for(a, b, "noun") == 1.0 - pos_relevance(a, b, "noun")

    def test_identical_pair_zero_margin(self):
        a = ann(0, (1,), (4, 5))
        b = ann(1, (1,), (5, 4))
        for level in ("global", "verb", "noun"):
            assert margin_for(a, b, level) == 0.0

    def test_pos_level_capped_at_half(self):
        a = ann(0, (0,), (1,))
        b = ann(1, (9,), (8,))
        assert margin_for(a, b, "verb") == 0.5
        assert margin_for(a, b, "noun") == 0.5

    def test_bad_level(self):
        with pytest.raises(ValueError):
            margin_for(ann(0, (0,), (1,)), ann(1, (0,), (1,)), "sentence")

    def test_pairwise_matches_scalar(self):
        rng = np.random.default_rng(8)
        a = random_annotations(rng, 12, allow_empty=True)
        b = random_annotations(rng, 9, allow_empty=True)
        for level in ("global", "verb", "noun"):
            grid = pairwise_margin(a, b, level)
            assert grid.shape == (12, 9)
            for i in range(12):
                for j in range(9):
                    assert grid[i, j] == margin_for(a[i], b[j], level)


class TestPairwiseGrids:
    def test_relevance_grid_matches_scalar(self):
        rng = np.random.default_rng(4)
        a = random_annotations(rng, 15, allow_empty=True)
        b = random_annotations(rng, 10, allow_empty=True)
        grid = pairwise_relevance(a, b)
        for i in range(15):
            for j in range(10):
                assert grid[i, j] == relevance(a[i], b[j])

    def test_self_grid_diagonal_exactly_one(self):
        rng = np.random.default_rng(9)
        anns = random_annotations(rng, 30)
        grid = pairwise_relevance(anns, anns)
        assert np.all(np.diag(grid) == 1.0)

    def test_jaccard_grid_large_class_ids(self):
        # ids spanning several 64-bit mask words
        a = [ann(0, (0, 200), (150,)), ann(1, (200,), (150, 3))]
        grid = pairwise_jaccard(a, a, "verb")
        assert grid[0, 0] == 1.0
        assert grid[0, 1] == 0.5
        assert grid[1, 0] == 0.5

    def test_jaccard_bad_part(self):
        with pytest.raises(ValueError):
            pairwise_jaccard([ann(0, (0,), (1,))], [ann(1, (0,), (1,))], "word")

    def test_shares_any_class(self):
        rng = np.random.default_rng(13)
        a = random_annotations(rng, 10, allow_empty=True)
        b = random_annotations(rng, 10, allow_empty=True)
        for part in ("verb", "noun"):
            grid = shares_any_class(a, b, part)
            for i in range(10):
                for j in range(10):
                    sa = set(a[i].verbs if part == "verb" else a[i].nouns)
                    sb = set(b[j].verbs if part == "verb" else b[j].nouns)
                    assert grid[i, j] == bool(sa & sb)


class TestAnnotation:
    def test_rejects_negative_ids(self):
        with pytest.raises(ValueError):
            CaptionAnnotation(item_id="a", verbs=(-1,), nouns=(0,))

    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            CaptionAnnotation(item_id="a", verbs=(3, 3), nouns=(0,))

    def test_keeps_order_but_compares_as_sets(self):
        a = CaptionAnnotation(item_id="a", verbs=(2, 1), nouns=(9, 4))
        assert a.verbs == (2, 1)
        assert a.noun_set == frozenset({4, 9})


class TestRelevanceMatrix:
    def test_lookup(self):
        rng = np.random.default_rng(1)
        anns = random_annotations(rng, 6)
        m = relevance_matrix(anns[:2], anns)
        assert m.query_index("a0") == 0
        assert m.item_index("a5") == 5
        assert np.array_equal(m.row("a1"), m.grid[1])

    def test_unknown_ids(self):
        rng = np.random.default_rng(1)
        anns = random_annotations(rng, 4)
        m = relevance_matrix(anns, anns)
        with pytest.raises(KeyError):
            m.query_index("nope")
        with pytest.raises(KeyError):
            m.item_index("nope")

    def test_validates_shape_and_range(self):
        with pytest.raises(ValueError):
            RelevanceMatrix(queries=("q",), items=("a", "b"), grid=np.zeros((1, 3)))
        with pytest.raises(ValueError):
            RelevanceMatrix(queries=("q",), items=("a",), grid=np.array([[1.5]]))

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValueError):
            relevance_matrix([], [])
