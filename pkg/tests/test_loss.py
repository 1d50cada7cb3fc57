"""Triplet loss terms, margin specs, and the batched loss with gradients."""

import numpy as np
import pytest

from conftest import quick_config, tiny_dataset  # noqa: F401
from relmargin import (
    TERMS,
    EmbeddingModel,
    LossConfig,
    MarginSpec,
    batch_loss,
    grad_check,
    mine_offline,
    parse_terms,
    relevance_triplet_loss,
    similarity,
    triplet_loss,
    triplet_margins,
)
from relmargin.mining import TripletBatch
from relmargin.relevance import margin_for


class TestMarginSpec:
    def test_parse_relevance(self):
        spec = MarginSpec.parse("relevance")
        assert spec.mode == "relevance"
        assert spec.label == "relevance"

    def test_parse_fixed(self):
        spec = MarginSpec.parse("fixed:0.35")
        assert spec.mode == "fixed"
        assert spec.fixed_value == 0.35
        assert spec.label == "fixed:0.35"

    def test_label_trims_trailing_zeros(self):
        assert MarginSpec("fixed", 1.0).label == "fixed:1"

    @pytest.mark.parametrize("text", ["fixed:", "fixed:nan", "fixed:-0.2", "margin", ""])
    def test_parse_rejects_garbage(self, text):
        with pytest.raises(ValueError):
            MarginSpec.parse(text)

    def test_rejects_negative_value(self):
        with pytest.raises(ValueError):
            MarginSpec("fixed", -1.0)


class TestTermParsing:
    def test_order_preserved(self):
        assert parse_terms("within-noun, cross-global") == ("within-noun", "cross-global")

    def test_unknown_term(self):
        with pytest.raises(ValueError):
            parse_terms("cross-global,cross-adverb")

    def test_loss_config_defaults_weights_to_one(self):
        config = LossConfig(terms=("cross-global", "within-verb"), margin=MarginSpec("relevance"))
        assert config.weight("cross-global") == 1.0
        assert config.weight("within-verb") == 1.0

    def test_loss_config_rejects_unknown_weight_key(self):
        with pytest.raises(ValueError):
            LossConfig(
                terms=("cross-global",),
                margin=MarginSpec("relevance"),
                term_weights={"cross-adverb": 2.0},
            )

    def test_term_index_layout(self):
        # family stride 3, level stride 1
        assert TERMS.index("cross-global") == 0
        assert TERMS.index("cross-noun") == 2
        assert TERMS.index("within-global") == 3
        assert TERMS.index("within-noun") == 5


class TestScalarPieces:
    def test_similarity_is_cosine(self):
        assert similarity([2.0, 0.0], [0.0, 3.0]) == 0.0
        assert similarity([1.0, 1.0], [2.0, 2.0]) == pytest.approx(1.0, abs=1e-12)

    def test_similarity_rejects_zero_vector(self):
        with pytest.raises(ValueError):
            similarity([0.0, 0.0], [1.0, 0.0])

    def test_similarity_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            similarity([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_hinge_values(self):
        assert triplet_loss(0.9, 0.1, 0.5) == 0.0  # slack -0.3
        assert triplet_loss(0.4, 0.3, 0.2) == pytest.approx(0.1, abs=1e-12)
        # exact boundary is inactive
        assert triplet_loss(0.5, 0.3, 0.2) == 0.0

    def test_hinge_elementwise(self):
        out = triplet_loss(np.array([0.9, 0.2]), np.array([0.1, 0.3]), 0.5)
        assert np.allclose(out, [0.0, 0.6])

    def test_relevance_priced_hinge(self, tiny_dataset):  # noqa: F811
        a, n = tiny_dataset.annotations[0], tiny_dataset.annotations[1]
        want = max(0.0, margin_for(a, n, "global") + 0.2 - 0.4)
        assert relevance_triplet_loss(0.4, 0.2, a, n) == pytest.approx(want, abs=1e-12)


def mixed_batch(dataset, seed=0, per_example=2):
    parts = [
        mine_offline(dataset, per_example, seed=seed, direction=d, level=lv)
        for d, lv in (
            ("cross-t2v", "global"),
            ("cross-v2t", "verb"),
            ("cross-t2v", "noun"),
            ("within-text", "global"),
            ("within-video", "verb"),
            ("within-text", "noun"),
        )
    ]
    return TripletBatch.concat(parts)


class TestTripletMargins:
    def test_fixed_fills(self, tiny_dataset):  # noqa: F811
        batch = mixed_batch(tiny_dataset)
        margins = triplet_margins(batch, tiny_dataset.annotations, MarginSpec("fixed", 0.7))
        assert np.all(margins == 0.7)

    def test_relevance_uses_each_triplets_level(self, tiny_dataset):  # noqa: F811
        batch = mixed_batch(tiny_dataset)
        margins = triplet_margins(batch, tiny_dataset.annotations, MarginSpec("relevance"))
        for i in range(len(batch)):
            t = batch[i]
            want = margin_for(
                tiny_dataset.annotations[t.anchor],
                tiny_dataset.annotations[t.negative],
                t.level,
            )
            assert margins[i] == want


class TestBatchLoss:
    def full_config(self, margin):
        return LossConfig(terms=TERMS, margin=margin)

    def oracle(self, model, dataset, batch, config):
        """Scalar recomputation through the public one-triplet pieces."""
        emb = {
            "video": model.encode_video(dataset.video_features),
            "text": model.encode_text(dataset.text_features),
        }
        sums = {t: 0.0 for t in config.terms}
        counts = {t: 0 for t in config.terms}
        active = 0
        for i in range(len(batch)):
            t = batch[i]
            a_side = "text" if t.direction in ("cross-t2v", "within-text") else "video"
            c_side = "video" if t.direction in ("cross-t2v", "within-video") else "text"
            s_ap = float(emb[a_side][t.anchor] @ emb[c_side][t.positive])
            s_an = float(emb[a_side][t.anchor] @ emb[c_side][t.negative])
            if config.margin.mode == "fixed":
                m = config.margin.fixed_value
            else:
                m = margin_for(
                    dataset.annotations[t.anchor], dataset.annotations[t.negative], t.level
                )
            value = max(0.0, m + s_an - s_ap)
            sums[t.term] += value
            counts[t.term] += 1
            active += value > 0.0
        per_term = {t: (sums[t] / counts[t] if counts[t] else 0.0) for t in config.terms}
        total = sum(config.weight(t) * per_term[t] for t in config.terms)
        return total, per_term, counts, active

    @pytest.mark.parametrize("margin", [MarginSpec("relevance"), MarginSpec("fixed", 0.4)])
    def test_value_matches_scalar_recomputation(self, tiny_dataset, margin):  # noqa: F811
        model = EmbeddingModel.init(tiny_dataset.f_v, tiny_dataset.f_q, 12, 8, seed=2)
        batch = mixed_batch(tiny_dataset, seed=margin.mode == "fixed")
        config = self.full_config(margin)
        value, _ = batch_loss(model, tiny_dataset, batch, config)
        total, per_term, counts, active = self.oracle(model, tiny_dataset, batch, config)
        assert value.total == pytest.approx(total, abs=1e-12)
        assert value.term_counts == counts
        assert value.active_triplets == active
        for t in TERMS:
            assert value.per_term[t] == pytest.approx(per_term[t], abs=1e-12)

    def test_term_weights_scale_total(self, tiny_dataset):  # noqa: F811
        model = EmbeddingModel.init(tiny_dataset.f_v, tiny_dataset.f_q, 12, 8, seed=2)
        batch = mine_offline(tiny_dataset, 2, seed=3)
        plain = LossConfig(terms=("cross-global",), margin=MarginSpec("relevance"))
        doubled = LossConfig(
            terms=("cross-global",),
            margin=MarginSpec("relevance"),
            term_weights={"cross-global": 2.0},
        )
        v1, g1 = batch_loss(model, tiny_dataset, batch, plain)
        v2, g2 = batch_loss(model, tiny_dataset, batch, doubled)
        assert v2.total == pytest.approx(2.0 * v1.total, abs=1e-12)
        assert np.allclose(g2["video"]["W1"], 2.0 * g1["video"]["W1"], atol=1e-15)

    def test_empty_batch(self, tiny_dataset):  # noqa: F811
        model = EmbeddingModel.init(tiny_dataset.f_v, tiny_dataset.f_q, 12, 8, seed=2)
        config = LossConfig(terms=("cross-global",), margin=MarginSpec("relevance"))
        value, grads = batch_loss(model, tiny_dataset, TripletBatch.empty(), config)
        assert value.total == 0.0
        assert value.active_triplets == 0
        assert all(np.all(g == 0.0) for side in grads.values() for g in side.values())

    def test_rejects_inactive_term_triplets(self, tiny_dataset):  # noqa: F811
        model = EmbeddingModel.init(tiny_dataset.f_v, tiny_dataset.f_q, 12, 8, seed=2)
        batch = mine_offline(tiny_dataset, 1, seed=0, direction="within-text", level="global")
        config = LossConfig(terms=("cross-global",), margin=MarginSpec("relevance"))
        with pytest.raises(ValueError, match="within-global"):
            batch_loss(model, tiny_dataset, batch, config)

    def test_rejects_bad_margin_arrays(self, tiny_dataset):  # noqa: F811
        model = EmbeddingModel.init(tiny_dataset.f_v, tiny_dataset.f_q, 12, 8, seed=2)
        batch = mine_offline(tiny_dataset, 1, seed=0)
        config = LossConfig(terms=("cross-global",), margin=MarginSpec("relevance"))
        with pytest.raises(ValueError):
            batch_loss(model, tiny_dataset, batch, config, margins=np.zeros(len(batch) + 1))
        with pytest.raises(ValueError):
            batch_loss(model, tiny_dataset, batch, config, margins=np.full(len(batch), -0.1))
        with pytest.raises(ValueError):
            batch_loss(model, tiny_dataset, batch, config, margins=np.full(len(batch), np.nan))

    def test_boundary_triplet_is_inactive_with_zero_gradient(self, tiny_dataset):  # noqa: F811
        # positive == negative makes s_ap == s_an bitwise, so margin 0 sits
        # exactly on the hinge boundary; the subgradient there must be 0
        model = EmbeddingModel.init(tiny_dataset.f_v, tiny_dataset.f_q, 12, 8, seed=2)
        batch = TripletBatch.uniform([0], [1], [1], "cross-t2v", "global")
        config = LossConfig(terms=("cross-global",), margin=MarginSpec("fixed", 0.0))
        value, grads = batch_loss(model, tiny_dataset, batch, config, margins=np.array([0.0]))
        assert value.total == 0.0
        assert value.active_triplets == 0
        assert all(np.all(g == 0.0) for side in grads.values() for g in side.values())

    def test_gradient_against_finite_differences(self, tiny_dataset):  # noqa: F811
        model = EmbeddingModel.init(tiny_dataset.f_v, tiny_dataset.f_q, 6, 4, seed=9)
        batch = mixed_batch(tiny_dataset, seed=4, per_example=1)
        config = self.full_config(MarginSpec("relevance"))
        assert grad_check(model, batch, tiny_dataset, config) < 1e-4
