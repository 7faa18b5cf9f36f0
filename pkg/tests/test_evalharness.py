import math
from datetime import datetime, timedelta

import numpy as np
import pytest

from trajlm.corpus import Event, ParticipantRecord
from trajlm.evalharness import (
    baseline_predict,
    bioage,
    crossmodal_sweep,
    decode_expected,
    eval_longitudinal,
    eval_within_visit,
    longitudinal_pairs,
    topk_accuracy,
    write_metric_csv,
)
from trajlm.model import ModelConfig, init_params
from trajlm.vocab import RawModality, build_vocabulary


@pytest.fixture(scope="module")
def vocab():
    rng = np.random.default_rng(0)
    return build_vocabulary(
        [
            RawModality("two_bins", "continuous", values=[5.0, 10.0, 15.0, 25.0], bin_count=2),
            RawModality("wide", "continuous", values=list(rng.normal(100, 10, 600)), bin_count=8),
            RawModality("cat4", "categorical", categories=["a", "b", "c", "d"]),
        ]
    )


@pytest.fixture(scope="module")
def tiny_model(vocab):
    config = ModelConfig(
        vocab_size=vocab.total_tokens, n_modalities=vocab.n_modalities,
        d_model=16, n_layers=1, n_heads=2, d_head=4, cont_pe_dim=8, dropout=0.0, max_seq_len=64,
    )
    params = init_params(config, np.random.default_rng(1), dtype=np.float64)
    return params, config


class TestDecodeExpected:
    def test_uniform_over_two_midpoints(self, vocab):
        spec = vocab.modalities[0]
        assert len(spec.midpoints) == 2
        logits = np.zeros(vocab.total_tokens)
        expected = decode_expected(logits, vocab, 0)
        assert expected == pytest.approx(sum(spec.midpoints) / 2)

    def test_point_mass(self, vocab):
        logits = np.full(vocab.total_tokens, -1e9)
        logits[vocab.modalities[0].cum_base] = 0.0
        assert decode_expected(logits, vocab, 0) == pytest.approx(vocab.modalities[0].midpoints[0])

    def test_hand_softmax(self):
        vocab = build_vocabulary(
            [RawModality("m", "continuous", values=[-1.0, 0.5, 1.5, 4.0], bin_count=2)]
        )
        m = vocab.modalities[0]
        m.midpoints = [0.0, 3.0]
        logits = np.array([math.log(2.0), math.log(1.0)])
        assert decode_expected(logits, vocab, 0) == pytest.approx(1.0, abs=1e-12)

    def test_constant_shift_invariance(self, vocab):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=vocab.total_tokens)
        base = decode_expected(logits, vocab, 1)
        a, b = vocab.token_range(1)
        shifted = logits.copy()
        shifted[a : b + 1] += 123.456
        assert decode_expected(shifted, vocab, 1) == pytest.approx(base, abs=1e-9)

    def test_result_within_midpoint_range(self, vocab):
        rng = np.random.default_rng(3)
        spec = vocab.modalities[1]
        for _ in range(50):
            logits = rng.normal(scale=30, size=vocab.total_tokens)
            val = decode_expected(logits, vocab, 1)
            assert min(spec.midpoints) <= val <= max(spec.midpoints)

    def test_categorical_rejected(self, vocab):
        with pytest.raises(ValueError, match="top-K"):
            decode_expected(np.zeros(vocab.total_tokens), vocab, 2)


class TestTopK:
    def test_k_equals_width(self, vocab):
        rng = np.random.default_rng(4)
        rows = rng.normal(size=(10, vocab.total_tokens))
        truth = rng.integers(0, 4, 10)
        assert topk_accuracy(rows, truth, vocab, 2, 4) == 1.0

    def test_point_mass_k1(self, vocab):
        a, _ = vocab.token_range(2)
        rows = np.full((6, vocab.total_tokens), -50.0)
        truth = [0, 1, 2, 3, 0, 2]
        for i, t in enumerate(truth):
            rows[i, a + t] = 10.0
        assert topk_accuracy(rows, truth, vocab, 2, 1) == 1.0

    def test_uniform_ties_pick_lowest_token(self, vocab):
        rows = np.zeros((8, vocab.total_tokens))
        truth = [0, 1, 0, 2, 0, 3, 0, 1]
        acc = topk_accuracy(rows, truth, vocab, 2, 1)
        assert acc == truth.count(0) / len(truth)

    def test_k_too_large(self, vocab):
        with pytest.raises(ValueError, match="exceeds"):
            topk_accuracy(np.zeros((1, vocab.total_tokens)), [0], vocab, 2, 5)

    def test_continuous_rejected(self, vocab):
        with pytest.raises(ValueError, match="expected-value"):
            topk_accuracy(np.zeros((1, vocab.total_tokens)), [0], vocab, 0, 1)


def two_visit_cohort(vocab, n=30, seed=5, drift=6.0):
    rng = np.random.default_rng(seed)
    t0 = datetime(2021, 1, 4, 9, 0)
    v2 = t0 + timedelta(days=730)
    records = []
    for i in range(n):
        base = float(rng.normal(100, 10))
        events = [
            Event(t0, 1, base + float(rng.normal(0, 2)), False),
            Event(t0 + timedelta(hours=1), 2, ["a", "b", "c", "d"][int(rng.integers(0, 4))], False),
            Event(v2, 1, base + drift + float(rng.normal(0, 2)), False),
        ]
        records.append(ParticipantRecord(f"p{i}", float(rng.uniform(40, 70)), "female", events, [t0, v2]))
    return records


class TestBaselines:
    def test_locf_copies_v1(self, vocab):
        records = two_visit_cohort(vocab, n=5)
        preds, skipped = baseline_predict("locf", [], records, vocab)
        pairs = longitudinal_pairs(records, vocab)
        for m, rows in pairs.items():
            for row in rows:
                assert preds[m][row["pid"]] == row["v1_value"]
        assert skipped == []

    def test_locf_single_example(self, vocab):
        t0 = datetime(2021, 1, 4, 9, 0)
        v2 = t0 + timedelta(days=730)
        rec = ParticipantRecord(
            "p", 50.0, "male",
            [Event(t0, 1, 7.3 + 100, False), Event(v2, 1, 99.0, False)],
            [t0, v2],
        )
        preds, _ = baseline_predict("locf", [], [rec], vocab)
        assert preds[1]["p"] == 107.3

    def test_linear_near_identity_recovery(self, vocab):
        # V2 equals V1 exactly: regression on the V1 token recovers rank structure
        records = two_visit_cohort(vocab, n=80, seed=7, drift=0.0)
        for rec in records:
            v1 = [e for e in rec.events if e.modality == 1][0]
            v2ev = [e for e in rec.events if e.modality == 1][1]
            v2ev.value = v1.value
        preds, skipped = baseline_predict("linear", records, records, vocab)
        pairs = longitudinal_pairs(records, vocab)
        xs = [preds[1][row["pid"]] for row in pairs[1]]
        ys = [row["v2_value"] for row in pairs[1]]
        from trajlm.stats import pearson_with_ci

        # 8-bin token quantization caps the recoverable correlation
        r, _, _ = pearson_with_ci(xs, ys)
        assert r > 0.95
        assert skipped == []

    def test_linear_skips_thin_modalities(self, vocab):
        test_records = two_visit_cohort(vocab, n=6)
        train_records = two_visit_cohort(vocab, n=2, seed=9)
        preds, skipped = baseline_predict("linear", train_records, test_records, vocab, min_train_pairs=5)
        assert "wide" in skipped
        assert preds == {}

    def test_unknown_kind(self, vocab):
        with pytest.raises(ValueError, match="unknown baseline"):
            baseline_predict("mean", [], [], vocab)


class TestModelEvaluation:
    def test_untrained_within_visit_near_zero_r(self, vocab, tiny_model):
        params, config = tiny_model
        records = []
        rng = np.random.default_rng(11)
        t0 = datetime(2021, 1, 4, 9, 0)
        for i in range(25):
            events = [
                Event(t0 + timedelta(hours=h), 1, float(rng.normal(100, 10)), False)
                for h in range(4)
            ]
            records.append(ParticipantRecord(f"p{i}", 50.0, "male", events, [t0]))
        report = eval_within_visit(params, config, vocab, records)
        row = report.by_name("wide")
        assert abs(row.r) < 0.35  # untrained predictions carry no signal

    def test_single_token_excluded(self, vocab, tiny_model):
        params, config = tiny_model
        t0 = datetime(2021, 1, 4, 9, 0)
        records = [ParticipantRecord("p", 50.0, "male", [Event(t0, 1, 100.0, False)], [t0])]
        report = eval_within_visit(params, config, vocab, records)
        assert report.rows == []

    def test_longitudinal_runs_and_aligns(self, vocab, tiny_model):
        params, config = tiny_model
        records = two_visit_cohort(vocab, n=8)
        report, pools = eval_longitudinal(params, config, vocab, records)
        assert 1 in pools
        pids, preds, trues = pools[1]
        assert len(pids) == len(preds) == len(trues) == 8
        spec = vocab.modalities[1]
        for p in preds:
            assert min(spec.midpoints) <= p <= max(spec.midpoints)

    def test_longitudinal_empty_without_second_visits(self, vocab, tiny_model):
        params, config = tiny_model
        t0 = datetime(2021, 1, 4, 9, 0)
        records = [ParticipantRecord("p", 50.0, "male", [Event(t0, 1, 100.0, False)], [t0])]
        report, pools = eval_longitudinal(params, config, vocab, records)
        assert report.rows == [] and pools == {}

    def test_query_predictions_invariant_to_order_and_companions(self, vocab, tiny_model):
        from trajlm.corpus import assemble_sequence
        from trajlm.evalharness import predict_queries

        params, config = tiny_model
        rec = two_visit_cohort(vocab, n=1)[0]
        v1_events = [e for e in rec.events if e.timestamp < rec.visit_timestamps[1]]
        v1 = ParticipantRecord(rec.participant_id, rec.age, rec.sex, v1_events, rec.visit_timestamps[:1])
        seq = assemble_sequence(v1, vocab, 64)
        when = rec.visit_timestamps[1]
        ab = predict_queries(params, config, vocab, seq, rec.age, rec.sex, [(0, when), (1, when)])
        ba = predict_queries(params, config, vocab, seq, rec.age, rec.sex, [(1, when), (0, when)])
        assert ab[0] == ba[1] and ab[1] == ba[0]
        # same target, different companion query
        other = predict_queries(params, config, vocab, seq, rec.age, rec.sex,
                                [(0, when), (1, when + timedelta(days=200))])
        assert other[0] == ab[0]


class TestCrossmodal:
    def test_curve_shape_and_bounds(self, vocab, tiny_model):
        params, config = tiny_model
        xs, ys = crossmodal_sweep(params, config, vocab, 1, 0, datetime(2022, 3, 7, 9, 0))
        spec_in = vocab.modalities[1]
        spec_out = vocab.modalities[0]
        assert len(xs) == len(spec_in.midpoints)
        assert np.array_equal(xs, spec_in.midpoints)
        assert np.all(ys >= min(spec_out.midpoints)) and np.all(ys <= max(spec_out.midpoints))

    def test_untrained_curve_nearly_flat(self, vocab, tiny_model):
        params, config = tiny_model
        xs, ys = crossmodal_sweep(params, config, vocab, 1, 0, datetime(2022, 3, 7, 9, 0))
        spread = np.ptp(ys)
        midrange = np.ptp(vocab.modalities[0].midpoints)
        assert spread < 0.35 * midrange

    def test_categorical_target_rejected(self, vocab, tiny_model):
        params, config = tiny_model
        with pytest.raises(ValueError, match="continuous"):
            crossmodal_sweep(params, config, vocab, 1, 2, datetime(2022, 3, 7, 9, 0))


class TestBioage:
    def test_age_coordinate_recovered(self):
        rng = np.random.default_rng(12)
        ages = rng.uniform(40, 70, 200)
        emb = np.column_stack([ages, rng.normal(size=(200, 4))])
        pred, baa = bioage(emb, ages)
        assert np.corrcoef(pred, ages)[0, 1] > 0.999
        assert np.max(np.abs(baa)) < 1.0

    def test_acceleration_orthogonal_to_age(self):
        rng = np.random.default_rng(13)
        ages = rng.uniform(40, 70, 150)
        emb = rng.normal(size=(150, 8)) + 0.05 * ages[:, None]
        _, baa = bioage(emb, ages)
        assert abs(np.corrcoef(baa, ages)[0, 1]) < 1e-8

    def test_random_embeddings_no_skill(self):
        rng = np.random.default_rng(14)
        ages = rng.uniform(40, 70, 200)
        emb = rng.normal(size=(200, 16))
        pred, _ = bioage(emb, ages)
        ss_res = np.sum((ages - pred) ** 2)
        ss_tot = np.sum((ages - ages.mean()) ** 2)
        r2 = 1 - ss_res / ss_tot
        assert abs(r2) < 0.1

    def test_minimum_cohort_size(self):
        with pytest.raises(ValueError, match="at least 10"):
            bioage(np.zeros((5, 3)), np.arange(5.0))

    def test_constant_age_rejected(self):
        with pytest.raises(ValueError, match="constant"):
            bioage(np.zeros((12, 3)), np.full(12, 50.0))


class TestReportOutput:
    def test_csv_format(self, vocab, tiny_model, tmp_path):
        params, config = tiny_model
        records = two_visit_cohort(vocab, n=6)
        report = eval_within_visit(params, config, vocab, records)
        path = tmp_path / "r.csv"
        write_metric_csv(report, path, {"seed": 1, "config_hash": "ff", "version": "0.1.0"})
        text = path.read_text()
        lines = text.strip().splitlines()
        assert lines[0].startswith("#")
        header_idx = next(i for i, line in enumerate(lines) if not line.startswith("#"))
        assert lines[header_idx] == "modality,n,r,p,ci_low,ci_high,top1,top5"
        assert any("cat4" in line or "wide" in line for line in lines)
