"""Decoding and evaluation: expected-value decoding, within-visit and
longitudinal prediction, forecasting baselines, cross-modal probes, and the
two-stage biological-age regression.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .corpus import ParticipantRecord, SEX_INDEX, assemble_sequence, time_features
from .model import (
    Causal,
    ModelConfig,
    ParallelV2,
    build_mask,
    forward,
    parallel_v2_layout,
    value_scale_table,
)
from .numerics import Tensor
from .stats import pearson_with_ci
from .vocab import CATEGORICAL, CONTINUOUS, Vocabulary, encode_value

__all__ = [
    "ModalityMetrics",
    "MetricReport",
    "decode_expected",
    "topk_accuracy",
    "eval_within_visit",
    "eval_longitudinal",
    "longitudinal_pairs",
    "baseline_predict",
    "crossmodal_sweep",
    "bioage",
    "write_metric_csv",
]


@dataclass
class ModalityMetrics:
    modality_id: int
    name: str
    kind: str
    n: int
    r: float = math.nan
    p: float = math.nan
    ci_low: float = math.nan
    ci_high: float = math.nan
    top1: float = math.nan
    top5: float = math.nan


@dataclass
class MetricReport:
    rows: list[ModalityMetrics] = field(default_factory=list)

    def by_name(self, name: str) -> ModalityMetrics:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    def median_r(self) -> float:
        rs = [row.r for row in self.rows if not math.isnan(row.r)]
        return float(np.median(rs)) if rs else math.nan


def decode_expected(logits_row: np.ndarray, vocab: Vocabulary, modality_id: int) -> float:
    """Probability-weighted mean of bin midpoints, restricted to the modality."""
    spec = vocab.modalities[modality_id]
    if spec.kind != CONTINUOUS:
        raise ValueError(f"modality {spec.name!r} is categorical: use top-K accuracy")
    a, b = vocab.token_range(modality_id)
    z = np.asarray(logits_row, dtype=np.float64)[a : b + 1]
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return float(p @ np.asarray(spec.midpoints))


def topk_accuracy(logit_rows, true_categories, vocab: Vocabulary, modality_id: int, k: int) -> float:
    """Fraction of rows whose true category ranks in the top K within the
    modality's range; ties resolve toward the lower token id."""
    spec = vocab.modalities[modality_id]
    if spec.kind != CATEGORICAL:
        raise ValueError(f"modality {spec.name!r} is continuous: use expected-value decoding")
    a, b = vocab.token_range(modality_id)
    width = b - a + 1
    if k > width:
        raise ValueError(f"K={k} exceeds the {width}-token range of {spec.name!r}")
    rows = np.atleast_2d(np.asarray(logit_rows, dtype=np.float64))[:, a : b + 1]
    truth = np.asarray(true_categories, dtype=np.int64)
    hits = 0
    for i in range(rows.shape[0]):
        top = np.argsort(-rows[i], kind="stable")[:k]
        hits += int(truth[i] in top)
    return hits / rows.shape[0]


def _metrics_from_pools(cont_pool, cat_pool, vocab: Vocabulary) -> MetricReport:
    report = MetricReport()
    for m in sorted(cont_pool):
        preds, trues = cont_pool[m]
        spec = vocab.modalities[m]
        n = len(preds)
        if n < 2:
            continue
        row = ModalityMetrics(m, spec.name, spec.kind, n)
        try:
            r, p, ci = pearson_with_ci(preds, trues)
            row.r, row.p, row.ci_low, row.ci_high = r, p, ci[0], ci[1]
        except ValueError:
            pass
        report.rows.append(row)
    for m in sorted(cat_pool):
        rows, trues = cat_pool[m]
        spec = vocab.modalities[m]
        n = len(trues)
        if n < 1:
            continue
        width = spec.n_tokens
        metric = ModalityMetrics(m, spec.name, spec.kind, n)
        metric.top1 = topk_accuracy(rows, trues, vocab, m, 1)
        metric.top5 = topk_accuracy(rows, trues, vocab, m, min(5, width))
        report.rows.append(metric)
    return report


def within_visit_pools(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    records: list[ParticipantRecord],
    max_len: int | None = None,
):
    """Per-modality (prediction, truth) pools under the causal mask."""
    scales = value_scale_table(vocab)
    cont_pool: dict[int, tuple[list, list]] = {}
    cat_pool: dict[int, tuple[list, list]] = {}
    for rec in records:
        seq = assemble_sequence(rec, vocab, max_len or config.max_seq_len)
        if seq.length < 2:
            continue
        logits = forward(
            params, config, seq.tokens, seq.values, seq.modalities, seq.times,
            rec.age, rec.sex, build_mask(Causal(), seq.length), scales,
        ).data
        for j in range(1, seq.length):
            m = int(seq.modalities[j])
            spec = vocab.modalities[m]
            if spec.kind == CONTINUOUS:
                pool = cont_pool.setdefault(m, ([], []))
                pool[0].append(decode_expected(logits[j - 1], vocab, m))
                pool[1].append(float(seq.values[j]))
            else:
                pool = cat_pool.setdefault(m, ([], []))
                pool[0].append(logits[j - 1])
                pool[1].append(int(seq.tokens[j]) - spec.cum_base)
    return cont_pool, cat_pool


def merge_pools(parts):
    """Deterministic ordered merge of per-chunk pools."""
    merged: dict[int, tuple] = {}
    for part in parts:
        for m, lists in part.items():
            if m not in merged:
                merged[m] = tuple([] for _ in lists)
            for dst, src in zip(merged[m], lists):
                dst.extend(src)
    return merged


def eval_within_visit(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    records: list[ParticipantRecord],
    max_len: int | None = None,
) -> MetricReport:
    """Next-token prediction under the causal mask, aggregated per modality."""
    cont_pool, cat_pool = within_visit_pools(params, config, vocab, records, max_len)
    return _metrics_from_pools(cont_pool, cat_pool, vocab)


def longitudinal_pairs(records: list[ParticipantRecord], vocab: Vocabulary):
    """V1 -> V2 value pairs per modality, for aligned model/baseline scoring.

    For each two-visit participant and each modality observed in both visits,
    uses the last V1 value and the first V2 value.
    """
    pairs: dict[int, list[dict]] = {}
    for rec in records:
        if len(rec.visit_timestamps) < 2:
            continue
        v2_start = rec.visit_timestamps[1]
        last_v1: dict[int, tuple[datetime, float]] = {}
        first_v2: dict[int, tuple[datetime, float]] = {}
        for ev in sorted(rec.events, key=lambda e: (e.timestamp, e.modality)):
            if vocab.modalities[ev.modality].kind != CONTINUOUS:
                continue
            if ev.timestamp < v2_start:
                last_v1[ev.modality] = (ev.timestamp, float(ev.value))
            elif ev.modality not in first_v2:
                first_v2[ev.modality] = (ev.timestamp, float(ev.value))
        for m in sorted(set(last_v1) & set(first_v2)):
            pairs.setdefault(m, []).append(
                {
                    "pid": rec.participant_id,
                    "age": rec.age,
                    "sex": rec.sex,
                    "v1_value": last_v1[m][1],
                    "v2_value": first_v2[m][1],
                    "v2_time": first_v2[m][0],
                }
            )
    return pairs


def predict_queries(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    seq,
    age: float,
    sex: str,
    queries: list[tuple[int, datetime]],
) -> list[float]:
    """Expected values for several (modality, time) queries in one forward pass.

    The visit-1 context is shared; every query rides in its own probe/
    prediction slot pair under the parallel mask, so predictions are mutually
    independent and invariant to query order.
    """
    n = seq.length
    k = len(queries)
    if n == 0 or k == 0:
        return []
    probes, preds = parallel_v2_layout(n, k)
    t = n + 2 * k
    pad_mod = vocab.n_modalities

    tokens = np.full(t, vocab.pad_token, dtype=np.int64)
    tokens[:n] = seq.tokens
    values = np.zeros(t, dtype=np.float64)
    values[:n] = seq.values
    mods = np.full(t + 1, pad_mod, dtype=np.int64)
    mods[:n] = seq.modalities[:n]
    times = np.zeros((t + 1, 7), dtype=np.int64)
    times[:n] = seq.times[:n]
    times[n:] = seq.times[n - 1]

    q_mods = np.full(t, pad_mod, dtype=np.int64)
    q_times = times[1 : t + 1].copy()
    pos_ids = np.concatenate([np.arange(n), np.tile([n, n + 1], k)])

    for i, (m, when) in enumerate(queries):
        tf = time_features(when)
        for slot in (probes[i], preds[i]):
            mods[slot] = m
            times[slot] = tf
        q_mods[preds[i]] = m
        q_times[preds[i]] = tf

    logits = forward(
        params, config, tokens, values, mods, times, age, sex,
        build_mask(ParallelV2(n, k), t), value_scale_table(vocab),
        query_modalities=q_mods, query_times=q_times, pos_ids=pos_ids,
    ).data
    return [decode_expected(logits[preds[i]], vocab, m) for i, (m, _) in enumerate(queries)]


def longitudinal_pools(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    records: list[ParticipantRecord],
    max_len: int | None = None,
):
    """Per-modality (pid, predicted, true) pools for the V1 -> V2 task."""
    pools: dict[int, tuple[list, list, list]] = {}
    for rec in records:
        if len(rec.visit_timestamps) < 2:
            continue
        v1_only = ParticipantRecord(
            rec.participant_id,
            rec.age,
            rec.sex,
            [e for e in rec.events if e.timestamp < rec.visit_timestamps[1]],
            rec.visit_timestamps[:1],
        )
        seq = assemble_sequence(v1_only, vocab, max_len or config.max_seq_len)
        if seq.length == 0:
            continue
        targets: dict[int, tuple[datetime, float]] = {}
        for ev in sorted(rec.events, key=lambda e: (e.timestamp, e.modality)):
            if ev.timestamp >= rec.visit_timestamps[1] and ev.modality not in targets:
                if vocab.modalities[ev.modality].kind == CONTINUOUS:
                    targets[ev.modality] = (ev.timestamp, float(ev.value))
        if not targets:
            continue
        mods = sorted(targets)
        queries = [(m, targets[m][0]) for m in mods]
        predictions = predict_queries(params, config, vocab, seq, rec.age, rec.sex, queries)
        for m, pred in zip(mods, predictions):
            pool = pools.setdefault(m, ([], [], []))
            pool[0].append(rec.participant_id)
            pool[1].append(pred)
            pool[2].append(targets[m][1])
    return pools


def eval_longitudinal(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    records: list[ParticipantRecord],
    max_len: int | None = None,
) -> tuple[MetricReport, dict]:
    """Predict every second-visit measurement from first-visit context alone.

    Returns the per-modality report plus the raw (pid, predicted, true) pools
    so baselines can be scored on identical participant sets.
    """
    pools = longitudinal_pools(params, config, vocab, records, max_len)
    report = _metrics_from_pools({m: (p[1], p[2]) for m, p in pools.items()}, {}, vocab)
    return report, pools


def baseline_predict(
    kind: str,
    train_records: list[ParticipantRecord],
    test_records: list[ParticipantRecord],
    vocab: Vocabulary,
    bmi_modality: str | None = None,
    min_train_pairs: int = 5,
):
    """Forecasting baselines for the V1 -> V2 task.

    'locf' copies the V1 value; 'linear' fits per-modality OLS on four discrete
    token features (V1 value token, age, gender, BMI token; 0 when missing).
    Returns {modality_id: {pid: prediction}} plus a list of skipped modalities.
    """
    test_pairs = longitudinal_pairs(test_records, vocab)
    out: dict[int, dict[str, float]] = {}
    skipped: list[str] = []

    if kind == "locf":
        for m, rows in test_pairs.items():
            out[m] = {row["pid"]: row["v1_value"] for row in rows}
        return out, skipped

    if kind != "linear":
        raise ValueError(f"unknown baseline kind {kind!r}")

    bmi_id = vocab.modality(bmi_modality).id if bmi_modality is not None else None

    def bmi_tokens(records):
        # last pre-V2 BMI token per participant; 0 when absent
        vals: dict[str, float] = {}
        if bmi_id is None:
            return vals
        for rec in records:
            if len(rec.visit_timestamps) < 2:
                continue
            v2 = rec.visit_timestamps[1]
            for ev in sorted(rec.events, key=lambda e: e.timestamp):
                if ev.modality == bmi_id and ev.timestamp < v2:
                    vals[rec.participant_id] = float(encode_value(vocab, bmi_id, ev.value))
        return vals

    def features(m, rows, bmi_values):
        return np.asarray(
            [
                [
                    float(encode_value(vocab, m, row["v1_value"])),
                    float(int(row["age"])),
                    float(SEX_INDEX.get(row["sex"], 2)),
                    bmi_values.get(row["pid"], 0.0),
                ]
                for row in rows
            ]
        )

    train_pairs = longitudinal_pairs(train_records, vocab)
    train_bmi = bmi_tokens(train_records)
    test_bmi = bmi_tokens(test_records)

    for m, rows in test_pairs.items():
        train_rows = train_pairs.get(m, [])
        if len(train_rows) < min_train_pairs:
            skipped.append(vocab.modalities[m].name)
            continue
        x = features(m, train_rows, train_bmi)
        y = np.array([row["v2_value"] for row in train_rows])
        design = np.column_stack([np.ones(len(x)), x])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        xt = features(m, rows, test_bmi)
        preds = np.column_stack([np.ones(len(xt)), xt]) @ coef
        out[m] = {row["pid"]: float(p) for row, p in zip(rows, preds)}
    return out, skipped


def crossmodal_sweep(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    m_in: int,
    m_out: int,
    when: datetime,
    age: float = 50.0,
    sex: str = "unknown",
):
    """Minimal 2-position probe: one input token, one query, per input bin.

    Returns (input midpoints, expected output values) over the input modality's
    full bin range.
    """
    spec_in = vocab.modalities[m_in]
    spec_out = vocab.modalities[m_out]
    if spec_out.kind != CONTINUOUS:
        raise ValueError(f"probe target {spec_out.name!r} must be continuous")
    if spec_in.kind != CONTINUOUS:
        raise ValueError(f"probe input {spec_in.name!r} must be continuous")
    tf = time_features(when)
    scales = value_scale_table(vocab)
    mask = build_mask(Causal(), 1)
    xs, ys = [], []
    for b, mid in enumerate(spec_in.midpoints):
        tokens = np.array([spec_in.cum_base + b], dtype=np.int64)
        values = np.array([mid], dtype=np.float64)
        mods = np.array([m_in, m_out], dtype=np.int64)
        times = np.array([tf, tf], dtype=np.int64)
        logits = forward(
            params, config, tokens, values, mods, times, age, sex, mask, scales
        ).data
        xs.append(mid)
        ys.append(decode_expected(logits[0], vocab, m_out))
    return np.array(xs), np.array(ys)


def bioage(embeddings, ages, alpha: float = 1000.0, folds: int = 5):
    """Two-stage biological age: cross-validated ridge prediction of
    chronological age, then residualization so the acceleration is orthogonal
    to age.  Returns (predicted_age, acceleration)."""
    from .stats import ols_residuals, ridge_cv_predict

    x = np.asarray(embeddings, dtype=np.float64)
    ages = np.asarray(ages, dtype=np.float64)
    if x.shape[0] < 10:
        raise ValueError(f"need at least 10 participants, got {x.shape[0]}")
    if np.ptp(ages) == 0:
        raise ValueError("chronological ages are constant")
    pred = ridge_cv_predict(x, ages, alpha=alpha, folds=folds)
    baa = ols_residuals(pred, ages)
    return pred, baa


def write_metric_csv(report: MetricReport, path, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        if meta:
            f.write("".join(f"# {k}={v}\n" for k, v in sorted(meta.items())))
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["modality", "n", "r", "p", "ci_low", "ci_high", "top1", "top5"])
        for row in report.rows:
            w.writerow(
                [
                    row.name,
                    row.n,
                    _fmt_stat(row.r),
                    _fmt_stat(row.p),
                    _fmt_stat(row.ci_low),
                    _fmt_stat(row.ci_high),
                    _fmt_stat(row.top1),
                    _fmt_stat(row.top5),
                ]
            )


def _fmt_stat(x: float) -> str:
    return "" if math.isnan(x) else format(x, ".10g")
