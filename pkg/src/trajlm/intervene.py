"""Intervention-conditioned simulation.

Sequences are edited declaratively: categorical token appending on a
frequency/duration dosing grid (medications, exercise) or in-place scaling of
continuous values (diet, CPAP-style event reduction, fibre).  Paired
control/treatment arms share one control prediction per participant; trial
validation samples truncated-normal synthetic populations and scores
direction/CI concordance against published estimates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from importlib import resources

import numpy as np

from .corpus import Event, ParticipantRecord, TokenSequence, assemble_sequence, features_to_datetime, time_features
from .evalharness import predict_queries
from .model import ModelConfig
from .numerics import Tensor
from .vocab import CATEGORICAL, CONTINUOUS, Vocabulary, encode_value

__all__ = [
    "FREQUENCIES",
    "DURATIONS",
    "MONTH_DAYS",
    "ELIGIBILITY_DEFAULTS",
    "CategoricalAppend",
    "ContinuousScale",
    "EligibilityRule",
    "TrialVariable",
    "TrialSpec",
    "ArmResult",
    "load_catalog",
    "add_months",
    "dosing_schedule",
    "apply_intervention",
    "simulate_arms",
    "filter_eligible",
    "trajectory",
    "sample_trial_population",
    "concordance",
    "four_arm",
    "load_trial_spec",
]

FREQUENCIES = (1, 2, 3, 4, 6, 8, 10, 15, 20)
DURATIONS = (1, 2, 3, 4, 6, 9, 12, 18, 24)
MONTH_DAYS = 30.4375

# name -> (comparator, threshold in modality units)
ELIGIBILITY_DEFAULTS = {
    "ldl": (">=", 130.0),
    "sbp": (">=", 140.0),
    "dbp": (">=", 90.0),
    "glucose": (">=", 100.0),
    "hba1c": (">=", 5.7),
    "hdl": ("<=", 40.0),
    "triglycerides": (">=", 150.0),
    "bmi": (">=", 30.0),
    "vitamin_d": ("<=", 20.0),
}


@dataclass(frozen=True)
class CategoricalAppend:
    modality_id: int
    category_index: int
    frequency: int
    duration: int
    label: str = ""

    def __post_init__(self):
        if self.frequency not in FREQUENCIES:
            raise ValueError(f"frequency {self.frequency} not on the dosing grid {FREQUENCIES}")
        if self.duration not in DURATIONS:
            raise ValueError(f"duration {self.duration} not on the dosing grid {DURATIONS}")


@dataclass(frozen=True)
class ContinuousScale:
    modality_ids: tuple[int, ...]
    factor: float
    label: str = ""

    def __post_init__(self):
        if self.factor <= 0:
            raise ValueError(f"scale factor must be positive, got {self.factor}")


InterventionSpec = CategoricalAppend | ContinuousScale


@dataclass(frozen=True)
class EligibilityRule:
    modality_id: int
    comparator: str
    threshold: float

    def satisfied(self, value: float) -> bool:
        if not math.isfinite(self.threshold):
            raise ValueError("eligibility threshold must be finite")
        return value >= self.threshold if self.comparator == ">=" else value <= self.threshold


@dataclass
class TrialVariable:
    modality: str
    mean: float
    sd: float
    low: float
    high: float

    def __post_init__(self):
        if self.low >= self.high:
            raise ValueError(f"{self.modality}: low bound must be below high bound")
        if self.sd < 0:
            raise ValueError(f"{self.modality}: sd must be nonnegative")


@dataclass
class TrialSpec:
    name: str
    table1: list[TrialVariable]
    arms: list[InterventionSpec]
    outcome: str
    horizon_months: int
    published_point: float
    published_ci: tuple[float, float]
    n: int = 200

    def __post_init__(self):
        lo, hi = self.published_ci
        if not lo <= self.published_point <= hi:
            raise ValueError(f"{self.name}: published point outside its own CI")


@dataclass
class ArmResult:
    control: np.ndarray
    treatment: np.ndarray
    label: str = ""
    ci: tuple[float, float] | None = None

    @property
    def deltas(self) -> np.ndarray:
        return self.treatment - self.control

    @property
    def mean_delta(self) -> float:
        return float(self.deltas.mean())

    @property
    def mean_control(self) -> float:
        return float(self.control.mean())

    @property
    def effect_percent(self) -> float:
        """Unsigned percent change of the treatment mean vs the control mean."""
        mc = self.mean_control
        if mc == 0:
            raise ZeroDivisionError("undefined percent effect: control mean is zero")
        return 100.0 * abs(self.treatment.mean() - mc) / mc

    @property
    def signed_percent(self) -> float:
        mc = self.mean_control
        if mc == 0:
            raise ZeroDivisionError("undefined percent effect: control mean is zero")
        return 100.0 * (float(self.treatment.mean()) - mc) / mc

    def bootstrap_ci(self, rng: np.random.Generator, resamples: int = 1000):
        """Percentile 95% CI of the signed percent effect over participants."""
        n = len(self.control)
        stats = np.empty(resamples)
        for i in range(resamples):
            idx = rng.integers(0, n, n)
            mc = self.control[idx].mean()
            stats[i] = 100.0 * (self.treatment[idx].mean() - mc) / mc
        return float(np.percentile(stats, 2.5)), float(np.percentile(stats, 97.5))


def load_catalog() -> dict:
    with resources.files("trajlm.data").joinpath("intervention_catalog.json").open("r") as f:
        return json.load(f)


def add_months(when: datetime, months: float) -> datetime:
    return when + timedelta(days=months * MONTH_DAYS)


def _dosing_times(modality_id: int, category_index: int, frequency: int, duration: int, start: datetime, vocab: Vocabulary):
    m = vocab.modalities[modality_id]
    if m.kind != CATEGORICAL:
        raise ValueError(f"dosing requires a categorical modality, got {m.name!r}")
    if not 0 <= category_index < m.n_tokens:
        raise ValueError(f"category index {category_index} outside {m.name!r}")
    token = m.cum_base + category_index
    n_tokens = frequency * duration
    spacing = 1.0 / frequency
    return [(add_months(start, (k + 1) * spacing), token) for k in range(n_tokens)]


def dosing_schedule(spec: CategoricalAppend, start: datetime, vocab: Vocabulary):
    """Token/timestamp pairs for a dosing course: frequency * duration tokens,
    spaced 1/frequency months apart, starting one spacing after `start`."""
    return _dosing_times(spec.modality_id, spec.category_index, spec.frequency, spec.duration, start, vocab)


def _sequence_end_time(seq: TokenSequence) -> datetime:
    idx = seq.visit_boundary - 1 if seq.visit_boundary > 0 else seq.length - 1
    if idx < 0:
        return features_to_datetime(seq.times[-1])
    return features_to_datetime(seq.times[idx])


def apply_intervention(seq: TokenSequence, spec: InterventionSpec, vocab: Vocabulary) -> TokenSequence:
    """Return an edited copy of the sequence; streams stay synchronized,
    sorted, and token/value consistent."""
    if isinstance(spec, ContinuousScale):
        out = seq.copy()
        targets = set(spec.modality_ids)
        for m in targets:
            if vocab.modalities[m].kind != CONTINUOUS:
                raise ValueError(
                    f"cannot scale categorical modality {vocab.modalities[m].name!r}"
                )
        limit = out.visit_boundary if out.visit_boundary > 0 else out.length
        for i in range(limit):
            m = int(out.modalities[i])
            if m in targets:
                new_val = out.values[i] * spec.factor
                out.values[i] = new_val
                out.tokens[i] = encode_value(vocab, m, new_val)
        out.check()
        return out

    if isinstance(spec, CategoricalAppend):
        return _append_dosing(seq, spec.modality_id, spec.category_index, spec.frequency, spec.duration, vocab)

    raise TypeError(f"unknown intervention spec: {spec!r}")


def _append_dosing(
    seq: TokenSequence,
    modality_id: int,
    category_index: int,
    frequency: int,
    duration: int,
    vocab: Vocabulary,
) -> TokenSequence:
    """Merge a dosing course into the sequence after the visit-1 content."""
    start = _sequence_end_time(seq)
    dosing = _dosing_times(modality_id, category_index, frequency, duration, start, vocab)
    rows = [
        (
            features_to_datetime(seq.times[i]),
            int(seq.modalities[i]),
            int(seq.tokens[i]),
            float(seq.values[i]),
            seq.times[i].copy(),
        )
        for i in range(seq.length)
    ]
    for when, token in dosing:
        rows.append((when, modality_id, token, 0.0, np.array(time_features(when), dtype=np.int64)))
    rows.sort(key=lambda r: (r[0], r[1]))

    t = len(rows)
    tokens = np.array([r[2] for r in rows], dtype=np.int64)
    values = np.array([r[3] for r in rows], dtype=np.float64)
    mods = np.empty(t + 1, dtype=np.int64)
    mods[:t] = [r[1] for r in rows]
    mods[t] = seq.modalities[-1]
    times = np.empty((t + 1, 7), dtype=np.int64)
    for i, r in enumerate(rows):
        times[i] = r[4]
    times[t] = rows[-1][4] if t else seq.times[-1]

    if seq.visit_boundary >= seq.length:
        boundary = t
    else:
        v2_start = features_to_datetime(seq.times[seq.visit_boundary])
        boundary = next((i for i, r in enumerate(rows) if r[0] >= v2_start), t)
    out = TokenSequence(tokens, values, mods, times, boundary)
    out.check()
    return out


def _v1_context(record: ParticipantRecord) -> ParticipantRecord:
    if len(record.visit_timestamps) < 2:
        return record
    v2 = record.visit_timestamps[1]
    return ParticipantRecord(
        record.participant_id,
        record.age,
        record.sex,
        [e for e in record.events if e.timestamp < v2],
        record.visit_timestamps[:1],
    )


def _anchor_time(seq: TokenSequence) -> datetime:
    return _sequence_end_time(seq)


def simulate_arms(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    records: list[ParticipantRecord],
    spec: InterventionSpec,
    outcome_modality: int,
    horizon_months: int,
    rng: np.random.Generator | None = None,
    resamples: int = 1000,
    control_cache: dict | None = None,
) -> ArmResult:
    """Paired control/treatment prediction of the outcome at V1 + horizon.

    The control arm is the untouched V1 context; the treatment arm is the same
    context with the intervention applied; both receive an identical query.
    """
    if vocab.modalities[outcome_modality].kind != CONTINUOUS:
        raise ValueError("outcome modality must be continuous")
    if horizon_months > 24:
        raise ValueError(f"horizon {horizon_months} exceeds 24 months")
    controls, treats = [], []
    for rec in records:
        seq = assemble_sequence(_v1_context(rec), vocab, config.max_seq_len)
        if seq.length == 0:
            continue
        when = add_months(_anchor_time(seq), horizon_months)
        key = (rec.participant_id, outcome_modality, horizon_months)
        if control_cache is not None and key in control_cache:
            ctrl = control_cache[key]
        else:
            ctrl = predict_queries(params, config, vocab, seq, rec.age, rec.sex, [(outcome_modality, when)])[0]
            if control_cache is not None:
                control_cache[key] = ctrl
        edited = apply_intervention(seq, spec, vocab)
        treat = predict_queries(params, config, vocab, edited, rec.age, rec.sex, [(outcome_modality, when)])[0]
        controls.append(ctrl)
        treats.append(treat)
    result = ArmResult(np.array(controls), np.array(treats), label=spec.label)
    if rng is not None and len(controls) > 0:
        result.ci = result.bootstrap_ci(rng, resamples)
    return result


def filter_eligible(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    records: list[ParticipantRecord],
    rule: EligibilityRule,
    horizon_months: int,
):
    """Treatment-naive screen: both the observed V1 value and the control-arm
    prediction of the rule's modality must satisfy the threshold.  Returns
    (eligible records, number excluded for missing the modality)."""
    eligible = []
    missing = 0
    for rec in records:
        ctx = _v1_context(rec)
        v1_values = [e.value for e in ctx.events if e.modality == rule.modality_id]
        if not v1_values:
            missing += 1
            continue
        if not rule.satisfied(float(v1_values[-1])):
            continue
        seq = assemble_sequence(ctx, vocab, config.max_seq_len)
        when = add_months(_anchor_time(seq), horizon_months)
        pred = predict_queries(params, config, vocab, seq, rec.age, rec.sex, [(rule.modality_id, when)])[0]
        if rule.satisfied(pred):
            eligible.append(rec)
    return eligible, missing


def trajectory(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    records: list[ParticipantRecord],
    spec: InterventionSpec,
    outcome_modality: int,
    months: int = 12,
):
    """Monthly mean treatment-minus-control series with standard errors.

    Categorical dosing at month t covers V1 through t; continuous edits apply
    in full at every horizon.
    """
    out = []
    cache: dict = {}
    for t in range(1, months + 1):
        controls, treats = [], []
        for rec in records:
            seq = assemble_sequence(_v1_context(rec), vocab, config.max_seq_len)
            if seq.length == 0:
                continue
            when = add_months(_anchor_time(seq), t)
            key = (rec.participant_id, outcome_modality, t)
            if key not in cache:
                cache[key] = predict_queries(
                    params, config, vocab, seq, rec.age, rec.sex, [(outcome_modality, when)]
                )[0]
            if isinstance(spec, CategoricalAppend):
                edited = _append_dosing(seq, spec.modality_id, spec.category_index, spec.frequency, t, vocab)
            else:
                edited = apply_intervention(seq, spec, vocab)
            treat = predict_queries(
                params, config, vocab, edited, rec.age, rec.sex, [(outcome_modality, when)]
            )[0]
            controls.append(cache[key])
            treats.append(treat)
        d = np.array(treats) - np.array(controls)
        sem = float(d.std(ddof=1) / math.sqrt(len(d))) if len(d) > 1 else 0.0
        out.append((t, float(d.mean()), sem))
    return out


def _truncnorm_mass(mean: float, sd: float, low: float, high: float) -> float:
    if sd == 0:
        return 1.0 if low <= mean <= high else 0.0
    a = (low - mean) / sd
    b = (high - mean) / sd
    return 0.5 * (math.erf(b / math.sqrt(2)) - math.erf(a / math.sqrt(2)))


def sample_trial_population(
    trial: TrialSpec,
    rng: np.random.Generator,
    vocab: Vocabulary,
    anchor: datetime = datetime(2021, 3, 1, 9, 0),
) -> list[ParticipantRecord]:
    """Draw a synthetic single-visit cohort matching the trial's baseline table.

    Each variable is a truncated normal realized by rejection sampling; a
    table row named 'age' (absent from the vocabulary) sets chronological age.
    """
    age_var = None
    measured: list[TrialVariable] = []
    for var in trial.table1:
        if var.modality.lower() == "age" and var.modality not in {m.name for m in vocab.modalities}:
            age_var = var
        else:
            measured.append(var)
    for var in trial.table1:
        if _truncnorm_mass(var.mean, var.sd, var.low, var.high) < 1e-3:
            raise ValueError(f"infeasible truncation for {var.modality!r}")

    def draw(var: TrialVariable) -> float:
        if var.sd == 0:
            return var.mean
        while True:
            x = rng.normal(var.mean, var.sd)
            if var.low <= x <= var.high:
                return x

    records = []
    for i in range(trial.n):
        age = draw(age_var) if age_var is not None else 55.0
        sex = "female" if i % 2 == 0 else "male"
        events = [
            Event(anchor, vocab.modality(var.modality).id, draw(var), False)
            for var in measured
        ]
        records.append(
            ParticipantRecord(f"{trial.name}-{i:04d}", age, sex, events, [anchor])
        )
    return records


def concordance(rows: list[dict]) -> dict:
    """Score predicted effects against published (point, 95% CI) references.

    A direction hit needs matching nonzero signs; a CI hit needs the predicted
    point inside the published interval.  sign(0) never matches.
    """
    scored = []
    direction = 0
    ci = 0
    for row in rows:
        pred = float(row["predicted"])
        pub = float(row["published"])
        lo, hi = float(row["ci_low"]), float(row["ci_high"])
        dir_hit = math.copysign(1, pred) == math.copysign(1, pub) and pred != 0 and pub != 0
        ci_hit = lo <= pred <= hi
        direction += int(dir_hit)
        ci += int(ci_hit)
        scored.append({**row, "direction_hit": dir_hit, "ci_hit": ci_hit})
    return {"n": len(rows), "direction_hits": direction, "ci_hits": ci, "rows": scored}


def _combined_scale_conflict(a: InterventionSpec, b: InterventionSpec) -> None:
    if isinstance(a, ContinuousScale) and isinstance(b, ContinuousScale):
        shared = set(a.modality_ids) & set(b.modality_ids)
        if shared:
            raise ValueError(f"conflicting continuous-scale targets: {sorted(shared)}")


def four_arm(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    records: list[ParticipantRecord],
    spec_a: InterventionSpec,
    spec_b: InterventionSpec,
    outcome_modality: int,
    horizon_months: int,
) -> dict[str, ArmResult]:
    """Control / A / B / A+B with one shared set of control predictions."""
    _combined_scale_conflict(spec_a, spec_b)
    cache: dict = {}
    arm_a = simulate_arms(params, config, vocab, records, spec_a, outcome_modality, horizon_months, control_cache=cache)
    arm_b = simulate_arms(params, config, vocab, records, spec_b, outcome_modality, horizon_months, control_cache=cache)

    controls, treats = [], []
    for rec in records:
        seq = assemble_sequence(_v1_context(rec), vocab, config.max_seq_len)
        if seq.length == 0:
            continue
        when = add_months(_anchor_time(seq), horizon_months)
        ctrl = cache[(rec.participant_id, outcome_modality, horizon_months)]
        edited = apply_intervention(apply_intervention(seq, spec_a, vocab), spec_b, vocab)
        treat = predict_queries(params, config, vocab, edited, rec.age, rec.sex, [(outcome_modality, when)])[0]
        controls.append(ctrl)
        treats.append(treat)
    arm_ab = ArmResult(np.array(controls), np.array(treats), label=f"{spec_a.label}+{spec_b.label}")
    return {"A": arm_a, "B": arm_b, "AB": arm_ab}


def load_trial_spec(doc: dict | str, vocab: Vocabulary) -> TrialSpec:
    """Parse a trial description (dict or JSON text) into a TrialSpec."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    table1 = [TrialVariable(v["modality"], v["mean"], v["sd"], v["low"], v["high"]) for v in doc["table1"]]
    arms = [parse_intervention(a, vocab) for a in doc["arms"]]
    pub = doc["published"]
    return TrialSpec(
        name=doc["name"],
        table1=table1,
        arms=arms,
        outcome=doc["outcome"],
        horizon_months=int(doc["horizon_months"]),
        published_point=float(pub["point"]),
        published_ci=(float(pub["ci_low"]), float(pub["ci_high"])),
        n=int(doc.get("n", 200)),
    )


def parse_intervention(doc: dict, vocab: Vocabulary) -> InterventionSpec:
    kind = doc["kind"]
    if kind == "append":
        return CategoricalAppend(
            modality_id=vocab.modality(doc["modality"]).id,
            category_index=int(doc["category_index"]),
            frequency=int(doc["frequency"]),
            duration=int(doc["duration"]),
            label=doc.get("label", doc["modality"]),
        )
    if kind == "scale":
        return ContinuousScale(
            modality_ids=tuple(vocab.modality(m).id for m in doc["modalities"]),
            factor=float(doc["factor"]),
            label=doc.get("label", "scale"),
        )
    raise ValueError(f"unknown intervention kind {kind!r}")
