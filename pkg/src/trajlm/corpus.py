"""Participant event streams and their assembly into synchronized tensors.

Each participant's measurements become four lockstep streams (token id,
continuous value, modality id, 7-dim time vector), chronologically sorted with
a fixed secondary sort by modality index.  The modality/time streams carry one
trailing entry so the position after the last token can hold a query.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime

import numpy as np

from .vocab import CONTINUOUS, Vocabulary, encode_value

__all__ = [
    "Event",
    "ParticipantRecord",
    "TokenSequence",
    "AugmentConfig",
    "YEAR_BASE",
    "N_YEARS",
    "TEMPORAL_VOCAB_SIZES",
    "time_features",
    "features_to_datetime",
    "assemble_sequence",
    "augment",
    "read_cohort_jsonl",
    "write_cohort_jsonl",
]

# Sizes of the seven per-dimension time embedding tables:
# [day_of_week, hour, minute, month, year, day_of_month, sleep]
TEMPORAL_VOCAB_SIZES = [8, 25, 61, 13, 147, 32, 2]
YEAR_BASE = 1900
N_YEARS = TEMPORAL_VOCAB_SIZES[4]

SEX_INDEX = {"female": 0, "male": 1, "unknown": 2}


@dataclass
class Event:
    timestamp: datetime
    modality: int
    value: float | str
    sleep_flag: bool = False


@dataclass
class ParticipantRecord:
    participant_id: str
    age: float
    sex: str
    events: list[Event] = field(default_factory=list)
    visit_timestamps: list[datetime] = field(default_factory=list)


@dataclass
class TokenSequence:
    """Synchronized streams for one participant.

    tokens/values have length T; modalities/times have length T + 1, the extra
    slot holding the query for the position after the last token.
    """

    tokens: np.ndarray
    values: np.ndarray
    modalities: np.ndarray
    times: np.ndarray
    visit_boundary: int

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])

    def check(self) -> None:
        t = self.length
        assert self.values.shape == (t,), "values out of sync with tokens"
        assert self.modalities.shape == (t + 1,), "modalities must be one longer"
        assert self.times.shape == (t + 1, 7), "times must be one longer"
        assert 0 <= self.visit_boundary <= t, "visit boundary out of range"

    def copy(self) -> "TokenSequence":
        return TokenSequence(
            self.tokens.copy(),
            self.values.copy(),
            self.modalities.copy(),
            self.times.copy(),
            self.visit_boundary,
        )


@dataclass
class AugmentConfig:
    noise_chance: float = 0.10
    noise_rate: float = 0.15
    token_removal_chance: float = 0.50
    token_removal_rate: float = 0.15
    block_removal_chance: float = 0.20
    block_removal_rate: float = 0.01
    block_removal_blocks: int = 10
    modality_subset_chance: float = 0.10
    modality_subset_fraction: float = 0.10
    modality_exclusion_chance: float = 0.05

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(
            noise_chance=0.0,
            token_removal_chance=0.0,
            block_removal_chance=0.0,
            modality_subset_chance=0.0,
            modality_exclusion_chance=0.0,
        )


def time_features(ts: datetime, sleep_flag: bool = False, year_base: int = YEAR_BASE) -> list[int]:
    """Encode a timestamp as [dow, hour, minute, month, year_index, dom, sleep]."""
    yi = ts.year - year_base
    if not 0 <= yi < N_YEARS:
        raise ValueError(
            f"year {ts.year} outside the {N_YEARS}-entry table starting at {year_base}"
        )
    return [ts.weekday(), ts.hour, ts.minute, ts.month, yi, ts.day, int(bool(sleep_flag))]


def features_to_datetime(vec, year_base: int = YEAR_BASE) -> datetime:
    """Reconstruct the calendar timestamp from a 7-dim time vector."""
    _, hour, minute, month, yi, dom, _ = (int(x) for x in vec)
    return datetime(year_base + yi, month, dom, hour, minute)


def assemble_sequence(
    record: ParticipantRecord,
    vocab: Vocabulary,
    max_len: int = 25_000,
    year_base: int = YEAR_BASE,
) -> TokenSequence:
    """Sort, encode, and truncate one participant's events into streams.

    Truncation keeps the earliest tokens so visit-1 context survives.  The
    trailing modality/time slot is initialized to the pad modality and the
    last timestamp; callers overwrite it with a real query.
    """
    def sort_key(ev: Event):
        # timestamp then modality per the contract; value/sleep break residual
        # ties so assembly is invariant to input permutation
        return ev.timestamp, ev.modality, repr(ev.value), ev.sleep_flag

    events = sorted(record.events, key=sort_key)[:max_len]
    t = len(events)

    tokens = np.zeros(t, dtype=np.int64)
    values = np.zeros(t, dtype=np.float64)
    mods = np.full(t + 1, vocab.n_modalities, dtype=np.int64)
    times = np.zeros((t + 1, 7), dtype=np.int64)

    for i, ev in enumerate(events):
        spec = vocab.modalities[ev.modality]
        try:
            tokens[i] = encode_value(vocab, ev.modality, ev.value)
        except ValueError as e:
            raise ValueError(
                f"participant {record.participant_id!r}: cannot encode event "
                f"({ev.timestamp.isoformat()}, {spec.name!r}, {ev.value!r}): {e}"
            ) from e
        values[i] = float(ev.value) if spec.kind == CONTINUOUS else 0.0
        mods[i] = ev.modality
        times[i] = time_features(ev.timestamp, ev.sleep_flag, year_base)

    if t > 0:
        times[t] = times[t - 1]
    elif record.visit_timestamps:
        times[t] = time_features(record.visit_timestamps[0], False, year_base)
    else:
        times[t] = time_features(datetime(year_base, 1, 1), False, year_base)

    boundary = t
    if len(record.visit_timestamps) >= 2:
        v2 = record.visit_timestamps[1]
        boundary = next((i for i, ev in enumerate(events) if ev.timestamp >= v2), t)

    seq = TokenSequence(tokens, values, mods, times, boundary)
    seq.check()
    return seq


def _keep(seq: TokenSequence, keep_idx: np.ndarray) -> TokenSequence:
    """Restrict all four streams to the kept token positions."""
    keep_idx = np.asarray(keep_idx, dtype=np.int64)
    t = len(keep_idx)
    mods = np.concatenate([seq.modalities[keep_idx], seq.modalities[-1:]])
    times = np.concatenate([seq.times[keep_idx], seq.times[-1:]], axis=0)
    boundary = int(np.sum(keep_idx < seq.visit_boundary))
    out = TokenSequence(seq.tokens[keep_idx], seq.values[keep_idx], mods, times, boundary)
    assert out.length == t
    return out


def augment(
    seq: TokenSequence,
    config: AugmentConfig,
    rng: np.random.Generator,
    vocab: Vocabulary,
) -> TokenSequence:
    """Apply the five stochastic training augmentations in a fixed order.

    Each augmentation fires on an independent draw.  Streams stay synchronized
    after every removal, and noisy continuous values are re-binned so token and
    value never disagree.
    """
    out = seq.copy()

    if rng.random() < config.noise_chance and out.length > 0:
        for i in range(out.length):
            m = int(out.modalities[i])
            spec = vocab.modalities[m]
            if spec.kind != CONTINUOUS:
                continue
            noisy = out.values[i] + rng.normal(0.0, config.noise_rate * spec.train_sd)
            out.values[i] = noisy
            out.tokens[i] = encode_value(vocab, m, noisy)

    if rng.random() < config.token_removal_chance and out.length > 0:
        keep = rng.random(out.length) >= config.token_removal_rate
        out = _keep(out, np.flatnonzero(keep))

    if rng.random() < config.block_removal_chance and out.length > 0:
        drop = np.zeros(out.length, dtype=bool)
        block = max(1, int(round(config.block_removal_rate * out.length)))
        for _ in range(config.block_removal_blocks):
            start = int(rng.integers(0, out.length))
            drop[start : start + block] = True
        out = _keep(out, np.flatnonzero(~drop))

    if rng.random() < config.modality_subset_chance and out.length > 0:
        present = np.unique(out.modalities[: out.length])
        n_keep = max(1, int(round(config.modality_subset_fraction * len(present))))
        chosen = set(rng.choice(present, size=n_keep, replace=False).tolist())
        keep = np.array([m in chosen for m in out.modalities[: out.length]])
        out = _keep(out, np.flatnonzero(keep))

    if rng.random() < config.modality_exclusion_chance and out.length > 0:
        present = np.unique(out.modalities[: out.length])
        excluded = int(rng.choice(present))
        keep = out.modalities[: out.length] != excluded
        out = _keep(out, np.flatnonzero(keep))

    out.check()
    return out


# --- cohort I/O ---------------------------------------------------------------
#
# One participant per JSON line:
# {"id":str,"age":num,"sex":"female|male|unknown","visits":[iso8601...],
#  "events":[{"t":iso8601,"m":modality-name,"v":num|str,"sleep":bool}]}


def write_cohort_jsonl(records: list[ParticipantRecord], vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            doc = {
                "id": r.participant_id,
                "age": r.age,
                "sex": r.sex,
                "visits": [v.isoformat() for v in r.visit_timestamps],
                "events": [
                    {
                        "t": e.timestamp.isoformat(),
                        "m": vocab.modalities[e.modality].name,
                        "v": e.value,
                        "sleep": e.sleep_flag,
                    }
                    for e in r.events
                ],
            }
            f.write(json.dumps(doc, separators=(",", ":")))
            f.write("\n")


def read_cohort_jsonl(path, vocab: Vocabulary) -> list[ParticipantRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: malformed JSON: {e}") from e
            events = []
            for ev in doc["events"]:
                spec = vocab.modality(ev["m"])
                events.append(
                    Event(
                        timestamp=datetime.fromisoformat(ev["t"]),
                        modality=spec.id,
                        value=ev["v"],
                        sleep_flag=bool(ev.get("sleep", False)),
                    )
                )
            records.append(
                ParticipantRecord(
                    participant_id=doc["id"],
                    age=float(doc["age"]),
                    sex=doc.get("sex", "unknown"),
                    events=events,
                    visit_timestamps=[datetime.fromisoformat(v) for v in doc.get("visits", [])],
                )
            )
    return records


def raw_value_events(record: ParticipantRecord, modality_id: int, visit: int | None = None):
    """All (timestamp, value) pairs of one modality, optionally one visit."""
    out = []
    for ev in record.events:
        if ev.modality != modality_id:
            continue
        if visit is not None and len(record.visit_timestamps) >= 2:
            v2 = record.visit_timestamps[1]
            in_v2 = ev.timestamp >= v2
            if (visit == 0 and in_v2) or (visit == 1 and not in_v2):
                continue
        elif visit == 1 and len(record.visit_timestamps) < 2:
            continue
        out.append((ev.timestamp, ev.value))
    return out
