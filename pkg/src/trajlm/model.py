"""Decoder-only transformer over measurement-stream tokens.

Six additive embedding components feed a pre-norm attention/FFN stack whose
attention heads carry gated auxiliary value projections.  After the last
layer, the next position's modality and time embeddings are injected through
small MLPs so a single context can answer arbitrary queries; output logits are
bounded by a smooth tanh clamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nm
from .corpus import TEMPORAL_VOCAB_SIZES, TokenSequence, SEX_INDEX
from .numerics import Tensor
from .vocab import CONTINUOUS, Vocabulary

__all__ = [
    "ModelConfig",
    "Causal",
    "SplitContext",
    "ParallelV2",
    "build_mask",
    "param_manifest",
    "init_params",
    "param_count",
    "value_scale_table",
    "sinusoid_features",
    "positional_encoding",
    "embed_inputs",
    "forward",
    "forward_sequence",
    "extract_embedding",
    "parallel_v2_layout",
]


@dataclass
class ModelConfig:
    vocab_size: int
    n_modalities: int
    d_model: int = 768
    n_layers: int = 14
    n_heads: int = 2
    d_head: int = 64
    n_value_extras: int = 2
    dropout: float = 0.2
    logit_clamp: float = 50.0
    cont_pe_dim: int = 512
    max_seq_len: int = 25_000
    temporal_vocab_sizes: list[int] = field(default_factory=lambda: list(TEMPORAL_VOCAB_SIZES))

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def __post_init__(self):
        for name in ("vocab_size", "n_modalities", "d_model", "n_layers", "n_heads", "d_head", "cont_pe_dim", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cont_pe_dim % 2 or self.d_model % 2:
            raise ValueError("d_model and cont_pe_dim must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --- attention masks ----------------------------------------------------------


@dataclass(frozen=True)
class Causal:
    pass


@dataclass(frozen=True)
class SplitContext:
    boundary: int


@dataclass(frozen=True)
class ParallelV2:
    n_ctx: int
    n_targets: int


def build_mask(kind, t: int) -> np.ndarray:
    """Boolean T x T attention mask; row = query, column = key."""
    if isinstance(kind, Causal):
        return np.tril(np.ones((t, t), dtype=bool))
    if isinstance(kind, SplitContext):
        b = kind.boundary
        if b > t:
            raise ValueError(f"split boundary {b} exceeds length {t}")
        mask = np.zeros((t, t), dtype=bool)
        mask[:, :b] = True
        for row in range(b, t):
            mask[row, b : row + 1] = True
        return mask
    if isinstance(kind, ParallelV2):
        n, k = kind.n_ctx, kind.n_targets
        if t != n + 2 * k:
            raise ValueError(f"parallel mask needs length {n + 2 * k}, got {t}")
        mask = np.zeros((t, t), dtype=bool)
        mask[:n, :n] = np.tril(np.ones((n, n), dtype=bool))
        for i in range(k):
            f = n + 2 * i
            p = f + 1
            mask[f, f] = True
            mask[p, :n] = True
            mask[p, f] = True
            mask[p, p] = True
        return mask
    raise TypeError(f"unknown mask kind: {kind!r}")


def parallel_v2_layout(n_ctx: int, n_targets: int):
    """Positions of each target's probe/prediction slots in the parallel mask."""
    probes = [n_ctx + 2 * i for i in range(n_targets)]
    preds = [f + 1 for f in probes]
    return probes, preds


# --- parameters ---------------------------------------------------------------


def param_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Stable (name, shape) listing of every learnable array."""
    c = config
    hd = c.n_heads * c.d_head
    out: list[tuple[str, tuple[int, ...]]] = [
        ("tok_embed", (c.vocab_size + 1, c.d_model)),
        ("cont_proj", (c.cont_pe_dim, c.d_model)),
        ("mod_embed", (c.n_modalities + 1, c.d_model)),
    ]
    for d, size in enumerate(c.temporal_vocab_sizes):
        out.append((f"time_embed_{d}", (size, c.d_model)))
    out += [
        ("age_proj", (c.cont_pe_dim, c.d_model)),
        ("sex_embed", (3, c.d_model)),
    ]
    for l in range(c.n_layers):
        out += [
            (f"layer{l}.ln1_g", (c.d_model,)),
            (f"layer{l}.ln1_b", (c.d_model,)),
            (f"layer{l}.w_q", (c.d_model, hd)),
            (f"layer{l}.w_k", (c.d_model, hd)),
            (f"layer{l}.w_v", (c.d_model, hd)),
        ]
        for e in range(c.n_value_extras):
            out.append((f"layer{l}.w_vx{e}", (c.d_model, hd)))
        out += [
            (f"layer{l}.gates", (max(c.n_value_extras, 1), c.n_heads)),
            (f"layer{l}.w_o", (hd, c.d_model)),
            (f"layer{l}.ln2_g", (c.d_model,)),
            (f"layer{l}.ln2_b", (c.d_model,)),
            (f"layer{l}.w_ff1", (c.d_model, c.d_ff)),
            (f"layer{l}.b_ff1", (c.d_ff,)),
            (f"layer{l}.w_ff2", (c.d_ff, c.d_model)),
            (f"layer{l}.b_ff2", (c.d_model,)),
        ]
    out += [
        ("qmod_w1", (c.d_model, c.d_model)),
        ("qmod_b1", (c.d_model,)),
        ("qmod_w2", (c.d_model, c.d_model)),
        ("qmod_b2", (c.d_model,)),
        ("qtime_w1", (c.d_model, c.d_model)),
        ("qtime_b1", (c.d_model,)),
        ("qtime_w2", (c.d_model, c.d_model)),
        ("qtime_b2", (c.d_model,)),
        ("out_w", (c.d_model, c.vocab_size)),
        ("out_b", (c.vocab_size,)),
    ]
    return out


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_manifest(config))


_ZERO_INIT_SUFFIXES = ("_b", ".gates", "qmod_w2", "qmod_b2", "qtime_w2", "qtime_b2")


def _init_array(name: str, shape, rng: np.random.Generator, dtype) -> np.ndarray:
    if name.endswith("ln1_g") or name.endswith("ln2_g"):
        return np.ones(shape, dtype=dtype)
    if name.endswith(_ZERO_INIT_SUFFIXES) or name.endswith("out_b"):
        return np.zeros(shape, dtype=dtype)
    return (rng.normal(0.0, 0.02, size=shape)).astype(dtype)


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """Fresh parameters; query-MLP output layers and gates start at zero so
    query injection and value extras begin as identities."""
    return {
        name: Tensor(_init_array(name, shape, rng, dtype), requires_grad=True)
        for name, shape in param_manifest(config)
    }


def value_scale_table(vocab: Vocabulary) -> np.ndarray:
    """Per-modality scale for the continuous value encoder (1.0 for categorical/pad)."""
    scales = np.ones(vocab.n_modalities + 1, dtype=np.float64)
    for m in vocab.modalities:
        if m.kind == CONTINUOUS and m.train_sd > 0:
            scales[m.id] = m.train_sd
    return scales


# --- fixed encodings ----------------------------------------------------------


def sinusoid_features(values: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed sin/cos feature expansion of scalar values over `dim` channels."""
    v = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(half) / dim))
    ang = v * freqs
    out = np.empty((v.shape[0], dim), dtype=dtype)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def positional_encoding(pos_ids: np.ndarray, d_model: int, dtype=np.float64) -> np.ndarray:
    return sinusoid_features(pos_ids, d_model, dtype)


# --- forward pass ---------------------------------------------------------------


def embed_inputs(
    params: dict[str, Tensor],
    config: ModelConfig,
    tokens: np.ndarray,
    values: np.ndarray,
    modalities: np.ndarray,
    times: np.ndarray,
    age: float,
    sex: str,
    value_scales: np.ndarray,
    pos_ids: np.ndarray | None = None,
) -> Tensor:
    """Sum the six per-position embedding components into H0 (T x d_model)."""
    t = len(tokens)
    dtype = params["tok_embed"].dtype
    if pos_ids is None:
        pos_ids = np.arange(t)

    h = nm.embedding(params["tok_embed"], tokens)

    scaled = np.asarray(values, dtype=np.float64) / value_scales[np.asarray(modalities[:t])]
    cont_feat = nm.constant(sinusoid_features(scaled, config.cont_pe_dim, dtype))
    h = nm.add(h, nm.matmul(cont_feat, params["cont_proj"]))

    h = nm.add(h, nm.embedding(params["mod_embed"], modalities[:t]))
    h = nm.add(h, _time_embedding(params, times[:t]))
    h = nm.add(h, nm.constant(positional_encoding(pos_ids, config.d_model, dtype)))

    age_feat = nm.constant(sinusoid_features(np.array([age]), config.cont_pe_dim, dtype))
    demo = nm.add(
        nm.matmul(age_feat, params["age_proj"]),
        nm.embedding(params["sex_embed"], np.array([SEX_INDEX.get(sex, 2)])),
    )
    return nm.add(h, demo)


def _time_embedding(params: dict[str, Tensor], times: np.ndarray) -> Tensor:
    parts = nm.embedding(params["time_embed_0"], times[:, 0])
    for d in range(1, 7):
        parts = nm.add(parts, nm.embedding(params[f"time_embed_{d}"], times[:, d]))
    return parts


def _query_mlp(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = nm.gelu(nm.add(nm.matmul(x, params[f"{prefix}_w1"]), params[f"{prefix}_b1"]))
    return nm.add(nm.matmul(h, params[f"{prefix}_w2"]), params[f"{prefix}_b2"])


def forward(
    params: dict[str, Tensor],
    config: ModelConfig,
    tokens: np.ndarray,
    values: np.ndarray,
    modalities: np.ndarray,
    times: np.ndarray,
    age: float,
    sex: str,
    mask: np.ndarray,
    value_scales: np.ndarray,
    query_modalities: np.ndarray | None = None,
    query_times: np.ndarray | None = None,
    pos_ids: np.ndarray | None = None,
    dropout_rng: np.random.Generator | None = None,
    return_hidden: bool = False,
):
    """Run the full stack; logits[p] answers the query at stream slot p+1.

    modalities/times must be one entry longer than tokens; explicit
    query_modalities/query_times (length T) override that +1 alignment for
    evaluation modes that pack several independent queries into one pass.
    """
    t = len(tokens)
    if len(values) != t:
        raise ValueError(f"length mismatch between streams: {t} tokens vs {len(values)} values")
    if len(modalities) != t + 1 or len(times) != t + 1:
        raise ValueError(
            f"modalities/times must be one longer than tokens ({t + 1}), got "
            f"{len(modalities)}/{len(times)}"
        )
    if mask.shape != (t, t):
        raise ValueError(f"mask shape {mask.shape} does not match length {t}")

    c = config
    dtype = params["tok_embed"].dtype
    rate = c.dropout if dropout_rng is not None else 0.0

    h = embed_inputs(params, c, tokens, values, modalities, times, age, sex, value_scales, pos_ids)
    mask_add = np.where(mask, np.array(0.0, dtype=dtype), np.array(nm.neg_inf(dtype), dtype=dtype))

    for l in range(c.n_layers):
        pre = nm.layer_norm(h, params[f"layer{l}.ln1_g"], params[f"layer{l}.ln1_b"])
        hd = c.n_heads * c.d_head

        def heads(x: Tensor) -> Tensor:
            return nm.transpose(nm.reshape(x, (t, c.n_heads, c.d_head)), (1, 0, 2))

        q = heads(nm.matmul(pre, params[f"layer{l}.w_q"]))
        k = heads(nm.matmul(pre, params[f"layer{l}.w_k"]))
        v = heads(nm.matmul(pre, params[f"layer{l}.w_v"]))
        for e in range(c.n_value_extras):
            vx = heads(nm.matmul(pre, params[f"layer{l}.w_vx{e}"]))
            gate = nm.reshape(nm.take_rows(params[f"layer{l}.gates"], np.array([e])), (c.n_heads, 1, 1))
            v = nm.add(v, nm.mul(vx, gate))

        scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(c.d_head))
        scores = nm.add(scores, nm.constant(mask_add))
        attn = nm.dropout(nm.softmax(scores, axis=-1), rate, dropout_rng)
        ctx = nm.reshape(nm.transpose(nm.matmul(attn, v), (1, 0, 2)), (t, hd))
        h = nm.add(h, nm.dropout(nm.matmul(ctx, params[f"layer{l}.w_o"]), rate, dropout_rng))

        pre2 = nm.layer_norm(h, params[f"layer{l}.ln2_g"], params[f"layer{l}.ln2_b"])
        ff = nm.gelu(nm.add(nm.matmul(pre2, params[f"layer{l}.w_ff1"]), params[f"layer{l}.b_ff1"]))
        ff = nm.add(nm.matmul(ff, params[f"layer{l}.w_ff2"]), params[f"layer{l}.b_ff2"])
        h = nm.add(h, nm.dropout(ff, rate, dropout_rng))

    hidden = h

    q_mods = np.asarray(modalities[1:]) if query_modalities is None else np.asarray(query_modalities)
    q_times = np.asarray(times[1:]) if query_times is None else np.asarray(query_times)
    if len(q_mods) != t or len(q_times) != t:
        raise ValueError("query streams must have one entry per token position")

    q_mod = _query_mlp(params, "qmod", nm.embedding(params["mod_embed"], q_mods))
    q_time = _query_mlp(params, "qtime", _time_embedding(params, q_times))
    h_tilde = nm.add(nm.add(h, q_mod), q_time)

    z = nm.add(nm.matmul(h_tilde, params["out_w"]), params["out_b"])
    cc = c.logit_clamp
    logits = nm.scale(nm.tanh(nm.scale(z, 1.0 / cc)), cc)
    if return_hidden:
        return logits, hidden
    return logits


def forward_sequence(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    seq: TokenSequence,
    age: float,
    sex: str,
    mask_kind,
    dropout_rng: np.random.Generator | None = None,
    return_hidden: bool = False,
):
    """Convenience wrapper: build the mask and scale table from the sequence."""
    mask = build_mask(mask_kind, seq.length)
    return forward(
        params,
        config,
        seq.tokens,
        seq.values,
        seq.modalities,
        seq.times,
        age,
        sex,
        mask,
        value_scale_table(vocab),
        dropout_rng=dropout_rng,
        return_hidden=return_hidden,
    )


def extract_embedding(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    seq: TokenSequence,
    age: float,
    sex: str,
) -> np.ndarray:
    """Mean of final-layer hidden states over non-pad positions."""
    if seq.length == 0:
        raise ValueError("cannot extract an embedding from an empty sequence")
    _, hidden = forward_sequence(params, config, vocab, seq, age, sex, Causal(), return_hidden=True)
    keep = seq.tokens != vocab.pad_token
    if not np.any(keep):
        raise ValueError("sequence has no non-pad positions")
    return hidden.data[keep].mean(axis=0)
