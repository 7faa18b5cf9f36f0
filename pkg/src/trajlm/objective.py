"""Training objective, optimizer, schedule, and the training loop.

The loss has three parts: Gaussian-smoothed cross-entropy over the target
modality's bin range, a z-normalized MAE between the expected decoded value
and the true value, and the same smoothed cross-entropy recomputed under the
split-context mask so future-visit positions are predicted from the full
first-visit history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .checkpoint import save_checkpoint
from .corpus import AugmentConfig, TokenSequence, assemble_sequence, augment
from .model import Causal, ModelConfig, SplitContext, forward, build_mask, init_params, value_scale_table
from .numerics import Tensor, backward
from .vocab import CONTINUOUS, Vocabulary

__all__ = [
    "LossConfig",
    "TrainConfig",
    "OptimizerState",
    "TrainingDiverged",
    "soft_target",
    "sequence_loss",
    "masked_ntp_loss",
    "lr_at",
    "clip_gradients",
    "adamw_step",
    "train",
    "parse_config_file",
]


@dataclass
class LossConfig:
    sl_sigma: float = 0.01
    soft_scale: float = 1.0
    mae_scale: float = 1.0
    split_scale: float = 1.0

    def __post_init__(self):
        if self.sl_sigma <= 0:
            raise ValueError("sl_sigma must be positive")


@dataclass
class TrainConfig:
    epochs: int = 18
    batch_size: int = 1
    peak_lr: float = 3e-4
    min_lr: float = 3e-5
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 0.1
    seed: int = 42
    val_fraction: float = 0.2
    max_seq_len: int = 25_000


class TrainingDiverged(RuntimeError):
    pass


def soft_target(a: int, b: int, k: int, sigma: float) -> np.ndarray:
    """Gaussian-smoothed target distribution over bin range [a, b], centred on k."""
    if not a <= k <= b:
        raise ValueError(f"target bin {k} outside range [{a}, {b}]")
    i = np.arange(a, b + 1, dtype=np.float64)
    q = np.exp(-((i - k) ** 2) / (2.0 * sigma * sigma))
    return q / q.sum()


def _grouped_targets(seq: TokenSequence, vocab: Vocabulary, min_target: int):
    """Group NTP targets by modality: logits row p predicts token p + 1.

    Returns {modality_id: (logit_rows, target_tokens, true_values)} for target
    positions >= min_target, skipping pad targets.
    """
    groups: dict[int, list[tuple[int, int, float]]] = {}
    for j in range(max(1, min_target), seq.length):
        tok = int(seq.tokens[j])
        if tok >= vocab.total_tokens:
            continue
        m = int(seq.modalities[j])
        groups.setdefault(m, []).append((j - 1, tok, float(seq.values[j])))
    return groups


def masked_ntp_loss(
    logits: Tensor,
    seq: TokenSequence,
    vocab: Vocabulary,
    sigma: float,
    min_target: int = 0,
):
    """(soft, mae, n_soft, n_mae) over all eligible next-token targets.

    Probabilities are renormalized inside each target modality's token range,
    so logits outside that range never contribute.
    """
    groups = _grouped_targets(seq, vocab, min_target)
    soft_sum = None
    mae_sum = None
    n_soft = 0
    n_mae = 0
    for m, items in groups.items():
        spec = vocab.modalities[m]
        a, b = vocab.token_range(m)
        rows = np.array([it[0] for it in items])
        sub = nm.slice_cols(nm.take_rows(logits, rows), a, b + 1)

        q = np.stack([soft_target(a, b, tok, sigma) for _, tok, _ in items])
        logp = nm.log_softmax(sub, axis=-1)
        ce = nm.neg(nm.sum_(nm.mul(nm.constant(q.astype(logits.dtype)), logp)))
        soft_sum = ce if soft_sum is None else nm.add(soft_sum, ce)
        n_soft += len(items)

        if spec.kind == CONTINUOUS:
            mids = np.asarray(spec.midpoints, dtype=np.float64).reshape(-1, 1)
            p = nm.softmax(sub, axis=-1)
            pred = nm.matmul(p, nm.constant(mids.astype(logits.dtype)))
            truth = np.array([[it[2]] for it in items], dtype=logits.dtype)
            dev = nm.abs_(nm.sub(pred, nm.constant(truth)))
            term = nm.scale(nm.sum_(dev), 1.0 / spec.train_sd)
            mae_sum = term if mae_sum is None else nm.add(mae_sum, term)
            n_mae += len(items)

    zero = nm.constant(np.array(0.0, dtype=logits.dtype))
    soft = nm.scale(soft_sum, 1.0 / n_soft) if n_soft else zero
    mae = nm.scale(mae_sum, 1.0 / n_mae) if n_mae else zero
    return soft, mae, n_soft, n_mae


def sequence_loss(
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    seq: TokenSequence,
    age: float,
    sex: str,
    loss_config: LossConfig,
    dropout_rng: np.random.Generator | None = None,
):
    """Composite loss for one sequence: causal soft+MAE plus split-context soft.

    The split term runs a second forward pass under the split mask and scores
    only positions at or past the visit boundary.
    """
    scales = value_scale_table(vocab)
    causal_logits = forward(
        params, config, seq.tokens, seq.values, seq.modalities, seq.times,
        age, sex, build_mask(Causal(), seq.length), scales, dropout_rng=dropout_rng,
    )
    soft, mae, n_soft, _ = masked_ntp_loss(causal_logits, seq, vocab, loss_config.sl_sigma)

    boundary = seq.visit_boundary
    if 0 < boundary < seq.length:
        split_logits = forward(
            params, config, seq.tokens, seq.values, seq.modalities, seq.times,
            age, sex, build_mask(SplitContext(boundary), seq.length), scales,
            dropout_rng=dropout_rng,
        )
        split, _, n_split, _ = masked_ntp_loss(
            split_logits, seq, vocab, loss_config.sl_sigma, min_target=boundary
        )
    else:
        split = nm.constant(np.array(0.0, dtype=causal_logits.dtype))
        n_split = 0

    total = nm.add(
        nm.add(nm.scale(soft, loss_config.soft_scale), nm.scale(mae, loss_config.mae_scale)),
        nm.scale(split, loss_config.split_scale),
    )
    parts = {
        "soft": float(soft.data),
        "mae": float(mae.data),
        "split": float(split.data),
        "n_targets": n_soft,
        "n_split_targets": n_split,
    }
    return total, parts


def lr_at(step: int, total_steps: int, peak: float = 3e-4, minimum: float = 3e-5, warmup: int = 100) -> float:
    """Linear warmup to the peak, then cosine decay to the minimum at total_steps."""
    if step <= warmup:
        return peak * step / warmup if warmup > 0 else peak
    if total_steps <= warmup:
        return peak
    frac = (step - warmup) / (total_steps - warmup)
    return minimum + 0.5 * (peak - minimum) * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    sq = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, Tensor],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Decoupled-weight-decay Adam update with bias correction."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def _zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def train(
    records,
    vocab: Vocabulary,
    model_config: ModelConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    aug_config: AugmentConfig | None,
    out_path,
    vocab_sha256: str = "",
    meta: dict | None = None,
    log_rows: list | None = None,
    progress=None,
):
    """Fit the model on a cohort; checkpoints the best-validation parameters.

    Single-worker and strictly sequential in its RNG usage, so a fixed seed
    reproduces the checkpoint byte for byte.  Divergence (non-finite loss)
    aborts with the last good checkpoint already on disk.
    """
    if not records:
        raise ValueError("cohort is empty")
    aug = aug_config or AugmentConfig.disabled()
    rng = np.random.default_rng(train_config.seed)

    sequences = []
    for r in records:
        seq = assemble_sequence(r, vocab, train_config.max_seq_len)
        sequences.append((seq, r.age, r.sex))

    perm = rng.permutation(len(sequences))
    n_val = max(1, int(round(train_config.val_fraction * len(sequences)))) if len(sequences) > 1 else 0
    val_idx = perm[:n_val]
    train_idx = perm[n_val:]
    if len(train_idx) == 0:
        train_idx = perm
        val_idx = perm[:0]

    params = init_params(model_config, rng, dtype=np.float32)
    state = OptimizerState()
    batches_per_epoch = math.ceil(len(train_idx) / train_config.batch_size)
    total_steps = max(1, train_config.epochs * batches_per_epoch)

    def validation_loss() -> float:
        if len(val_idx) == 0:
            return math.nan
        losses = []
        for i in val_idx:
            seq, age, sex = sequences[i]
            if seq.length < 2:
                continue
            loss, _ = sequence_loss(params, model_config, vocab, seq, age, sex, loss_config)
            losses.append(float(loss.data))
        return float(np.mean(losses)) if losses else math.nan

    best_val = math.inf
    step = 0
    history = log_rows if log_rows is not None else []
    saved_once = False

    def checkpoint_now(val_loss: float) -> None:
        nonlocal saved_once
        info = dict(meta or {})
        info.update({"seed": train_config.seed, "step": step, "val_loss": val_loss})
        save_checkpoint(out_path, params, model_config, vocab_sha256, info)
        saved_once = True

    for epoch in range(train_config.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        for b0 in range(0, len(order), train_config.batch_size):
            batch = order[b0 : b0 + train_config.batch_size]
            step += 1
            lr = lr_at(step, total_steps, train_config.peak_lr, train_config.min_lr, train_config.warmup_steps)
            _zero_grads(params)
            tot = s = m = sp = 0.0
            n_used = 0
            for i in batch:
                seq, age, sex = sequences[i]
                aseq = augment(seq, aug, rng, vocab)
                if aseq.length < 2:
                    continue
                loss, parts = sequence_loss(
                    params, model_config, vocab, aseq, age, sex, loss_config,
                    dropout_rng=rng if model_config.dropout > 0 else None,
                )
                scaled = nm.scale(loss, 1.0 / len(batch))
                backward(scaled)
                tot += float(loss.data)
                s += parts["soft"]
                m += parts["mae"]
                sp += parts["split"]
                n_used += 1
            if n_used == 0:
                continue
            if not math.isfinite(tot):
                if not saved_once:
                    checkpoint_now(math.inf)
                raise TrainingDiverged(f"non-finite loss at step {step}")
            clip_gradients(params, train_config.clip_norm)
            adamw_step(
                params, state, lr,
                train_config.beta1, train_config.beta2, train_config.eps,
                train_config.weight_decay,
            )
            history.append(
                {
                    "step": step,
                    "lr": lr,
                    "loss": tot / n_used,
                    "soft": s / n_used,
                    "mae": m / n_used,
                    "split": sp / n_used,
                    "val_loss": "",
                }
            )
        val = validation_loss()
        if history:
            history[-1]["val_loss"] = val
        if progress is not None:
            progress(epoch, step, val)
        if math.isnan(val) or val < best_val:
            if not math.isnan(val):
                best_val = val
            checkpoint_now(val)

    if not saved_once:
        checkpoint_now(math.nan)
    return params, history, best_val


def parse_config_file(path) -> dict[str, str]:
    """Read a flat key=value config file; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
