"""Operator command line: vocabulary building, tokenization, training,
evaluation, cross-modal probes, intervention simulation, trial concordance,
and synthetic-cohort generation.

Every artifact embeds the seed, config hash, and library version; loading a
checkpoint against the wrong vocabulary fails before any inference runs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, read_header
from .corpus import AugmentConfig, assemble_sequence, read_cohort_jsonl, write_cohort_jsonl
from .evalharness import (
    MetricReport,
    ModalityMetrics,
    _metrics_from_pools,
    baseline_predict,
    crossmodal_sweep,
    eval_longitudinal,
    eval_within_visit,
    longitudinal_pools,
    merge_pools,
    within_visit_pools,
    write_metric_csv,
)
from .intervene import (
    EligibilityRule,
    concordance,
    filter_eligible,
    four_arm,
    load_trial_spec,
    parse_intervention,
    sample_trial_population,
    simulate_arms,
    trajectory,
)
from .model import ModelConfig, param_count
from .objective import LossConfig, TrainConfig, parse_config_file, train
from .stats import bh_fdr, fisher_z_compare, pearson_with_ci
from .synthcohort import build_synth_vocabulary, default_config, generate, save_ground_truth
from .vocab import (
    CATEGORICAL,
    CONTINUOUS,
    RawModality,
    build_vocabulary,
    load_vocabulary,
    save_vocabulary,
)


class CliError(RuntimeError):
    pass


def _require_file(path, what: str) -> str:
    if not os.path.exists(path):
        raise CliError(f"missing file: {what} not found at {path!r}")
    return path


def _load_json(path, what: str):
    _require_file(path, what)
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise CliError(f"malformed JSON in {what} {path!r}: {e}") from e


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def resolve_seed(flag_seed: int | None, config_seed: int | None = None, default: int = 0) -> int:
    env = os.environ.get("TRAJLM_SEED")
    if env is not None:
        return int(env)
    if flag_seed is not None:
        return flag_seed
    if config_seed is not None:
        return config_seed
    return default


def _meta(seed: int, cfg_hash: str) -> dict:
    return {"seed": seed, "config_hash": cfg_hash, "version": __version__}


def _load_model(ckpt_path, vocab_path):
    """Load checkpoint + vocabulary, enforcing the vocabulary hash pin."""
    _require_file(ckpt_path, "checkpoint")
    _require_file(vocab_path, "vocabulary")
    params, config, header = load_checkpoint(ckpt_path)
    expected = header.get("vocab_sha256", "")
    actual = file_sha256(vocab_path)
    if expected and expected != actual:
        raise CliError(
            f"vocabulary hash mismatch: checkpoint was trained against {expected[:12]}..., "
            f"but {vocab_path!r} hashes to {actual[:12]}..."
        )
    vocab = load_vocabulary(vocab_path)
    if vocab.total_tokens != config.vocab_size:
        raise CliError(
            f"vocabulary/checkpoint mismatch: {vocab.total_tokens} tokens vs "
            f"model vocab_size {config.vocab_size}"
        )
    return params, config, header, vocab


# --- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = resolve_seed(args.seed)
    config = default_config(n_participants=args.participants, seed=seed)
    rng = np.random.default_rng(seed)
    records, truth = generate(config, rng)
    vocab = build_synth_vocabulary(records, config)
    write_cohort_jsonl(records, vocab, args.out)
    if args.truth:
        save_ground_truth(truth, args.truth)
    if args.vocab_out:
        save_vocabulary(vocab, args.vocab_out)
    with open(str(args.out) + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(_meta(seed, config_hash({"n": args.participants, "seed": seed})), f, sort_keys=True)
        f.write("\n")
    print(f"wrote {len(records)} participants to {args.out}")
    return 0


def _scan_raw_cohort(path):
    """Infer modalities from a raw cohort file: numeric values make a modality
    continuous, string values categorical (categories in first-seen order)."""
    _require_file(path, "cohort")
    order: list[str] = []
    values: dict[str, list] = {}
    kinds: dict[str, str] = {}
    categories: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise CliError(f"malformed JSON in cohort {path!r} line {line_no}: {e}") from e
            for ev in doc.get("events", []):
                name = ev["m"]
                v = ev["v"]
                if name not in kinds:
                    order.append(name)
                    kinds[name] = CATEGORICAL if isinstance(v, str) else CONTINUOUS
                    values[name] = []
                    categories[name] = []
                if isinstance(v, str):
                    if v not in categories[name]:
                        categories[name].append(v)
                else:
                    values[name].append(float(v))
    raw = []
    for name in order:
        if kinds[name] == CATEGORICAL:
            raw.append(RawModality(name, CATEGORICAL, categories=categories[name]))
        else:
            raw.append(RawModality(name, CONTINUOUS, values=values[name]))
    return raw


def cmd_build_vocab(args) -> int:
    raw = _scan_raw_cohort(args.cohort)
    vocab = build_vocabulary(raw)
    save_vocabulary(vocab, args.out)
    print(f"built vocabulary: {vocab.n_modalities} modalities, {vocab.total_tokens} tokens (pad {vocab.pad_token})")
    return 0


def cmd_tokenize(args) -> int:
    vocab = load_vocabulary(_require_file(args.vocab, "vocabulary"))
    records = read_cohort_jsonl(_require_file(args.cohort, "cohort"), vocab)
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            seq = assemble_sequence(rec, vocab, args.max_len)
            row = {
                "id": rec.participant_id,
                "tokens": seq.tokens.tolist(),
                "values": seq.values.tolist(),
                "modalities": seq.modalities.tolist(),
                "times": seq.times.tolist(),
                "visit_boundary": seq.visit_boundary,
            }
            f.write(json.dumps(row, separators=(",", ":")))
            f.write("\n")
    print(f"tokenized {len(records)} participants to {args.out}")
    return 0


_CONFIG_KEYS = {
    "n_embd": ("model", "d_model", int),
    "n_layers": ("model", "n_layers", int),
    "n_heads": ("model", "n_heads", int),
    "d_head": ("model", "d_head", int),
    "n_value_extras": ("model", "n_value_extras", int),
    "dropout": ("model", "dropout", float),
    "logit_clamp": ("model", "logit_clamp", float),
    "continuous_pe_base_dim": ("model", "cont_pe_dim", int),
    "max_seq_length": ("model", "max_seq_len", int),
    "lr": ("train", "peak_lr", float),
    "gamma": ("train", "_gamma", float),
    "min_lr": ("train", "min_lr", float),
    "b1": ("train", "beta1", float),
    "b2": ("train", "beta2", float),
    "eps": ("train", "eps", float),
    "weight_decay": ("train", "weight_decay", float),
    "grad_clip": ("train", "clip_norm", float),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "warmup_steps": ("train", "warmup_steps", int),
    "seed": ("train", "seed", int),
    "val_fraction": ("train", "val_fraction", float),
    "SL_sigma": ("loss", "sl_sigma", float),
    "soft_labels_scale": ("loss", "soft_scale", float),
    "mae_loss_scale": ("loss", "mae_scale", float),
    "split_loss_scale": ("loss", "split_scale", float),
    "augmentation_chance": ("aug", "noise_chance", float),
    "augmentation_rate": ("aug", "noise_rate", float),
    "random_removal_chance": ("aug", "token_removal_chance", float),
    "random_removal_rate": ("aug", "token_removal_rate", float),
    "random_block_removal_chance": ("aug", "block_removal_chance", float),
    "random_block_removal_rate": ("aug", "block_removal_rate", float),
    "random_block_removal_number": ("aug", "block_removal_blocks", lambda s: int(float(s))),
    "random_modality_subset_chance": ("aug", "modality_subset_chance", float),
    "random_modality_subset_fraction": ("aug", "modality_subset_fraction", float),
    "random_modality_exclusion_chance": ("aug", "modality_exclusion_chance", float),
}


def build_configs(flat: dict[str, str], vocab) -> tuple[ModelConfig, LossConfig, TrainConfig, AugmentConfig]:
    buckets: dict[str, dict] = {"model": {}, "train": {}, "loss": {}, "aug": {}}
    for key, value in flat.items():
        if key not in _CONFIG_KEYS:
            raise CliError(f"unknown config key {key!r}")
        bucket, name, conv = _CONFIG_KEYS[key]
        buckets[bucket][name] = conv(value)
    gamma = buckets["train"].pop("_gamma", None)
    model = ModelConfig(vocab_size=vocab.total_tokens, n_modalities=vocab.n_modalities, **buckets["model"])
    train_cfg = TrainConfig(**buckets["train"])
    if gamma is not None and "min_lr" not in buckets["train"]:
        train_cfg.min_lr = gamma * train_cfg.peak_lr
    loss = LossConfig(**buckets["loss"])
    aug = AugmentConfig(**buckets["aug"])
    return model, train_cfg, loss, aug


def cmd_train(args) -> int:
    vocab = load_vocabulary(_require_file(args.vocab, "vocabulary"))
    records = read_cohort_jsonl(_require_file(args.cohort, "cohort"), vocab)
    flat = parse_config_file(_require_file(args.config, "training config"))
    model_cfg, train_cfg, loss_cfg, aug_cfg = build_configs(flat, vocab)
    train_cfg.seed = resolve_seed(args.seed, train_cfg.seed)

    cfg_hash = config_hash(
        {
            "model": model_cfg.to_dict(),
            "train": vars(train_cfg),
            "loss": vars(loss_cfg),
            "aug": vars(aug_cfg),
        }
    )
    vocab_sha = file_sha256(args.vocab)
    rows: list[dict] = []

    def progress(epoch, step, val):
        print(f"epoch {epoch + 1}/{train_cfg.epochs} step {step} val_loss {val:.6f}")

    _, history, best = train(
        records, vocab, model_cfg, loss_cfg, train_cfg, aug_cfg,
        args.out, vocab_sha256=vocab_sha,
        meta=_meta(train_cfg.seed, cfg_hash), log_rows=rows, progress=progress,
    )
    if args.log:
        with open(args.log, "w", encoding="utf-8", newline="") as f:
            f.write(f"# seed={train_cfg.seed}\n# config_hash={cfg_hash}\n# version={__version__}\n")
            w = csv.DictWriter(f, fieldnames=["step", "lr", "loss", "soft", "mae", "split", "val_loss"], lineterminator="\n")
            w.writeheader()
            for row in history:
                w.writerow(row)
    print(f"best validation loss {best:.6f}; checkpoint at {args.out}")
    return 0


def _chunks(items, n):
    size = math.ceil(len(items) / n)
    return [items[i : i + size] for i in range(0, len(items), size)]


def _ntp_worker(payload):
    params, config, vocab, records = payload
    return within_visit_pools(params, config, vocab, records)


def _long_worker(payload):
    params, config, vocab, records = payload
    return longitudinal_pools(params, config, vocab, records)


def _sim_worker(payload):
    params, config, vocab, records, spec, outcome, horizon = payload
    arm = simulate_arms(params, config, vocab, records, spec, outcome, horizon)
    return arm.control, arm.treatment


def cmd_eval_ntp(args) -> int:
    params, config, header, vocab = _load_model(args.ckpt, args.vocab)
    records = read_cohort_jsonl(_require_file(args.cohort, "cohort"), vocab)
    if args.workers > 1 and len(records) > 1:
        payloads = [(params, config, vocab, chunk) for chunk in _chunks(records, args.workers)]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            parts = list(pool.map(_ntp_worker, payloads))
        cont = merge_pools([p[0] for p in parts])
        cat = merge_pools([p[1] for p in parts])
        report = _metrics_from_pools(cont, cat, vocab)
    else:
        report = eval_within_visit(params, config, vocab, records)
    meta = _meta(header["meta"].get("seed", ""), header["meta"].get("config_hash", ""))
    write_metric_csv(report, args.report, meta)
    if args.json:
        summary = {"median_r": report.median_r(), "n_modalities": len(report.rows), **meta}
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(summary, f, sort_keys=True)
            f.write("\n")
    print(f"within-visit report on {len(records)} participants -> {args.report} (median r {report.median_r():.3f})")
    return 0


def cmd_eval_longitudinal(args) -> int:
    params, config, header, vocab = _load_model(args.ckpt, args.vocab)
    records = read_cohort_jsonl(_require_file(args.cohort, "cohort"), vocab)
    if args.workers > 1 and len(records) > 1:
        payloads = [(params, config, vocab, chunk) for chunk in _chunks(records, args.workers)]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            pools = merge_pools(list(pool.map(_long_worker, payloads)))
        report = _metrics_from_pools({m: (p[1], p[2]) for m, p in pools.items()}, {}, vocab)
    else:
        report, pools = eval_longitudinal(params, config, vocab, records)
    meta = _meta(header["meta"].get("seed", ""), header["meta"].get("config_hash", ""))
    write_metric_csv(report, args.report, meta)

    baselines = [b.strip() for b in args.baselines.split(",") if b.strip()]
    summary: dict = {"model_median_r": report.median_r(), **meta}
    train_records = None
    if args.train_cohort:
        train_records = read_cohort_jsonl(_require_file(args.train_cohort, "train cohort"), vocab)
    for kind in baselines:
        if kind == "linear" and train_records is None:
            print("skipping linear baseline: no --train-cohort given", file=sys.stderr)
            continue
        preds, skipped = baseline_predict(kind, train_records or [], records, vocab)
        rows = MetricReport()
        comparisons = []
        for m, pool in sorted(pools.items()):
            if m not in preds:
                continue
            pids, model_preds, trues = pool
            keep = [i for i, pid in enumerate(pids) if pid in preds[m]]
            if len(keep) < 4:
                continue
            bx = [preds[m][pids[i]] for i in keep]
            by = [trues[i] for i in keep]
            try:
                r, p, ci = pearson_with_ci(bx, by)
            except ValueError:
                continue
            name = vocab.modalities[m].name
            rows.rows.append(ModalityMetrics(m, name, "continuous", len(keep), r, p, ci[0], ci[1]))
            # model-vs-baseline correlation difference on the same participants
            try:
                r_model, _, _ = pearson_with_ci([model_preds[i] for i in keep], by)
                clip = lambda v: float(np.clip(v, -0.999999, 0.999999))
                z, zp = fisher_z_compare(clip(r_model), clip(r), len(keep))
                comparisons.append({"modality": name, "model_r": r_model, f"{kind}_r": r, "z": z, "p": zp})
            except ValueError:
                pass
        out = f"{args.report}.{kind}.csv"
        write_metric_csv(rows, out, meta)
        summary[f"{kind}_median_r"] = rows.median_r()
        if skipped:
            summary[f"{kind}_skipped"] = skipped
        if comparisons:
            flags = bh_fdr([c["p"] for c in comparisons], 0.05)
            for c, flag in zip(comparisons, flags):
                c["significant_fdr05"] = bool(flag)
            summary[f"{kind}_comparisons"] = comparisons
        print(f"{kind} baseline -> {out} (median r {rows.median_r():.3f})")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(summary, f, sort_keys=True, default=str)
            f.write("\n")
    print(f"longitudinal report -> {args.report} (median r {report.median_r():.3f})")
    return 0


def cmd_probe_crossmodal(args) -> int:
    params, config, header, vocab = _load_model(args.ckpt, args.vocab)
    m_in = vocab.modality(args.input).id
    m_out = vocab.modality(args.output).id
    when = datetime.fromisoformat(args.time)
    xs, ys = crossmodal_sweep(params, config, vocab, m_in, m_out, when)
    meta = _meta(header["meta"].get("seed", ""), header["meta"].get("config_hash", ""))
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        f.write("".join(f"# {k}={v}\n" for k, v in sorted(meta.items())))
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["input_midpoint", "expected_output"])
        for x, y in zip(xs, ys):
            w.writerow([format(x, ".10g"), format(y, ".10g")])
    if args.plot:
        from .plots import scatter_svg

        scatter_svg(args.plot, xs, ys, title=f"{args.input} -> {args.output}", xlabel=args.input, ylabel=args.output)
    print(f"probe curve over {len(xs)} bins -> {args.out}")
    return 0


def cmd_simulate(args) -> int:
    params, config, header, vocab = _load_model(args.ckpt, args.vocab)
    records = read_cohort_jsonl(_require_file(args.cohort, "cohort"), vocab)
    doc = _load_json(args.spec, "intervention spec")
    spec = parse_intervention(doc["intervention"], vocab)
    outcome = vocab.modality(doc["outcome"]).id
    horizon = int(doc.get("horizon_months", 12))
    seed = resolve_seed(args.seed, doc.get("seed"), 0)
    rng = np.random.default_rng(seed)

    if "eligibility" in doc:
        e = doc["eligibility"]
        rule = EligibilityRule(vocab.modality(e["modality"]).id, e["comparator"], float(e["threshold"]))
        records, missing = filter_eligible(params, config, vocab, records, rule, horizon)
        print(f"eligibility: {len(records)} kept, {missing} missing the rule modality")
    if not records:
        raise CliError("no eligible participants to simulate")

    if args.workers > 1 and len(records) > 1:
        from .intervene import ArmResult

        payloads = [
            (params, config, vocab, chunk, spec, outcome, horizon)
            for chunk in _chunks(records, args.workers)
        ]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            parts = list(pool.map(_sim_worker, payloads))
        arm = ArmResult(
            np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]),
            label=spec.label,
        )
        arm.ci = arm.bootstrap_ci(rng)
    else:
        arm = simulate_arms(params, config, vocab, records, spec, outcome, horizon, rng=rng)
    meta = _meta(seed, header["meta"].get("config_hash", ""))
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        f.write("".join(f"# {k}={v}\n" for k, v in sorted(meta.items())))
        f.write(f"# label={spec.label}\n# outcome={doc['outcome']}\n# horizon_months={horizon}\n")
        f.write(f"# mean_delta={arm.mean_delta:.10g}\n# effect_percent={arm.effect_percent:.10g}\n")
        if arm.ci:
            f.write(f"# ci_low={arm.ci[0]:.10g}\n# ci_high={arm.ci[1]:.10g}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["participant", "predicted_control", "predicted_treatment", "delta"])
        for rec, c, t in zip(records, arm.control, arm.treatment):
            w.writerow([rec.participant_id, format(c, ".10g"), format(t, ".10g"), format(t - c, ".10g")])
    if args.trajectory:
        series = trajectory(params, config, vocab, records, spec, outcome, months=horizon)
        tpath = f"{args.out}.trajectory.csv"
        with open(tpath, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["month", "mean_delta", "sem"])
            for t, mean, sem in series:
                w.writerow([t, format(mean, ".10g"), format(sem, ".10g")])
        if args.plot:
            from .plots import line_svg

            line_svg(args.plot, [s[0] for s in series], [s[1] for s in series], [s[2] for s in series],
                     title=spec.label, xlabel="months", ylabel="mean delta")
    print(f"simulated {len(records)} participants: effect {arm.effect_percent:.2f}% -> {args.out}")
    return 0


def cmd_trial_run(args) -> int:
    params, config, header, vocab = _load_model(args.ckpt, args.vocab)
    if not os.path.isdir(args.trials):
        raise CliError(f"missing file: trials directory not found at {args.trials!r}")
    paths = sorted(p for p in os.listdir(args.trials) if p.endswith(".json"))
    if not paths:
        raise CliError(f"no trial specs (*.json) in {args.trials!r}")
    seed = resolve_seed(args.seed, None, 0)
    rows = []
    forest = []
    for i, name in enumerate(paths):
        doc = _load_json(os.path.join(args.trials, name), f"trial spec {name}")
        trial = load_trial_spec(doc, vocab)
        rng = np.random.default_rng([seed, i])
        population = sample_trial_population(trial, rng, vocab)
        outcome = vocab.modality(trial.outcome).id
        if len(trial.arms) == 1:
            arm = simulate_arms(params, config, vocab, population, trial.arms[0], outcome, trial.horizon_months, rng=rng)
        elif len(trial.arms) == 2:
            arm = four_arm(params, config, vocab, population, trial.arms[0], trial.arms[1], outcome, trial.horizon_months)["AB"]
            arm.ci = arm.bootstrap_ci(rng)
        else:
            raise CliError(f"trial {trial.name!r} must declare 1 or 2 arms")
        predicted = arm.signed_percent
        rows.append(
            {
                "trial": trial.name,
                "predicted": predicted,
                "pred_ci_low": arm.ci[0] if arm.ci else "",
                "pred_ci_high": arm.ci[1] if arm.ci else "",
                "published": trial.published_point,
                "ci_low": trial.published_ci[0],
                "ci_high": trial.published_ci[1],
            }
        )
        forest.append((trial.name, predicted, trial.published_point, trial.published_ci[0], trial.published_ci[1]))
    score = concordance(rows)
    meta = _meta(seed, header["meta"].get("config_hash", ""))
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        f.write("".join(f"# {k}={v}\n" for k, v in sorted(meta.items())))
        f.write(f"# direction_hits={score['direction_hits']}/{score['n']}\n")
        f.write(f"# ci_hits={score['ci_hits']}/{score['n']}\n")
        w = csv.DictWriter(
            f,
            fieldnames=["trial", "predicted", "pred_ci_low", "pred_ci_high", "published", "ci_low", "ci_high", "direction_hit", "ci_hit"],
            lineterminator="\n",
        )
        w.writeheader()
        for row in score["rows"]:
            w.writerow(row)
    if args.plot:
        from .plots import forest_svg

        forest_svg(args.plot, forest, title="predicted vs published effects")
    print(f"{score['direction_hits']}/{score['n']} direction hits, {score['ci_hits']}/{score['n']} CI hits -> {args.out}")
    return 0


def cmd_inspect_checkpoint(args) -> int:
    header = read_header(_require_file(args.ckpt, "checkpoint"))
    config = ModelConfig.from_dict(header["config"])
    print(f"config: {json.dumps(header['config'], sort_keys=True)}")
    print(f"meta: {json.dumps(header.get('meta', {}), sort_keys=True)}")
    print(f"vocab_sha256: {header.get('vocab_sha256', '')}")
    total = 0
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        total += n
        print(f"  {entry['name']:<24} {str(entry['shape']):<20} {n}")
    print(f"total parameters: {total}")
    expected = param_count(config)
    if expected != total:
        print(f"warning: manifest disagrees with config-derived count {expected}", file=sys.stderr)
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajlm", description=__doc__)
    p.add_argument("--version", action="version", version=f"trajlm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the planted-truth synthetic cohort")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--participants", type=int, default=500)
    s.add_argument("--out", required=True)
    s.add_argument("--truth")
    s.add_argument("--vocab-out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-vocab", help="fit the tokenizer on a cohort file")
    s.add_argument("--cohort", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("tokenize", help="emit token streams for a cohort")
    s.add_argument("--cohort", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-len", type=int, default=25_000)
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--cohort", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-ntp", help="within-visit next-token evaluation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--json")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_eval_ntp)

    s = sub.add_parser("eval-longitudinal", help="visit-1 to visit-2 evaluation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--baselines", default="locf")
    s.add_argument("--train-cohort")
    s.add_argument("--json")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_eval_longitudinal)

    s = sub.add_parser("probe-crossmodal", help="2-position conditional probe")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--time", default="2022-01-03T09:00:00")
    s.add_argument("--out", required=True)
    s.add_argument("--plot")
    s.set_defaults(func=cmd_probe_crossmodal)

    s = sub.add_parser("simulate", help="intervention-conditioned arm simulation")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trajectory", action="store_true")
    s.add_argument("--plot")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("trial-run", help="synthetic-population trial concordance")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--trials", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--plot")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_trial_run)

    s = sub.add_parser("inspect-checkpoint", help="print the parameter manifest")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(func=cmd_inspect_checkpoint)

    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
