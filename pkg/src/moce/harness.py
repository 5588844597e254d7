"""End-to-end pipeline: embed, cluster, pretrain the dense base, upcycle,
train adapters and routers, then evaluate and export routing statistics.

Every run is a pure function of its config file and dataset: the metrics
stream carries no timestamps, so identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass
from functools import reduce

import numpy as np

from .clustering import (
    KMeansModel,
    elbow_select,
    kmeans_fit,
    kmeans_predict,
    load_kmeans,
    save_kmeans,
)
from .data import (
    EOS_ID,
    VOCAB_SIZE,
    InstructionRecord,
    completed_response,
    encode_example,
    prompt_ids,
    split_dataset,
    training_pair,
)
from .embedding import embed_dataset, embed_sequence, save_embeddings
from .errors import ConfigError, NumericError
from .layer import RoutingRecord, load_balance_loss
from .model import (
    DenseBaseModel,
    ModelConfig,
    MoCEModel,
    greedy_decode,
    lm_loss,
    load_checkpoint,
    save_checkpoint,
    upcycle_init,
)
from .optim import Adam
from .seeding import substream
from .tensor import Tensor, add, backward, mul

CHECKPOINT_DIR = "checkpoint"
KMEANS_FILE = "kmeans.txt"
EMBEDDINGS_FILE = "embeddings.txt"
ELBOW_FILE = "elbow.csv"
METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"


@dataclass
class RunConfig:
    """Flat description of one training run.

    Exactly one of ``n_groups`` (fixed group count) or ``k_max`` (select
    the count with the elbow sweep) must be set.
    """

    seed: int = 0
    d_embed: int = 64
    n_groups: int | None = None
    k_max: int | None = None
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    max_seq_len: int = 64
    n_experts: int = 4
    adapter_rank: int = 64
    top_k: int = 2
    mode: str = "topk"
    renormalize: bool = False
    moe_scale: float = 1.0
    variant: bool = False
    activation: str = "gelu"
    pretrain_steps: int = 100
    train_steps: int = 300
    lr: float = 2e-4
    balance_weight: float = 0.01
    batch_size: int = 8
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if (self.n_groups is None) == (self.k_max is None):
            raise ConfigError("set exactly one of n_groups and k_max")
        for name in ("seed", "d_embed", "d_model", "n_layers", "n_heads", "d_ff",
                     "max_seq_len", "n_experts", "adapter_rank", "top_k",
                     "pretrain_steps", "train_steps", "batch_size"):
            value = getattr(self, name)
            floor = 0 if name in ("seed", "pretrain_steps") else 1
            if not isinstance(value, int) or value < floor:
                raise ConfigError(f"{name} must be an integer >= {floor}, got {value!r}")
        for name in ("n_groups", "k_max"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, int) or value < 1):
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.balance_weight < 0:
            raise ConfigError(f"balance_weight must be >= 0, got {self.balance_weight}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError(
                f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}"
            )


_BOOL_WORDS = {"true": True, "false": False}


def _coerce(name: str, text: str, target_type) -> object:
    if target_type is bool:
        if text not in _BOOL_WORDS:
            raise ConfigError(f"{name}: expected true or false, got {text!r}")
        return _BOOL_WORDS[text]
    try:
        return target_type(text)
    except ValueError:
        raise ConfigError(
            f"{name}: expected {target_type.__name__}, got {text!r}"
        ) from None


def parse_run_config(path: str) -> RunConfig:
    """Read a flat key=value file; '#' starts a comment, blank lines skip.

    Unknown and duplicate keys are rejected so typos cannot silently fall
    back to defaults.
    """
    field_types = {
        f.name: (int if f.name in ("n_groups", "k_max") else f.type_resolved)
        for f in _resolved_fields()
    }
    values: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in field_types:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            values[key] = _coerce(key, value, field_types[key])
    return RunConfig(**values)


class _ResolvedField:
    def __init__(self, name, type_resolved):
        self.name = name
        self.type_resolved = type_resolved


def _resolved_fields() -> list[_ResolvedField]:
    base_types = {"int": int, "float": float, "bool": bool, "str": str}
    out = []
    for f in dataclasses.fields(RunConfig):
        ann = f.type if isinstance(f.type, str) else f.type.__name__
        ann = ann.split("|")[0].strip()
        out.append(_ResolvedField(f.name, base_types.get(ann, str)))
    return out


def write_run_config(path: str, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(RunConfig):
            value = getattr(cfg, f.name)
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{f.name}={value}\n")


def model_config_from(cfg: RunConfig, n_groups: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=VOCAB_SIZE,
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        max_seq_len=cfg.max_seq_len,
        d_ff=cfg.d_ff,
        n_groups=n_groups,
        n_experts=cfg.n_experts,
        adapter_rank=cfg.adapter_rank,
        top_k=cfg.top_k,
        mode=cfg.mode,
        renormalize=cfg.renormalize,
        moe_scale=cfg.moe_scale,
        variant=cfg.variant,
        activation=cfg.activation,
    )


def _mean_loss(losses: list[Tensor]) -> Tensor:
    total = reduce(add, losses)
    return mul(total, 1.0 / len(losses))


def _check_finite(value: float, phase: str, step: int) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value!r} at {phase} step {step}")


def _batch_indices(rng: np.random.Generator, n: int, size: int) -> list[int]:
    return [int(i) for i in rng.integers(0, n, size=size)]


def pipeline_train(cfg: RunConfig, records: list[InstructionRecord], out_dir: str) -> dict:
    """Run the full training pipeline and write all artifacts under out_dir.

    Stages: split, embed instructions, pick and fit the sequence clusters,
    pretrain the dense base, upcycle it, then train adapters and routers
    with the balance penalty. Returns a summary dict (also saved as JSON).
    """
    os.makedirs(out_dir, exist_ok=True)
    train, holdout = split_dataset(records, cfg.holdout_fraction, cfg.seed)

    emb = embed_dataset(
        [(r.record_id, r.instruction) for r in train], d_e=cfg.d_embed, seed=cfg.seed
    )
    save_embeddings(os.path.join(out_dir, EMBEDDINGS_FILE), emb)

    if cfg.k_max is not None:
        report = elbow_select(emb, k_max=cfg.k_max, seed=cfg.seed)
        report.write_csv(os.path.join(out_dir, ELBOW_FILE))
        n_groups = report.selected_k
    else:
        n_groups = cfg.n_groups
    km = kmeans_fit(emb, n_groups, seed=cfg.seed)
    save_kmeans(os.path.join(out_dir, KMEANS_FILE), km)
    group_labels = kmeans_predict(km, emb).labels

    mcfg = model_config_from(cfg, n_groups)
    examples = [training_pair(encode_example(r)) for r in train]

    metrics_path = os.path.join(out_dir, METRICS_FILE)
    with open(metrics_path, "w", encoding="utf-8") as metrics:
        dense = DenseBaseModel.build(mcfg, cfg.seed)
        _train_dense(cfg, dense, examples, metrics)
        moce = upcycle_init(dense, mcfg, cfg.seed)
        first_loss, last_loss = _train_adapters(cfg, moce, examples, group_labels, metrics)

    ckpt_dir = os.path.join(out_dir, CHECKPOINT_DIR)
    save_checkpoint(ckpt_dir, moce, seed=cfg.seed, step=cfg.train_steps,
                    kmeans_path=os.path.join("..", KMEANS_FILE))

    summary = {
        "n_train": len(train),
        "n_holdout": len(holdout),
        "n_groups": n_groups,
        "initial_lm_loss": first_loss,
        "final_lm_loss": last_loss,
        "checkpoint": ckpt_dir,
        "kmeans": os.path.join(out_dir, KMEANS_FILE),
        "metrics": metrics_path,
    }
    with open(os.path.join(out_dir, SUMMARY_FILE), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _train_dense(cfg: RunConfig, dense: DenseBaseModel, examples, metrics) -> None:
    if cfg.pretrain_steps == 0:
        return
    opt = Adam(dense.trainable_parameters(), lr=cfg.lr)
    order = substream(cfg.seed, "data_order", "pretrain")
    for step in range(cfg.pretrain_steps):
        losses = []
        for i in _batch_indices(order, len(examples), cfg.batch_size):
            inputs, targets, mask = examples[i]
            losses.append(lm_loss(dense.forward(inputs), targets, mask))
        loss = _mean_loss(losses)
        value = loss.item()
        _check_finite(value, "pretrain", step)
        backward(loss)
        opt.step()
        opt.zero_grad()
        metrics.write(json.dumps(
            {"phase": "pretrain", "step": step, "lm_loss": value}, sort_keys=True
        ) + "\n")


def _train_adapters(cfg: RunConfig, moce: MoCEModel, examples, group_labels, metrics):
    """Adapter and router training; returns (first, last) language loss."""
    opt = Adam(moce.trainable_parameters(), lr=cfg.lr)
    order = substream(cfg.seed, "data_order", "train")
    first = last = None
    for step in range(cfg.train_steps):
        record = RoutingRecord()
        losses = []
        for i in _batch_indices(order, len(examples), cfg.batch_size):
            inputs, targets, mask = examples[i]
            logits = moce.forward(inputs, int(group_labels[i]), record)
            losses.append(lm_loss(logits, targets, mask))
        lm = _mean_loss(losses)
        lm_value = lm.item()
        if cfg.balance_weight != 0.0:
            balance = load_balance_loss(record)
            balance_value = balance.item()
            loss = add(lm, mul(balance, cfg.balance_weight))
        else:
            balance_value = None
            loss = lm
        total_value = loss.item()
        _check_finite(total_value, "train", step)
        backward(loss)
        opt.step()
        opt.zero_grad()
        row = {"phase": "train", "step": step, "lm_loss": lm_value,
               "total_loss": total_value}
        if balance_value is not None:
            row["balance_loss"] = balance_value
        metrics.write(json.dumps(row, sort_keys=True) + "\n")
        if first is None:
            first = lm_value
        last = lm_value
    if first is None:
        raise ConfigError("train_steps must be at least 1 to fit the adapters")
    return first, last


def _load_run(run_dir: str) -> tuple[MoCEModel, KMeansModel, int]:
    ckpt_dir = os.path.join(run_dir, CHECKPOINT_DIR)
    model, entries = load_checkpoint(ckpt_dir)
    kmeans_rel = entries.get("kmeans_path", "")
    if not kmeans_rel:
        raise ConfigError(f"{ckpt_dir}: checkpoint records no k-means artifact")
    km = load_kmeans(os.path.normpath(os.path.join(ckpt_dir, kmeans_rel)))
    return model, km, int(entries["seed"])


def assign_group(km: KMeansModel, instruction: str, d_embed: int, seed: int) -> int:
    vec = embed_sequence(instruction, d_e=d_embed, seed=seed)
    return int(kmeans_predict(km, vec).labels[0])


def evaluate_records(model: MoCEModel, km: KMeansModel, seed: int,
                     records: list[InstructionRecord]) -> dict:
    """Greedy-decode every record with its cluster-chosen group.

    Reports exact match, teacher-forced NLL and perplexity, and the same
    broken out per source tag.
    """
    n_match = 0
    nll_sum = 0.0
    nll_tokens = 0
    by_source: dict[str, list[int]] = {}
    for r in records:
        group = assign_group(km, r.instruction, km.dimension, seed)
        prompt = prompt_ids(r)
        decoded = greedy_decode(
            model, prompt, group,
            max_new_tokens=model.cfg.max_seq_len - len(prompt), eos_id=EOS_ID,
        )
        match = completed_response(decoded[len(prompt):]) == r.response
        n_match += int(match)
        tally = by_source.setdefault(r.source or "unknown", [0, 0])
        tally[0] += int(match)
        tally[1] += 1
        inputs, targets, mask = training_pair(encode_example(r))
        nll = lm_loss(model.forward(inputs, group), targets, mask).item()
        nll_sum += nll * sum(mask)
        nll_tokens += int(sum(mask))
    mean_nll = nll_sum / nll_tokens
    return {
        "n_records": len(records),
        "exact_match": n_match / len(records),
        "mean_nll": mean_nll,
        "perplexity": float(np.exp(mean_nll)),
        "by_source": {
            src: {"exact_match": good / total, "n_records": total}
            for src, (good, total) in sorted(by_source.items())
        },
    }


def pipeline_eval(run_dir: str, records: list[InstructionRecord],
                  output_path: str | None = None) -> dict:
    model, km, seed = _load_run(run_dir)
    result = evaluate_records(model, km, seed, records)
    if output_path:
        with open(output_path, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return result


def route_statistics(run_dir: str, records: list[InstructionRecord],
                     out_dir: str) -> dict:
    """Forward the corpus once and export routing histograms.

    Writes groups.csv (sequences per expert group), routers.csv (per
    router and expert: top-1 load fraction, mean gate probability,
    selection count), routes.csv (every token-level assignment), and
    stats.json with the aggregate balance loss.
    """
    os.makedirs(out_dir, exist_ok=True)
    model, km, seed = _load_run(run_dir)
    record = RoutingRecord()
    group_counts: dict[int, int] = {}
    for r in records:
        group = assign_group(km, r.instruction, km.dimension, seed)
        group_counts[group] = group_counts.get(group, 0) + 1
        inputs, _, _ = training_pair(encode_example(r))
        model.forward(inputs, group, record)

    with open(os.path.join(out_dir, "groups.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "sequences"])
        for g in range(km.k):
            writer.writerow([g, group_counts.get(g, 0)])

    router_rows = []
    for key in sorted(record.routers):
        loads = record.load_fractions(key)
        probs = record.mean_gate_probs(key)
        selected = record.routers[key].selected_counts
        for i in range(len(loads)):
            router_rows.append([key, i, loads[i], probs[i], int(selected[i])])
    with open(os.path.join(out_dir, "routers.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["router", "expert", "load_fraction", "mean_gate_prob", "selections"])
        for key, i, load, prob, sel in router_rows:
            writer.writerow([key, i, f"{load:.17g}", f"{prob:.17g}", sel])

    record.write_csv(os.path.join(out_dir, "routes.csv"))

    stats = {
        "n_records": len(records),
        "tokens_seen": record.tokens_seen,
        "group_counts": {str(g): c for g, c in sorted(group_counts.items())},
        "balance_loss": load_balance_loss(record).item(),
        "max_load_fraction": max(
            (float(np.max(record.load_fractions(k))) for k in record.routers),
            default=0.0,
        ),
    }
    with open(os.path.join(out_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return stats


def ablation_grid(cfg: RunConfig) -> list[tuple[str, RunConfig]]:
    """The comparison matrix: three routing modes crossed with three
    structures, plus an expert-count scaling sweep.

    The no-token-routing column has a single expert, so top-2 there
    collapses to top-1; the row is kept with its effective settings so
    the table stays complete.
    """
    if cfg.n_groups is None:
        raise ConfigError("ablation needs a fixed n_groups, not k_max")
    rows: list[tuple[str, RunConfig]] = []

    def derive(label: str, **overrides) -> None:
        merged = dataclasses.replace(cfg, **overrides)
        rows.append((label, merged))

    for mode_label, mode_over in (
        ("top1", {"mode": "topk", "top_k": 1}),
        ("top2", {"mode": "topk", "top_k": min(2, cfg.n_experts)}),
        ("soft", {"mode": "soft", "top_k": cfg.n_experts}),
    ):
        derive(f"{mode_label}-dual", **mode_over)
        derive(f"{mode_label}-noclust", n_groups=1, **mode_over)
        notok = dict(mode_over, n_experts=1, top_k=1)
        derive(f"{mode_label}-notok", **notok)
    for n in (1, 2, 4):
        derive(f"scale-n{n}", mode="topk", n_experts=n, top_k=min(2, n))
    return rows


def ablation_run(cfg: RunConfig, records: list[InstructionRecord],
                 out_dir: str) -> list[dict]:
    """Train and evaluate every grid cell; writes ablation.csv and returns rows."""
    os.makedirs(out_dir, exist_ok=True)
    results = []
    for label, row_cfg in ablation_grid(cfg):
        row_dir = os.path.join(out_dir, label)
        summary = pipeline_train(row_cfg, records, row_dir)
        _, holdout = split_dataset(records, row_cfg.holdout_fraction, row_cfg.seed)
        eval_result = pipeline_eval(row_dir, holdout)
        results.append({
            "label": label,
            "mode": row_cfg.mode,
            "n_groups": summary["n_groups"],
            "n_experts": row_cfg.n_experts,
            "top_k": row_cfg.top_k,
            "final_lm_loss": summary["final_lm_loss"],
            "exact_match": eval_result["exact_match"],
            "perplexity": eval_result["perplexity"],
        })
    path = os.path.join(out_dir, "ablation.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "mode", "n_groups", "n_experts", "top_k",
                        "final_lm_loss", "exact_match", "perplexity"])
        for row in results:
            writer.writerow([
                row["label"], row["mode"], row["n_groups"], row["n_experts"],
                row["top_k"], f"{row['final_lm_loss']:.17g}",
                f"{row['exact_match']:.17g}", f"{row['perplexity']:.17g}",
            ])
    return results
