"""Synthetic-translation experiment harness.

The task is copy-translation under a BTG-expressible reordering: the target
sentence is the source sentence permuted by a sampled BTG permutation, and
the gold word alignment is the permutation itself. Oracle reordering slots
(pos_XL) feed the XL model variants during training and evaluation, so any
accuracy or alignment gap between variants isolates how well an
architecture exploits cross-lingual positions.

Everything here is deterministic given (config, seed): dataset sampling,
batch order, parameter init, noise injection, and the written reports.
Wall-clock time is kept out of report files so repeated runs stay
byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import random
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .btg import AlignmentSet, Permutation, sample_btg_permutation
from .posenc import ConfigError, inject_noise
from .xlsan import Model, ModelConfig, count_parameters, cross_entropy

ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-9


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticPair:
    """One copy-translation example: tgt is src reordered by ``perm``;
    the gold alignment links every source token i to its slot."""

    src: tuple[int, ...]
    tgt: tuple[int, ...]
    perm: Permutation
    alignment: AlignmentSet
    seed: int

    def __post_init__(self):
        if len(self.tgt) != len(self.src):
            raise ValueError("copy-translation pairs must preserve length")


def gen_dataset(
    n_pairs: int,
    len_range: tuple[int, int],
    vocab: int,
    p_invert: float,
    seed: int,
) -> list[SyntheticPair]:
    """Sample ``n_pairs`` sentences with iid tokens and BTG-sampled
    reorderings. Deterministic in ``seed``."""
    lo, hi = len_range
    if vocab < 2:
        raise ValueError("vocab must be at least 2")
    if lo < 2 or hi < lo:
        raise ValueError(f"bad length range {len_range}")
    rng = random.Random(seed)
    pairs = []
    for _ in range(n_pairs):
        T = rng.randint(lo, hi)
        src = tuple(rng.randrange(vocab) for _ in range(T))
        pair_seed = rng.randrange(2**31)
        _, perm = sample_btg_permutation(T, p_invert, seed=pair_seed)
        slots = perm.slots
        tgt = tuple(src[j] for j in perm.order)
        links = frozenset((i, slots[i]) for i in range(T))
        alignment = AlignmentSet(
            n_src=T, n_tgt=T, sure=links, possible=links
        )
        pairs.append(SyntheticPair(src, tgt, perm, alignment, pair_seed))
    return pairs


def split_eval(pairs, n_eval: int):
    """Deterministic train/eval split: the last ``n_eval`` pairs are held
    out."""
    if not 0 < n_eval < len(pairs):
        raise ValueError("n_eval must leave a non-empty training set")
    return pairs[:-n_eval], pairs[-n_eval:]


# ---------------------------------------------------------------------------
# AER
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AERScore:
    """Alignment error rate with its precision/recall components.

    ``recall_defined`` is False when the reference has no sure links; the
    recall value is NaN in that case.
    """

    aer: float
    precision: float
    recall: float
    recall_defined: bool = True

    def __iter__(self):
        yield self.aer
        yield self.precision
        yield self.recall


def _aer_counts(hyp: AlignmentSet, ref: AlignmentSet):
    a = hyp.sure | hyp.possible
    return (
        len(a & ref.sure),
        len(a & ref.possible),
        len(a),
        len(ref.sure),
    )


def aer_from_counts(a_s: int, a_p: int, n_a: int, n_s: int) -> AERScore:
    precision = a_p / n_a if n_a else 1.0
    if n_s:
        recall, defined = a_s / n_s, True
    else:
        recall, defined = float("nan"), False
    denom = n_a + n_s
    score = 1.0 - (a_s + a_p) / denom if denom else 0.0
    return AERScore(score, precision, recall, defined)


def aer(hyp: AlignmentSet, ref: AlignmentSet) -> AERScore:
    """AER = 1 - (|A∩S| + |A∩P|) / (|A| + |S|) for one sentence pair."""
    return aer_from_counts(*_aer_counts(hyp, ref))


def corpus_aer(scored: list[tuple[AlignmentSet, AlignmentSet]]) -> AERScore:
    """Corpus-level AER: link counts are pooled before the ratio is taken."""
    totals = [0, 0, 0, 0]
    for hyp, ref in scored:
        for k, c in enumerate(_aer_counts(hyp, ref)):
            totals[k] += c
    return aer_from_counts(*totals)


# ---------------------------------------------------------------------------
# alignment extraction
# ---------------------------------------------------------------------------


def _links_from_attention(attn_mean: np.ndarray) -> frozenset[tuple[int, int]]:
    # attn_mean: (T_tgt, T_src); argmax returns the smallest index on ties
    return frozenset(
        (int(np.argmax(attn_mean[t])), t) for t in range(attn_mean.shape[0])
    )


def _penultimate(layers: list) -> int:
    return max(len(layers) - 2, 0)


def alignment_from_cross_attn(cross_attn: list[np.ndarray], item: int) -> AlignmentSet:
    """Hypothesis alignment for one batch item: head-averaged weights of
    the penultimate decoder layer, one argmax link per target position."""
    attn = cross_attn[_penultimate(cross_attn)][item]  # (H, T_tgt, T_src)
    links = _links_from_attention(attn.mean(axis=0))
    n_tgt, n_src = attn.shape[1], attn.shape[2]
    return AlignmentSet(n_src=n_src, n_tgt=n_tgt, sure=links, possible=links)


def extract_alignment(model: Model, pair: SyntheticPair) -> AlignmentSet:
    """Run one teacher-forced pass and read the alignment off the decoder
    cross-attention."""
    src = np.array([pair.src])
    tgt = np.array([pair.tgt])
    slots = np.array([pair.perm.slots]) if model.cfg.uses_xl else None
    _, _, dec_cache = model.forward(src, tgt, slots)
    return alignment_from_cross_attn(dec_cache["cross_attn"], 0)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class ExperimentReport:
    """Metrics of one training cell, bit-reproducible from (config, seed).

    ``wall_clock_sec`` is informational only and never written to report
    files.
    """

    config: dict
    config_hash: str
    variant: str
    tau: int
    noise_ratio: float
    seed: int
    n_params: int
    loss_curve: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    accuracy: float = float("nan")
    aer: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    diverged: bool = False
    wall_clock_sec: float = 0.0
    model: Model | None = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "tau": self.tau,
            "noise_ratio": self.noise_ratio,
            "seed": self.seed,
            "loss": self.final_loss,
            "accuracy": self.accuracy,
            "aer": self.aer,
            "precision": self.precision,
            "recall": self.recall,
        }


def config_hash(cfg: ModelConfig, **extra) -> str:
    payload = dict(cfg.to_dict(), **extra)
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.md5(blob).hexdigest()[:10]


def _training_slots(pairs, noise_ratio: float, noise_seed: int):
    """Per-pair reordering slots, optionally corrupted by random
    transpositions. Deterministic per (pair seed, noise seed)."""
    out = []
    for p in pairs:
        perm = p.perm
        if noise_ratio > 0.0:
            perm = inject_noise(perm, noise_ratio, seed=noise_seed * 1000003 + p.seed)
        out.append(perm.slots)
    return out


def _length_batches(lengths, batch: int, rng=None):
    """Indices grouped into same-length batches; shuffled when an rng is
    given, stable otherwise."""
    buckets = defaultdict(list)
    for idx, T in enumerate(lengths):
        buckets[T].append(idx)
    batches = []
    for T in sorted(buckets):
        ids = buckets[T]
        if rng is not None:
            ids = [ids[k] for k in rng.permutation(len(ids))]
        batches.extend(ids[i : i + batch] for i in range(0, len(ids), batch))
    if rng is not None:
        batches = [batches[k] for k in rng.permutation(len(batches))]
    return batches


def _stack(pairs, slot_list, ids):
    src = np.array([pairs[i].src for i in ids])
    tgt = np.array([pairs[i].tgt for i in ids])
    slots = np.array([slot_list[i] for i in ids]) if slot_list is not None else None
    return src, tgt, slots


def evaluate(model: Model, pairs: list[SyntheticPair], batch: int = 64):
    """Teacher-forced metrics over ``pairs``: mean token loss, token
    accuracy, and corpus AER of the extracted alignments."""
    slot_list = (
        [p.perm.slots for p in pairs] if model.cfg.uses_xl else None
    )
    n_tokens = 0
    loss_sum = 0.0
    n_correct = 0
    counts = [0, 0, 0, 0]
    for ids in _length_batches([len(p.src) for p in pairs], batch):
        src, tgt, slots = _stack(pairs, slot_list, ids)
        logits, _, dec_cache = model.forward(src, tgt, slots)
        loss, _ = cross_entropy(logits, tgt)
        B, T = tgt.shape
        loss_sum += loss * B * T
        n_tokens += B * T
        n_correct += int(np.sum(np.argmax(logits, axis=-1) == tgt))
        for b, idx in enumerate(ids):
            hyp = alignment_from_cross_attn(dec_cache["cross_attn"], b)
            for k, c in enumerate(_aer_counts(hyp, pairs[idx].alignment)):
                counts[k] += c
    score = aer_from_counts(*counts)
    return {
        "loss": loss_sum / n_tokens,
        "accuracy": n_correct / n_tokens,
        "aer": score.aer,
        "precision": score.precision,
        "recall": score.recall,
    }


def train(
    cfg: ModelConfig,
    data: list[SyntheticPair],
    epochs: int,
    lr: float,
    batch: int,
    *,
    eval_data: list[SyntheticPair] | None = None,
    noise_ratio: float = 0.0,
    noise_seed: int = 0,
    schedule: str = "linear",
) -> ExperimentReport:
    """Adam training on token cross-entropy; aborts (with a report) on
    non-finite loss. Evaluation uses clean oracle slots even when training
    slots are noise-injected.

    ``schedule`` picks the step-size profile: "linear" ramps up over the
    first tenth of all steps and then decays to zero (stabilises the final
    epochs), "const" holds ``lr`` fixed.
    """
    if schedule not in ("linear", "const"):
        raise ConfigError(f"unknown lr schedule {schedule!r}")
    cfg.validate()
    model = Model(cfg)
    eval_pairs = data if eval_data is None else eval_data
    report = ExperimentReport(
        config=dict(cfg.to_dict(), epochs=epochs, lr=lr, batch=batch,
                    noise_ratio=noise_ratio),
        config_hash=config_hash(cfg, epochs=epochs, lr=lr, batch=batch,
                                noise_ratio=noise_ratio),
        variant=cfg.variant,
        tau=cfg.tau,
        noise_ratio=noise_ratio,
        seed=cfg.seed,
        n_params=count_parameters(cfg),
    )
    t0 = time.perf_counter()
    slot_list = (
        _training_slots(data, noise_ratio, noise_seed) if cfg.uses_xl else None
    )
    lengths = [len(p.src) for p in data]
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    beta1, beta2 = ADAM_BETAS
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(vv) for k, vv in model.params.items()}
    step = 0
    steps_per_epoch = len(_length_batches(lengths, batch))
    total_steps = max(1, epochs * steps_per_epoch)
    warmup = max(1, total_steps // 10)
    for _ in range(epochs):
        epoch_loss, epoch_tokens = 0.0, 0
        for ids in _length_batches(lengths, batch, shuffle_rng):
            src, tgt, slots = _stack(data, slot_list, ids)
            loss, grads, _ = model.loss_and_grads(src, tgt, slots)
            if not math.isfinite(loss):
                report.diverged = True
                report.loss_curve.append(loss)
                report.final_loss = loss
                report.wall_clock_sec = time.perf_counter() - t0
                return report
            ntok = tgt.size
            epoch_loss += loss * ntok
            epoch_tokens += ntok
            step += 1
            if schedule == "const":
                lr_t = lr
            elif step <= warmup:
                lr_t = lr * step / warmup
            else:
                lr_t = lr * (total_steps - step) / max(1, total_steps - warmup)
            for k, p in model.params.items():
                g = grads[k]
                m[k] = beta1 * m[k] + (1.0 - beta1) * g
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g
                mhat = m[k] / (1.0 - beta1**step)
                vhat = v[k] / (1.0 - beta2**step)
                p -= lr_t * mhat / (np.sqrt(vhat) + ADAM_EPS)
        report.loss_curve.append(epoch_loss / epoch_tokens)
    metrics = evaluate(model, eval_pairs, batch)
    report.final_loss = metrics["loss"]
    report.accuracy = metrics["accuracy"]
    report.aer = metrics["aer"]
    report.precision = metrics["precision"]
    report.recall = metrics["recall"]
    report.wall_clock_sec = time.perf_counter() - t0
    report.model = model
    return report


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def sweep_tau(
    cfg: ModelConfig,
    data: list[SyntheticPair],
    taus: list[int],
    *,
    epochs: int,
    lr: float,
    batch: int,
    seeds: list[int] | None = None,
    eval_data=None,
    schedule: str = "linear",
) -> list[ExperimentReport]:
    """One training cell per (τ, seed) with everything else shared."""
    seeds = [cfg.seed] if seeds is None else list(seeds)
    reports = []
    for tau in taus:
        for s in seeds:
            cell = replace(cfg, tau=tau, seed=s)
            reports.append(
                train(cell, data, epochs, lr, batch, eval_data=eval_data,
                      schedule=schedule)
            )
    return reports


def sweep_noise(
    cfg: ModelConfig,
    data: list[SyntheticPair],
    ratios: list[float],
    seeds: list[int],
    *,
    epochs: int,
    lr: float,
    batch: int,
    eval_data=None,
    schedule: str = "linear",
) -> list[ExperimentReport]:
    """Noise-injected training slots per (ratio, seed); the evaluation set
    and its oracle slots stay clean."""
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"noise ratio {r} outside [0, 1]")
    reports = []
    for ratio in ratios:
        for s in seeds:
            cell = replace(cfg, seed=s)
            reports.append(
                train(cell, data, epochs, lr, batch, eval_data=eval_data,
                      noise_ratio=ratio, noise_seed=s, schedule=schedule)
            )
    return reports


# ---------------------------------------------------------------------------
# position-free ceiling
# ---------------------------------------------------------------------------


def chance_ceiling(pairs: list[SyntheticPair]) -> float:
    """Best possible token accuracy for a predictor that sees the source
    multiset and the gold target prefix but no position information.

    Token values are sampled independently of the permutation, so the
    Bayes-optimal guess at each step is any modal token of the remaining
    multiset; we take the smallest such token id.
    """
    correct, total = 0, 0
    for p in pairs:
        remaining = Counter(p.src)
        for t in p.tgt:
            best = max(remaining.items(), key=lambda kv: (kv[1], -kv[0]))[0]
            correct += int(t == best)
            total += 1
            remaining[t] -= 1
            if remaining[t] == 0:
                del remaining[t]
    return correct / total


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

CSV_COLUMNS = (
    "config_hash", "tau", "noise_ratio", "seed",
    "loss", "accuracy", "aer", "precision", "recall",
)


def write_report_csv(reports: list[ExperimentReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rep in reports:
            row = rep.row()
            writer.writerow({k: _fmt(row[k]) for k in CSV_COLUMNS})


def _fmt(value):
    return repr(float(value)) if isinstance(value, float) else value


def _group_key(rep: ExperimentReport):
    return (rep.variant, rep.tau, rep.noise_ratio)


def summarize(reports: list[ExperimentReport]) -> dict:
    """Mean/stddev per (variant, τ, ratio) group, plus the config echo."""
    groups = defaultdict(list)
    for rep in reports:
        groups[_group_key(rep)].append(rep)
    cells = []
    for key in sorted(groups):
        reps = groups[key]
        cell = {
            "variant": key[0],
            "tau": key[1],
            "noise_ratio": key[2],
            "seeds": [r.seed for r in reps],
            "n_params": reps[0].n_params,
            "diverged": any(r.diverged for r in reps),
        }
        for metric in ("final_loss", "accuracy", "aer", "precision", "recall"):
            vals = [getattr(r, metric) for r in reps]
            cell[f"{metric}_mean"] = float(np.mean(vals))
            cell[f"{metric}_std"] = float(np.std(vals))
        cells.append(cell)
    return {"config": reports[0].config, "cells": cells}


def write_summary_json(reports: list[ExperimentReport], path) -> None:
    with open(path, "w") as fh:
        json.dump(summarize(reports), fh, indent=2, sort_keys=True)
        fh.write("\n")


def render_figures(reports: list[ExperimentReport], out_dir) -> list[str]:
    """Loss curves plus metric-vs-sweep panels as PNGs next to the CSV.

    PNG metadata is pinned so repeated runs are byte-identical.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = str(out_dir)
    meta = {"Software": "xlpe"}
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        label = f"{rep.variant} tau={rep.tau} r={rep.noise_ratio} s={rep.seed}"
        ax.plot(range(1, len(rep.loss_curve) + 1), rep.loss_curve, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    if len(reports) <= 12:
        ax.legend(fontsize=6)
    fig.tight_layout()
    path = f"{out_dir}/loss_curves.png"
    fig.savefig(path, dpi=120, metadata=meta)
    plt.close(fig)
    written.append(path)

    summary = summarize(reports)["cells"]
    taus = sorted({c["tau"] for c in summary})
    ratios = sorted({c["noise_ratio"] for c in summary})
    variants = sorted({c["variant"] for c in summary})
    if len(taus) > 1:
        x_key, xlabel = "tau", "tau (XL heads)"
    elif len(ratios) > 1:
        x_key, xlabel = "noise_ratio", "noise ratio"
    else:
        x_key, xlabel = "variant", "variant"
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, metric in zip(axes, ("accuracy", "aer")):
        for variant in variants:
            cells = [c for c in summary if c["variant"] == variant]
            cells.sort(key=lambda c: (str(c[x_key]),))
            xs = [c[x_key] for c in cells]
            ys = [c[f"{metric}_mean"] for c in cells]
            es = [c[f"{metric}_std"] for c in cells]
            if x_key == "variant":
                ax.bar(xs, ys, yerr=es, capsize=3)
            else:
                ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3,
                            label=variant)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(metric)
        if x_key != "variant" and len(variants) > 1:
            ax.legend(fontsize=7)
    fig.tight_layout()
    path = f"{out_dir}/metrics.png"
    fig.savefig(path, dpi=120, metadata=meta)
    plt.close(fig)
    written.append(path)
    return written


def format_summary_table(reports: list[ExperimentReport]) -> str:
    """Fixed-width console table; includes wall clock, which is why this
    never goes into a report file."""
    header = (
        f"{'variant':14s} {'tau':>3s} {'ratio':>6s} {'seed':>5s} "
        f"{'loss':>8s} {'acc':>7s} {'aer':>7s} {'sec':>7s}"
    )
    lines = [header]
    for rep in reports:
        lines.append(
            f"{rep.variant:14s} {rep.tau:3d} {rep.noise_ratio:6.2f} "
            f"{rep.seed:5d} {rep.final_loss:8.4f} {rep.accuracy:7.4f} "
            f"{rep.aer:7.4f} {rep.wall_clock_sec:7.1f}"
            + ("  DIVERGED" if rep.diverged else "")
        )
    return "\n".join(lines)
