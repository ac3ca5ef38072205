"""Command-line surface for the reordering/encoding/training pipeline.

Commands: ``reorder`` (corpus + Pharaoh alignments -> index lines),
``pe-dump`` (position-encoding rows as CSV), ``train`` / ``sweep-tau`` /
``sweep-noise`` (experiment cells -> CSV + JSON summary + figures), and
``eval-align`` (score hypothesis alignments against a reference).

Exit codes: 0 success, 2 input/config error, 3 runtime/numeric failure.
All outputs are byte-identical across repeated runs with the same config
and seed.
"""

from __future__ import annotations

import argparse
import math
import re
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from . import btg, lab, posenc
from .btg import AlignmentParseError, CapacityError, Permutation
from .posenc import ConfigError
from .xlsan import VARIANTS, ModelConfig

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}


@dataclass
class RunConfig:
    """Effective experiment configuration: ModelConfig fields plus data,
    training, and sweep knobs. Built from a key=value file with flag
    overrides applied on top (flags win); unknown keys are rejected."""

    # model
    d_model: int = 64
    n_heads: int = 8
    tau: int = 2
    variant: str = "ape"
    enc_layers: int = 2
    dec_layers: int = 2
    d_ff: int = 128
    vocab_size: int = 50
    fusion_mode: str = "full"
    xl_inject: str = "per-layer"
    seed: int = 0
    # data
    n_pairs: int = 2000
    len_min: int = 8
    len_max: int = 16
    p_invert: float = 0.5
    data_seed: int = 1234
    n_eval: int = 200
    # training
    epochs: int = 2
    lr: float = 3e-3
    batch: int = 64
    schedule: str = "linear"
    noise_ratio: float = 0.0
    noise_seed: int = 0
    # sweeps
    taus: tuple[int, ...] = (0, 2, 4, 8)
    ratios: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2)
    seeds: tuple[int, ...] = ()
    # output
    out_dir: str = "runs"
    figures: bool = True

    def model_config(self, **overrides) -> ModelConfig:
        kw = {k: getattr(self, k) for k in _MODEL_KEYS}
        kw.update(overrides)
        return ModelConfig(**kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        # tuple-valued keys take comma-separated entries
        elem = float if key == "ratios" else int
        if not raw:
            return ()
        return tuple(elem(part.strip()) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    kinds = {f.name: type(getattr(cfg, f.name)) for f in fields(RunConfig)}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in kinds:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(raw, kinds[key], key))
    return cfg


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "variant", None) is not None:
        cfg.variant = args.variant
    if getattr(args, "tau", None) is not None:
        cfg.tau = args.tau
    if getattr(args, "noise_ratio", None) is not None:
        cfg.noise_ratio = args.noise_ratio
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_reorder(args) -> int:
    corpus = Path(args.corpus).read_text().splitlines()
    alignments = Path(args.alignment).read_text().splitlines()
    results = btg.reorder_corpus(corpus, alignments)
    with open(args.out, "w") as fh:
        for res in results:
            fh.write(btg.format_indices(res.permutation) + "\n")
    if args.trees:
        with open(args.trees, "w") as fh:
            for res in results:
                fh.write(btg.brackets(res.tree) + "\n")
    print(f"reordered {len(results)} sentences -> {args.out}")
    return 0


def _parse_index_line(line: str, lineno: int) -> Permutation:
    try:
        slots = [int(tok) for tok in line.split()]
        return Permutation.from_slots(slots)
    except ValueError as exc:
        raise ConfigError(f"line {lineno}: bad index line: {exc}") from None


def cmd_pe_dump(args) -> int:
    if (args.indices is None) == (args.absolute is None):
        raise ConfigError("pe-dump needs an indices file or --absolute T")
    if args.absolute is not None:
        if args.absolute < 1:
            raise ConfigError("--absolute length must be >= 1")
        perms = [Permutation.identity(args.absolute)]
    else:
        lines = Path(args.indices).read_text().splitlines()
        perms = [
            _parse_index_line(line, i)
            for i, line in enumerate(lines, 1)
            if line.strip()
        ]
        if not perms:
            raise ConfigError(f"{args.indices}: no index lines")
    with open(args.out, "w") as fh:
        for perm in perms:
            posenc.pe_rows_to_csv(
                posenc.xl_pe(perm, args.d_model), perm.slots, fh
            )
    print(f"wrote PE rows for {len(perms)} sentence(s) -> {args.out}")
    return 0


def _run_cells(run: RunConfig, reports, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        rep.config = dict(rep.config, run_config=run.to_dict())
    lab.write_report_csv(reports, out_dir / "report.csv")
    lab.write_summary_json(reports, out_dir / "summary.json")
    if run.figures:
        lab.render_figures(reports, out_dir)
    print(lab.format_summary_table(reports))
    print(f"report written to {out_dir}")
    if any(rep.diverged for rep in reports):
        print("training diverged (non-finite loss)", file=sys.stderr)
        return 3
    bad = [
        rep for rep in reports
        if not (math.isfinite(rep.accuracy) and math.isfinite(rep.aer))
    ]
    if bad:
        print("non-finite metrics in report", file=sys.stderr)
        return 3
    return 0


def _dataset(run: RunConfig):
    pairs = lab.gen_dataset(
        run.n_pairs, (run.len_min, run.len_max), run.vocab_size,
        run.p_invert, run.data_seed,
    )
    return lab.split_eval(pairs, run.n_eval)


def cmd_train(args) -> int:
    run = _apply_overrides(load_run_config(args.config), args)
    train_pairs, eval_pairs = _dataset(run)
    report = lab.train(
        run.model_config(), train_pairs, run.epochs, run.lr, run.batch,
        eval_data=eval_pairs, noise_ratio=run.noise_ratio,
        noise_seed=run.noise_seed, schedule=run.schedule,
    )
    return _run_cells(run, [report], Path(run.out_dir))


def cmd_sweep_tau(args) -> int:
    run = _apply_overrides(load_run_config(args.config), args)
    if run.variant == "ape":
        run.variant = "headxl"  # τ only means something with split heads
    train_pairs, eval_pairs = _dataset(run)
    seeds = list(run.seeds) or [run.seed]
    reports = lab.sweep_tau(
        run.model_config(), train_pairs, list(run.taus),
        epochs=run.epochs, lr=run.lr, batch=run.batch, seeds=seeds,
        eval_data=eval_pairs, schedule=run.schedule,
    )
    return _run_cells(run, reports, Path(run.out_dir))


def cmd_sweep_noise(args) -> int:
    run = _apply_overrides(load_run_config(args.config), args)
    if run.variant in ("ape", "nopos"):
        raise ConfigError(
            f"noise sweep needs an XL variant, got {run.variant!r}"
        )
    train_pairs, eval_pairs = _dataset(run)
    seeds = list(run.seeds) or [run.seed]
    reports = lab.sweep_noise(
        run.model_config(), train_pairs, list(run.ratios), seeds,
        epochs=run.epochs, lr=run.lr, batch=run.batch, eval_data=eval_pairs,
        schedule=run.schedule,
    )
    return _run_cells(run, reports, Path(run.out_dir))


_LINK_RE = re.compile(r"(\d+)[-?](\d+)")


def _alignment_bounds(*lines: str) -> tuple[int, int]:
    n_src = n_tgt = 1
    for line in lines:
        for i, j in _LINK_RE.findall(line):
            n_src = max(n_src, int(i) + 1)
            n_tgt = max(n_tgt, int(j) + 1)
    return n_src, n_tgt


def cmd_eval_align(args) -> int:
    hyp_lines = Path(args.hyp).read_text().splitlines()
    ref_lines = Path(args.ref).read_text().splitlines()
    if len(hyp_lines) != len(ref_lines):
        raise ConfigError(
            f"hypothesis has {len(hyp_lines)} lines, reference has "
            f"{len(ref_lines)}"
        )
    scored = []
    for lineno, (h, r) in enumerate(zip(hyp_lines, ref_lines), 1):
        try:
            n_src, n_tgt = _alignment_bounds(h, r)
            hyp = btg.parse_pharaoh(h, n_src, n_tgt)
            ref = btg.parse_pharaoh(r, n_src, n_tgt)
        except AlignmentParseError as exc:
            raise ConfigError(f"line {lineno}: {exc.raw_message}") from None
        scored.append((hyp, ref))
    score = lab.corpus_aer(scored)
    recall = score.recall if score.recall_defined else float("nan")
    header = "aer,precision,recall,pairs"
    row = f"{float(score.aer)!r},{float(score.precision)!r},{float(recall)!r},{len(scored)}"
    if args.out:
        Path(args.out).write_text(header + "\n" + row + "\n")
    print(header)
    print(row)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xlpe",
        description="BTG oracle reordering, cross-lingual position "
        "encodings, and the synthetic-translation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reorder", help="corpus + alignments -> index lines")
    p.add_argument("corpus")
    p.add_argument("alignment")
    p.add_argument("--out", required=True)
    p.add_argument("--trees", help="also write bracketed BTG trees here")
    p.set_defaults(func=cmd_reorder)

    p = sub.add_parser("pe-dump", help="position-encoding rows as CSV")
    p.add_argument("indices", nargs="?")
    p.add_argument("--absolute", type=int, metavar="T",
                   help="dump absolute PE for a length-T sentence")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pe_dump)

    for name, func in (
        ("train", cmd_train),
        ("sweep-tau", cmd_sweep_tau),
        ("sweep-noise", cmd_sweep_noise),
    ):
        p = sub.add_parser(name, help=f"run {name.replace('-', ' ')}")
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=list(VARIANTS))
        p.add_argument("--tau", type=int)
        p.add_argument("--noise-ratio", type=float, dest="noise_ratio")
        p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("eval-align", help="score alignments (AER)")
    p.add_argument("hyp")
    p.add_argument("ref")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_align)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, AlignmentParseError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
