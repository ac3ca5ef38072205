import json
import math
from pathlib import Path

import numpy as np
import pytest

from xlpe.btg import AlignmentSet, Permutation, enumerate_btg_permutations
from xlpe.lab import (
    AERScore,
    CSV_COLUMNS,
    ExperimentReport,
    SyntheticPair,
    aer,
    alignment_from_cross_attn,
    chance_ceiling,
    config_hash,
    corpus_aer,
    evaluate,
    extract_alignment,
    format_summary_table,
    gen_dataset,
    render_figures,
    split_eval,
    summarize,
    sweep_noise,
    sweep_tau,
    train,
    write_report_csv,
    write_summary_json,
)
from xlpe.xlsan import Model, ModelConfig, init_params

TINY = dict(d_model=8, n_heads=2, tau=1, enc_layers=1, dec_layers=1,
            d_ff=8, vocab_size=7, seed=0)


def tiny_cfg(**over):
    return ModelConfig(**{**TINY, **over})


def tiny_data(n=48, seed=5):
    return gen_dataset(n, (3, 5), TINY["vocab_size"], 0.5, seed)


def links(*pairs):
    return frozenset(pairs)


def align(n, sure, possible=None):
    possible = sure if possible is None else possible
    return AlignmentSet(n_src=n, n_tgt=n, sure=sure, possible=possible)


# -- data generation ---------------------------------------------------------


def test_gen_dataset_is_deterministic():
    a = gen_dataset(20, (3, 6), 9, 0.5, seed=1)
    b = gen_dataset(20, (3, 6), 9, 0.5, seed=1)
    c = gen_dataset(20, (3, 6), 9, 0.5, seed=2)
    assert a == b
    assert a != c


def test_gen_dataset_pairs_are_consistent():
    for pair in gen_dataset(30, (3, 6), 9, 0.7, seed=3):
        T = len(pair.src)
        assert 3 <= T <= 6
        assert all(0 <= t < 9 for t in pair.src)
        slots = pair.perm.slots
        for i, token in enumerate(pair.src):
            assert pair.tgt[slots[i]] == token
        assert pair.alignment.sure == {(i, slots[i]) for i in range(T)}
        assert pair.alignment.sure == pair.alignment.possible


def test_gen_dataset_permutations_stay_inside_the_grammar():
    for pair in gen_dataset(40, (4, 4), 9, 0.5, seed=4):
        assert pair.perm.order in enumerate_btg_permutations(4)


def test_gen_dataset_p_invert_extremes():
    assert all(p.perm.is_identity
               for p in gen_dataset(10, (3, 5), 9, 0.0, seed=5))
    for p in gen_dataset(10, (3, 5), 9, 1.0, seed=6):
        assert p.perm.order == tuple(reversed(range(len(p.src))))


def test_gen_dataset_validates_inputs():
    with pytest.raises(ValueError):
        gen_dataset(5, (1, 4), 9, 0.5, seed=0)
    with pytest.raises(ValueError):
        gen_dataset(5, (5, 4), 9, 0.5, seed=0)
    with pytest.raises(ValueError):
        gen_dataset(5, (3, 4), 1, 0.5, seed=0)


def test_split_eval_holds_out_the_tail():
    pairs = tiny_data(10)
    train_pairs, eval_pairs = split_eval(pairs, 3)
    assert train_pairs == pairs[:7]
    assert eval_pairs == pairs[7:]
    with pytest.raises(ValueError):
        split_eval(pairs, 10)
    with pytest.raises(ValueError):
        split_eval(pairs, 0)


# -- AER ----------------------------------------------------------------------


def test_aer_worked_example():
    hyp = align(3, links((0, 0), (2, 2)))
    ref = align(3, links((0, 0), (1, 1)), links((0, 0), (1, 1), (2, 2)))
    score = aer(hyp, ref)
    assert score.aer == 0.25
    assert score.precision == 1.0
    assert score.recall == 0.5
    assert score.recall_defined


def test_aer_perfect_alignment_is_zero():
    ref = align(2, links((0, 1), (1, 0)))
    assert tuple(aer(ref, ref)) == (0.0, 1.0, 1.0)


def test_aer_disjoint_hypothesis():
    hyp = align(2, links((0, 0), (1, 1)))
    ref = align(2, links((0, 1), (1, 0)))
    score = aer(hyp, ref)
    assert score.aer == 1.0
    assert score.precision == 0.0
    assert score.recall == 0.0


def test_aer_empty_hypothesis_has_unit_precision():
    hyp = align(2, links())
    ref = align(2, links((0, 0)))
    score = aer(hyp, ref)
    assert score.precision == 1.0
    assert score.recall == 0.0
    assert score.aer == 1.0


def test_aer_empty_reference_flags_recall():
    hyp = align(2, links((0, 0)))
    ref = align(2, links())
    score = aer(hyp, ref)
    assert not score.recall_defined
    assert math.isnan(score.recall)
    assert score.aer == 1.0  # no sure/possible links can match
    both_empty = aer(align(2, links()), align(2, links()))
    assert both_empty.aer == 0.0


def test_aer_is_monotone_under_link_edits():
    base = links((0, 0), (3, 1))
    ref = align(4, links((0, 0), (1, 1), (2, 2)),
                links((0, 0), (1, 1), (2, 2), (3, 3)))
    before = aer(align(4, base), ref)
    # adding a correct sure link never hurts
    better = aer(align(4, base | {(1, 1)}), ref)
    assert better.aer <= before.aer
    # adding a link outside the possible set never helps
    worse = aer(align(4, base | {(2, 0)}), ref)
    assert worse.aer >= before.aer


def test_gold_alignment_scores_zero_against_itself():
    for pair in tiny_data(8):
        score = aer(pair.alignment, pair.alignment)
        assert (score.aer, score.precision, score.recall) == (0.0, 1.0, 1.0)


def test_corpus_aer_pools_counts_not_scores():
    perfect = align(4, links((0, 0), (1, 1), (2, 2), (3, 3)))
    bad_hyp = align(2, links((0, 1), (1, 0)))
    bad_ref = align(2, links((0, 0), (1, 1)))
    pooled = corpus_aer([(perfect, perfect), (bad_hyp, bad_ref)])
    # counts: matches 4+0=4 sure, 4+0=4 possible, |A|=6, |S|=6
    assert pooled.aer == 1.0 - (4 + 4) / (6 + 6)
    per_sentence_mean = (aer(perfect, perfect).aer + aer(bad_hyp, bad_ref).aer) / 2
    assert pooled.aer != per_sentence_mean


# -- alignment extraction -------------------------------------------------------


def one_hot_attention(shape, links_by_tgt):
    """(1, H, T_tgt, T_src) tensor with each target row peaked on a source."""
    H, T_tgt, T_src = shape
    attn = np.zeros((1, H, T_tgt, T_src))
    for t, s in links_by_tgt.items():
        attn[0, :, t, s] = 1.0
    return attn


def test_alignment_from_cross_attn_uses_penultimate_layer():
    first = one_hot_attention((2, 3, 3), {0: 2, 1: 1, 2: 0})
    last = one_hot_attention((2, 3, 3), {0: 0, 1: 1, 2: 2})
    got = alignment_from_cross_attn([first, last], item=0)
    assert got.sure == {(2, 0), (1, 1), (0, 2)}
    # with a single layer, that layer is used
    got = alignment_from_cross_attn([last], item=0)
    assert got.sure == {(0, 0), (1, 1), (2, 2)}


def test_alignment_ties_resolve_to_smallest_source_index():
    uniform = np.full((1, 1, 2, 4), 0.25)
    got = alignment_from_cross_attn([uniform], item=0)
    assert got.sure == {(0, 0), (0, 1)}


def test_extract_alignment_shape_contract():
    cfg = tiny_cfg(variant="inxl")
    pair = tiny_data(1)[0]
    hyp = extract_alignment(Model(cfg), pair)
    assert hyp.n_src == hyp.n_tgt == len(pair.src)
    assert len(hyp.sure) == len(pair.tgt)
    assert all(0 <= s < hyp.n_src and 0 <= t < hyp.n_tgt for s, t in hyp.sure)


# -- chance ceiling ---------------------------------------------------------------


def make_pair(src, order):
    perm = Permutation(tuple(order))
    slots = perm.slots
    tgt = tuple(src[j] for j in perm.order)
    linkset = frozenset((i, slots[i]) for i in range(len(src)))
    return SyntheticPair(tuple(src), tgt, perm,
                         AlignmentSet(len(src), len(src), linkset, linkset), 0)


def test_chance_ceiling_hand_example():
    # src (0,0,1) -> tgt (0,1,0): guesses 0,0,0 -> right, wrong, right
    pair = make_pair((0, 0, 1), (0, 2, 1))
    assert chance_ceiling([pair]) == pytest.approx(2 / 3)


def test_chance_ceiling_is_one_for_constant_sentences():
    pair = make_pair((4, 4, 4), (2, 1, 0))
    assert chance_ceiling([pair]) == 1.0


def test_chance_ceiling_bounds_real_data():
    pairs = tiny_data(30)
    c = chance_ceiling(pairs)
    assert 0.0 < c < 1.0


# -- training ---------------------------------------------------------------------


def test_train_zero_lr_leaves_parameters_at_init():
    cfg = tiny_cfg(variant="ape")
    data = tiny_data(24)
    rep = train(cfg, data, epochs=1, lr=0.0, batch=8)
    fresh = init_params(cfg)
    for k, p in rep.model.params.items():
        assert np.array_equal(p, fresh[k]), k
    baseline = evaluate(Model(cfg), data)
    assert rep.final_loss == baseline["loss"]
    assert rep.accuracy == baseline["accuracy"]


def test_train_initial_loss_near_log_vocab():
    cfg = tiny_cfg(variant="ape")
    rep = train(cfg, tiny_data(24), epochs=1, lr=0.0, batch=8)
    assert abs(rep.final_loss - math.log(TINY["vocab_size"])) < 0.5


def test_train_report_is_fully_populated_and_reproducible():
    cfg = tiny_cfg(variant="inxl")
    data = tiny_data(32)
    a = train(cfg, data, epochs=2, lr=3e-3, batch=8)
    b = train(cfg, data, epochs=2, lr=3e-3, batch=8)
    assert len(a.loss_curve) == 2
    assert a.n_params > 0 and not a.diverged
    assert a.loss_curve == b.loss_curve
    assert (a.final_loss, a.accuracy, a.aer, a.precision, a.recall) == (
        b.final_loss, b.accuracy, b.aer, b.precision, b.recall)
    assert a.row() == b.row()
    assert tuple(a.row()) == CSV_COLUMNS


def test_train_learns_on_trivial_task():
    # identity reordering with a tiny vocab: loss should clearly drop
    data = gen_dataset(64, (3, 4), 4, 0.0, seed=9)
    cfg = tiny_cfg(variant="ape")
    rep = train(cfg, data, epochs=4, lr=5e-3, batch=8)
    assert rep.loss_curve[-1] < rep.loss_curve[0] * 0.8


def test_train_aborts_on_divergence_with_report():
    cfg = tiny_cfg(variant="ape")
    with np.errstate(all="ignore"):
        rep = train(cfg, tiny_data(24), epochs=3, lr=float("inf"), batch=8)
    assert rep.diverged
    assert not math.isfinite(rep.final_loss)
    assert rep.wall_clock_sec >= 0.0


def test_train_rejects_unknown_schedule():
    with pytest.raises(Exception):
        train(tiny_cfg(), tiny_data(8), epochs=1, lr=1e-3, batch=4,
              schedule="cosine")


def test_evaluate_uses_clean_slots_even_with_noisy_training():
    cfg = tiny_cfg(variant="inxl")
    data = tiny_data(32)
    clean = train(cfg, data, epochs=1, lr=1e-3, batch=8)
    noisy = train(cfg, data, epochs=1, lr=1e-3, batch=8,
                  noise_ratio=0.5, noise_seed=3)
    assert clean.noise_ratio == 0.0 and noisy.noise_ratio == 0.5
    # same initialization, different training signal
    assert clean.loss_curve != noisy.loss_curve


# -- sweeps -----------------------------------------------------------------------


def test_sweep_tau_zero_cell_matches_separately_trained_baseline():
    data = tiny_data(32)
    sweep = sweep_tau(tiny_cfg(variant="headxl"), data, [0, 2],
                      epochs=1, lr=2e-3, batch=8)
    baseline = train(tiny_cfg(variant="ape", tau=0), data,
                     epochs=1, lr=2e-3, batch=8)
    by_tau = {r.tau: r for r in sweep}
    assert set(by_tau) == {0, 2}
    zero = by_tau[0]
    assert zero.loss_curve == baseline.loss_curve
    assert zero.final_loss == baseline.final_loss
    assert zero.accuracy == baseline.accuracy
    assert zero.aer == baseline.aer


def test_sweep_tau_covers_every_cell():
    data = tiny_data(24)
    reports = sweep_tau(tiny_cfg(variant="headxl"), data, [0, 1],
                        epochs=1, lr=1e-3, batch=8, seeds=[1, 2])
    assert [(r.tau, r.seed) for r in reports] == [(0, 1), (0, 2), (1, 1), (1, 2)]


def test_sweep_noise_zero_ratio_equals_clean_run():
    data = tiny_data(32)
    cfg = tiny_cfg(variant="inxl")
    reports = sweep_noise(cfg, data, [0.0, 0.25], [7],
                          epochs=1, lr=2e-3, batch=8)
    clean = train(ModelConfig(**{**TINY, "variant": "inxl", "seed": 7}),
                  data, epochs=1, lr=2e-3, batch=8)
    assert reports[0].noise_ratio == 0.0
    assert reports[0].loss_curve == clean.loss_curve
    assert reports[0].final_loss == clean.final_loss
    assert reports[1].noise_ratio == 0.25
    with pytest.raises(ValueError):
        sweep_noise(cfg, data, [0.0, 1.5], [7], epochs=1, lr=1e-3, batch=8)


# -- reports -----------------------------------------------------------------------


def small_reports():
    data = tiny_data(32)
    return sweep_tau(tiny_cfg(variant="headxl"), data, [0, 1],
                     epochs=1, lr=2e-3, batch=8, seeds=[1, 2])


def test_csv_layout_and_round_trip(tmp_path):
    reports = small_reports()
    path = tmp_path / "cells.csv"
    write_report_csv(reports, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + len(reports)
    first = dict(zip(CSV_COLUMNS, lines[1].split(",")))
    assert float(first["loss"]) == reports[0].final_loss
    assert float(first["aer"]) == reports[0].aer
    assert int(first["seed"]) == reports[0].seed


def test_summary_means_and_stdevs():
    reports = small_reports()
    summary = summarize(reports)
    assert summary["config"] == reports[0].config
    cells = {(c["variant"], c["tau"]): c for c in summary["cells"]}
    assert set(cells) == {("headxl", 0), ("headxl", 1)}
    for (variant, tau), cell in cells.items():
        members = [r for r in reports if r.tau == tau]
        accs = [r.accuracy for r in members]
        assert cell["accuracy_mean"] == pytest.approx(np.mean(accs))
        assert cell["accuracy_std"] == pytest.approx(np.std(accs))
        assert cell["seeds"] == [1, 2]


def test_report_files_are_byte_deterministic(tmp_path):
    a_dir, b_dir = tmp_path / "a", tmp_path / "b"
    a_dir.mkdir(), b_dir.mkdir()
    for out in (a_dir, b_dir):
        reports = small_reports()
        write_report_csv(reports, out / "cells.csv")
        write_summary_json(reports, out / "summary.json")
        render_figures(reports, out)
    for name in ("cells.csv", "summary.json", "loss_curves.png",
                 "metrics.png"):
        assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes(), name


def test_summary_json_is_valid_and_sorted(tmp_path):
    reports = small_reports()
    path = tmp_path / "summary.json"
    write_summary_json(reports, path)
    loaded = json.loads(path.read_text())
    assert loaded["cells"][0]["variant"] == "headxl"
    assert "accuracy_mean" in loaded["cells"][0]


def test_render_figures_writes_nonempty_pngs(tmp_path):
    written = render_figures(small_reports(), tmp_path)
    assert len(written) >= 2
    for f in written:
        data = Path(f).read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert len(data) > 1000


def test_format_summary_table_lists_cells():
    reports = small_reports()
    table = format_summary_table(reports)
    assert "headxl" in table
    assert "aer" in table.lower()


def test_config_hash_tracks_every_field():
    cfg = tiny_cfg(variant="headxl")
    h1 = config_hash(cfg, epochs=2)
    h2 = config_hash(cfg, epochs=3)
    h3 = config_hash(tiny_cfg(variant="inxl"), epochs=2)
    assert len(h1) == 10 and h1 != h2 and h1 != h3
    assert h1 == config_hash(tiny_cfg(variant="headxl"), epochs=2)
