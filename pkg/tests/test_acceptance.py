"""Acceptance gate: one test per criterion, each printing a single pass/fail line."""

import math
import time

import numpy as np
import pytest

from abevo.corpus import cluster_filter, shuffle_and_chunk, split_chunks
from abevo.evaluation import auc, binder_match, chi2_contingency, f1_binary, kruskal_wallis, mcc, welch_t
from abevo.model import ModelConfig, Transformer
from abevo.objectives import KEEP, MASKED, RANDOM, encode_sequences, mlm_plan
from abevo.seqcore import sequence_identity
from abevo.simgen import GeneLibrary, LibraryConfig, RepertoireSpec, generate_repertoire
from abevo.tasks import TaskConfig, run_discovery
from abevo.train import TrainConfig, check_head_gradients, pretrain

from test_cli import pipeline, tree
from test_corpus import greedy_reference, random_corpus
from test_eval import (brute_auc, oracle_chi2_sf, oracle_chi2_stat, oracle_kruskal, oracle_t_two_sided,
                       oracle_welch)
from test_seqcore import BINDER_TABLE

DESK_LIBRARY = LibraryConfig(v_len_min=28, v_len_max=34, d_len_min=4, d_len_max=8, j_len_min=8, j_len_max=10)


def test_criterion_1_identity_table(criterion):
    t = time.perf_counter()
    got = [round(sequence_identity(q, s), 3) for q, s, _ in BINDER_TABLE]
    elapsed = time.perf_counter() - t
    want = [v for _, _, v in BINDER_TABLE]
    ok = got == want and len(got) == 11 and elapsed < 1.0
    criterion(1, "identity table", ok, f"{sum(a == b for a, b in zip(got, want))}/11 values match in {elapsed:.4f} s")


def test_criterion_2_hit_rate(criterion):
    rng = np.random.default_rng(0)
    letters = np.array(list("ACDEFGHIKLMNPQRSTVWY"))
    binders = ["".join(rng.choice(letters, size=14)) for _ in range(66)]
    predicted = []
    for b in binders:  # one substitution: identity 13/14 >= 0.85
        s = list(b)
        s[5] = "W" if s[5] != "W" else "Y"
        predicted.append(("".join(s), float(rng.uniform(0.51, 1.0))))
    while len(predicted) < 13253:
        predicted.append(("".join(rng.choice(letters, size=12)), float(rng.uniform(0.5001, 1.0))))
    # below-threshold entries, including exact binders, must not count
    predicted += [(b, 0.5) for b in binders] + [("".join(rng.choice(letters, size=12)), 0.2) for _ in range(500)]
    row, _ = binder_match(predicted, binders, 0.5, 0.85)
    shown = f"{row.hit_rate:.3f}"
    ok = (row.total, row.hits) == (13253, 66) and shown == "0.498"
    criterion(2, "hit-rate arithmetic", ok, f"{row.hits}/{row.total} = {shown}% (table: 0.498%)")


def test_criterion_3_gradients(criterion):
    t = time.perf_counter()
    errors = check_head_gradients(ModelConfig(layers=2, heads=2, hidden=8, ffn=16, max_len=64, dtype="float64"),
                                  n_checks=300)
    elapsed = time.perf_counter() - t
    worst = max(errors.values())
    ok = set(errors) == {"mlm", "agp", "mpp"} and worst < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in sorted(errors.items()))
    criterion(3, "gradient check", ok, f"{detail}; {elapsed:.1f} s")


@pytest.mark.slow
def test_criterion_4_pretraining_diagnostics(criterion):
    t = time.perf_counter()
    spec = RepertoireSpec(n_profiles=1, sequences_per_profile=10_000, shm_rate=0.05, stage_multipliers=(1.0,) * 6,
                          seed=0)
    records = generate_repertoire(spec, GeneLibrary.random(DESK_LIBRARY))
    train, valid = split_chunks(shuffle_and_chunk(records, 9000, seed=0))
    mlm = TrainConfig(phase="mlm", steps=800, lr=1e-3, warmup=100, eval_interval=800, eval_records=500)
    evo = TrainConfig(phase="evolution", steps=900, lr=3e-4, warmup=100, eval_interval=900, eval_records=500)
    res = pretrain(train, valid, ModelConfig(layers=2, hidden=64, dtype="float32"), mlm, evo)
    elapsed = time.perf_counter() - t
    base = [d for d in res.history if d.phase == "mlm"][-1]
    full = res.history[-1]
    ok = (full.position_accuracy >= 0.95 and full.germline_accuracy >= 0.95
          and full.mutation_accuracy > 0 and full.mutation_accuracy >= 2 * base.mutation_accuracy
          and elapsed <= 30 * 60)
    criterion(4, "pretraining diagnostics", ok,
              f"position {full.position_accuracy:.3f}, AGP {full.germline_accuracy:.3f}, mutation "
              f"{full.mutation_accuracy:.3f} vs MLM-only {base.mutation_accuracy:.3f}; {elapsed / 60:.1f} min")


def test_criterion_5_metric_oracles(criterion):
    rng = np.random.default_rng(55)
    auc_ok = mcc_ok = 0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 6, size=n) / 6
        auc_ok += auc(s, y) == brute_auc(s.tolist(), y.tolist())
        p = rng.integers(0, 2, size=n)
        tp = int(((p == 1) & (y == 1)).sum())
        tn = int(((p == 0) & (y == 0)).sum())
        fp = int(((p == 1) & (y == 0)).sum())
        fn = int(((p == 0) & (y == 1)).sum())
        den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        f1_ok = abs(f1_binary(p, y) - (2 * tp / (2 * tp + fp + fn) if tp else 0.0)) <= 1e-12
        m_ok = den == 0 or abs(mcc(p, y) - (tp * tn - fp * fn) / math.sqrt(den)) <= 1e-12
        mcc_ok += f1_ok and m_ok
    worst = 0.0
    for _ in range(50):
        r, c = rng.integers(2, 5, size=2)
        table = rng.integers(1, 40, size=(r, c)).tolist()
        stat, dof = oracle_chi2_stat(table)
        worst = max(worst, abs(chi2_contingency(table).pvalue - oracle_chi2_sf(stat, dof)))
        groups = [rng.integers(0, 15, size=rng.integers(3, 15)).tolist() for _ in range(rng.integers(2, 5))]
        h, dof = oracle_kruskal(groups)
        worst = max(worst, abs(kruskal_wallis(groups).pvalue - oracle_chi2_sf(h, dof)))
        a = rng.normal(0, 1, size=rng.integers(3, 20)).tolist()
        b = rng.normal(0.4, 1.5, size=rng.integers(3, 20)).tolist()
        tt, dof = oracle_welch(a, b)
        worst = max(worst, abs(welch_t(a, b).pvalue - oracle_t_two_sided(tt, dof)))
    ok = auc_ok == 100 and mcc_ok == 100 and worst <= 1e-8
    criterion(5, "metric oracles", ok, f"AUC {auc_ok}/100 exact, MCC/F1 {mcc_ok}/100, max p-value error {worst:.1e}")


def test_criterion_6_clustering_oracle(criterion):
    rng = np.random.default_rng(2024)
    agree = 0
    for _ in range(100):
        recs = random_corpus(rng, int(rng.integers(1, 201)))
        agree += {r.id for r in cluster_filter(recs, 0.7)} == greedy_reference(recs, 0.7)
    criterion(6, "clustering oracle", agree == 100, f"{agree}/100 corpora identical to the quadratic reference")


@pytest.mark.slow
def test_criterion_7_discovery(criterion):
    t = time.perf_counter()
    spec = RepertoireSpec(n_profiles=20, sequences_per_profile=500, shm_rate=0.05, disease_motif="WWCWW",
                          motif_fraction=0.1, clone_counts=True, seed=1)
    records = generate_repertoire(spec, GeneLibrary.random(DESK_LIBRARY))
    binders = sorted({r.cdr3 for r in records if r.extra["motif"]})
    cfg = TaskConfig(folds=5, trim=0.05,
                     finetune=TrainConfig(phase="finetune", epochs=20, lr=1e-3, warmup=20, patience=5))
    rep = run_discovery(records, Transformer(ModelConfig(dtype="float32")), binders, cfg).report
    elapsed = time.perf_counter() - t
    curve = rep.curves["identity_0.85"]
    half = len(curve.x) // 2
    y, base = curve.at(half)
    seq_auc = rep.meta["sequence_level"]["auc"]
    ok = y > base and rep.auc >= seq_auc and elapsed <= 20 * 60
    criterion(7, "discovery", ok, f"matches at n/2 {y:.0f} vs random {base:.1f}; individual AUC {rep.auc:.3f} vs "
                                  f"sequence AUC {seq_auc:.3f}; {elapsed / 60:.1f} min")


def test_criterion_8_cli_determinism(criterion, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    d = tmp_path / "inputs"
    d.mkdir()
    (d / "spec.txt").write_text("n_profiles = 4\nsequences_per_profile = 10\nseed = 7\ndisease_motif = WWCWW\n"
                                "motif_fraction = 0.3\nclone_counts = true\nlibrary.n_v = 4\n"
                                "library.v_len_min = 20\nlibrary.v_len_max = 24\n")
    (d / "run.txt").write_text("model.layers = 1\nmodel.heads = 2\nmodel.hidden = 16\nmodel.ffn = 32\n"
                               "model.max_len = 128\nmodel.dtype = float32\nmlm.steps = 3\nmlm.batch_size = 8\n"
                               "mlm.warmup = 1\nmlm.eval_interval = 3\nmlm.eval_records = 8\nevolution.steps = 2\n"
                               "evolution.batch_size = 8\nevolution.warmup = 1\nevolution.eval_interval = 2\n"
                               "evolution.eval_records = 8\nfinetune.epochs = 1\nfinetune.batch_size = 8\n"
                               "task.folds = 2\n")
    from abevo.cli import main
    assert main(["simulate", "--spec", str(d / "spec.txt"), "--out", str(d / "sim")]) == 0
    inputs = {"spec": str(d / "spec.txt"), "config": str(d / "run.txt"), "data": str(d / "sim" / "repertoire.csv"),
              "db": str(d / "sim" / "binders.txt")}
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    codes = pipeline(inputs, a) + pipeline(inputs, b)
    ta, tb = tree(a), tree(b)
    same = sorted(ta) == sorted(tb) and all(ta[k] == tb[k] for k in ta)
    kinds = {k.rsplit(".", 1)[-1] for k in ta}
    ok = same and set(codes) == {0} and {"json", "bin", "svg", "csv"} <= kinds
    criterion(8, "CLI determinism", ok, f"{len(ta)} files from 9 subcommands byte-identical across two runs: {same}")


def test_criterion_9_masking_statistics(criterion):
    enc = encode_sequences("ACDEFGHIKLMNPQRSTVWY", "ACDEFGHIKLMNPQRSTVWY")
    rng = np.random.default_rng(9)
    counts = np.zeros(3)
    for _ in range(10_000):
        counts += np.bincount(mlm_plan(enc, rng, 0.15).actions, minlength=3)
    frac = counts / counts.sum()
    ok = abs(frac[MASKED] - 0.8) <= 0.01 and abs(frac[RANDOM] - 0.1) <= 0.01 and abs(frac[KEEP] - 0.1) <= 0.01
    criterion(9, "masking statistics", ok,
              f"mask {frac[MASKED]:.4f} / replace {frac[RANDOM]:.4f} / keep {frac[KEEP]:.4f} over 10^4 plans")
