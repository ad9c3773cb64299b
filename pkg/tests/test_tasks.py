import numpy as np
import pytest

from abevo.model import ModelConfig, Transformer
from abevo.seqcore import AntibodyRecord
from abevo.simgen import STAGES, GeneLibrary, LibraryConfig, RepertoireSpec, generate_repertoire
from abevo.tasks import (TASKS, TaskConfig, TaskSpec, adjacency_fraction, cdr_mask, run_bcell, run_binding,
                         run_discovery, run_paratope, top_redundancy)
from abevo.train import TrainConfig

SMALL = ModelConfig(layers=1, heads=2, hidden=16, ffn=32, max_len=128, dtype="float32")
FAST = TaskConfig(folds=2, finetune=TrainConfig(phase="finetune", epochs=2, batch_size=16, lr=3e-3, warmup=2,
                                                patience=2))
LIB = LibraryConfig(n_v=4, v_len_min=20, v_len_max=24)


def cohort(n_profiles=4, per=12, seed=0, **kw):
    spec = RepertoireSpec(n_profiles=n_profiles, sequences_per_profile=per, seed=seed, **kw)
    return generate_repertoire(spec, GeneLibrary.random(LIB))


def test_task_registry():
    assert TASKS["discovery"].grouping == "profile"
    assert TASKS["bcell"].head_kind == "multiclass-seq"
    assert TASKS["paratope"].head_kind == "token-label"
    with pytest.raises(ValueError):
        TaskSpec("discovery", "binary-seq", "sequence", ("auc",), ()).validate()


def test_binding_external_scores_perfect():
    recs = cohort()
    scores = {r.id: 0.9 if r.label else 0.1 for r in recs}
    rep = run_binding(recs, None, TaskConfig(folds=3), scores=scores)
    assert rep.auc == 1.0 and rep.mcc == pytest.approx(1.0) and len(rep.folds) == 3


def test_binding_all_zero_labels_reports_undefined_mcc():
    recs = cohort()
    for r in recs:
        r.label = 0
    rep = run_binding(recs, None, TaskConfig(folds=2), scores={r.id: 0.2 for r in recs})
    assert rep.mcc is None and "mcc" in rep.errors and "auc" in rep.errors


def test_binding_unlabeled_rejected():
    recs = cohort()
    recs[0].label = None
    with pytest.raises(ValueError):
        run_binding(recs, None, TaskConfig(folds=2), scores={})


def test_binding_fixed_split_is_used_verbatim():
    recs = cohort(per=10)
    for i, r in enumerate(recs):
        r.split = ("train", "valid", "test", "train")[i % 4]
    rep = run_binding(recs, None, TaskConfig(), scores={r.id: float(r.label) for r in recs})
    assert rep.meta["split"] == "fixed"
    assert rep.meta["split_sizes"] == {"train": 20, "valid": 10, "test": 10}
    assert rep.folds[0]["n_valid"] == 10


def test_binding_training_run():
    recs = cohort(per=16, disease_motif="WWWWW", motif_fraction=1.0)
    rep = run_binding(recs, Transformer(SMALL), FAST)
    assert len(rep.folds) == 2 and 0.0 <= rep.auc <= 1.0


def paratope_records():
    out = []
    rng = np.random.default_rng(0)
    for i in range(12):
        seq = "".join(rng.choice(list("ACDEFGHIKLMNPQRSTVWY"), size=20))
        spans = ((2, 5), (8, 11), (14, 19))
        labels = tuple(int(any(lo <= j < hi for lo, hi in spans) and seq[j] in "WYF") for j in range(20))
        out.append(AntibodyRecord(f"p{i}", seq, seq, cdr_spans=spans, token_labels=labels))
    return out


def test_paratope_cdr_mask_and_external_scores():
    recs = paratope_records()
    assert cdr_mask(recs[0]).sum() == 3 + 3 + 5
    scores = {r.id: [0.9 if y else 0.1 for y in r.token_labels] for r in recs}
    rep = run_paratope(recs, None, TaskConfig(folds=2), scores=scores)
    assert rep.auc == 1.0


def test_paratope_rejects_label_outside_cdr():
    recs = paratope_records()
    labels = list(recs[0].token_labels)
    labels[0] = 1
    recs[0].token_labels = tuple(labels)
    with pytest.raises(ValueError):
        run_paratope(recs, None, TaskConfig(folds=2), scores={})


def test_paratope_training_run():
    rep = run_paratope(paratope_records(), Transformer(SMALL), FAST)
    assert len(rep.folds) == 2


def test_adjacency_fraction():
    assert adjacency_fraction([1, 2, 5], [0, 2, 2]) == 0.5
    assert adjacency_fraction([0, 1], [0, 1]) is None


def test_bcell_external_scores_confusion():
    recs = cohort(n_profiles=2, per=30)
    eye = np.eye(len(STAGES))
    scores = {r.id: eye[STAGES.index(r.stage)] for r in recs}
    rep = run_bcell(recs, None, TaskConfig(folds=2), scores=scores)
    assert rep.acc == 1.0
    seen = sorted({STAGES.index(r.stage) for r in recs})
    assert np.allclose(np.diag(rep.confusion)[seen], 1.0)
    assert rep.meta["adjacent_error_fraction"] is None


def test_bcell_training_run():
    rep = run_bcell(cohort(n_profiles=2, per=24), Transformer(SMALL), FAST)
    assert rep.confusion.shape == (6, 6)
    sums = rep.confusion.sum(axis=1)
    assert np.all((sums == 0) | np.isclose(sums, 1.0))


def test_top_redundancy():
    recs = cohort(n_profiles=2, per=10, clone_counts=True)
    kept, used = top_redundancy(recs, 3)
    assert used and len(kept) == 6
    for p in {r.profile_id for r in recs}:
        mine = [r for r in recs if r.profile_id == p]
        floor = min(r.redundancy for r in kept if r.profile_id == p)
        assert sum(r.redundancy > floor for r in mine) <= 3
    assert top_redundancy(cohort(n_profiles=2, per=4), 1) == (cohort(n_profiles=2, per=4), False)


def discovery_cohort():
    return cohort(n_profiles=6, per=20, seed=3, disease_motif="WWCWW", motif_fraction=0.25)


def test_discovery_external_scores():
    recs = discovery_cohort()
    db = sorted({r.cdr3 for r in recs if r.extra["motif"]})
    scores = {r.id: (0.95 if r.extra["motif"] else 0.3 + 0.1 * r.label) for r in recs}
    res = run_discovery(recs, None, db, TaskConfig(folds=2, trim=0.0), scores=scores)
    rep = res.report
    assert rep.auc == 1.0
    assert len(rep.hit_table) == 8 and set(rep.curves) == {"identity_0.85", "identity_0.90"}
    n_carriers = sum(r.extra["motif"] for r in recs)
    curve = rep.curves["identity_0.85"]
    assert curve.at(n_carriers)[0] == n_carriers
    assert [s for _, _, s in res.ranked] == sorted((s for _, _, s in res.ranked), reverse=True)
    assert all(row.hits <= row.total for row in rep.hit_table)


def test_discovery_rejects_mixed_profile_and_empty_db():
    recs = discovery_cohort()
    with pytest.raises(ValueError):
        run_discovery(recs, None, [], TaskConfig(folds=2), scores={})
    recs[1].label = 1 - recs[0].label
    with pytest.raises(ValueError):
        run_discovery(recs, None, ["WWCWW"], TaskConfig(folds=2), scores={r.id: 0.5 for r in recs})


def test_discovery_training_run_is_deterministic():
    recs = discovery_cohort()
    db = sorted({r.cdr3 for r in recs if r.extra["motif"]})
    a = run_discovery(recs, Transformer(SMALL), db, FAST)
    b = run_discovery(recs, Transformer(SMALL), db, FAST)
    assert a.report.to_json() == b.report.to_json()
    assert a.report.meta["sequence_level"] is not None
