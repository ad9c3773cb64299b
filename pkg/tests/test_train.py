import csv

import numpy as np
import pytest

from abevo.model import ModelConfig
from abevo.seqcore import AntibodyRecord
from abevo.simgen import GeneLibrary, LibraryConfig, RepertoireSpec, generate_repertoire
from abevo.train import (LOG_COLUMNS, TrainConfig, build_mlm_batch, build_mpp_batch, diagnostics, finetune, predict,
                         pretrain, write_log)
from abevo.model import Transformer

TINY = ModelConfig(layers=1, heads=2, hidden=16, ffn=32, max_len=128, dtype="float32")


@pytest.fixture(scope="module")
def corpus():
    spec = RepertoireSpec(n_profiles=1, sequences_per_profile=60, seed=5)
    return generate_repertoire(spec, GeneLibrary.random(LibraryConfig(n_v=3, v_len_min=20, v_len_max=24)))


def mlm_cfg(**kw):
    base = dict(phase="mlm", steps=4, batch_size=8, lr=1e-3, warmup=2, eval_interval=2, eval_records=16)
    return TrainConfig(**{**base, **kw})


def test_one_step_budget(corpus):
    res = pretrain(corpus[:40], corpus[40:], TINY, mlm_cfg(steps=1))
    assert res.step == 1
    assert res.history[-1].step == 1


def test_evolution_lr_must_be_lower(corpus):
    with pytest.raises(ValueError):
        pretrain(corpus[:40], corpus[40:], TINY, mlm_cfg(), TrainConfig(phase="evolution", steps=2, lr=1e-2))


def test_two_phase_log(corpus, tmp_path):
    res = pretrain(corpus[:40], corpus[40:], TINY, mlm_cfg(),
                   TrainConfig(phase="evolution", steps=2, batch_size=8, lr=1e-4, warmup=1, eval_interval=2,
                               eval_records=16))
    assert res.step == 6
    phases = [r["phase"] for r in res.log_rows]
    assert phases[0] == "mlm" and phases[-1] == "evolution"
    path = tmp_path / "log.csv"
    write_log(res.log_rows, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS
    steps = [int(r["step"]) for r in rows]
    assert steps == sorted(steps)


def test_pretraining_is_deterministic(corpus):
    a = pretrain(corpus[:40], corpus[40:], TINY, mlm_cfg())
    b = pretrain(corpus[:40], corpus[40:], TINY, mlm_cfg())
    for k in a.model.params:
        assert np.array_equal(a.model.params[k].data, b.model.params[k].data)


def test_mlm_batch_targets_match_originals(corpus):
    mb = build_mlm_batch(corpus[:5], np.random.default_rng(0), 0.15, "both", 128)
    assert len(mb.targets) > 0
    assert mb.batch.token_ids.shape[0] == 5


def test_mpp_batch_needs_mutations():
    mb = build_mpp_batch([AntibodyRecord("a", "CARD", "CARD"), AntibodyRecord("b", "CARW", "CARD",
                                                                             mutation_positions={3})])
    assert len(mb.mut_targets) == 1
    # each instance carries 1/n per germline token, averaged over the batch
    assert mb.germ_weights.sum() == pytest.approx(1.0)


def test_diagnostics_fields_are_probabilities(corpus):
    d = diagnostics(Transformer(TINY), corpus[:20])
    for v in (d.mlm_accuracy, d.germline_accuracy, d.position_accuracy, d.mutation_accuracy):
        assert 0.0 <= v <= 1.0


def separable():
    out = []
    for i in range(24):
        y = i % 2
        seq = ("WWWW" if y else "AAAA") + "CDEFGHIK"[i % 8] * 4
        out.append(AntibodyRecord(f"s{i}", seq, seq, label=y))
    return out


def test_finetune_fits_separable_labels():
    recs = separable()
    cfg = TrainConfig(phase="finetune", epochs=30, batch_size=8, lr=5e-3, warmup=2, patience=30)
    res = finetune(Transformer(TINY), recs, [], "binary-seq", cfg)
    pred = predict(res, recs) > 0.5
    assert (pred == np.array([r.label for r in recs], dtype=bool)).all()


def test_frozen_encoder_is_untouched():
    base = Transformer(TINY)
    cfg = TrainConfig(phase="finetune", epochs=2, batch_size=8, lr=1e-2, warmup=1, freeze_encoder=True)
    res = finetune(base, separable(), [], "binary-seq", cfg)
    for k in base.encoder_param_names():
        assert np.array_equal(res.model.params[k].data, base.params[k].data)
    fresh = base.copy()
    fresh.add_head("task", 1, seed=0)
    assert not np.array_equal(res.model.params["head.task.w"].data, fresh.params["head.task.w"].data)


def test_finetune_does_not_modify_input_model():
    base = Transformer(TINY)
    before = {k: v.data.copy() for k, v in base.params.items()}
    finetune(base, separable(), [], "binary-seq", TrainConfig(phase="finetune", epochs=1, batch_size=8, warmup=1))
    assert all(np.array_equal(base.params[k].data, v) for k, v in before.items())


def test_finetune_head_kinds():
    recs = separable()
    cfg = TrainConfig(phase="finetune", epochs=1, batch_size=8, warmup=1)
    mc = finetune(Transformer(TINY), recs, recs[:4], "multiclass-seq", cfg, n_classes=3, label_fn=lambda r: int(r.id[1:]) % 3)
    probs = predict(mc, recs[:5])
    assert probs.shape == (5, 3) and np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)
    with pytest.raises(ValueError):
        finetune(Transformer(TINY), recs, [], "regression", cfg)
