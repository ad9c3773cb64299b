"""Two-phase pretraining (masked LM, then germline-pairing + mutation-position) and finetuning."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .model import autograd as ag
from .model.autograd import no_grad
from .model.optim import Adam, WarmupInvSqrt
from .model.transformer import (Batch, ModelConfig, Transformer, collate, loss_agp, loss_mlm, loss_mpp,
                                mpp_weights, sequence_representation)
from .objectives import agp_batch, encode_pair, encode_sequences, mlm_plan, mpp_build
from .seqcore import ALPHABET, AntibodyRecord

log = logging.getLogger(__name__)

PHASES = ("mlm", "evolution", "finetune")
HEAD_KINDS = ("binary-seq", "multiclass-seq", "token-label")
_CANONICAL = np.array(ALPHABET.canonical_ids)


class NumericError(ArithmeticError):
    """Non-finite loss or parameters."""


@dataclass
class TrainConfig:
    phase: str = "mlm"
    steps: int = 1000
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    eval_interval: int = 100
    seed: int = 0
    mlm_ratio: float = 0.15
    mlm_sides: str = "both"
    agp_p: float = 0.3
    evolution_with_mlm: bool = False
    grad_clip: float = 1.0
    patience: int = 5
    freeze_encoder: bool = False
    pair_germline: bool = True
    eval_records: int = 1000

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.batch_size < 1 or self.steps < 0 or self.epochs < 1:
            raise ValueError("batch_size/epochs must be >= 1 and steps >= 0")


def default_phase_configs() -> tuple[TrainConfig, TrainConfig]:
    """Desk-scale defaults; the further-pretraining lr is one tenth of the first phase."""
    return (TrainConfig(phase="mlm", lr=1e-3, warmup=100),
            TrainConfig(phase="evolution", lr=1e-4, warmup=100))


@dataclass
class PretrainDiagnostics:
    step: int
    phase: str
    loss: float
    mlm_loss: float = float("nan")
    mlm_accuracy: float = float("nan")
    germline_accuracy: float = float("nan")
    position_accuracy: float = float("nan")
    mutation_accuracy: float = float("nan")


# --- batch construction ------------------------------------------------------

@dataclass
class MLMBatch:
    batch: Batch
    rows: np.ndarray
    cols: np.ndarray
    targets: np.ndarray


def build_mlm_batch(records: Sequence[AntibodyRecord], rng: np.random.Generator, ratio: float = 0.15,
                    sides: str = "both", max_len: int = 400) -> MLMBatch:
    encs, rows, cols, targets = [], [], [], []
    for b, rec in enumerate(records):
        enc = encode_pair(rec, max_len)
        plan = mlm_plan(enc, rng, ratio, sides)
        encs.append(plan.apply(enc))
        rows.append(np.full(len(plan), b))
        cols.append(plan.positions)
        targets.append(plan.targets)
    return MLMBatch(collate(encs), np.concatenate(rows), np.concatenate(cols), np.concatenate(targets))


@dataclass
class MPPBatch:
    batch: Batch
    germ_rows: np.ndarray
    germ_cols: np.ndarray
    germ_labels: np.ndarray
    germ_weights: np.ndarray
    mut_rows: np.ndarray
    mut_cols: np.ndarray
    mut_targets: np.ndarray
    mut_weights: np.ndarray


def build_mpp_batch(records: Sequence[AntibodyRecord], max_len: int = 400) -> MPPBatch:
    insts = [mpp_build(r, max_len) for r in records]
    g_rows, g_cols, g_lab, m_rows, m_cols, m_tgt = [], [], [], [], [], []
    for b, inst in enumerate(insts):
        enc = inst.encoding
        g_rows.append(np.full(enc.n, b))
        g_cols.append(enc.m + 2 + np.arange(enc.n))
        g_lab.append(inst.germline_labels)
        m_rows.append(np.full(len(inst.masked_positions), b))
        m_cols.append(inst.masked_positions)
        m_tgt.append(inst.masked_targets)
    g_rows, m_rows = np.concatenate(g_rows), np.concatenate(m_rows).astype(np.int64)
    gw, mw = mpp_weights(g_rows, m_rows, len(insts))
    return MPPBatch(collate([i.encoding for i in insts]), g_rows, np.concatenate(g_cols),
                    np.concatenate(g_lab), gw, m_rows, np.concatenate(m_cols).astype(np.int64),
                    np.concatenate(m_tgt).astype(np.int64), mw)


def mlm_step_loss(model: Transformer, mb: MLMBatch, rng=None) -> ag.Tensor:
    out = model.forward(mb.batch, rng)
    logits = model.lm_logits(ag.gather_rows(out.final, (mb.rows, mb.cols)))
    return loss_mlm(logits, mb.targets)


def agp_step_loss(model: Transformer, records: Sequence[AntibodyRecord], rng: np.random.Generator,
                  p: float, drop_rng=None) -> ag.Tensor:
    insts = agp_batch(records, rng, p, model.config.max_len)
    out = model.forward(collate([i.encoding for i in insts]), drop_rng)
    return loss_agp(model.agp_logits(out), np.array([i.label for i in insts]))


def mpp_step_loss(model: Transformer, mb: MPPBatch, rng=None) -> ag.Tensor:
    out = model.forward(mb.batch, rng)
    g_logits = model.mpp_logits(ag.gather_rows(out.final, (mb.germ_rows, mb.germ_cols)))
    r_logits = None
    if len(mb.mut_targets):
        r_logits = model.lm_logits(ag.gather_rows(out.final, (mb.mut_rows, mb.mut_cols)))
    return loss_mpp(g_logits, mb.germ_labels, mb.germ_weights, r_logits, mb.mut_targets, mb.mut_weights)


def _check_finite(value: float, what: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled every pass."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]


# --- diagnostics -------------------------------------------------------------

def diagnostics(model: Transformer, held_out: Sequence[AntibodyRecord], step: int = 0, phase: str = "",
                loss: float = float("nan"), seed: int = 12345, batch_size: int = 64,
                agp_p: float = 0.5, mlm_ratio: float = 0.15) -> PretrainDiagnostics:
    """Held-out accuracies for every pretraining head.

    Mutation accuracy is the argmax over canonical residues at masked mutation positions;
    position accuracy is per-germline-token binary accuracy.
    """
    rng = np.random.default_rng(seed)
    max_len = model.config.max_len
    mlm_hits = mlm_total = 0
    mlm_nll = 0.0
    agp_hits = agp_total = 0
    pos_hits = pos_total = 0
    mut_hits = mut_total = 0
    with no_grad():
        for i in range(0, len(held_out), batch_size):
            chunk = held_out[i:i + batch_size]
            mb = build_mlm_batch(chunk, rng, mlm_ratio, "both", max_len)
            if len(mb.targets):
                out = model.forward(mb.batch)
                logits = model.lm_logits(ag.gather_rows(out.final, (mb.rows, mb.cols))).data
                mlm_hits += int((logits.argmax(axis=1) == mb.targets).sum())
                mlm_total += len(mb.targets)
                mlm_nll += float(-ag.log_softmax_np(logits.astype(np.float64))[np.arange(len(mb.targets)), mb.targets].sum())

            p = agp_p if len(chunk) > 1 else 0.0
            insts = agp_batch(chunk, rng, p, max_len)
            out = model.forward(collate([x.encoding for x in insts]))
            pred = model.agp_logits(out).data > 0
            agp_hits += int((pred == np.array([x.label for x in insts], dtype=bool)).sum())
            agp_total += len(insts)

            pb = build_mpp_batch(chunk, max_len)
            out = model.forward(pb.batch)
            g = model.mpp_logits(ag.gather_rows(out.final, (pb.germ_rows, pb.germ_cols))).data
            pos_hits += int(((g > 0) == (pb.germ_labels == 1)).sum())
            pos_total += len(pb.germ_labels)
            if len(pb.mut_targets):
                r = model.lm_logits(ag.gather_rows(out.final, (pb.mut_rows, pb.mut_cols))).data
                guess = _CANONICAL[r[:, _CANONICAL].argmax(axis=1)]
                mut_hits += int((guess == pb.mut_targets).sum())
                mut_total += len(pb.mut_targets)

    def frac(a: int, b: int) -> float:
        return a / b if b else float("nan")

    return PretrainDiagnostics(step, phase, loss, mlm_nll / mlm_total if mlm_total else float("nan"),
                               frac(mlm_hits, mlm_total), frac(agp_hits, agp_total),
                               frac(pos_hits, pos_total), frac(mut_hits, mut_total))


# --- pretraining -------------------------------------------------------------

@dataclass
class PretrainResult:
    model: Transformer
    step: int
    history: list[PretrainDiagnostics]
    log_rows: list[dict] = field(default_factory=list)
    optimizer: Optional[Adam] = None


def run_phase(model: Transformer, train: Sequence[AntibodyRecord], valid: Sequence[AntibodyRecord],
              cfg: TrainConfig, start_step: int = 0, history: Optional[list] = None,
              log_rows: Optional[list] = None) -> tuple[int, Adam]:
    cfg.validate()
    if not train:
        raise ValueError("empty training set")
    history = history if history is not None else []
    log_rows = log_rows if log_rows is not None else []
    rng = np.random.default_rng([cfg.seed, PHASES.index(cfg.phase)])
    drop_rng = np.random.default_rng([cfg.seed, 99]) if model.config.dropout > 0 else None
    opt = Adam(model.params, WarmupInvSqrt(cfg.lr, cfg.warmup), grad_clip=cfg.grad_clip)
    stream = _batches(len(train), cfg.batch_size, rng)
    max_len = model.config.max_len
    valid_eval = list(valid[:cfg.eval_records])
    step = start_step
    for k in range(1, cfg.steps + 1):
        idx = next(stream)
        chunk = [train[i] for i in idx]
        model.zero_grad()
        if cfg.phase == "mlm":
            mb = build_mlm_batch(chunk, rng, cfg.mlm_ratio, cfg.mlm_sides, max_len)
            if not len(mb.targets):
                continue
            loss = mlm_step_loss(model, mb, drop_rng)
        else:
            if k % 2 == 1 and len(chunk) > 1:
                loss = agp_step_loss(model, chunk, rng, cfg.agp_p, drop_rng)
            else:
                loss = mpp_step_loss(model, build_mpp_batch(chunk, max_len), drop_rng)
            if cfg.evolution_with_mlm:
                mb = build_mlm_batch(chunk, rng, cfg.mlm_ratio, cfg.mlm_sides, max_len)
                if len(mb.targets):
                    loss = ag.add(loss, mlm_step_loss(model, mb, drop_rng))
        value = loss.item()
        _check_finite(value, f"{cfg.phase} loss at step {step + 1}")
        loss.backward()
        lr = opt.step()
        step += 1
        row = {"step": step, "phase": cfg.phase, "loss": value, "lr": lr}
        if valid_eval and (k % cfg.eval_interval == 0 or k == cfg.steps):
            d = diagnostics(model, valid_eval, step, cfg.phase, value)
            history.append(d)
            row.update({f.name: getattr(d, f.name) for f in fields(d) if f.name not in row})
            log.info("step %d %s loss %.4f mlm %.3f agp %.3f pos %.3f mut %.3f", step, cfg.phase, value,
                     d.mlm_accuracy, d.germline_accuracy, d.position_accuracy, d.mutation_accuracy)
        log_rows.append(row)
    return step, opt


def pretrain(train: Sequence[AntibodyRecord], valid: Sequence[AntibodyRecord], model_cfg: ModelConfig,
             mlm: TrainConfig, evolution: Optional[TrainConfig] = None,
             model: Optional[Transformer] = None) -> PretrainResult:
    """Masked-LM phase on the paired sequences, then (optionally) the evolution phase at a lower lr."""
    if not train:
        raise ValueError("empty training set")
    if evolution is not None and evolution.steps > 0 and evolution.lr >= mlm.lr:
        raise ValueError("the evolution phase must use a smaller learning rate than the MLM phase")
    model = model or Transformer(model_cfg)
    history: list[PretrainDiagnostics] = []
    rows: list[dict] = []
    step, opt = run_phase(model, train, valid, _with_phase(mlm, "mlm"), 0, history, rows)
    if evolution is not None and evolution.steps > 0:
        step, opt = run_phase(model, train, valid, _with_phase(evolution, "evolution"), step, history, rows)
    return PretrainResult(model, step, history, rows, opt)


def _with_phase(cfg: TrainConfig, phase: str) -> TrainConfig:
    d = asdict(cfg)
    d["phase"] = phase
    return TrainConfig(**d)


LOG_COLUMNS = ("step", "phase", "loss", "lr", "mlm_loss", "mlm_accuracy", "germline_accuracy",
               "position_accuracy", "mutation_accuracy")


def write_log(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in LOG_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    return str(v)


# --- finetuning --------------------------------------------------------------

@dataclass
class FinetuneResult:
    model: Transformer
    head_kind: str
    n_outputs: int
    history: list[dict]
    best_epoch: int
    pair_germline: bool = True


def encode_downstream(rec: AntibodyRecord, pair_germline: bool, max_len: int):
    return encode_pair(rec, max_len) if pair_germline else encode_sequences(rec.antibody, None, max_len)


def _cdr_mask(rec: AntibodyRecord) -> np.ndarray:
    mask = np.zeros(len(rec.antibody), dtype=bool)
    spans = [s for s in rec.cdr_spans if s is not None]
    if not spans:
        mask[:] = True
    for lo, hi in spans:
        mask[lo:hi] = True
    return mask


def _labels(records: Sequence[AntibodyRecord], head_kind: str, n_outputs: int,
            label_fn: Optional[Callable[[AntibodyRecord], int]]):
    if head_kind == "token-label":
        for r in records:
            if r.token_labels is None:
                raise ValueError(f"record {r.id} has no per-residue labels")
        return None
    out = []
    for r in records:
        y = label_fn(r) if label_fn else r.label
        if y is None:
            raise ValueError(f"record {r.id} is unlabeled")
        if head_kind == "binary-seq" and y not in (0, 1):
            raise ValueError(f"binary head needs 0/1 labels, got {y!r} for {r.id}")
        if head_kind == "multiclass-seq" and not 0 <= y < n_outputs:
            raise ValueError(f"label {y!r} outside [0, {n_outputs}) for {r.id}")
        out.append(int(y))
    return np.array(out)


def _head_loss(model: Transformer, records, labels, head_kind: str, pair: bool, rng=None):
    batch = collate([encode_downstream(r, pair, model.config.max_len) for r in records])
    out = model.forward(batch, rng)
    if head_kind == "token-label":
        rows, cols, ys = [], [], []
        for b, r in enumerate(records):
            sel = np.flatnonzero(_cdr_mask(r))
            rows.append(np.full(len(sel), b))
            cols.append(1 + sel)
            ys.append(np.asarray(r.token_labels)[sel])
        rows, cols, ys = np.concatenate(rows), np.concatenate(cols), np.concatenate(ys)
        z = ag.reshape(model.head_logits("task", ag.gather_rows(out.final, (rows, cols))), (len(ys),))
        return ag.bce_with_logits(z, ys, np.full(len(ys), 1.0 / len(ys))), z.data
    rep = sequence_representation(out)
    z = model.head_logits("task", rep)
    if head_kind == "binary-seq":
        z = ag.reshape(z, (len(records),))
        return ag.bce_with_logits(z, labels, np.full(len(labels), 1.0 / len(labels))), z.data
    return ag.cross_entropy(z, labels, np.full(len(labels), 1.0 / len(labels))), z.data


def finetune(model: Transformer, train: Sequence[AntibodyRecord], valid: Sequence[AntibodyRecord],
             head_kind: str, cfg: TrainConfig, n_classes: int = 2,
             label_fn: Optional[Callable[[AntibodyRecord], int]] = None) -> FinetuneResult:
    """Attach a task head and train; the epoch with the lowest validation loss is kept.

    Stops after ``cfg.patience`` epochs without validation improvement. ``model`` is not modified.
    """
    if head_kind not in HEAD_KINDS:
        raise ValueError(f"head_kind must be one of {HEAD_KINDS}, got {head_kind!r}")
    if not train:
        raise ValueError("empty training set")
    n_out = n_classes if head_kind == "multiclass-seq" else 1
    y_train = _labels(train, head_kind, n_out, label_fn)
    y_valid = _labels(valid, head_kind, n_out, label_fn) if valid else None
    model = model.copy()
    model.add_head("task", n_out, seed=cfg.seed)
    trainable = [k for k in model.params if k.startswith("head.")] if cfg.freeze_encoder else list(model.params)
    if cfg.freeze_encoder:
        for k in model.encoder_param_names():
            model.params[k].requires_grad = False
    opt = Adam(model.params, WarmupInvSqrt(cfg.lr, cfg.warmup), grad_clip=cfg.grad_clip, trainable=trainable)
    rng = np.random.default_rng([cfg.seed, 2])
    drop_rng = np.random.default_rng([cfg.seed, 98]) if model.config.dropout > 0 else None
    best_loss, best_state, best_epoch, stale = np.inf, model.state_dict(), 0, 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            model.zero_grad()
            loss, _ = _head_loss(model, [train[j] for j in idx], None if y_train is None else y_train[idx],
                                 head_kind, cfg.pair_germline, drop_rng)
            _check_finite(loss.item(), f"finetune loss (epoch {epoch})")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses))}
        if valid:
            with no_grad():
                vl = 0.0
                for i in range(0, len(valid), 64):
                    chunk = valid[i:i + 64]
                    l, _ = _head_loss(model, chunk, None if y_valid is None else y_valid[i:i + 64],
                                      head_kind, cfg.pair_germline)
                    vl += l.item() * len(chunk)
            entry["valid_loss"] = vl / len(valid)
            monitor = entry["valid_loss"]
        else:
            monitor = entry["train_loss"]
        history.append(entry)
        if monitor < best_loss:
            best_loss, best_state, best_epoch, stale = monitor, model.state_dict(), epoch, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    return FinetuneResult(model, head_kind, n_out, history, best_epoch, cfg.pair_germline)


def predict(result: FinetuneResult, records: Sequence[AntibodyRecord], batch_size: int = 64):
    """Binary: P(y=1) per record; multiclass: (N, K) probabilities; token-label: list of per-residue P(y=1)."""
    model = result.model
    out_scores = []
    with no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            batch = collate([encode_downstream(r, result.pair_germline, model.config.max_len) for r in chunk])
            out = model.forward(batch)
            if result.head_kind == "token-label":
                z = model.head_logits("task", out.final).data[..., 0]
                for b, r in enumerate(chunk):
                    out_scores.append(ag.sigmoid_np(z[b, 1:1 + len(r.antibody)].astype(np.float64)))
                continue
            z = model.head_logits("task", sequence_representation(out)).data.astype(np.float64)
            if result.head_kind == "binary-seq":
                out_scores.extend(ag.sigmoid_np(z[:, 0]).tolist())
            else:
                out_scores.extend(np.exp(ag.log_softmax_np(z)))
    if result.head_kind == "binary-seq":
        return np.array(out_scores)
    if result.head_kind == "multiclass-seq":
        return np.array(out_scores).reshape(len(records), result.n_outputs)
    return out_scores


# --- gradient check ----------------------------------------------------------

def check_head_gradients(model_cfg: ModelConfig, n_checks: int = 300, seed: int = 0,
                         records: Optional[Sequence[AntibodyRecord]] = None) -> dict[str, float]:
    """Max relative autograd-vs-finite-difference error for the MLM, AGP and MPP losses.

    Runs in float64. Parameters are jittered away from their init so layer norms and biases
    carry non-trivial gradients.
    """
    from .model.gradcheck import gradient_check
    from .simgen import GeneLibrary, LibraryConfig, RepertoireSpec, generate_repertoire

    cfg = ModelConfig(**{**asdict(model_cfg), "dtype": "float64"})
    if records is None:
        lib = GeneLibrary.random(LibraryConfig(n_v=4, n_d=2, n_j=2, v_len_min=10, v_len_max=14, d_len_min=3,
                                               d_len_max=4, j_len_min=5, j_len_max=6, library_seed=seed))
        records = generate_repertoire(RepertoireSpec(n_profiles=1, sequences_per_profile=4, shm_rate=0.2,
                                                     seed=seed), lib)
    model = Transformer(cfg)
    rng = np.random.default_rng(seed)
    for p in model.params.values():
        p.data = p.data + rng.normal(0.0, 0.3, p.shape)
    mb = build_mlm_batch(records, np.random.default_rng([seed, 1]), 0.3, max_len=cfg.max_len)
    pb = build_mpp_batch(records, cfg.max_len)
    return {
        "mlm": gradient_check(model.params, lambda: mlm_step_loss(model, mb), n_checks, seed=seed),
        "agp": gradient_check(model.params, lambda: agp_step_loss(model, records, np.random.default_rng([seed, 2]),
                                                                  0.5), n_checks, seed=seed),
        "mpp": gradient_check(model.params, lambda: mpp_step_loss(model, pb), n_checks, seed=seed),
    }
