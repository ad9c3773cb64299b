"""Pre-norm transformer encoder with LM, germline-pairing and mutation-position heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from ..objectives import PairedEncoding
from ..seqcore import ALPHABET
from . import autograd as ag
from .autograd import Tensor


@dataclass
class ModelConfig:
    layers: int = 2
    heads: int = 4
    hidden: int = 64
    ffn: int = 256
    vocab_size: int = ALPHABET.vocab_size
    max_len: int = 128
    dropout: float = 0.0
    seed: int = 0
    dtype: str = "float64"

    def validate(self) -> None:
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if min(self.layers, self.heads, self.hidden, self.ffn, self.max_len) < 1:
            raise ValueError("model dimensions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, T)
    segment_ids: np.ndarray
    position_ids: np.ndarray
    keep: np.ndarray  # (B, T) bool, False at padding
    lengths: np.ndarray
    m: np.ndarray  # antibody lengths
    n: np.ndarray  # germline lengths (0 when unpaired)


def collate(encodings: Sequence[PairedEncoding]) -> Batch:
    if not encodings:
        raise ValueError("empty batch")
    T = max(e.length for e in encodings)
    B = len(encodings)
    ids = np.full((B, T), ALPHABET.pad_id, dtype=np.int64)
    seg = np.zeros((B, T), dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    keep = np.zeros((B, T), dtype=bool)
    for b, e in enumerate(encodings):
        L = e.length
        ids[b, :L] = e.token_ids
        seg[b, :L] = e.segment_ids
        pos[b, :L] = e.position_ids
        keep[b, :L] = True
    return Batch(ids, seg, pos, keep, keep.sum(axis=1),
                 np.array([e.m for e in encodings]), np.array([e.n for e in encodings]))


@dataclass
class ForwardOutput:
    stacks: list[Tensor]  # embedding output followed by each encoder layer's output
    final: Tensor  # final layer norm of the last stack
    keep: np.ndarray


class Transformer:
    """Parameters live in ``self.params`` (name -> Tensor); heads are plain entries in that dict."""

    def __init__(self, config: ModelConfig, init: bool = True):
        config.validate()
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params: dict[str, Tensor] = {}
        if init:
            self._init_params()

    # -- parameters ----------------------------------------------------------
    def _new(self, name: str, shape: tuple[int, ...], rng: np.random.Generator, kind: str = "normal") -> None:
        if kind == "normal":
            data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        self.params[name] = Tensor(data.astype(self.dtype), requires_grad=True)

    def _init_params(self) -> None:
        c = self.config
        rng = np.random.default_rng(c.seed)
        d = c.hidden
        self._new("embed.token", (c.vocab_size, d), rng)
        self._new("embed.position", (c.max_len, d), rng)
        self._new("embed.segment", (2, d), rng)
        for i in range(c.layers):
            p = f"layer{i}."
            for ln in ("ln1", "ln2"):
                self._new(p + ln + ".w", (d,), rng, "ones")
                self._new(p + ln + ".b", (d,), rng, "zeros")
            for proj in ("q", "k", "v", "o"):
                self._new(p + f"attn.{proj}.w", (d, d), rng)
                self._new(p + f"attn.{proj}.b", (d,), rng, "zeros")
            self._new(p + "ffn.in.w", (d, c.ffn), rng)
            self._new(p + "ffn.in.b", (c.ffn,), rng, "zeros")
            self._new(p + "ffn.out.w", (c.ffn, d), rng)
            self._new(p + "ffn.out.b", (d,), rng, "zeros")
        self._new("final_ln.w", (d,), rng, "ones")
        self._new("final_ln.b", (d,), rng, "zeros")
        self._new("lm.w", (d, c.vocab_size), rng)
        self._new("lm.b", (c.vocab_size,), rng, "zeros")
        self._new("agp.w", (d, 1), rng)
        self._new("agp.b", (1,), rng, "zeros")
        self._new("mpp.w", (d, 1), rng)
        self._new("mpp.b", (1,), rng, "zeros")

    def add_head(self, name: str, out_dim: int, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        self._new(f"head.{name}.w", (self.config.hidden, out_dim), rng)
        self._new(f"head.{name}.b", (out_dim,), rng, "zeros")

    def encoder_param_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head.")]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k] = Tensor(np.array(v, dtype=self.dtype), requires_grad=True)

    def copy(self) -> "Transformer":
        other = Transformer(self.config, init=False)
        other.load_state_dict(self.state_dict())
        return other

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # -- forward -------------------------------------------------------------
    def forward(self, batch: Batch, rng: Optional[np.random.Generator] = None) -> ForwardOutput:
        c, P = self.config, self.params
        B, T = batch.token_ids.shape
        if T > c.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {c.max_len}")
        if batch.token_ids.max() >= c.vocab_size:
            raise ValueError("token id outside vocabulary")
        drop = c.dropout if rng is not None else 0.0
        h = ag.add(ag.add(ag.embedding(P["embed.token"], batch.token_ids),
                          ag.embedding(P["embed.position"], batch.position_ids)),
                   ag.embedding(P["embed.segment"], batch.segment_ids))
        h = ag.dropout(h, drop, rng)
        stacks = [h]
        key_keep = batch.keep[:, None, None, :]
        H, dh = c.heads, c.hidden // c.heads
        for i in range(c.layers):
            p = f"layer{i}."
            a = ag.layer_norm(h, P[p + "ln1.w"], P[p + "ln1.b"])

            def split(x: Tensor) -> Tensor:
                return ag.transpose(ag.reshape(x, (B, T, H, dh)), (0, 2, 1, 3))

            q = split(ag.linear(a, P[p + "attn.q.w"], P[p + "attn.q.b"]))
            k = split(ag.linear(a, P[p + "attn.k.w"], P[p + "attn.k.b"]))
            v = split(ag.linear(a, P[p + "attn.v.w"], P[p + "attn.v.b"]))
            scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / float(np.sqrt(dh)))
            probs = ag.dropout(ag.masked_softmax(scores, key_keep), drop, rng)
            ctx = ag.reshape(ag.transpose(ag.matmul(probs, v), (0, 2, 1, 3)), (B, T, c.hidden))
            attn_out = ag.linear(ctx, P[p + "attn.o.w"], P[p + "attn.o.b"])
            h = ag.add(h, ag.dropout(attn_out, drop, rng))
            f = ag.layer_norm(h, P[p + "ln2.w"], P[p + "ln2.b"])
            f = ag.linear(ag.gelu(ag.linear(f, P[p + "ffn.in.w"], P[p + "ffn.in.b"])),
                          P[p + "ffn.out.w"], P[p + "ffn.out.b"])
            h = ag.add(h, ag.dropout(f, drop, rng))
            stacks.append(h)
        final = ag.layer_norm(h, P["final_ln.w"], P["final_ln.b"])
        return ForwardOutput(stacks, final, batch.keep)

    def attention_probs(self, batch: Batch, layer: int = 0) -> np.ndarray:
        """Attention weights of one layer (inference only, for inspection and tests)."""
        c, P = self.config, self.params
        B, T = batch.token_ids.shape
        H, dh = c.heads, c.hidden // c.heads
        with ag.no_grad():
            out = self.forward(batch)
            a = ag.layer_norm(out.stacks[layer], P[f"layer{layer}.ln1.w"], P[f"layer{layer}.ln1.b"]).data
            q = (a @ P[f"layer{layer}.attn.q.w"].data + P[f"layer{layer}.attn.q.b"].data).reshape(B, T, H, dh)
            k = (a @ P[f"layer{layer}.attn.k.w"].data + P[f"layer{layer}.attn.k.b"].data).reshape(B, T, H, dh)
            s = np.einsum("bthd,bshd->bhts", q, k) / np.sqrt(dh)
            return ag.masked_softmax(ag.Tensor(s), batch.keep[:, None, None, :]).data

    # -- heads ---------------------------------------------------------------
    def lm_logits(self, hidden_rows: Tensor) -> Tensor:
        return ag.linear(hidden_rows, self.params["lm.w"], self.params["lm.b"])

    def pooled(self, out: ForwardOutput) -> Tensor:
        return ag.weighted_mean_tokens(out.final, _pool_weights(out.keep, out.final.data.dtype))

    def agp_logits(self, out: ForwardOutput) -> Tensor:
        z = ag.linear(self.pooled(out), self.params["agp.w"], self.params["agp.b"])
        return ag.reshape(z, (z.shape[0],))

    def mpp_logits(self, hidden_rows: Tensor) -> Tensor:
        z = ag.linear(hidden_rows, self.params["mpp.w"], self.params["mpp.b"])
        return ag.reshape(z, (z.shape[0],))

    def head_logits(self, name: str, rows: Tensor) -> Tensor:
        return ag.linear(rows, self.params[f"head.{name}.w"], self.params[f"head.{name}.b"])


def _pool_weights(keep: np.ndarray, dtype) -> np.ndarray:
    w = keep.astype(dtype)
    return w / w.sum(axis=1, keepdims=True)


def sequence_representation(out: ForwardOutput) -> Tensor:
    """Mean over non-pad tokens within each encoder layer, then mean over the layers."""
    layers = out.stacks[1:]
    w = _pool_weights(out.keep, layers[0].data.dtype)
    total = ag.weighted_mean_tokens(layers[0], w)
    for h in layers[1:]:
        total = ag.add(total, ag.weighted_mean_tokens(h, w))
    return ag.scale(total, 1.0 / len(layers))


# --- losses ------------------------------------------------------------------

def loss_mlm(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over the masked set; ``logits`` has one row per masked token."""
    if len(targets) == 0:
        raise ValueError("MLM loss needs at least one masked position")
    return ag.cross_entropy(logits, targets, np.full(len(targets), 1.0 / len(targets)))


def loss_agp(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of the ancestor-pairing logits."""
    labels = np.asarray(labels)
    return ag.bce_with_logits(logits, labels, np.full(len(labels), 1.0 / len(labels)))


def mpp_weights(instance_of_germline: np.ndarray, instance_of_mutation: np.ndarray,
                batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row weights giving each instance ``1/n`` on its germline labels and ``1/|M'|`` on its
    masked residues, then averaging instances."""
    n_per = np.bincount(instance_of_germline, minlength=batch_size)
    m_per = np.bincount(instance_of_mutation, minlength=batch_size)
    gw = 1.0 / (n_per[instance_of_germline] * batch_size)
    mw = 1.0 / (m_per[instance_of_mutation] * batch_size) if len(instance_of_mutation) else np.zeros(0)
    return gw, mw


def loss_mpp(germline_logits: Tensor, germline_labels: np.ndarray, germline_weights: np.ndarray,
             residue_logits: Optional[Tensor], residue_targets: np.ndarray,
             residue_weights: np.ndarray) -> Tensor:
    """``(1/n) sum_j BCE(y_j) + (1/|M'|) sum_i NLL(a_i)``; the residue term vanishes when M' is empty."""
    loss = ag.bce_with_logits(germline_logits, germline_labels, germline_weights)
    if residue_logits is not None and len(residue_targets):
        loss = ag.add(loss, ag.cross_entropy(residue_logits, residue_targets, residue_weights))
    return loss
