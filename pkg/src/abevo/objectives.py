"""Training instances for masked LM, ancestor-germline and mutation-position objectives."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .seqcore import ALPHABET, AntibodyRecord, germline_to_antibody_map

KEEP, MASKED, RANDOM = 0, 1, 2
ACTION_NAMES = {KEEP: "KEEP", MASKED: "MASK", RANDOM: "RANDOM"}
_CANONICAL_IDS = np.array(ALPHABET.canonical_ids)
_SPECIAL_IDS = np.array(sorted(ALPHABET.special_ids))


class EncodingOverflow(ValueError):
    pass


@dataclass
class PairedEncoding:
    """``[CLS] a_1..a_m [SEP] g_1..g_n``.

    Positions restart at the separator so that ``a_i`` and ``g_i`` share position ``i + 1``.
    """

    token_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    m: int
    n: int

    @property
    def length(self) -> int:
        return len(self.token_ids)

    def antibody_index(self, i: int) -> int:
        return 1 + i

    def germline_index(self, j: int) -> int:
        return self.m + 2 + j

    def decode(self) -> tuple[str, str]:
        ids = self.token_ids
        return ALPHABET.decode(ids[1:1 + self.m]), ALPHABET.decode(ids[self.m + 2:])

    def with_tokens(self, token_ids: np.ndarray) -> "PairedEncoding":
        return PairedEncoding(np.asarray(token_ids), self.segment_ids, self.position_ids, self.m, self.n)


def encode_sequences(antibody: str, germline: Optional[str], max_len: int = 400) -> PairedEncoding:
    """Encode an antibody, optionally paired with a germline (``None`` gives ``[CLS] a_1..a_m``)."""
    m = len(antibody)
    n = 0 if germline is None else len(germline)
    total = m + 1 + (n + 1 if germline is not None else 0)
    if total > max_len:
        raise EncodingOverflow(f"encoding length {total} exceeds max_len {max_len}")
    ids = [ALPHABET.cls_id] + ALPHABET.encode(antibody)
    seg = [0] * (m + 1)
    pos = list(range(m + 1))
    if germline is not None:
        ids += [ALPHABET.sep_id] + ALPHABET.encode(germline)
        seg += [1] * (n + 1)
        pos += list(range(n + 1))
    return PairedEncoding(np.array(ids, dtype=np.int64), np.array(seg, dtype=np.int64),
                          np.array(pos, dtype=np.int64), m, n)


def encode_pair(record: AntibodyRecord, max_len: int = 400) -> PairedEncoding:
    return encode_sequences(record.antibody, record.germline, max_len)


@dataclass
class MaskingPlan:
    positions: np.ndarray  # sorted token indices (the set M)
    actions: np.ndarray  # KEEP / MASKED / RANDOM per position
    targets: np.ndarray  # original token ids
    replacements: np.ndarray  # token written at each position

    def __len__(self) -> int:
        return len(self.positions)

    def apply(self, encoding: PairedEncoding) -> PairedEncoding:
        ids = encoding.token_ids.copy()
        ids[self.positions] = self.replacements
        return encoding.with_tokens(ids)

    def restore(self, token_ids: np.ndarray) -> np.ndarray:
        ids = np.array(token_ids, copy=True)
        ids[self.positions] = self.targets
        return ids


def maskable_positions(encoding: PairedEncoding, sides: str = "both") -> np.ndarray:
    idx = np.flatnonzero(~np.isin(encoding.token_ids, _SPECIAL_IDS))
    if sides == "antibody":
        idx = idx[encoding.segment_ids[idx] == 0]
    elif sides == "germline":
        idx = idx[encoding.segment_ids[idx] == 1]
    elif sides != "both":
        raise ValueError(f"sides must be both/antibody/germline, got {sides!r}")
    return idx


def mlm_plan(encoding: PairedEncoding, rng: np.random.Generator, ratio: float = 0.15,
             sides: str = "both") -> MaskingPlan:
    """Select ``round(ratio * maskable)`` residues; each becomes MASK (80%), random (10%) or stays (10%)."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    cand = maskable_positions(encoding, sides)
    k = int(np.floor(ratio * len(cand) + 0.5))
    chosen = np.sort(rng.choice(cand, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    u = rng.random(k)
    actions = np.where(u < 0.8, MASKED, np.where(u < 0.9, RANDOM, KEEP))
    targets = encoding.token_ids[chosen]
    random_tokens = _CANONICAL_IDS[rng.integers(0, len(_CANONICAL_IDS), size=k)]
    replacements = np.where(actions == MASKED, ALPHABET.mask_id,
                            np.where(actions == RANDOM, random_tokens, targets))
    return MaskingPlan(chosen.astype(np.int64), actions.astype(np.int64), targets, replacements.astype(np.int64))


@dataclass
class AGPInstance:
    encoding: PairedEncoding
    label: int  # 1: the germline is the antibody's true ancestor
    partner: Optional[int] = None


def agp_batch(records: Sequence[AntibodyRecord], rng: np.random.Generator, p: float = 0.3,
              max_len: int = 400) -> list[AGPInstance]:
    """Swap each record's germline with that of another batch member with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if p > 0 and len(records) < 2:
        raise ValueError("germline swapping needs a batch of at least two records")
    out = []
    for i, rec in enumerate(records):
        if rng.random() < p:
            j = int(rng.integers(0, len(records) - 1))
            j += j >= i
            germline = records[j].germline
            label = int(germline == rec.germline)
            out.append(AGPInstance(encode_sequences(rec.antibody, germline, max_len), label, j))
        else:
            out.append(AGPInstance(encode_pair(rec, max_len), 1))
    return out


@dataclass
class MPPInstance:
    encoding: PairedEncoding  # antibody tokens at mutation positions replaced by MASK
    germline_labels: np.ndarray  # y_j for j in [0, n)
    masked_positions: np.ndarray  # token indices on the antibody side (the set M')
    masked_targets: np.ndarray  # true antibody residue ids at those indices
    original: PairedEncoding


def mpp_build(record: AntibodyRecord, max_len: int = 400) -> MPPInstance:
    enc = encode_pair(record, max_len)
    labels = np.zeros(enc.n, dtype=np.int64)
    mapping = germline_to_antibody_map(record.antibody, record.germline)
    masked = []
    for j in sorted(record.mutation_positions):
        if j in mapping:
            labels[j] = 1
            masked.append(enc.antibody_index(mapping[j]))
    masked_pos = np.array(masked, dtype=np.int64)
    ids = enc.token_ids.copy()
    targets = ids[masked_pos].copy()
    ids[masked_pos] = ALPHABET.mask_id
    return MPPInstance(enc.with_tokens(ids), labels, masked_pos, targets, enc)


def instance_to_json(inst) -> str:
    """JSONL line for inspecting instances (MaskingPlan as ``(encoding, plan)`` tuple, AGP or MPP)."""
    if isinstance(inst, tuple):
        enc, plan = inst
        obj = {"kind": "mlm", "token_ids": plan.apply(enc).token_ids.tolist(),
               "segment_ids": enc.segment_ids.tolist(),
               "plan": {"positions": plan.positions.tolist(),
                        "actions": [ACTION_NAMES[a] for a in plan.actions.tolist()],
                        "targets": plan.targets.tolist()}}
    elif isinstance(inst, AGPInstance):
        obj = {"kind": "agp", "token_ids": inst.encoding.token_ids.tolist(),
               "segment_ids": inst.encoding.segment_ids.tolist(), "label": inst.label}
    elif isinstance(inst, MPPInstance):
        obj = {"kind": "mpp", "token_ids": inst.encoding.token_ids.tolist(),
               "segment_ids": inst.encoding.segment_ids.tolist(),
               "labels": inst.germline_labels.tolist(),
               "targets": {"positions": inst.masked_positions.tolist(),
                           "token_ids": inst.masked_targets.tolist()}}
    else:
        raise TypeError(f"unsupported instance type {type(inst).__name__}")
    return json.dumps(obj, sort_keys=True)
