"""Pretraining corpus construction and the record file formats (CSV, JSONL)."""

from __future__ import annotations

import csv
import io
import json
import random
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .seqcore import AntibodyRecord, derive_mutations, sequence_identity

CSV_COLUMNS = (
    "id", "antibody", "germline",
    "cdr1_start", "cdr1_end", "cdr2_start", "cdr2_end", "cdr3_start", "cdr3_end",
    "profile_id", "stage", "label",
)
# optional trailing columns; readers accept files without them
EXTRA_COLUMNS = ("mutations", "v_gene", "token_labels", "redundancy", "split")


class DataError(ValueError):
    """Malformed input data (bad file contents, missing fields)."""


@dataclass
class CorpusChunk:
    index: int
    records: list[AntibodyRecord]
    role: str  # "train" | "validation"


def dedup(records: Iterable[AntibodyRecord]) -> list[AntibodyRecord]:
    """Drop repeated antibody strings, keeping the first occurrence."""
    seen: set[str] = set()
    out = []
    for r in records:
        if r.antibody not in seen:
            seen.add(r.antibody)
            out.append(r)
    return out


def cluster_filter(records: Sequence[AntibodyRecord], identity_threshold: float = 0.7) -> list[AntibodyRecord]:
    """Greedy redundancy reduction inside exact-CDR3 groups.

    Records are visited in id order; one is dropped when its whole-sequence identity to an
    already retained member of its CDR3 group reaches ``identity_threshold``. Output keeps
    the input order.
    """
    groups: dict[str, list[str]] = {}
    keep: set[int] = set()
    order = sorted(range(len(records)), key=lambda i: (records[i].id, i))
    for i in order:
        rec = records[i]
        key = rec.cdr3
        if key is None:
            raise DataError(f"record {rec.id} has no CDR3 span")
        reps = groups.setdefault(key, [])
        if any(sequence_identity(rec.antibody, rep) >= identity_threshold for rep in reps):
            continue
        reps.append(rec.antibody)
        keep.add(i)
    return [r for i, r in enumerate(records) if i in keep]


def shuffle_and_chunk(records: Sequence[AntibodyRecord], chunk_size: int = 1000,
                      seed: int = 0) -> list[CorpusChunk]:
    """Seeded Fisher-Yates shuffle, then fixed-size chunks; the last chunk is validation."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if not records:
        raise DataError("cannot chunk an empty corpus")
    items = list(records)
    random.Random(seed).shuffle(items)
    chunks = [CorpusChunk(i // chunk_size, items[i:i + chunk_size], "train")
              for i in range(0, len(items), chunk_size)]
    chunks[-1].role = "validation"
    if len(chunks) == 1:
        warnings.warn("corpus fits in one chunk: the training split is empty", RuntimeWarning, stacklevel=2)
    return chunks


def split_chunks(chunks: Sequence[CorpusChunk]) -> tuple[list[AntibodyRecord], list[AntibodyRecord]]:
    train = [r for c in chunks if c.role == "train" for r in c.records]
    valid = [r for c in chunks if c.role == "validation" for r in c.records]
    return train, valid


# --- serialization ---------------------------------------------------------

def _span_cells(span) -> list[str]:
    return ["", ""] if span is None else [str(span[0]), str(span[1])]


def record_to_row(r: AntibodyRecord) -> dict[str, str]:
    cells = [r.id, r.antibody, r.germline]
    for span in r.cdr_spans:
        cells += _span_cells(span)
    cells += [r.profile_id or "", r.stage or "", "" if r.label is None else str(r.label)]
    row = dict(zip(CSV_COLUMNS, cells))
    row["mutations"] = ";".join(str(j) for j in sorted(r.mutation_positions))
    row["v_gene"] = r.v_gene or ""
    row["token_labels"] = "" if r.token_labels is None else "".join(str(x) for x in r.token_labels)
    row["redundancy"] = "" if r.redundancy is None else str(r.redundancy)
    row["split"] = r.split or ""
    return row


def _opt_int(value: Optional[str], what: str, where: str) -> Optional[int]:
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise DataError(f"{where}: {what} is not an integer: {value!r}") from None


def row_to_record(row: dict[str, str], where: str = "") -> AntibodyRecord:
    try:
        rid, antibody, germline = row["id"], row["antibody"].strip().upper(), row["germline"].strip().upper()
    except KeyError as exc:
        raise DataError(f"{where}: missing column {exc.args[0]!r}") from None
    spans = []
    for k in (1, 2, 3):
        lo = _opt_int(row.get(f"cdr{k}_start"), f"cdr{k}_start", where)
        hi = _opt_int(row.get(f"cdr{k}_end"), f"cdr{k}_end", where)
        spans.append(None if lo is None or hi is None else (lo, hi))
    if "mutations" in row and row["mutations"] is not None:
        text = row["mutations"].strip()
        muts = frozenset(int(x) for x in text.replace(";", " ").split()) if text else frozenset()
    else:
        muts = derive_mutations(antibody, germline)
    tl = (row.get("token_labels") or "").strip()
    if tl and any(c not in "01" for c in tl):
        raise DataError(f"{where}: token_labels must be a 0/1 string")
    rec = AntibodyRecord(
        id=rid,
        antibody=antibody,
        germline=germline,
        cdr_spans=tuple(spans),
        mutation_positions=muts,
        label=_opt_int(row.get("label"), "label", where),
        token_labels=tuple(int(c) for c in tl) if tl else None,
        profile_id=row.get("profile_id") or None,
        stage=row.get("stage") or None,
        v_gene=row.get("v_gene") or None,
        redundancy=_opt_int(row.get("redundancy"), "redundancy", where),
        split=row.get("split") or None,
    )
    try:
        rec.validate()
    except ValueError as exc:
        raise DataError(f"{where}: {exc}") from None
    return rec


def write_csv(records: Iterable[AntibodyRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS + EXTRA_COLUMNS, quoting=csv.QUOTE_ALL,
                                lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow(record_to_row(r))


def read_csv(path: str | Path) -> list[AntibodyRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_csv(fh, str(path))


def parse_csv(fh: io.TextIOBase, name: str = "<csv>") -> list[AntibodyRecord]:
    reader = csv.DictReader(fh)
    if reader.fieldnames is None:
        raise DataError(f"{name}: missing header")
    missing = {"id", "antibody", "germline"} - set(reader.fieldnames)
    if missing:
        raise DataError(f"{name}: header lacks {sorted(missing)}")
    return [row_to_record(row, f"{name}:{reader.line_num}") for row in reader]


def record_to_json(r: AntibodyRecord) -> dict:
    row = record_to_row(r)
    obj: dict = {"id": r.id, "antibody": r.antibody, "germline": r.germline}
    for k in CSV_COLUMNS[3:9]:
        obj[k] = None if row[k] == "" else int(row[k])
    obj.update(profile_id=r.profile_id, stage=r.stage, label=r.label,
               mutations=sorted(r.mutation_positions), v_gene=r.v_gene,
               token_labels=None if r.token_labels is None else list(r.token_labels),
               redundancy=r.redundancy, split=r.split)
    return obj


def json_to_record(obj: dict, where: str = "") -> AntibodyRecord:
    row = {k: ("" if v is None else str(v)) for k, v in obj.items()
           if k not in ("mutations", "token_labels")}
    row["mutations"] = ";".join(str(j) for j in obj.get("mutations") or [])
    row["token_labels"] = "".join(str(x) for x in obj.get("token_labels") or [])
    return row_to_record(row, where)


def write_jsonl(records: Iterable[AntibodyRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_json(r), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[AntibodyRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
                out.append(json_to_record(obj, f"{path}:{lineno}"))
    return out


def write_chunks(chunks: Sequence[CorpusChunk], out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in chunks:
        p = out_dir / f"chunk_{c.index:04d}.{c.role}.jsonl"
        write_jsonl(c.records, p)
        paths.append(p)
    return paths


def read_chunks(in_dir: str | Path) -> list[CorpusChunk]:
    chunks = []
    for p in sorted(Path(in_dir).glob("chunk_*.jsonl")):
        stem, role, _ = p.name.split(".")
        chunks.append(CorpusChunk(int(stem.split("_")[1]), read_jsonl(p), role))
    if not chunks:
        raise DataError(f"no chunk_*.jsonl files in {in_dir}")
    return chunks


def read_records(path: str | Path) -> list[AntibodyRecord]:
    """Load records from a CSV file, a JSONL file, or a chunk directory."""
    path = Path(path)
    if path.is_dir():
        return [r for c in read_chunks(path) for r in c.records]
    if path.suffix == ".jsonl":
        return read_jsonl(path)
    return read_csv(path)


def read_binder_db(path: str | Path) -> list[str]:
    """One CDR-H3 per line; blank lines and '#' comments ignored."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip().upper()
        if line:
            out.append(line)
    if not out:
        raise DataError(f"binder database {path} is empty")
    return out


def read_scores(path: str | Path) -> dict[str, float]:
    """Two-column ``id,score`` CSV (header optional)."""
    out: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{lineno}: expected 'id,score'")
            try:
                out[row[0]] = float(row[1])
            except ValueError:
                if lineno == 1:
                    continue
                raise DataError(f"{path}:{lineno}: bad score {row[1]!r}") from None
    return out
