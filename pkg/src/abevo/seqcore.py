"""Residue alphabet, sequence records, FASTA parsing, alignment and edit distance."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

CANONICAL = "ACDEFGHIKLMNPQRSTVWY"
UNKNOWN = "X"
RESIDUES = CANONICAL + UNKNOWN
GAP = "-"

PAD, MASK, SEP, CLS = "[PAD]", "[MASK]", "[SEP]", "[CLS]"
SPECIALS = (PAD, MASK, SEP, CLS)


class Alphabet:
    """Token vocabulary: four special tokens followed by the 21 residue symbols."""

    def __init__(self) -> None:
        self.tokens: tuple[str, ...] = SPECIALS + tuple(RESIDUES)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id = self.index[PAD]
        self.mask_id = self.index[MASK]
        self.sep_id = self.index[SEP]
        self.cls_id = self.index[CLS]
        self.special_ids = frozenset(self.index[t] for t in SPECIALS)
        self.residue_ids = tuple(self.index[r] for r in RESIDUES)
        self.canonical_ids = tuple(self.index[r] for r in CANONICAL)
        self.unknown_id = self.index[UNKNOWN]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def encode(self, seq: str) -> list[int]:
        try:
            return [self.index[c] for c in seq]
        except KeyError as exc:
            raise ValueError(f"not a residue symbol: {exc.args[0]!r}") from None

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids)


ALPHABET = Alphabet()


def is_valid_sequence(seq: str) -> bool:
    return bool(seq) and all(c in RESIDUES for c in seq)


Span = tuple[int, int]


@dataclass
class AntibodyRecord:
    """One antibody paired with its germline.

    ``cdr_spans`` holds the CDR1/CDR2/CDR3 half-open ranges into the antibody;
    entries may be ``None``. ``mutation_positions`` index into the germline.
    """

    id: str
    antibody: str
    germline: str
    cdr_spans: tuple[Optional[Span], Optional[Span], Optional[Span]] = (None, None, None)
    mutation_positions: frozenset[int] = frozenset()
    label: Optional[int] = None
    token_labels: Optional[tuple[int, ...]] = None
    profile_id: Optional[str] = None
    stage: Optional[str] = None
    v_gene: Optional[str] = None
    redundancy: Optional[int] = None
    split: Optional[str] = None
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        self.mutation_positions = frozenset(self.mutation_positions)
        if len(self.cdr_spans) != 3:
            raise ValueError("cdr_spans must have exactly three entries")

    @property
    def cdr3(self) -> Optional[str]:
        span = self.cdr_spans[2]
        return None if span is None else self.antibody[span[0]:span[1]]

    @property
    def has_unknown(self) -> bool:
        """True when the antibody itself carries an unknown residue ('X')."""
        return UNKNOWN in self.antibody

    def validate(self, max_len: Optional[int] = None) -> None:
        m, n = len(self.antibody), len(self.germline)
        if m == 0 or n == 0:
            raise ValueError(f"{self.id}: empty antibody or germline")
        if max_len is not None and (m > max_len or n > max_len):
            raise ValueError(f"{self.id}: sequence longer than max_len={max_len}")
        for seq in (self.antibody, self.germline):
            bad = [c for c in seq if c not in RESIDUES]
            if bad:
                raise ValueError(f"{self.id}: invalid residue {bad[0]!r}")
        spans = sorted(s for s in self.cdr_spans if s is not None)
        for lo, hi in spans:
            if not 0 <= lo < hi <= m:
                raise ValueError(f"{self.id}: CDR span {(lo, hi)} outside [0, {m})")
        for (_, hi), (lo, _) in zip(spans, spans[1:]):
            if lo < hi:
                raise ValueError(f"{self.id}: overlapping CDR spans")
        for j in self.mutation_positions:
            if not 0 <= j < n:
                raise ValueError(f"{self.id}: mutation position {j} outside germline")
            if self.germline[j] == UNKNOWN:
                raise ValueError(f"{self.id}: mutation at unknown germline residue {j}")
        if self.token_labels is not None and len(self.token_labels) != m:
            raise ValueError(f"{self.id}: token_labels length differs from antibody")


class FastaError(ValueError):
    def __init__(self, message: str, line: int, symbol: Optional[str] = None):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.symbol = symbol


def parse_fasta(data: bytes | str | io.IOBase) -> list[tuple[str, str]]:
    """Parse amino-acid FASTA into ``(id, sequence)`` pairs in file order."""
    if isinstance(data, (bytes, bytearray)):
        text = data.decode("ascii")
    elif isinstance(data, str):
        text = data
    else:
        raw = data.read()
        text = raw.decode("ascii") if isinstance(raw, (bytes, bytearray)) else raw

    records: list[tuple[str, str]] = []
    header: Optional[str] = None
    header_line = 0
    body: list[str] = []

    def flush() -> None:
        if header is None:
            return
        seq = "".join(body)
        if not seq:
            raise FastaError(f"empty sequence for record {header!r}", header_line)
        records.append((header, seq))

    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            name = line[1:].split()
            if not name:
                raise FastaError("malformed header (missing id)", lineno)
            header, header_line, body = name[0], lineno, []
            continue
        if header is None:
            raise FastaError("sequence data before first header", lineno)
        chunk = "".join(line.split()).upper()
        for c in chunk:
            if c not in RESIDUES:
                raise FastaError(f"invalid symbol {c!r}", lineno, c)
        body.append(chunk)
    flush()
    return records


def edit_distance(s: str, t: str) -> int:
    """Levenshtein distance with unit costs.

    Bit-parallel (Myers/Hyyrö) over Python ints, so any length works.
    """
    if s == t:
        return 0
    if len(s) < len(t):
        s, t = t, s
    m = len(t)
    if m == 0:
        return len(s)
    peq: dict[str, int] = {}
    for i, c in enumerate(t):
        peq[c] = peq.get(c, 0) | (1 << i)
    mask = (1 << m) - 1
    top = 1 << (m - 1)
    pv, mv, score = mask, 0, m
    for c in s:
        eq = peq.get(c, 0)
        xv = eq | mv
        xh = (((eq & pv) + pv) ^ pv) | eq
        ph = mv | (~(xh | pv) & mask)
        mh = pv & xh
        if ph & top:
            score += 1
        elif mh & top:
            score -= 1
        ph = ((ph << 1) | 1) & mask
        mh = (mh << 1) & mask
        pv = mh | (~(xv | ph) & mask)
        mv = ph & xv
    return score


def sequence_identity(query: str, target: str) -> float:
    """1 - edit_distance / len(query), floored at 0."""
    if not query:
        raise ValueError("query must be non-empty")
    return max(0.0, 1.0 - edit_distance(query, target) / len(query))


MATCH, MISMATCH, GAP_COST = 1, -1, -2


def global_align(a: str, g: str) -> tuple[str, str]:
    """Needleman-Wunsch alignment of ``a`` against ``g``.

    Scores +1/-1/-2. Traceback prefers diagonal, then a gap in ``g``, then a gap in ``a``.
    """
    if not a or not g:
        raise ValueError("alignment inputs must be non-empty")
    m, n = len(a), len(g)
    score = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(1, m + 1):
        score[i][0] = i * GAP_COST
    for j in range(1, n + 1):
        score[0][j] = j * GAP_COST
    for i in range(1, m + 1):
        row, prev, ai = score[i], score[i - 1], a[i - 1]
        for j in range(1, n + 1):
            d = prev[j - 1] + (MATCH if ai == g[j - 1] else MISMATCH)
            u = prev[j] + GAP_COST
            left = row[j - 1] + GAP_COST
            row[j] = d if d >= u and d >= left else (u if u >= left else left)

    out_a: list[str] = []
    out_g: list[str] = []
    i, j = m, n
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            d = score[i - 1][j - 1] + (MATCH if a[i - 1] == g[j - 1] else MISMATCH)
            if score[i][j] == d:
                out_a.append(a[i - 1])
                out_g.append(g[j - 1])
                i, j = i - 1, j - 1
                continue
        if i > 0 and score[i][j] == score[i - 1][j] + GAP_COST:
            out_a.append(a[i - 1])
            out_g.append(GAP)
            i -= 1
        else:
            out_a.append(GAP)
            out_g.append(g[j - 1])
            j -= 1
    return "".join(reversed(out_a)), "".join(reversed(out_g))


def alignment_score(aligned_a: str, aligned_g: str) -> int:
    total = 0
    for x, y in zip(aligned_a, aligned_g):
        if x == GAP or y == GAP:
            total += GAP_COST
        else:
            total += MATCH if x == y else MISMATCH
    return total


def germline_to_antibody_map(a: str, g: str) -> dict[int, int]:
    """Map germline indices to aligned antibody indices (positions facing a gap are absent)."""
    if len(a) == len(g):
        return {j: j for j in range(len(g))}
    aa, gg = global_align(a, g)
    mapping: dict[int, int] = {}
    i = j = 0
    for x, y in zip(aa, gg):
        if x != GAP and y != GAP:
            mapping[j] = i
        if x != GAP:
            i += 1
        if y != GAP:
            j += 1
    return mapping


def derive_mutations(a: str, g: str) -> frozenset[int]:
    """Germline indices whose aligned antibody residue differs (unknown germline residues excluded).

    Equal-length pairs are compared position by position, as in ``germline_to_antibody_map``;
    otherwise the pair is aligned with ``global_align``.
    """
    if not a or not g:
        return frozenset()
    if len(a) == len(g):
        return frozenset(j for j, (x, y) in enumerate(zip(a, g)) if y != UNKNOWN and x != y)
    aa, gg = global_align(a, g)
    out: set[int] = set()
    j = 0
    for x, y in zip(aa, gg):
        if y == GAP:
            continue
        if x != GAP and y != UNKNOWN and x != y:
            out.add(j)
        j += 1
    return frozenset(out)


def cdr3_strings(records: Sequence[AntibodyRecord]) -> list[Optional[str]]:
    return [r.cdr3 for r in records]
