"""Synthetic heavy-chain repertoires: V(D)J recombination followed by somatic hypermutation.

Each record draws from its own Philox stream keyed on ``(seed, record index)``, so a
record's content does not depend on generation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .seqcore import CANONICAL, UNKNOWN, AntibodyRecord, derive_mutations

STAGES = ("immature", "transitional", "mature", "plasmacytes", "memory IgD+", "memory IgD-")

_CANON = np.array(list(CANONICAL))
_CANON_INDEX = {c: i for i, c in enumerate(CANONICAL)}

# spawn-key namespaces for the independent streams
_RECORD, _LABELS, _MOTIF, _LIBRARY, _CLONES = 0, 1, 2, 3, 4


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass
class LibraryConfig:
    n_v: int = 40
    n_d: int = 20
    n_j: int = 8
    v_len_min: int = 80
    v_len_max: int = 100
    d_len_min: int = 5
    d_len_max: int = 15
    j_len_min: int = 10
    j_len_max: int = 20
    library_seed: int = 7


@dataclass
class GeneLibrary:
    v_segments: list[str]
    d_segments: list[str]
    j_segments: list[str]
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("v_segments", "d_segments", "j_segments"):
            pool = getattr(self, name)
            if not pool:
                raise ValueError(f"{name} must be non-empty")
            for seg in pool:
                if not seg or any(c not in CANONICAL + UNKNOWN for c in seg):
                    raise ValueError(f"invalid segment in {name}: {seg!r}")

    @classmethod
    def random(cls, cfg: Optional[LibraryConfig] = None) -> "GeneLibrary":
        cfg = cfg or LibraryConfig()
        rng = stream(cfg.library_seed, _LIBRARY)

        def pool(count: int, lo: int, hi: int) -> list[str]:
            if not 1 <= lo <= hi:
                raise ValueError(f"bad segment length range {lo}..{hi}")
            lengths = rng.integers(lo, hi + 1, size=count)
            return ["".join(_CANON[rng.integers(0, 20, size=n)]) for n in lengths]

        return cls(
            pool(cfg.n_v, cfg.v_len_min, cfg.v_len_max),
            pool(cfg.n_d, cfg.d_len_min, cfg.d_len_max),
            pool(cfg.n_j, cfg.j_len_min, cfg.j_len_max),
            seed=cfg.library_seed,
        )


@dataclass
class Rearrangement:
    germline: str
    v_index: int
    d_index: int
    j_index: int
    cdr1: tuple[int, int]
    cdr2: tuple[int, int]
    cdr3: tuple[int, int]


def _v_cdrs(v_len: int) -> tuple[tuple[int, int], tuple[int, int]]:
    width = max(3, v_len // 10)
    c1 = (v_len // 4, v_len // 4 + width)
    c2 = (v_len // 2, min(v_len // 2 + width, v_len - 3))
    return c1, c2


def recombine(lib: GeneLibrary, rng: np.random.Generator,
              junction_insert_range: tuple[int, int] = (0, 2)) -> Rearrangement:
    """Join one V, D and J segment with 'X' junction insertions (N1, N2) between them."""
    lo, hi = junction_insert_range
    vi = int(rng.integers(0, len(lib.v_segments)))
    di = int(rng.integers(0, len(lib.d_segments)))
    ji = int(rng.integers(0, len(lib.j_segments)))
    n1 = int(rng.integers(lo, hi + 1))
    n2 = int(rng.integers(lo, hi + 1))
    v, d, j = lib.v_segments[vi], lib.d_segments[di], lib.j_segments[ji]
    germline = v + UNKNOWN * n1 + d + UNKNOWN * n2 + j
    cdr3_end = min(len(v) + n1 + len(d) + n2 + 3, len(germline))
    cdr3 = (max(len(v) - 3, 0), cdr3_end)
    c1, c2 = _v_cdrs(len(v))
    if c2[1] > cdr3[0] or c1[1] > c2[0] or c2[0] >= c2[1]:
        c1, c2 = (0, 0), (0, 0)
    return Rearrangement(germline, vi, di, ji, c1, c2, cdr3)


def hypermutate(germline: str, rate: float, rng: np.random.Generator) -> tuple[str, frozenset[int]]:
    """Point-substitute each known germline residue with probability ``rate``.

    'X' positions are always realized as a uniform random residue and never count as mutations.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    n = len(germline)
    u = rng.random(n)
    shift = rng.integers(1, 20, size=n)
    fill = rng.integers(0, 20, size=n)
    out = list(germline)
    mutated = set()
    for i, c in enumerate(germline):
        if c == UNKNOWN:
            out[i] = CANONICAL[fill[i]]
        elif u[i] < rate:
            out[i] = CANONICAL[(_CANON_INDEX[c] + shift[i]) % 20]
            mutated.add(i)
    return "".join(out), frozenset(mutated)


def _apply_indels(antibody: str, rate: float, rng: np.random.Generator) -> str:
    out = []
    for c in antibody:
        r = rng.random()
        if r < rate / 2:
            continue
        out.append(c)
        if r > 1 - rate / 2:
            out.append(CANONICAL[rng.integers(0, 20)])
    return "".join(out) or antibody


@dataclass
class RepertoireSpec:
    n_profiles: int = 10
    sequences_per_profile: int = 100
    shm_rate: float = 0.05
    junction_insert_range: tuple[int, int] = (0, 2)
    stage_mix: tuple[float, ...] = (1 / 6,) * 6
    stage_multipliers: tuple[float, ...] = (0.2, 0.5, 1.0, 1.5, 2.0, 2.0)
    disease_motif: Optional[str] = None
    motif_fraction: float = 0.0
    positive_fraction: float = 0.5
    indel_rate: float = 0.0
    clone_counts: bool = False
    seed: int = 0

    def validate(self) -> None:
        for name in ("shm_rate", "motif_fraction", "positive_fraction", "indel_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if len(self.stage_mix) != len(STAGES) or len(self.stage_multipliers) != len(STAGES):
            raise ValueError(f"stage_mix and stage_multipliers need {len(STAGES)} entries")
        if any(p < 0 for p in self.stage_mix) or abs(sum(self.stage_mix) - 1.0) > 1e-9:
            raise ValueError("stage_mix must be a probability vector")
        if any(m < 0 for m in self.stage_multipliers):
            raise ValueError("stage multipliers must be non-negative")
        lo, hi = self.junction_insert_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad junction_insert_range {self.junction_insert_range}")
        if self.n_profiles < 1 or self.sequences_per_profile < 1:
            raise ValueError("need at least one profile and one sequence per profile")
        if self.disease_motif is not None and any(c not in CANONICAL for c in self.disease_motif):
            raise ValueError(f"motif must use canonical residues: {self.disease_motif!r}")


def _splice_motif(antibody: str, germline: str, mutations: frozenset[int], cdr3: tuple[int, int],
                  motif: str, rng: np.random.Generator) -> tuple[str, frozenset[int]]:
    lo, hi = cdr3
    if len(motif) > hi - lo:
        raise ValueError(f"motif {motif!r} longer than CDR3 span of length {hi - lo}")
    start = lo + int(rng.integers(0, hi - lo - len(motif) + 1))
    out = antibody[:start] + motif + antibody[start + len(motif):]
    muts = set(mutations)
    for k, c in enumerate(motif):
        j = start + k
        muts.discard(j)
        if germline[j] != UNKNOWN and germline[j] != c:
            muts.add(j)
    return out, frozenset(muts)


def generate_record(spec: RepertoireSpec, lib: GeneLibrary, index: int, profile_id: str,
                    label: Optional[int], with_motif: bool) -> AntibodyRecord:
    rng = stream(spec.seed, _RECORD, index)
    stage_idx = int(rng.choice(len(STAGES), p=np.asarray(spec.stage_mix) / sum(spec.stage_mix)))
    rate = min(1.0, spec.shm_rate * spec.stage_multipliers[stage_idx])
    rea = recombine(lib, rng, spec.junction_insert_range)
    antibody, muts = hypermutate(rea.germline, rate, rng)
    if with_motif:
        antibody, muts = _splice_motif(antibody, rea.germline, muts, rea.cdr3, spec.disease_motif, rng)
    if spec.indel_rate > 0:
        antibody = _apply_indels(antibody, spec.indel_rate, rng)
        muts = derive_mutations(antibody, rea.germline)
    spans = (rea.cdr1 if rea.cdr1[1] > rea.cdr1[0] else None,
             rea.cdr2 if rea.cdr2[1] > rea.cdr2[0] else None,
             rea.cdr3)
    if spec.indel_rate > 0:
        spans = (None, None, None)
    return AntibodyRecord(
        id=f"{profile_id}-{index % spec.sequences_per_profile:05d}",
        antibody=antibody,
        germline=rea.germline,
        cdr_spans=spans,
        mutation_positions=muts,
        label=label,
        profile_id=profile_id,
        stage=STAGES[stage_idx],
        v_gene=f"V{rea.v_index:03d}",
        redundancy=_clone_count(spec.seed, index) if spec.clone_counts else None,
        extra={"motif": int(with_motif)},
    )


def _clone_count(seed: int, index: int) -> int:
    """Read count of a clonotype: geometric with mean 3, from its own stream."""
    return int(stream(seed, _CLONES, index).geometric(1.0 / 3.0))


def profile_labels(spec: RepertoireSpec) -> list[int]:
    """Exactly ``round(positive_fraction * n_profiles)`` positives, placed by a seeded permutation."""
    k = int(np.floor(spec.positive_fraction * spec.n_profiles + 0.5))
    order = stream(spec.seed, _LABELS).permutation(spec.n_profiles)
    labels = [0] * spec.n_profiles
    for p in order[:k]:
        labels[int(p)] = 1
    return labels


def generate_repertoire(spec: RepertoireSpec, lib: GeneLibrary) -> list[AntibodyRecord]:
    spec.validate()
    labels = profile_labels(spec)
    n_motif = int(np.floor(spec.motif_fraction * spec.sequences_per_profile + 0.5))
    records = []
    for p in range(spec.n_profiles):
        pid = f"P{p:03d}"
        carriers: set[int] = set()
        if spec.disease_motif and labels[p] == 1 and n_motif:
            carriers = {int(i) for i in stream(spec.seed, _MOTIF, p).permutation(spec.sequences_per_profile)[:n_motif]}
        for k in range(spec.sequences_per_profile):
            index = p * spec.sequences_per_profile + k
            records.append(generate_record(spec, lib, index, pid, labels[p], k in carriers))
    return records
