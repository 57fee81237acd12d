"""Exact set algebra over latent index sets.

This module is the combinatorial core of the package: latent index sets as
fixed-width bit vectors, the forbidden (i, j) pairs implied by comparing two
groups of observed variables, atomic Venn regions of a family of index sets,
step-by-step disentanglement certificates for those regions, and the
structural diversity checker that predicts element-wise recoverability.

Conventions
-----------
* Latent indices and observed indices are 1-based everywhere in this module,
  matching the file formats and reports produced by the rest of the package.
* All values are immutable after construction and safe to share across
  threads; every operation is a pure function of its inputs.
* Index sets are represented as Python-int bit masks (bit ``i - 1`` encodes
  membership of index ``i``), giving O(1) intersection/union/difference and a
  deterministic ascending iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import FormatError

# Clause labels for the direct forbidden-pair conditions.
INTERSECTION = "intersection"
SYMMETRIC_DIFFERENCE = "symmetric-difference"
COMPLEMENT = "complement"
BASE_CLAUSES = (INTERSECTION, SYMMETRIC_DIFFERENCE, COMPLEMENT)

# Clause labels for the composed (derived) conditions.
OBJECT_CENTRIC = "object-centric"
INDIVIDUAL_CENTRIC = "individual-centric"
SHARED_CENTRIC = "shared-centric"
DERIVED_CLAUSES = (SHARED_CENTRIC, INDIVIDUAL_CENTRIC, OBJECT_CENTRIC)

_ALL_CLAUSES = frozenset(BASE_CLAUSES) | frozenset(DERIVED_CLAUSES)

Pair = tuple[int, int]


def _iter_bits(mask: int) -> Iterator[int]:
    """Yield 1-based indices of set bits, ascending."""
    while mask:
        low = mask & -mask
        yield low.bit_length()
        mask ^= low


@dataclass(frozen=True)
class IndexSet:
    """A subset of ``{1..universe}`` stored as a fixed-width bit vector."""

    universe: int
    bits: int = 0

    def __post_init__(self):
        if self.universe < 1:
            raise ValueError(f"universe must be >= 1, got {self.universe}")
        if not 0 <= self.bits < (1 << self.universe):
            raise ValueError(
                f"bits 0x{self.bits:x} outside universe of size {self.universe}"
            )

    @classmethod
    def of(cls, universe: int, members: Iterable[int]) -> "IndexSet":
        bits = 0
        for i in members:
            if not 1 <= int(i) <= universe:
                raise ValueError(f"index {i} outside [1, {universe}]")
            bits |= 1 << (int(i) - 1)
        return cls(universe, bits)

    @classmethod
    def full(cls, universe: int) -> "IndexSet":
        return cls(universe, (1 << universe) - 1)

    @classmethod
    def empty(cls, universe: int) -> "IndexSet":
        return cls(universe, 0)

    def _check(self, other: "IndexSet") -> None:
        if self.universe != other.universe:
            raise ValueError(
                f"universe mismatch: {self.universe} vs {other.universe}"
            )

    def __and__(self, other: "IndexSet") -> "IndexSet":
        self._check(other)
        return IndexSet(self.universe, self.bits & other.bits)

    def __or__(self, other: "IndexSet") -> "IndexSet":
        self._check(other)
        return IndexSet(self.universe, self.bits | other.bits)

    def __sub__(self, other: "IndexSet") -> "IndexSet":
        self._check(other)
        return IndexSet(self.universe, self.bits & ~other.bits)

    def __xor__(self, other: "IndexSet") -> "IndexSet":
        self._check(other)
        return IndexSet(self.universe, self.bits ^ other.bits)

    def complement(self) -> "IndexSet":
        return IndexSet(self.universe, ((1 << self.universe) - 1) ^ self.bits)

    def __contains__(self, i: int) -> bool:
        return 1 <= i <= self.universe and bool(self.bits >> (i - 1) & 1)

    def __iter__(self) -> Iterator[int]:
        return _iter_bits(self.bits)

    def __len__(self) -> int:
        return self.bits.bit_count()

    def __bool__(self) -> bool:
        return self.bits != 0

    def __le__(self, other: "IndexSet") -> bool:
        self._check(other)
        return self.bits & ~other.bits == 0

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(self)

    def __repr__(self) -> str:
        return f"IndexSet.of({self.universe}, {list(self)})"


class SupportMatrix:
    """Boolean ``d_x x d_z`` dependency structure between observed and latent.

    Entry ``(i, j)`` is true when observed variable ``i`` functionally
    depends on latent ``j`` (the Jacobian of the mixing map is nonzero
    somewhere). By default every row and every column must be nonzero; pass
    ``require_nonzero=False`` only for empirically extracted supports, where
    a dead latent column is a measurement outcome rather than an error.
    """

    def __init__(self, entries, *, require_nonzero: bool = True):
        arr = np.array(entries, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"support must be 2-D, got shape {arr.shape}")
        d_x, d_z = arr.shape
        if d_x < 1 or d_z < 1:
            raise ValueError(f"support dimensions must be >= 1, got {arr.shape}")
        if require_nonzero:
            if not arr.any(axis=1).all():
                bad = int(np.flatnonzero(~arr.any(axis=1))[0]) + 1
                raise ValueError(f"row {bad} is all-zero (observed variable with no latent parent)")
            if not arr.any(axis=0).all():
                bad = int(np.flatnonzero(~arr.any(axis=0))[0]) + 1
                raise ValueError(f"column {bad} is all-zero (latent with no observed child)")
        arr.setflags(write=False)
        self._entries = arr
        self._row_bits = tuple(
            int(sum(1 << j for j in range(d_z) if arr[i, j])) for i in range(d_x)
        )

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def d_x(self) -> int:
        return self._entries.shape[0]

    @property
    def d_z(self) -> int:
        return self._entries.shape[1]

    def row_set(self, i: int) -> IndexSet:
        """Latent index set of observed variable ``i`` (1-based)."""
        if not 1 <= i <= self.d_x:
            raise ValueError(f"observed index {i} outside [1, {self.d_x}]")
        return IndexSet(self.d_z, self._row_bits[i - 1])

    def row_bits(self) -> tuple[int, ...]:
        return self._row_bits

    def index_set(self, obs: Iterable[int]) -> IndexSet:
        return index_set(self, obs)

    @classmethod
    def dense(cls, d_x: int, d_z: int) -> "SupportMatrix":
        return cls(np.ones((d_x, d_z), dtype=bool))

    @classmethod
    def identity(cls, d: int) -> "SupportMatrix":
        return cls(np.eye(d, dtype=bool))

    def to_text(self) -> str:
        lines = [f"{self.d_x} {self.d_z}"]
        for i in range(self.d_x):
            lines.append("".join("1" if v else "0" for v in self._entries[i]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, *, require_nonzero: bool = True) -> "SupportMatrix":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise FormatError("empty support text")
        header = lines[0].split()
        if len(header) != 2:
            raise FormatError(f"expected header 'dx dz', got {lines[0]!r}")
        try:
            d_x, d_z = int(header[0]), int(header[1])
        except ValueError as exc:
            raise FormatError(f"non-integer header {lines[0]!r}") from exc
        body = lines[1:]
        if len(body) != d_x:
            raise FormatError(f"expected {d_x} rows, got {len(body)}")
        rows = []
        for ln in body:
            if len(ln) != d_z or set(ln) - {"0", "1"}:
                raise FormatError(f"bad support row {ln!r} (want {d_z} chars of 0/1)")
            rows.append([c == "1" for c in ln])
        return cls(rows, require_nonzero=require_nonzero)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SupportMatrix):
            return NotImplemented
        return self._entries.shape == other._entries.shape and bool(
            (self._entries == other._entries).all()
        )

    def __hash__(self) -> int:
        return hash((self._entries.shape, self._entries.tobytes()))

    def __repr__(self) -> str:
        return f"SupportMatrix({self.d_x}x{self.d_z})"


def index_set(support: SupportMatrix, obs: Union[IndexSet, Iterable[int]]) -> IndexSet:
    """Union of the latent parents of the given observed variables.

    ``obs`` may be empty, in which case the empty set is returned.
    """
    if isinstance(obs, IndexSet):
        indices = list(obs)
    else:
        indices = [int(i) for i in obs]
    bits = 0
    for i in indices:
        if not 1 <= i <= support.d_x:
            raise ValueError(f"observed index {i} outside [1, {support.d_x}]")
        bits |= support.row_bits()[i - 1]
    return IndexSet(support.d_z, bits)


@dataclass(frozen=True)
class ForbiddenPairSet:
    """Tagged (i, j, clause) pairs: latent i may not be a function of the
    estimated latent matched to j."""

    universe: int
    pairs: frozenset[tuple[int, int, str]]

    def __post_init__(self):
        for i, j, clause in self.pairs:
            if i == j:
                raise ValueError(f"degenerate pair ({i}, {j})")
            if clause not in _ALL_CLAUSES:
                raise ValueError(f"unknown clause {clause!r}")
            if not (1 <= i <= self.universe and 1 <= j <= self.universe):
                raise ValueError(f"pair ({i}, {j}) outside universe {self.universe}")

    def with_clause(self, clause: str) -> frozenset[Pair]:
        return frozenset((i, j) for i, j, c in self.pairs if c == clause)

    def untagged(self) -> frozenset[Pair]:
        return frozenset((i, j) for i, j, _ in self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(sorted(self.pairs))


def _product_pairs(left: IndexSet, right: IndexSet, clause: str):
    return [(i, j, clause) for i in left for j in right]


def forbidden_pairs(i_k: IndexSet, i_v: IndexSet) -> ForbiddenPairSet:
    """Direct forbidden pairs from comparing two latent index sets.

    Three clauses: latents shared by both groups vs. latents unique to one
    (``intersection``), the reverse direction (``symmetric-difference``), and
    both directions between the two exclusive parts (``complement``).
    """
    i_k._check(i_v)
    inter = i_k & i_v
    sym = i_k ^ i_v
    only_k = i_k - i_v
    only_v = i_v - i_k
    pairs = []
    pairs += _product_pairs(inter, sym, INTERSECTION)
    pairs += _product_pairs(sym, inter, SYMMETRIC_DIFFERENCE)
    pairs += _product_pairs(only_k, only_v, COMPLEMENT)
    pairs += _product_pairs(only_v, only_k, COMPLEMENT)
    return ForbiddenPairSet(i_k.universe, frozenset(pairs))


def implied_pairs(i_k: IndexSet, i_v: IndexSet) -> ForbiddenPairSet:
    """Composed forbidden pairs, closed under union of the direct clauses.

    ``object-centric``: everything tied to one group vs. latents exclusive to
    the other. ``individual-centric``: latents exclusive to one group vs.
    everything tied to the other. ``shared-centric``: shared latents vs. the
    symmetric difference. As an untagged set this equals the direct pairs.
    """
    i_k._check(i_v)
    inter = i_k & i_v
    sym = i_k ^ i_v
    only_k = i_k - i_v
    only_v = i_v - i_k
    pairs = []
    pairs += _product_pairs(i_k, only_v, OBJECT_CENTRIC)
    pairs += _product_pairs(i_v, only_k, OBJECT_CENTRIC)
    pairs += _product_pairs(only_k, i_v, INDIVIDUAL_CENTRIC)
    pairs += _product_pairs(only_v, i_k, INDIVIDUAL_CENTRIC)
    pairs += _product_pairs(inter, sym, SHARED_CENTRIC)
    return ForbiddenPairSet(i_k.universe, frozenset(pairs))


@dataclass(frozen=True)
class AtomicRegion:
    """One cell of the Venn diagram of a family of index sets.

    ``signature[k]`` says whether the region lies inside the k-th family
    set. ``is_exterior`` marks the cell of latents outside every set, which
    is included in enumerations whenever it is nonempty.
    """

    signature: tuple[bool, ...]
    members: IndexSet

    def __post_init__(self):
        if not self.members:
            raise ValueError("atomic region must be nonempty")

    @property
    def is_exterior(self) -> bool:
        return not any(self.signature)

    def evaluate(self, family: Sequence[IndexSet]) -> IndexSet:
        """Direct set-algebra evaluation of the signature over the family."""
        if len(family) != len(self.signature):
            raise ValueError("signature length does not match family size")
        acc = IndexSet.full(self.members.universe)
        for flag, s in zip(self.signature, family):
            acc = (acc & s) if flag else (acc - s)
        return acc


def atomic_regions(family: Sequence[IndexSet], d_z: int) -> tuple[AtomicRegion, ...]:
    """All nonempty membership-signature classes of ``[d_z]`` over the family.

    The returned regions are pairwise disjoint, cover ``[d_z]``, and are
    ordered by their smallest member. The exterior class (latents outside
    every set) is included when nonempty.
    """
    if d_z < 1:
        raise ValueError("d_z must be >= 1")
    fam = list(family)
    if not fam:
        raise ValueError("family must be nonempty")
    for s in fam:
        if s.universe != d_z:
            raise ValueError(f"family set universe {s.universe} != d_z {d_z}")
    groups: dict[tuple[bool, ...], int] = {}
    for t in range(1, d_z + 1):
        sig = tuple(t in s for s in fam)
        groups[sig] = groups.get(sig, 0) | (1 << (t - 1))
    regions = [
        AtomicRegion(sig, IndexSet(d_z, bits)) for sig, bits in groups.items()
    ]
    regions.sort(key=lambda r: r.members.bits & -r.members.bits)
    return tuple(regions)


@dataclass(frozen=True)
class CertificateStep:
    """One proof step: compare observed groups K and V under one clause."""

    observed_k: IndexSet
    observed_v: IndexSet
    clause: str
    pairs: frozenset[Pair]


@dataclass(frozen=True)
class Certificate:
    """A verified step sequence disentangling a region from all other latents."""

    region: AtomicRegion
    steps: tuple[CertificateStep, ...]

    def covered(self) -> frozenset[Pair]:
        out: set[Pair] = set()
        for step in self.steps:
            out |= step.pairs
        return frozenset(out)

    def to_dict(self) -> dict:
        return {
            "region": {
                "signature": list(self.region.signature),
                "members": list(self.region.members),
                "exterior": self.region.is_exterior,
            },
            "certified": True,
            "steps": [
                {
                    "observed_k": list(s.observed_k),
                    "observed_v": list(s.observed_v),
                    "clause": s.clause,
                    "pairs": sorted([i, j] for i, j in s.pairs),
                }
                for s in self.steps
            ],
        }


@dataclass(frozen=True)
class CertificationFailure:
    """Bounded search could not cover every external pair of the region."""

    region: AtomicRegion
    uncovered: frozenset[Pair]

    def to_dict(self) -> dict:
        return {
            "region": {
                "signature": list(self.region.signature),
                "members": list(self.region.members),
                "exterior": self.region.is_exterior,
            },
            "certified": False,
            "uncovered": sorted([i, j] for i, j in self.uncovered),
        }


def _subsets_by_size(n: int, max_size: int) -> list[int]:
    masks = [m for m in range(1, 1 << n) if m.bit_count() <= max_size]
    masks.sort(key=lambda m: (m.bit_count(), m))
    return masks


def certify_region(
    region: AtomicRegion,
    family: Sequence[IndexSet],
    obs_supports: SupportMatrix,
    max_union: int,
) -> Union[Certificate, CertificationFailure]:
    """Search for a step sequence proving the region disentangled.

    Candidate steps compare the latent index sets of two observed-variable
    groups K and V (each of size at most ``max_union``); a step contributes
    the pairs of one derived clause that fall in ``region x complement``.
    The search is breadth-first over (K, V), smallest total union first with
    lexicographic tie-breaking, so results are deterministic. On success the
    union of step pairs covers every (i in region, j outside); otherwise the
    uncovered pairs are returned as a failure value.
    """
    if max_union < 1:
        raise ValueError("max_union must be >= 1")
    d_z = region.members.universe
    if region.evaluate(family) != region.members:
        raise ValueError("region is inconsistent with the given family")
    needed: set[Pair] = {
        (i, j)
        for i in region.members
        for j in region.members.complement()
    }
    if not needed:
        return Certificate(region, ())

    d_x = obs_supports.d_x
    subsets = _subsets_by_size(d_x, min(max_union, d_x))
    latent_of = {m: index_set(obs_supports, _iter_bits(m)) for m in subsets}
    candidates = [
        (a, b)
        for ai, a in enumerate(subsets)
        for b in subsets[ai + 1 :]
    ]
    candidates.sort(
        key=lambda kv: (
            kv[0].bit_count() + kv[1].bit_count(),
            kv[0].bit_count(),
            kv[0],
            kv[1],
        )
    )

    covered: set[Pair] = set()
    steps: list[CertificateStep] = []
    for k_mask, v_mask in candidates:
        i_k, i_v = latent_of[k_mask], latent_of[v_mask]
        if i_k == i_v:
            continue
        tagged = implied_pairs(i_k, i_v)
        for clause in DERIVED_CLAUSES:
            hit = tagged.with_clause(clause) & needed
            if hit - covered:
                steps.append(
                    CertificateStep(
                        IndexSet(d_x, k_mask),
                        IndexSet(d_x, v_mask),
                        clause,
                        frozenset(hit),
                    )
                )
                covered |= hit
                if covered >= needed:
                    return Certificate(region, tuple(steps))
    return CertificationFailure(region, frozenset(needed - covered))


@dataclass(frozen=True)
class DiversityWitness:
    """Observed subset A (and distinguished element k for the union clauses)."""

    observed: IndexSet
    distinguished: Optional[int] = None


@dataclass(frozen=True)
class DiversityVerdict:
    """Outcome of the structural diversity check for one latent."""

    latent: int
    satisfied: bool
    clause: Optional[int]
    witness: Optional[DiversityWitness]


def _union_rows(rows: tuple[int, ...], mask: int) -> int:
    u = 0
    for i in _iter_bits(mask):
        u |= rows[i - 1]
    return u


def _inter_rows(rows: tuple[int, ...], mask: int, full: int) -> int:
    v = full
    for i in _iter_bits(mask):
        v &= rows[i - 1]
    return v


def clause_holds(
    support: SupportMatrix,
    latent: int,
    clause: int,
    observed: IndexSet,
    distinguished: Optional[int] = None,
) -> bool:
    """Evaluate one diversity clause on an explicit witness.

    Clause 3 isolates the latent as the intersection of the subset's rows.
    Clauses 1 and 2 require the subset to cover all latents and isolate the
    latent via the distinguished row's private part (clause 1) or via the
    intersection of the other rows minus the distinguished row (clause 2).
    """
    rows = support.row_bits()
    full = (1 << support.d_z) - 1
    target = 1 << (latent - 1)
    a_mask = observed.bits
    if clause == 3:
        return _inter_rows(rows, a_mask, full) == target
    if distinguished is None or distinguished not in observed:
        return False
    if _union_rows(rows, a_mask) != full:
        return False
    rest = a_mask & ~(1 << (distinguished - 1))
    row_k = rows[distinguished - 1]
    if clause == 1:
        return row_k & ~_union_rows(rows, rest) == target
    if clause == 2:
        return _inter_rows(rows, rest, full) & ~row_k == target
    raise ValueError(f"unknown clause {clause}")


def check_sufficient_diversity(
    support: SupportMatrix,
    *,
    exhaustive_limit: int = 12,
    max_subset_size: int = 4,
) -> tuple[DiversityVerdict, ...]:
    """Per-latent structural diversity verdicts.

    For each latent the observed subsets are searched for a witness of
    clause 3, then 1, then 2 (clause 3 needs no union-coverage test, so it
    is cheapest). The search is exhaustive for ``d_x <= exhaustive_limit``;
    beyond that only subsets of size up to ``max_subset_size`` plus the full
    set are considered. Unsatisfied latents get ``clause=None``.
    """
    rows = support.row_bits()
    d_x, d_z = support.d_x, support.d_z
    full = (1 << d_z) - 1
    if d_x <= exhaustive_limit:
        masks = sorted(range(1, 1 << d_x), key=lambda m: (m.bit_count(), m))
    else:
        masks = _subsets_by_size(d_x, max_subset_size)
        if (1 << d_x) - 1 not in masks:
            masks.append((1 << d_x) - 1)

    verdicts = []
    for latent in range(1, d_z + 1):
        target = 1 << (latent - 1)
        found: Optional[DiversityVerdict] = None

        # Clause 3: rows lacking the latent can never appear in the witness.
        for m in masks:
            ok = all(rows[i - 1] & target for i in _iter_bits(m))
            if ok and _inter_rows(rows, m, full) == target:
                found = DiversityVerdict(
                    latent, True, 3, DiversityWitness(IndexSet(d_x, m))
                )
                break

        if found is None:
            for clause in (1, 2):
                for m in masks:
                    if _union_rows(rows, m) != full:
                        continue
                    for k in _iter_bits(m):
                        rest = m & ~(1 << (k - 1))
                        if clause == 1:
                            hit = rows[k - 1] & ~_union_rows(rows, rest) == target
                        else:
                            hit = _inter_rows(rows, rest, full) & ~rows[k - 1] == target
                        if hit:
                            found = DiversityVerdict(
                                latent,
                                True,
                                clause,
                                DiversityWitness(IndexSet(d_x, m), k),
                            )
                            break
                    if found:
                        break
                if found:
                    break

        verdicts.append(found or DiversityVerdict(latent, False, None, None))
    return tuple(verdicts)


def element_identifiability_predicted(support: SupportMatrix) -> bool:
    """True when every latent has a diversity witness."""
    return all(v.satisfied for v in check_sufficient_diversity(support))


def verdicts_to_dicts(verdicts: Sequence[DiversityVerdict]) -> list[dict]:
    out = []
    for v in verdicts:
        entry: dict = {
            "latent": v.latent,
            "satisfied": v.satisfied,
            "clause": v.clause if v.clause is not None else "none",
        }
        if v.witness is not None:
            entry["witness"] = {
                "observed": list(v.witness.observed),
                "distinguished": v.witness.distinguished,
            }
        out.append(entry)
    return out
