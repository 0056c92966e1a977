"""Fingerprints, similarity, scaffolds, descriptors and string edit distance."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from chemlm.elements import ATOMIC_NUMBER, ATOMIC_WEIGHT, HYDROGEN_WEIGHT
from chemlm.smiles import (
    Atom,
    Bond,
    BondOrder,
    MolGraph,
    canonicalize_graph,
    parse_smiles,
)

log = logging.getLogger(__name__)

DEFAULT_WIDTH = 2048
DEFAULT_RADIUS = 2

_MASK = (1 << 64) - 1
_SEED = 0x6A09E667F3BCC908


class WidthMismatch(ValueError):
    pass


class EmptyReference(ValueError):
    pass


# --------------------------------------------------------------------------
# circular fingerprints


def _mix64(z: int) -> int:
    # splitmix64 finalizer
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def hash_ints(values: Iterable[int]) -> int:
    """Platform-independent 64-bit hash of an integer sequence.

    Each value (two's complement, 64-bit) is xor-ed into the running state
    which is then passed through the splitmix64 finalizer.
    """
    h = _SEED
    for v in values:
        h = _mix64(h ^ (v & _MASK))
    return h


@dataclass(frozen=True)
class Fingerprint:
    width: int
    set_bits: tuple[int, ...]
    raw_ids: tuple[int, ...] = ()

    @classmethod
    def from_bits(cls, bits: Iterable[int], width: int = DEFAULT_WIDTH) -> "Fingerprint":
        bits = tuple(sorted(set(bits)))
        if bits and (bits[0] < 0 or bits[-1] >= width):
            raise ValueError(f"bit index out of range for width {width}")
        return cls(width, bits, ())

    def __len__(self) -> int:
        return len(self.set_bits)

    def to_array(self) -> np.ndarray:
        out = np.zeros(self.width, dtype=np.float64)
        out[list(self.set_bits)] = 1.0
        return out


def initial_invariant(graph: MolGraph, i: int) -> tuple[int, ...]:
    atom = graph.atoms[i]
    return (
        ATOMIC_NUMBER.get(atom.element, 0),
        graph.degree(i),
        atom.h_count,
        atom.charge,
        int(atom.aromatic),
        int(i in graph.cyclic_atoms),
    )


def ecfp(graph: MolGraph, radius: int = DEFAULT_RADIUS, width: int = DEFAULT_WIDTH) -> Fingerprint:
    """Extended-connectivity fingerprint (radius 2 gives ECFP4).

    Round-r identifiers hash the round number, the atom's previous id and the
    sorted (bond order, neighbor id) pairs. An identifier is dropped when its
    bond environment did not grow from the previous round or duplicates an
    environment already emitted (the lowest id wins among same-round ties).
    """
    n = len(graph.atoms)
    ids = [hash_ints(initial_invariant(graph, i)) for i in range(n)]
    raw = list(ids)
    envs: list[frozenset[int]] = [frozenset()] * n
    seen: set[frozenset[int]] = set()
    adj = graph.adjacency
    for r in range(1, radius + 1):
        new_ids = []
        new_envs = []
        for i in range(n):
            pairs = sorted((int(graph.bonds[k].order), ids[j]) for j, k in adj[i])
            flat = [r, ids[i]]
            for order, nid in pairs:
                flat += (order, nid)
            new_ids.append(hash_ints(flat))
            env = set(envs[i])
            for j, k in adj[i]:
                env.add(k)
                env |= envs[j]
            new_envs.append(frozenset(env))
        for _, i in sorted((new_ids[i], i) for i in range(n)):
            env = new_envs[i]
            if env == envs[i] or env in seen:
                continue
            seen.add(env)
            raw.append(new_ids[i])
        ids, envs = new_ids, new_envs
    raw.sort()
    bits = sorted({x % width for x in raw})
    return Fingerprint(width, tuple(bits), tuple(raw))


def ecfp_from_smiles(smiles: str, radius: int = DEFAULT_RADIUS, width: int = DEFAULT_WIDTH) -> Fingerprint:
    return ecfp(parse_smiles(smiles), radius, width)


# --------------------------------------------------------------------------
# similarity


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.width != b.width:
        raise WidthMismatch(f"fingerprint widths differ: {a.width} vs {b.width}")
    sa, sb = set(a.set_bits), set(b.set_bits)
    union = len(sa | sb)
    if union == 0:
        log.warning("tanimoto of two empty fingerprints; returning 1.0")
        return 1.0
    return len(sa & sb) / union


def fingerprint_matrix(fps: Sequence[Fingerprint]) -> np.ndarray:
    if not fps:
        return np.zeros((0, 0))
    width = fps[0].width
    mat = np.zeros((len(fps), width), dtype=np.float64)
    for row, fp in enumerate(fps):
        if fp.width != width:
            raise WidthMismatch(f"fingerprint widths differ: {width} vs {fp.width}")
        mat[row, list(fp.set_bits)] = 1.0
    return mat


def nearest_neighbor_similarity(
    queries: Sequence[Fingerprint],
    reference: Sequence[Fingerprint],
    block: int = 512,
) -> list[float]:
    """Max Tanimoto of each query against the reference set, in query order."""
    if not reference:
        raise EmptyReference("reference set is empty")
    if not queries:
        return []
    if queries[0].width != reference[0].width:
        raise WidthMismatch(f"fingerprint widths differ: {queries[0].width} vs {reference[0].width}")
    ref = fingerprint_matrix(reference)
    ref_counts = ref.sum(axis=1)
    out: list[float] = []
    for start in range(0, len(queries), block):
        q = fingerprint_matrix(queries[start : start + block])
        inter = q @ ref.T
        union = q.sum(axis=1)[:, None] + ref_counts[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 1.0)
        out.extend(float(x) for x in sim.max(axis=1))
    return out


# --------------------------------------------------------------------------
# scaffolds


@dataclass(frozen=True)
class Scaffold:
    graph: MolGraph
    smiles: str

    @property
    def is_empty(self) -> bool:
        return not self.graph.atoms


def murcko_scaffold(graph: MolGraph) -> Scaffold:
    """Ring systems plus linkers: repeatedly strip acyclic atoms of degree <= 1.

    Hydrogen counts of atoms that lose a neighbor are raised by the removed
    bond order so the scaffold stays valence-consistent. Acyclic molecules
    give an empty scaffold.
    """
    cyclic = graph.cyclic_atoms
    alive = set(range(len(graph.atoms)))
    degree = [graph.degree(i) for i in range(len(graph.atoms))]
    extra_h = [0] * len(graph.atoms)
    frontier = [i for i in alive if degree[i] <= 1 and i not in cyclic]
    while frontier:
        i = frontier.pop()
        if i not in alive:
            continue
        alive.discard(i)
        for j, k in graph.adjacency[i]:
            if j in alive:
                degree[j] -= 1
                order = graph.bonds[k].order
                extra_h[j] += 1 if order is BondOrder.AROMATIC else int(order)
                if degree[j] <= 1 and j not in cyclic:
                    frontier.append(j)
    keep = sorted(alive)
    index = {old: new for new, old in enumerate(keep)}
    atoms = []
    for old in keep:
        a = graph.atoms[old]
        atoms.append(Atom(a.element, a.aromatic, a.charge, a.h_count + extra_h[old], a.bracketed, a.isotope))
    bonds = [
        Bond(index[b.a], index[b.b], b.order)
        for b in graph.bonds
        if b.a in index and b.b in index
    ]
    sub = MolGraph(tuple(atoms), tuple(bonds))
    return Scaffold(sub, canonicalize_graph(sub) if atoms else "")


def scaffold_jaccard(set_a: Iterable[str], set_b: Iterable[str]) -> float:
    a, b = set(set_a), set(set_b)
    union = a | b
    return len(a & b) / len(union) if union else 0.0


# --------------------------------------------------------------------------
# edit distance


def levenshtein(a: str, b: str) -> int:
    """Minimum number of single-character insertions, deletions and substitutions."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def nearest_levenshtein(query: str, candidates: Sequence[str]) -> int:
    """Minimum edit distance from ``query`` to any candidate.

    Vectorized over candidates: strings are packed into a padded code
    matrix and the DP runs column by column for all of them at once.
    """
    if not candidates:
        raise EmptyReference("no candidates")
    lengths = np.array([len(c) for c in candidates])
    width = int(lengths.max()) if len(lengths) else 0
    codes = np.full((len(candidates), max(width, 1)), -1, dtype=np.int64)
    for row, c in enumerate(candidates):
        codes[row, : len(c)] = [ord(ch) for ch in c]
    q = [ord(ch) for ch in query]
    # prev[:, j] = distance between query[:i] and cand[:j]
    prev = np.tile(np.arange(width + 1), (len(candidates), 1))
    for i, qc in enumerate(q, 1):
        cur = np.empty_like(prev)
        cur[:, 0] = i
        sub = prev[:, :-1] + (codes[:, :width] != qc)
        best = np.minimum(prev[:, 1:] + 1, sub)
        for j in range(1, width + 1):
            cur[:, j] = np.minimum(best[:, j - 1], cur[:, j - 1] + 1)
        prev = cur
    return int(prev[np.arange(len(candidates)), lengths].min())


# --------------------------------------------------------------------------
# descriptors


@dataclass(frozen=True)
class DescriptorVector:
    molecular_weight: float
    h_donors: int
    h_acceptors: int
    rotatable_bonds: int
    ring_count: int

    FIELDS = ("molecular_weight", "h_donors", "h_acceptors", "rotatable_bonds", "ring_count")

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, f) for f in self.FIELDS)


def descriptors(graph: MolGraph) -> DescriptorVector:
    """Simple physicochemical descriptors.

    Acceptors are all N and O atoms; donors are N/O carrying at least one H.
    Rotatable bonds are acyclic single bonds between atoms that each have
    another heavy neighbor. Ring count is the cyclomatic number.
    """
    atoms = graph.atoms
    mw = sum(ATOMIC_WEIGHT[a.element] + a.h_count * HYDROGEN_WEIGHT for a in atoms)
    donors = sum(1 for a in atoms if a.element in ("N", "O") and a.h_count > 0)
    acceptors = sum(1 for a in atoms if a.element in ("N", "O"))
    heavy_degree = [
        sum(1 for j, _ in graph.adjacency[i] if atoms[j].element != "H") for i in range(len(atoms))
    ]
    cyclic = graph.cyclic_bonds
    rotatable = 0
    for k, bond in enumerate(graph.bonds):
        if bond.order is not BondOrder.SINGLE or k in cyclic:
            continue
        if atoms[bond.a].element == "H" or atoms[bond.b].element == "H":
            continue
        if heavy_degree[bond.a] > 1 and heavy_degree[bond.b] > 1:
            rotatable += 1
    rings = len(graph.bonds) - len(atoms) + len(graph.components)
    return DescriptorVector(mw, donors, acceptors, rotatable, rings)


def write_feature_csv(
    smiles: Iterable[str],
    out: TextIO,
    radius: int = DEFAULT_RADIUS,
    width: int = DEFAULT_WIDTH,
    dense: bool = False,
) -> int:
    """Write descriptors and fingerprints, one molecule per row.

    Column 1 is the canonical SMILES. Fingerprints go either into a single
    ``fp_bits`` column of space-separated indices or, with ``dense``, into
    ``width`` 0/1 columns. Returns the number of rows written.
    """
    writer = csv.writer(out, lineterminator="\n")
    header = ["smiles", *DescriptorVector.FIELDS]
    header += [f"b{i}" for i in range(width)] if dense else ["fp_bits"]
    writer.writerow(header)
    rows = 0
    for s in smiles:
        g = parse_smiles(s)
        d = descriptors(g)
        fp = ecfp(g, radius, width)
        row = [canonicalize_graph(g), f"{d.molecular_weight:.3f}", *d.as_tuple()[1:]]
        if dense:
            bits = set(fp.set_bits)
            row += [1 if i in bits else 0 for i in range(width)]
        else:
            row.append(" ".join(map(str, fp.set_bits)))
        writer.writerow(row)
        rows += 1
    return rows
