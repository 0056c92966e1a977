"""Random drug-like molecule generator for desk-scale corpora.

Molecules are assembled as graphs from ring, linker and substituent
fragments, validated, and written as canonical SMILES. A "planted motif"
(an amide-linked thiazole that never occurs in the background fragment pool)
can be forced into a molecule to make a synthetic target family whose
actives are recognisable from fingerprints.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from chemlm.smiles import Atom, Bond, BondOrder, MolGraph, canonicalize_graph, parse_smiles, validate

RINGS = [
    "c1ccccc1", "c1ccccc1", "c1ccccc1", "c1ccncc1", "c1cncnc1", "c1ccsc1", "c1ccoc1",
    "C1CCCCC1", "C1CCNCC1", "C1COCCN1", "C1CNCCN1", "C1CC1", "C1CCCC1", "C1CCOC1",
    "c1ccc2ccccc2c1", "c1ccc2[nH]ccc2c1", "c1cn[nH]c1", "c1ccc2OCOc2c1", "C1CCC2CCCCC2C1",
]
LINKERS = [
    "C", "CC", "C(=O)N", "NC(=O)", "O", "N", "C(=O)", "OC", "CO", "CN", "NC",
    "S(=O)(=O)N", "C=C", "CCN", "C(=O)O", "NC(=O)N", "CC(=O)N",
]
SUBSTITUENTS = [
    "F", "F", "Cl", "Cl", "Br", "C", "C", "CC", "OC", "O", "N", "C(F)(F)F", "C#N",
    "C(=O)O", "C(=O)N", "N(C)C", "[N+](=O)[O-]", "S(C)(=O)=O", "C(C)C", "OCC", "C(=O)C",
    "OC(F)(F)F", "CO", "C(C)(C)C",
]
MOTIF = "C(=O)Nc1nccs1"


def _frag(smiles: str) -> MolGraph:
    return parse_smiles(smiles)


@dataclass
class _Builder:
    atoms: list[Atom]
    bonds: list[Bond]

    @classmethod
    def start(cls, frag: MolGraph) -> "_Builder":
        return cls(list(frag.atoms), list(frag.bonds))

    def attachable(self, ring_only: bool = False, cyclic: frozenset[int] | None = None) -> list[int]:
        out = []
        for i, atom in enumerate(self.atoms):
            if atom.h_count < 1 or atom.charge:
                continue
            if ring_only and cyclic is not None and i not in cyclic:
                continue
            out.append(i)
        return out

    def _take_h(self, i: int) -> None:
        atom = self.atoms[i]
        if atom.h_count > 0:
            self.atoms[i] = Atom(atom.element, atom.aromatic, atom.charge, atom.h_count - 1,
                                 atom.bracketed, atom.isotope)

    def attach(self, site: int, frag: MolGraph, head: int = 0) -> int:
        """Bond ``frag``'s atom ``head`` to ``site``; returns the offset of the fragment."""
        offset = len(self.atoms)
        self.atoms.extend(frag.atoms)
        self.bonds.extend(Bond(b.a + offset, b.b + offset, b.order) for b in frag.bonds)
        self.bonds.append(Bond(site, head + offset, BondOrder.SINGLE))
        self._take_h(site)
        self._take_h(head + offset)
        return offset

    def graph(self) -> MolGraph:
        return MolGraph(tuple(self.atoms), tuple(self.bonds))


class MoleculeGenerator:
    """Seeded generator of canonical SMILES strings."""

    def __init__(self, seed: int = 0, motif_rate: float = 0.0, max_heavy_atoms: int = 32) -> None:
        self.rng = random.Random(seed)
        self.motif_rate = motif_rate
        self.max_heavy_atoms = max_heavy_atoms
        self._rings = [_frag(s) for s in RINGS]
        self._linkers = [_frag(s) for s in LINKERS]
        self._subs = [_frag(s) for s in SUBSTITUENTS]
        self._motif = _frag(MOTIF)

    def graph(self, motif: bool | None = None) -> MolGraph:
        rng = self.rng
        if motif is None:
            motif = rng.random() < self.motif_rate
        while True:
            b = _Builder.start(rng.choice(self._rings))
            for _ in range(rng.choice([0, 1, 1, 1, 2, 2])):
                g = b.graph()
                sites = b.attachable(ring_only=True, cyclic=g.cyclic_atoms) or b.attachable()
                linker = rng.choice(self._linkers)
                off = b.attach(rng.choice(sites), linker, 0)
                tail = off + len(linker.atoms) - 1
                ring = rng.choice(self._rings)
                ring_sites = [i for i, a in enumerate(ring.atoms) if a.h_count >= 1]
                b.attach(tail, ring, rng.choice(ring_sites))
            if motif:
                g = b.graph()
                sites = b.attachable(ring_only=True, cyclic=g.cyclic_atoms) or b.attachable()
                b.attach(rng.choice(sites), self._motif, 0)
            for _ in range(rng.choice([0, 1, 1, 2, 2, 3])):
                sites = b.attachable()
                if not sites:
                    break
                b.attach(rng.choice(sites), rng.choice(self._subs), 0)
            g = b.graph()
            heavy = sum(1 for a in g.atoms if a.element != "H")
            if heavy <= self.max_heavy_atoms and validate(g):
                return g

    def smiles(self, motif: bool | None = None) -> str:
        return canonicalize_graph(self.graph(motif))


def generate_corpus(n: int, seed: int = 0, motif_rate: float = 0.0, unique: bool = True) -> list[str]:
    """``n`` canonical SMILES; unique on canonical form by default."""
    gen = MoleculeGenerator(seed, motif_rate)
    out: list[str] = []
    seen: set[str] = set()
    while len(out) < n:
        s = gen.smiles()
        if unique and s in seen:
            continue
        seen.add(s)
        out.append(s)
    return out


def generate_actives(n: int, seed: int = 0, exclude: set[str] | None = None) -> list[str]:
    """``n`` distinct molecules that all carry the planted motif."""
    gen = MoleculeGenerator(seed)
    seen = set(exclude or ())
    out: list[str] = []
    while len(out) < n:
        s = gen.smiles(motif=True)
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def has_motif(smiles: str) -> bool:
    """True when the molecule contains a thiazole ring (only the motif supplies one)."""
    try:
        g = parse_smiles(smiles)
    except ValueError:
        return False
    for i, atom in enumerate(g.atoms):
        if atom.element != "S" or not atom.aromatic:
            continue
        for j, _ in g.adjacency[i]:
            for k, bk in g.adjacency[j]:
                if g.atoms[k].element == "N" and g.atoms[k].aromatic and g.bonds[bk].order is BondOrder.AROMATIC:
                    return True
    return False
