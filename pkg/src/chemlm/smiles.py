"""SMILES lexing, parsing, validation, canonicalization and writing.

Aromaticity is purely syntactic here: lowercase atoms carry an aromatic flag
and no kekulization or perception is attempted. Stereo marks (``@``, ``@@``,
``/``, ``\\``) are lexed and then dropped, so graphs and canonical strings
are stereo-free.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

from chemlm.elements import (
    AROMATIC_BRACKET,
    AROMATIC_ORGANIC,
    ATOMIC_NUMBER,
    ORGANIC_SUBSET,
    is_element,
)

EOL = "\n"


# --------------------------------------------------------------------------
# errors


class SmilesError(ValueError):
    """Base class for lexical and grammatical SMILES errors."""

    def __init__(self, message: str, position: int | None = None) -> None:
        super().__init__(message)
        self.position = position


class UnknownCharacter(SmilesError):
    pass


class UnclosedBracketAtom(SmilesError):
    pass


class InvalidBracketAtom(SmilesError):
    pass


class UnmatchedRingClosure(SmilesError):
    def __init__(self, number: int, position: int | None = None) -> None:
        super().__init__(f"ring closure {number} is never closed", position)
        self.number = number


class UnbalancedBranch(SmilesError):
    pass


class DanglingBond(SmilesError):
    pass


class DuplicateBond(SmilesError):
    pass


class GraphTooLarge(SmilesError):
    pass


class InvalidMolecule(SmilesError):
    """Raised by :func:`canonicalize` when a graph parses but fails validation."""

    def __init__(self, verdict: "Verdict") -> None:
        super().__init__(verdict.message, None)
        self.verdict = verdict


# --------------------------------------------------------------------------
# tokens


class TokenKind(enum.Enum):
    ATOM = "atom"
    BRACKET_ATOM = "bracket-atom"
    BOND = "bond"
    RING = "ring"
    BRANCH_OPEN = "branch-open"
    BRANCH_CLOSE = "branch-close"
    DOT = "dot"
    EOL = "eol"


@dataclass(frozen=True)
class Token:
    kind: TokenKind
    text: str
    position: int

    @property
    def ring_number(self) -> int:
        if self.kind is not TokenKind.RING:
            raise TypeError(f"{self.kind.value} token has no ring number")
        return int(self.text.lstrip("%"))


_BOND_CHARS = "-=#:/\\"

_BRACKET_RE = re.compile(
    r"""
    (?P<isotope>\d+)?
    (?P<symbol>[A-Z][a-z]?|se|as|te|[bcnops])
    (?P<chiral>@@?(?:TH[12]|AL[12]|SP[123]|TB\d{1,2}|OH\d{1,2})?)?
    (?P<hcount>H\d?)?
    (?P<charge>\+\+?|--?|[+-]\d{1,2})?
    (?::(?P<mapclass>\d+))?
    $""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class BracketSpec:
    isotope: int | None
    element: str
    aromatic: bool
    h_count: int
    charge: int


def parse_bracket(text: str, position: int = 0) -> BracketSpec:
    """Decode the inside of a bracket atom such as ``[13CH3+]``."""
    inner = text[1:-1] if text.startswith("[") else text
    m = _BRACKET_RE.match(inner)
    if m is None:
        raise InvalidBracketAtom(f"malformed bracket atom {text!r}", position)
    sym = m.group("symbol")
    # "[Sc]" is scandium, but "[CH]" must not swallow the H.
    if len(sym) == 2 and sym[0].isupper() and not is_element(sym):
        raise InvalidBracketAtom(f"unknown element {sym!r} in {text!r}", position)
    aromatic = sym[0].islower()
    if aromatic and sym not in AROMATIC_BRACKET:
        raise InvalidBracketAtom(f"{sym!r} cannot be aromatic", position)
    element = sym.capitalize()
    if not is_element(element):
        raise InvalidBracketAtom(f"unknown element {sym!r}", position)
    hc = m.group("hcount")
    h_count = 0 if hc is None else (int(hc[1:]) if len(hc) > 1 else 1)
    ch = m.group("charge")
    if ch is None:
        charge = 0
    elif ch in ("+", "-"):
        charge = 1 if ch == "+" else -1
    elif ch in ("++", "--"):
        charge = 2 if ch == "++" else -2
    else:
        charge = int(ch)
    iso = m.group("isotope")
    return BracketSpec(
        isotope=int(iso) if iso is not None else None,
        element=element,
        aromatic=aromatic,
        h_count=h_count,
        charge=charge,
    )


def tokenize(text: str) -> list[Token]:
    """Split a single SMILES line into a lossless list of tokens.

    A trailing line feed becomes an EOL token; an interior one is an error.
    """
    tokens: list[Token] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == EOL:
            if i != n - 1:
                raise UnknownCharacter("line feed inside a SMILES line", i)
            tokens.append(Token(TokenKind.EOL, ch, i))
            i += 1
        elif ch in "CB" and text[i : i + 2] in ("Cl", "Br"):
            tokens.append(Token(TokenKind.ATOM, text[i : i + 2], i))
            i += 2
        elif ch in ORGANIC_SUBSET or ch in AROMATIC_ORGANIC:
            tokens.append(Token(TokenKind.ATOM, ch, i))
            i += 1
        elif ch == "[":
            end = text.find("]", i + 1)
            if end < 0 or EOL in text[i:end]:
                raise UnclosedBracketAtom("bracket atom is not closed", i)
            parse_bracket(text[i : end + 1], i)
            tokens.append(Token(TokenKind.BRACKET_ATOM, text[i : end + 1], i))
            i = end + 1
        elif ch in _BOND_CHARS:
            tokens.append(Token(TokenKind.BOND, ch, i))
            i += 1
        elif ch.isdigit():
            tokens.append(Token(TokenKind.RING, ch, i))
            i += 1
        elif ch == "%":
            digits = text[i + 1 : i + 3]
            if len(digits) != 2 or not digits.isdigit():
                raise UnknownCharacter("'%' must be followed by two digits", i)
            tokens.append(Token(TokenKind.RING, text[i : i + 3], i))
            i += 3
        elif ch == "(":
            tokens.append(Token(TokenKind.BRANCH_OPEN, ch, i))
            i += 1
        elif ch == ")":
            tokens.append(Token(TokenKind.BRANCH_CLOSE, ch, i))
            i += 1
        elif ch == ".":
            tokens.append(Token(TokenKind.DOT, ch, i))
            i += 1
        else:
            raise UnknownCharacter(f"unexpected character {ch!r}", i)
    return tokens


# --------------------------------------------------------------------------
# graph


class BondOrder(enum.IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence(self) -> float:
        return 1.5 if self is BondOrder.AROMATIC else float(self.value)


_BOND_SYMBOL_ORDER = {
    "-": BondOrder.SINGLE,
    "/": BondOrder.SINGLE,
    "\\": BondOrder.SINGLE,
    "=": BondOrder.DOUBLE,
    "#": BondOrder.TRIPLE,
    ":": BondOrder.AROMATIC,
}


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    charge: int = 0
    h_count: int = 0
    bracketed: bool = False
    isotope: int | None = None


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: BondOrder = BondOrder.SINGLE

    def other(self, atom: int) -> int:
        return self.b if atom == self.a else self.a


@dataclass(frozen=True)
class MolGraph:
    """Labeled molecular graph.

    ``h_count`` on each atom is the total attached hydrogen count: explicit
    for bracket atoms, derived from the valence table otherwise.
    ``ring_bonds`` holds the indices of bonds created by ring-closure digits.
    """

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    ring_bonds: frozenset[int] = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.atoms)

    @cached_property
    def adjacency(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom, the (neighbor, bond index) pairs in bond order of creation."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for k, bond in enumerate(self.bonds):
            adj[bond.a].append((bond.b, k))
            adj[bond.b].append((bond.a, k))
        return tuple(tuple(x) for x in adj)

    def degree(self, atom: int) -> int:
        return len(self.adjacency[atom])

    @cached_property
    def cyclic_bonds(self) -> frozenset[int]:
        """Indices of bonds lying on at least one cycle (non-bridges)."""
        return frozenset(range(len(self.bonds))) - _bridges(self)

    @cached_property
    def cyclic_atoms(self) -> frozenset[int]:
        out = set()
        for k in self.cyclic_bonds:
            out.add(self.bonds[k].a)
            out.add(self.bonds[k].b)
        return frozenset(out)

    @cached_property
    def components(self) -> tuple[tuple[int, ...], ...]:
        seen = [False] * len(self.atoms)
        comps = []
        for start in range(len(self.atoms)):
            if seen[start]:
                continue
            seen[start] = True
            stack, comp = [start], []
            while stack:
                u = stack.pop()
                comp.append(u)
                for v, _ in self.adjacency[u]:
                    if not seen[v]:
                        seen[v] = True
                        stack.append(v)
            comps.append(tuple(sorted(comp)))
        return tuple(comps)

    def bond_between(self, a: int, b: int) -> Bond | None:
        for v, k in self.adjacency[a]:
            if v == b:
                return self.bonds[k]
        return None


def _bridges(graph: MolGraph) -> frozenset[int]:
    """Bond indices whose removal disconnects the graph (iterative Tarjan)."""
    n = len(graph.atoms)
    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    timer = 0
    adj = graph.adjacency
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = timer
        timer += 1
        # frames: (atom, bond index used to enter, iterator position)
        stack = [(root, -1, 0)]
        while stack:
            u, via, pos = stack[-1]
            if pos < len(adj[u]):
                stack[-1] = (u, via, pos + 1)
                v, k = adj[u][pos]
                if k == via:
                    continue
                if disc[v] < 0:
                    disc[v] = low[v] = timer
                    timer += 1
                    stack.append((v, k, 0))
                else:
                    low[u] = min(low[u], disc[v])
            else:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[u])
                    if low[u] > disc[parent]:
                        bridges.add(via)
    return frozenset(bridges)


# --------------------------------------------------------------------------
# valence


def _default_valences() -> dict[str, tuple[int, ...]]:
    return {
        "B": (3,),
        "C": (4,),
        "N": (3, 5),
        "O": (2,),
        "P": (3, 5),
        "S": (2, 4, 6),
        "F": (1,),
        "Cl": (1,),
        "Br": (1,),
        "I": (1,),
    }


@dataclass(frozen=True)
class ValenceTable:
    """Allowed valences per element with a formal-charge adjustment.

    Charge rule: boron gains valence with negative charge (``[BH4-]``),
    carbon loses one per unit of charge either way (``[CH3+]``, ``[CH3-]``),
    and every other element gains valence with positive charge and loses it
    with negative charge (``[NH4+]``, ``[O-]``).
    """

    valences: Mapping[str, tuple[int, ...]] = field(default_factory=_default_valences)

    def knows(self, element: str) -> bool:
        return element in self.valences

    def allowed(self, element: str, charge: int = 0) -> tuple[int, ...]:
        base = self.valences[element]
        if element == "B":
            shift = -charge
        elif element == "C":
            shift = -abs(charge)
        else:
            shift = charge
        return tuple(v + shift for v in base if v + shift >= 0)


DEFAULT_VALENCES = ValenceTable()


def implicit_hydrogens(
    element: str,
    aromatic: bool,
    orders: Iterable[BondOrder],
    table: ValenceTable = DEFAULT_VALENCES,
) -> int:
    """Hydrogen count implied for an unbracketed atom with the given bonds.

    Aliphatic atoms take the smallest allowed valence that accommodates the
    bond-order sum. Aromatic atoms reserve one valence unit for the pi system
    and only ever use their lowest valence, so ``c`` in benzene gets one H,
    ``n`` in pyridine and ``o`` in furan get none.
    """
    if not table.knows(element):
        return 0
    orders = list(orders)
    allowed = table.allowed(element, 0)
    if aromatic:
        sigma = sum(1 if o is BondOrder.AROMATIC else int(o) for o in orders)
        return max(0, min(allowed) - (sigma + 1))
    total = sum(o.valence for o in orders)
    for v in sorted(allowed):
        if v >= total:
            return int(v - total)
    return 0


# --------------------------------------------------------------------------
# parsing


def parse(tokens: Sequence[Token], table: ValenceTable = DEFAULT_VALENCES) -> MolGraph:
    """Build a molecular graph from a token list produced by :func:`tokenize`."""
    specs: list[BracketSpec | Token] = []
    bonds: list[tuple[int, int, BondOrder | None]] = []
    pairs: set[tuple[int, int]] = set()
    closures: set[int] = set()
    prev: int | None = None
    pending: Token | None = None
    branches: list[tuple[int, int, bool]] = []  # (atom, position, has content)
    open_rings: dict[int, tuple[int, Token | None, int]] = {}

    def add_bond(a: int, b: int, order: BondOrder | None, position: int) -> int:
        if a == b:
            raise DuplicateBond("atom bonded to itself", position)
        key = (min(a, b), max(a, b))
        if key in pairs:
            raise DuplicateBond(f"atoms {a} and {b} are bonded twice", position)
        pairs.add(key)
        bonds.append((a, b, order))
        return len(bonds) - 1

    for pos, tok in enumerate(tokens):
        kind = tok.kind
        if kind is TokenKind.EOL:
            if pos != len(tokens) - 1:
                raise UnknownCharacter("EOL must be the final token", tok.position)
            break
        if kind in (TokenKind.ATOM, TokenKind.BRACKET_ATOM):
            idx = len(specs)
            specs.append(parse_bracket(tok.text, tok.position) if kind is TokenKind.BRACKET_ATOM else tok)
            if prev is not None:
                order = _BOND_SYMBOL_ORDER[pending.text] if pending else None
                add_bond(prev, idx, order, tok.position)
            elif pending is not None:
                raise DanglingBond("bond has no preceding atom", pending.position)
            if branches:
                a, p, _ = branches[-1]
                branches[-1] = (a, p, True)
            prev, pending = idx, None
        elif kind is TokenKind.BOND:
            if prev is None or pending is not None:
                raise DanglingBond(f"misplaced bond {tok.text!r}", tok.position)
            pending = tok
        elif kind is TokenKind.RING:
            num = tok.ring_number
            if prev is None:
                raise UnmatchedRingClosure(num, tok.position)
            if num in open_rings:
                start, start_bond, _ = open_rings.pop(num)
                orders = {_BOND_SYMBOL_ORDER[t.text] for t in (start_bond, pending) if t is not None}
                if len(orders) > 1:
                    raise DuplicateBond(f"conflicting bond orders on ring closure {num}", tok.position)
                k = add_bond(start, prev, orders.pop() if orders else None, tok.position)
                closures.add(k)
            else:
                open_rings[num] = (prev, pending, tok.position)
            pending = None
        elif kind is TokenKind.BRANCH_OPEN:
            if prev is None:
                raise UnbalancedBranch("branch opened before any atom", tok.position)
            if pending is not None:
                raise DanglingBond("bond before branch", pending.position)
            branches.append((prev, tok.position, False))
        elif kind is TokenKind.BRANCH_CLOSE:
            if not branches:
                raise UnbalancedBranch("unmatched ')'", tok.position)
            if pending is not None:
                raise DanglingBond("bond at end of branch", pending.position)
            atom, _, has_content = branches.pop()
            if not has_content:
                raise UnbalancedBranch("empty branch", tok.position)
            prev = atom
        elif kind is TokenKind.DOT:
            if pending is not None:
                raise DanglingBond("bond before '.'", pending.position)
            if branches:
                raise UnbalancedBranch("'.' inside a branch", tok.position)
            if prev is None:
                raise DanglingBond("'.' without a preceding atom", tok.position)
            prev = None
    if pending is not None:
        raise DanglingBond("bond at end of input", pending.position)
    if branches:
        raise UnbalancedBranch("unclosed '('", branches[-1][1])
    if open_rings:
        num, (_, _, position) = next(iter(open_rings.items()))
        raise UnmatchedRingClosure(num, position)

    aromatic = [s.aromatic if isinstance(s, BracketSpec) else s.text.islower() for s in specs]
    resolved = []
    implicit_aromatic = []
    for k, (a, b, order) in enumerate(bonds):
        if order is None:
            if aromatic[a] and aromatic[b]:
                order = BondOrder.AROMATIC
                implicit_aromatic.append(k)
            else:
                order = BondOrder.SINGLE
        resolved.append(Bond(a, b, order))
    skeleton = MolGraph(tuple(Atom("C") for _ in specs), tuple(resolved))
    if implicit_aromatic:
        # an unmarked bond between aromatic atoms outside any ring is single
        cyclic = skeleton.cyclic_bonds
        for k in implicit_aromatic:
            if k not in cyclic:
                resolved[k] = Bond(resolved[k].a, resolved[k].b, BondOrder.SINGLE)
        skeleton = MolGraph(skeleton.atoms, tuple(resolved))

    atoms = []
    for i, spec in enumerate(specs):
        if isinstance(spec, BracketSpec):
            atoms.append(Atom(spec.element, spec.aromatic, spec.charge, spec.h_count, True, spec.isotope))
        else:
            element = spec.text.capitalize() if spec.text.islower() else spec.text
            orders = [resolved[k].order for _, k in skeleton.adjacency[i]]
            h = implicit_hydrogens(element, aromatic[i], orders, table)
            atoms.append(Atom(element, aromatic[i], 0, h, False, None))
    return MolGraph(tuple(atoms), tuple(resolved), frozenset(closures))


def parse_smiles(text: str, table: ValenceTable = DEFAULT_VALENCES) -> MolGraph:
    return parse(tokenize(text), table)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Verdict:
    valid: bool
    atom: int | None = None
    rule: str | None = None
    message: str = "ok"

    def __bool__(self) -> bool:
        return self.valid


def validate(graph: MolGraph, table: ValenceTable = DEFAULT_VALENCES) -> Verdict:
    """Check valences and aromatic ring membership; never raises.

    Aromatic bonds count 1.5. An aromatic atom is accepted when the floor or
    ceiling of its bond-order sum (plus H) is an allowed valence, or when its
    sigma-only count is (lone-pair donors such as ``[nH]``, ``o``, ``s``).
    """
    if not graph.atoms:
        return Verdict(False, None, "empty", "empty molecule")
    cyclic = graph.cyclic_atoms
    for i, atom in enumerate(graph.atoms):
        if atom.aromatic and i not in cyclic:
            return Verdict(False, i, "aromatic-acyclic", f"aromatic atom {i} is not in a ring")
        if not table.knows(atom.element):
            if atom.bracketed:
                continue
            return Verdict(False, i, "unknown-element", f"no valence rule for {atom.element}")
        allowed = set(table.allowed(atom.element, atom.charge))
        n_arom = 0
        other = 0
        for _, k in graph.adjacency[i]:
            order = graph.bonds[k].order
            if order is BondOrder.AROMATIC:
                n_arom += 1
            else:
                other += int(order)
        total = 1.5 * n_arom + other + atom.h_count
        ok = math.floor(total) in allowed or math.ceil(total) in allowed
        if not ok and n_arom:
            ok = (n_arom + other + atom.h_count) in allowed
        if not ok:
            return Verdict(
                False, i, "valence",
                f"atom {i} ({atom.element}) has valence {total:g}, allowed {sorted(allowed)}",
            )
    return Verdict(True)


def check_smiles(text: str, table: ValenceTable = DEFAULT_VALENCES) -> Verdict:
    """Parse and validate, folding syntax errors into a rejection verdict."""
    try:
        graph = parse_smiles(text, table)
    except SmilesError as exc:
        return Verdict(False, None, "syntax", f"{type(exc).__name__}: {exc}")
    return validate(graph, table)


# --------------------------------------------------------------------------
# canonical ranking


def _dense_rank(keys: Sequence) -> list[int]:
    order = sorted(set(keys))
    index = {k: r for r, k in enumerate(order)}
    return [index[k] for k in keys]


def _refine(graph: MolGraph, ranks: list[int]) -> list[int]:
    adj = graph.adjacency
    bonds = graph.bonds
    n_classes = len(set(ranks))
    while True:
        keys = [
            (ranks[i], tuple(sorted((int(bonds[k].order), ranks[j]) for j, k in adj[i])))
            for i in range(len(ranks))
        ]
        new = _dense_rank(keys)
        n_new = len(set(new))
        if n_new == n_classes:
            return new
        ranks, n_classes = new, n_new


def atom_invariant(graph: MolGraph, i: int) -> tuple:
    atom = graph.atoms[i]
    return (
        ATOMIC_NUMBER.get(atom.element, 0),
        graph.degree(i),
        atom.charge,
        atom.aromatic,
        atom.h_count,
        atom.isotope or 0,
    )


_MAX_LEAVES = 512


def _twins(graph: MolGraph, u: int, v: int) -> bool:
    """True when swapping ``u`` and ``v`` is an automorphism of their shared neighborhood."""
    bonds = graph.bonds
    nu = sorted((w, int(bonds[k].order)) for w, k in graph.adjacency[u] if w != v)
    nv = sorted((w, int(bonds[k].order)) for w, k in graph.adjacency[v] if w != u)
    return nu == nv


def _search(graph: MolGraph, ranks: list[int], best: list, table: ValenceTable) -> None:
    n = len(ranks)
    if len(set(ranks)) == n:
        text = write_smiles(graph, ranks, table)
        if best[0] is None or text < best[0]:
            best[0], best[1] = text, ranks
        best[2] -= 1
        return
    counts: dict[int, int] = {}
    for r in ranks:
        counts[r] = counts.get(r, 0) + 1
    tied = min(r for r, c in counts.items() if c > 1)
    tried: list[int] = []
    for v in (i for i in range(n) if ranks[i] == tied):
        if tried and best[2] <= 0:
            break
        if any(_twins(graph, u, v) for u in tried):
            continue
        tried.append(v)
        split = _refine(graph, _dense_rank([(r, i != v) for i, r in enumerate(ranks)]))
        _search(graph, split, best, table)


def _canonical(graph: MolGraph, table: ValenceTable) -> tuple[str, list[int]]:
    n = len(graph.atoms)
    if n == 0:
        return "", []
    ranks = _refine(graph, _dense_rank([atom_invariant(graph, i) for i in range(n)]))
    best: list = [None, None, _MAX_LEAVES]
    _search(graph, ranks, best, table)
    return best[0], best[1]


def canonical_ranks(graph: MolGraph, table: ValenceTable = DEFAULT_VALENCES) -> list[int]:
    """Permutation-invariant total order of the atoms.

    Atom invariants are refined by neighbor ranks until stable. Remaining
    ties are broken by individualizing each member of the lowest tied class
    in turn, refining again, and keeping the labeling whose SMILES is
    lexicographically smallest. Twin atoms (same neighbors, same bonds) are
    tried once since swapping them is an automorphism; past a leaf budget
    only the first member of each class is followed.
    """
    return _canonical(graph, table)[1]


# --------------------------------------------------------------------------
# writing

_MAX_RING_LABEL = 99


def _atom_text(graph: MolGraph, i: int, table: ValenceTable) -> str:
    atom = graph.atoms[i]
    sym = atom.element.lower() if atom.aromatic else atom.element
    organic = sym in AROMATIC_ORGANIC if atom.aromatic else sym in ORGANIC_SUBSET
    if organic and atom.charge == 0 and atom.isotope is None:
        orders = [graph.bonds[k].order for _, k in graph.adjacency[i]]
        if implicit_hydrogens(atom.element, atom.aromatic, orders, table) == atom.h_count:
            return sym
    parts = ["["]
    if atom.isotope is not None:
        parts.append(str(atom.isotope))
    parts.append(sym)
    if atom.h_count:
        parts.append("H" if atom.h_count == 1 else f"H{atom.h_count}")
    if atom.charge:
        sign = "+" if atom.charge > 0 else "-"
        parts.append(sign if abs(atom.charge) == 1 else f"{sign}{abs(atom.charge)}")
    parts.append("]")
    return "".join(parts)


def _bond_text(graph: MolGraph, k: int) -> str:
    bond = graph.bonds[k]
    both_aromatic = graph.atoms[bond.a].aromatic and graph.atoms[bond.b].aromatic
    if bond.order is BondOrder.SINGLE:
        return "-" if both_aromatic else ""
    if bond.order is BondOrder.DOUBLE:
        return "="
    if bond.order is BondOrder.TRIPLE:
        return "#"
    return "" if both_aromatic and k in graph.cyclic_bonds else ":"


def _ring_label(n: int) -> str:
    return str(n) if n < 10 else f"%{n:02d}"


def write_smiles(
    graph: MolGraph,
    priority: Sequence[int] | None = None,
    table: ValenceTable = DEFAULT_VALENCES,
) -> str:
    """Serialize a graph by depth-first traversal.

    Each component starts at its lowest-priority atom and neighbors are
    visited in ascending priority; the default priority is the atom index.
    Ring-closure labels are reused lowest-free-first.
    """
    n = len(graph.atoms)
    if priority is None:
        priority = list(range(n))
    roots = sorted(
        (min(comp, key=lambda a: priority[a]) for comp in graph.components),
        key=lambda a: priority[a],
    )
    return ".".join(_write_component(graph, root, priority, table) for root in roots)


def _write_component(graph: MolGraph, root: int, priority: Sequence[int], table: ValenceTable) -> str:
    adj = graph.adjacency

    def ordered(u: int) -> list[tuple[int, int]]:
        return sorted(adj[u], key=lambda vk: priority[vk[0]])

    # pass 1: DFS spanning tree; non-tree edges become ring closures
    visited = {root}
    used: set[int] = set()
    children: dict[int, list[tuple[int, int]]] = {root: []}
    opens: dict[int, list[tuple[int, int]]] = {}
    closes: dict[int, list[tuple[int, int]]] = {}
    preorder = {root: 0}
    stack = [(root, ordered(root), 0)]
    while stack:
        u, nbrs, pos = stack[-1]
        if pos == len(nbrs):
            stack.pop()
            continue
        stack[-1] = (u, nbrs, pos + 1)
        v, k = nbrs[pos]
        if k in used:
            continue
        used.add(k)
        if v in visited:
            opens.setdefault(v, []).append((u, k))
            closes.setdefault(u, []).append((v, k))
        else:
            visited.add(v)
            preorder[v] = len(preorder)
            children[v] = []
            children[u].append((v, k))
            stack.append((v, ordered(v), 0))

    # pass 2: emit in preorder, allocating ring labels as they appear
    free = list(range(1, _MAX_RING_LABEL + 1))
    label_of: dict[int, int] = {}
    out: list[str] = []
    todo: list[tuple[str, int, str]] = [("atom", root, "")]
    while todo:
        what, u, text = todo.pop()
        if what == "text":
            out.append(text)
            continue
        out.append(text)
        out.append(_atom_text(graph, u, table))
        released = []
        for v, k in sorted(closes.get(u, ()), key=lambda vk: preorder[vk[0]]):
            label = label_of.pop(k)
            out.append(_ring_label(label))
            released.append(label)
        for v, k in sorted(opens.get(u, ()), key=lambda vk: preorder[vk[0]]):
            if not free:
                raise GraphTooLarge(f"more than {_MAX_RING_LABEL} ring closures open at once")
            label = free.pop(0)
            label_of[k] = label
            out.append(_bond_text(graph, k) + _ring_label(label))
        if released:
            free = sorted(free + released)
        kids = children[u]
        seq: list[tuple[str, int, str]] = []
        for idx, (v, k) in enumerate(kids):
            if idx < len(kids) - 1:
                seq += [("text", -1, "("), ("atom", v, _bond_text(graph, k)), ("text", -1, ")")]
            else:
                seq.append(("atom", v, _bond_text(graph, k)))
        todo.extend(reversed(seq))
    return "".join(out)


def canonicalize_graph(graph: MolGraph, table: ValenceTable = DEFAULT_VALENCES) -> str:
    return _canonical(graph, table)[0]


def canonicalize(text: str, table: ValenceTable = DEFAULT_VALENCES) -> str:
    """Canonical, stereo-free SMILES for a valid input string.

    Raises the parser's :class:`SmilesError` subclasses, or
    :class:`InvalidMolecule` when the graph fails validation.
    """
    graph = parse_smiles(text.rstrip(EOL), table)
    verdict = validate(graph, table)
    if not verdict:
        raise InvalidMolecule(verdict)
    return canonicalize_graph(graph, table)


def try_canonicalize(text: str, table: ValenceTable = DEFAULT_VALENCES) -> str | None:
    try:
        return canonicalize(text, table)
    except SmilesError:
        return None
