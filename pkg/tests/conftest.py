from __future__ import annotations

import random

import networkx as nx
import pytest
from networkx.algorithms.isomorphism import categorical_edge_match, categorical_node_match

from chemlm.smiles import MolGraph, parse_smiles, write_smiles


def to_networkx(graph: MolGraph) -> nx.Graph:
    g = nx.Graph()
    for i, a in enumerate(graph.atoms):
        g.add_node(i, label=(a.element, a.aromatic, a.charge, a.h_count, a.isotope))
    for b in graph.bonds:
        g.add_edge(b.a, b.b, order=int(b.order))
    return g


_NODE = categorical_node_match("label", None)
_EDGE = categorical_edge_match("order", None)


def isomorphic(a: MolGraph, b: MolGraph) -> bool:
    """Independent labelled-graph isomorphism check (VF2)."""
    return nx.is_isomorphic(to_networkx(a), to_networkx(b), node_match=_NODE, edge_match=_EDGE)


def random_rewrite(smiles: str, rng: random.Random) -> str:
    """Same molecule written from a random atom order (random DFS root and branch order)."""
    graph = parse_smiles(smiles)
    priority = list(range(len(graph.atoms)))
    rng.shuffle(priority)
    return write_smiles(graph, priority)


@pytest.fixture(scope="session")
def corpus_small() -> list[str]:
    from chemlm.synth import generate_corpus

    return generate_corpus(300, seed=7)


# --------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion, printed at the end of every run

ACCEPTANCE: list[str] = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
