"""Library-level evaluation of generated molecules.

All set operations run on canonical SMILES. Counting follows a fixed order:
validate, canonicalize, drop training members, then deduplicate.
"""

from __future__ import annotations

import csv
import io
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, TextIO

from chemlm.metrics import EmptyReference, Fingerprint, nearest_levenshtein, nearest_neighbor_similarity
from chemlm.smiles import SmilesError, canonicalize_graph, parse_smiles, validate


class EmptyTestSet(ValueError):
    pass


class EmptyTraining(ValueError):
    pass


class ZeroDenominator(ZeroDivisionError):
    pass


@dataclass
class GenerationStats:
    lines: int = 0
    valid: int = 0
    novel: int = 0
    unique: int = 0
    valid_canonical: list[str] = field(default_factory=list)
    unique_canonical: list[str] = field(default_factory=list)

    @property
    def valid_ratio(self) -> float:
        return self.valid / self.lines if self.lines else 0.0

    @property
    def novel_ratio(self) -> float:
        return self.novel / self.lines if self.lines else 0.0

    @property
    def unique_ratio(self) -> float:
        return self.unique / self.lines if self.lines else 0.0

    def as_dict(self) -> dict[str, float | int]:
        return {
            "lines": self.lines,
            "valid": self.valid,
            "valid_ratio": self.valid_ratio,
            "novel": self.novel,
            "novel_ratio": self.novel_ratio,
            "unique": self.unique,
            "unique_ratio": self.unique_ratio,
        }


def canonical_or_none(line: str) -> str | None:
    try:
        graph = parse_smiles(line)
    except SmilesError:
        return None
    if not validate(graph):
        return None
    return canonicalize_graph(graph)


def generation_stats(samples: Iterable[str], training_set: Iterable[str] = ()) -> GenerationStats:
    """Count valid, novel and unique molecules among sampled lines.

    ``training_set`` must already be canonical. ``unique_canonical`` keeps
    first-seen order.
    """
    train = set(training_set)
    stats = GenerationStats()
    seen: set[str] = set()
    for line in samples:
        stats.lines += 1
        can = canonical_or_none(line.rstrip("\n"))
        if can is None:
            continue
        stats.valid += 1
        stats.valid_canonical.append(can)
        if can in train:
            continue
        stats.novel += 1
        if can not in seen:
            seen.add(can)
            stats.unique_canonical.append(can)
    stats.unique = len(stats.unique_canonical)
    return stats


def reproduction_ratio(generated: Iterable[str], test: Iterable[str]) -> float:
    """|G ∩ T| / |T| on canonical sets."""
    t = set(test)
    if not t:
        raise EmptyTestSet("test set is empty")
    return len(set(generated) & t) / len(t)


def enrichment_over_random(n: int, size_g: int, m: int, size_r: int) -> float:
    """(n/|G|) / (m/|R|); ``inf`` when the random model reproduced nothing (m = 0, n > 0)."""
    if size_g <= 0:
        raise ZeroDenominator(f"|G| = {size_g}")
    if size_r <= 0:
        raise ZeroDenominator(f"|R| = {size_r}")
    if n == 0:
        return 0.0
    if m == 0:
        return math.inf
    return (n / size_g) / (m / size_r)


@dataclass(frozen=True)
class EnrichmentReport:
    n: int
    size_g: int
    m: int
    size_r: int
    size_t: int
    reproduction: float
    random_reproduction: float
    eor: float

    @property
    def eor_infinite(self) -> bool:
        return math.isinf(self.eor)

    def as_dict(self) -> dict[str, float | int | str]:
        return {
            "test_size": self.size_t,
            "generated_size": self.size_g,
            "generated_reproduced": self.n,
            "reproduction_ratio": self.reproduction,
            "random_size": self.size_r,
            "random_reproduced": self.m,
            "random_reproduction_ratio": self.random_reproduction,
            "eor": "inf" if self.eor_infinite else self.eor,
        }


def enrichment_report(generated: Iterable[str], random: Iterable[str], test: Iterable[str]) -> EnrichmentReport:
    g, r, t = set(generated), set(random), set(test)
    if not t:
        raise EmptyTestSet("test set is empty")
    n, m = len(g & t), len(r & t)
    return EnrichmentReport(n, len(g), m, len(r), len(t), n / len(t), m / len(t),
                            enrichment_over_random(n, len(g), m, len(r)))


# --------------------------------------------------------------------------
# histograms


@dataclass
class Histogram:
    """Bins given by (lo, hi) pairs with their counts."""

    lo: list[float]
    hi: list[float]
    counts: list[int]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def rows(self) -> list[tuple[float, float, int]]:
        return list(zip(self.lo, self.hi, self.counts))


def _n_bins(bin_width: float) -> int:
    n = round(1.0 / bin_width)
    if n < 1 or abs(n * bin_width - 1.0) > 1e-9:
        raise ValueError(f"bin width {bin_width} must divide 1 evenly")
    return n


def unit_histogram(values: Iterable[float], bin_width: float = 0.05) -> Histogram:
    """Right-closed bins over [0, 1]: [0, w], (w, 2w], ..., (1-w, 1].

    Edges are computed as k/n so that a similarity equal to a rational edge
    lands in the bin it closes.
    """
    n = _n_bins(bin_width)
    edges = [k / n for k in range(n + 1)]
    counts = [0] * n
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"value {v} outside [0, 1]")
        counts[max(0, bisect_left(edges, v) - 1)] += 1
    return Histogram(edges[:-1], edges[1:], counts)


def similarity_histogram(
    generated: Sequence[Fingerprint], reference: Sequence[Fingerprint], bin_width: float = 0.05
) -> Histogram:
    """Histogram of each generated molecule's nearest-neighbour Tanimoto similarity to ``reference``."""
    if not reference:
        raise EmptyReference("reference set is empty")
    return unit_histogram(nearest_neighbor_similarity(generated, reference), bin_width)


def edit_distance_histogram(reproduced: Sequence[str], training: Sequence[str], bin_width: int = 1) -> Histogram:
    """Histogram of the minimum Levenshtein distance of each string to ``training``.

    Bins are inclusive integer ranges [lo, hi]; with unit width each bin is one distance.
    """
    if not training:
        raise EmptyTraining("training set is empty")
    if bin_width < 1:
        raise ValueError("bin width must be a positive integer")
    dists = [nearest_levenshtein(s, training) for s in reproduced]
    top = max(dists, default=0)
    n = top // bin_width + 1
    counts = [0] * n
    for d in dists:
        counts[d // bin_width] += 1
    lo = [k * bin_width for k in range(n)]
    return Histogram(lo, [x + bin_width - 1 for x in lo], counts)


def write_histogram_csv(hist: Histogram | Mapping[str, Histogram], handle: TextIO) -> None:
    """Write ``bin_lo,bin_hi,count``; a mapping of labelled histograms becomes one count column each."""
    w = csv.writer(handle, lineterminator="\n")
    if isinstance(hist, Histogram):
        w.writerow(["bin_lo", "bin_hi", "count"])
        w.writerows(hist.rows())
        return
    labels = list(hist)
    hs = [hist[k] for k in labels]
    n = max(len(h.counts) for h in hs)
    longest = max(hs, key=lambda h: len(h.counts))
    w.writerow(["bin_lo", "bin_hi"] + [f"count_{k}" for k in labels])
    for i in range(n):
        w.writerow([longest.lo[i], longest.hi[i]] + [h.counts[i] if i < len(h.counts) else 0 for h in hs])


def histogram_csv(hist: Histogram | Mapping[str, Histogram]) -> str:
    buf = io.StringIO()
    write_histogram_csv(hist, buf)
    return buf.getvalue()


def format_report(fields: Mapping[str, object]) -> str:
    """``key: value`` lines in insertion order; floats to 6 significant digits."""
    out = []
    for k, v in fields.items():
        if isinstance(v, float) and math.isfinite(v):
            v = f"{v:.6g}"
        out.append(f"{k}: {v}")
    return "\n".join(out) + "\n"


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if ": " in line:
            k, v = line.split(": ", 1)
            out[k] = v
    return out
