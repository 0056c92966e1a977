"""Target prediction model: L2 logistic regression over fingerprint bits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from chemlm import container
from chemlm.container import CorruptPayload
from chemlm.metrics import Fingerprint, WidthMismatch, ecfp
from chemlm.smiles import canonicalize, parse_smiles


class UnknownMeasure(ValueError):
    pass


class SingleClassTrainingSet(ValueError):
    pass


# Measures already on a -log10(molar) scale, and concentration units with their molar factor.
P_SCALE = {"pic50", "pmic", "pki", "pkd", "pec50"}
CONCENTRATION_UNITS = {"ic50_nm": 1e-9, "ic50_um": 1e-6, "ic50_m": 1.0}


def to_p_scale(measure: str, value: float) -> float:
    """Convert an activity value to the negative-log scale (``IC50_nM`` 100 -> 7.0)."""
    if not math.isfinite(value):
        raise ValueError(f"non-finite activity value {value!r}")
    key = measure.lower()
    if key in P_SCALE:
        return float(value)
    if key in CONCENTRATION_UNITS:
        if value <= 0:
            raise ValueError(f"concentration must be positive, got {value}")
        return -math.log10(value * CONCENTRATION_UNITS[key])
    raise UnknownMeasure(f"unknown activity measure {measure!r}")


@dataclass(frozen=True)
class ThresholdRule:
    """Active iff the p-scale value strictly exceeds ``cutoff``."""

    measure: str = "pIC50"
    cutoff: float = 7.0

    def is_active(self, p_value: float) -> bool:
        return p_value > self.cutoff


@dataclass
class LabeledSet:
    smiles: list[str]
    fingerprints: list[Fingerprint]
    values: list[float]
    labels: list[int]
    rule: ThresholdRule
    radius: int = 2

    def __len__(self) -> int:
        return len(self.smiles)

    def matrix(self) -> np.ndarray:
        width = self.fingerprints[0].width
        x = np.zeros((len(self), width))
        for i, fp in enumerate(self.fingerprints):
            x[i, list(fp.set_bits)] = 1.0
        return x


def label_by_threshold(
    records: Iterable[tuple[str, str, float]],
    rule: ThresholdRule = ThresholdRule(),
    radius: int = 2,
    width: int = 2048,
) -> LabeledSet:
    """Canonicalize, convert to the p-scale, fingerprint and label; first record wins on duplicates."""
    out = LabeledSet([], [], [], [], rule, radius)
    seen = set()
    for smi, measure, value in records:
        p = to_p_scale(measure, float(value))
        can = canonicalize(smi)
        if can in seen:
            continue
        seen.add(can)
        out.smiles.append(can)
        out.fingerprints.append(ecfp(parse_smiles(can), radius, width))
        out.values.append(p)
        out.labels.append(int(rule.is_active(p)))
    return out


def labeled_from_smiles(actives: Sequence[str], inactives: Sequence[str], radius: int = 2, width: int = 2048) -> LabeledSet:
    """Build a labelled set directly from class lists (values are the labels)."""
    records = [(s, "pIC50", 1.0) for s in actives] + [(s, "pIC50", 0.0) for s in inactives]
    return label_by_threshold(records, ThresholdRule("pIC50", 0.5), radius, width)


def read_activity_csv(handle: TextIO) -> list[tuple[str, str, float]]:
    """Rows of (smiles, measure, value); a header row naming ``smiles`` is skipped."""
    out = []
    for row in csv.reader(handle):
        if not row or row[0].startswith("#"):
            continue
        if row[0].strip().lower() == "smiles":
            continue
        if len(row) < 3:
            raise ValueError(f"expected smiles,measure,value; got {row!r}")
        out.append((row[0].strip(), row[1].strip(), float(row[2])))
    return out


@dataclass(frozen=True)
class FitConfig:
    l2: float = 1e-3
    lr: float = 0.5
    max_epochs: int = 5000
    tol: float = 1e-6
    seed: int = 0


@dataclass
class ClassifierModel:
    weights: np.ndarray
    bias: float
    radius: int = 2
    meta: dict = field(default_factory=dict)

    kind = "tpm"

    @property
    def width(self) -> int:
        return len(self.weights)

    @classmethod
    def zeros(cls, width: int, radius: int = 2) -> "ClassifierModel":
        return cls(np.zeros(width), 0.0, radius)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def objective(w: np.ndarray, b: float, x: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean logistic loss plus ``l2/2 * |w|^2``."""
    z = x @ w + b
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w))


def fit(train: LabeledSet, config: FitConfig = FitConfig()) -> ClassifierModel:
    """Full-batch gradient descent until the gradient norm falls below ``tol``.

    Full-batch descent from zero weights involves no randomness; the seed is
    kept in the metadata for the record.
    """
    y = np.asarray(train.labels, dtype=float)
    if len(set(train.labels)) < 2:
        raise SingleClassTrainingSet(f"training set has only class {train.labels[0] if train.labels else None}")
    x = train.matrix()
    w = np.zeros(x.shape[1])
    b = 0.0
    n = len(y)
    epochs = 0
    for epochs in range(1, config.max_epochs + 1):
        r = _sigmoid(x @ w + b) - y
        gw = x.T @ r / n + config.l2 * w
        gb = float(r.mean())
        if math.sqrt(float(gw @ gw) + gb * gb) < config.tol:
            break
        w -= config.lr * gw
        b -= config.lr * gb
    meta = {"l2": config.l2, "lr": config.lr, "epochs": epochs, "tol": config.tol, "seed": config.seed,
            "rule": {"measure": train.rule.measure, "cutoff": train.rule.cutoff}, "n_train": n}
    return ClassifierModel(w, b, train.radius, meta)


def predict(model: ClassifierModel, fp: Fingerprint) -> tuple[float, bool]:
    if fp.width != model.width:
        raise WidthMismatch(f"fingerprint width {fp.width} != model width {model.width}")
    score = model.bias + float(sum(model.weights[i] for i in fp.set_bits))
    p = float(_sigmoid(np.asarray(score)))
    return p, p > 0.5


def predict_many(model: ClassifierModel, fps: Sequence[Fingerprint]) -> np.ndarray:
    """Probabilities for a batch of fingerprints."""
    out = np.empty(len(fps))
    for i, fp in enumerate(fps):
        out[i] = predict(model, fp)[0]
    return out


def score_smiles(model: ClassifierModel, smiles: Iterable[str]) -> list[tuple[str, float, bool]]:
    """Probability and label for each parsable SMILES (unparsable lines are left out)."""
    out = []
    for s in smiles:
        try:
            fp = ecfp(parse_smiles(s), model.radius, model.width)
        except ValueError:
            continue
        p, label = predict(model, fp)
        out.append((s, p, label))
    return out


def save_model(model: ClassifierModel, path: str | Path) -> None:
    meta = {"kind": model.kind, "bias": model.bias, "radius": model.radius, "meta": model.meta}
    container.write(path, meta, {"weights": model.weights.astype(np.float32)})


def load_model(path: str | Path) -> ClassifierModel:
    meta, tensors = container.read(path)
    if meta.get("kind") != ClassifierModel.kind:
        raise CorruptPayload(f"expected a tpm checkpoint, found {meta.get('kind')!r}")
    return ClassifierModel(tensors["weights"].astype(np.float64), float(meta["bias"]), int(meta["radius"]), meta["meta"])
