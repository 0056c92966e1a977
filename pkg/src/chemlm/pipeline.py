"""Dataset splitting and the generate / score / retrain design cycle."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from chemlm.evaluation import GenerationStats, format_report, generation_stats
from chemlm.lm import Checkpoint, SampleConfig, TrainingConfig, fine_tune, load_checkpoint, sample_lines, save_checkpoint, to_bytes
from chemlm.smiles import canonicalize
from chemlm.tpm import ClassifierModel, score_smiles

log = logging.getLogger(__name__)


class CorpusTooSmall(ValueError):
    pass


class CorpusLineError(ValueError):
    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyActivePool(RuntimeError):
    pass


class StateLocked(RuntimeError):
    pass


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    """Either ``test_size`` (absolute) or ``test_fraction``; ``test_size`` wins when both are set."""

    test_fraction: float = 0.5
    test_size: int | None = None
    seed: int = 0
    dedup: bool = True


def dedup_canonical(lines: Sequence[str]) -> list[str]:
    """Canonical forms in first-seen order; raises with the 1-based line number on bad input."""
    out, seen = [], set()
    for no, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        try:
            can = canonicalize(line)
        except ValueError as exc:
            raise CorpusLineError(no, str(exc)) from exc
        if can not in seen:
            seen.add(can)
            out.append(can)
    return out


def split_dataset(lines: Sequence[str], spec: SplitSpec = SplitSpec()) -> tuple[list[str], list[str]]:
    """Random disjoint (train, test) split; order within each part follows the input."""
    items = dedup_canonical(lines) if spec.dedup else [s.strip() for s in lines if s.strip()]
    n = len(items)
    if n < 2:
        raise CorpusTooSmall(f"need at least 2 molecules, got {n}")
    n_test = spec.test_size if spec.test_size is not None else int(round(n * spec.test_fraction))
    if not 1 <= n_test <= n - 1:
        raise CorpusTooSmall(f"cannot take {n_test} test molecules from {n}")
    perm = np.random.default_rng(spec.seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = [s for i, s in enumerate(items) if i not in test_idx]
    test = [s for i, s in enumerate(items) if i in test_idx]
    return train, test


# --------------------------------------------------------------------------
# shared helpers


def _seed(*parts: int) -> int:
    """Stable derived seed for (run seed, iteration, epoch, ...)."""
    h = hashlib.blake2b(",".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def predicted_actives(tpm: ClassifierModel, canonical: Sequence[str]) -> list[str]:
    return [s for s, _, label in score_smiles(tpm, canonical) if label]


def _write_lines(path: Path, lines: Sequence[str]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(s + "\n" for s in lines))
    os.replace(tmp, path)


def _read_lines(path: Path) -> list[str]:
    return [s for s in path.read_text().splitlines() if s]


# --------------------------------------------------------------------------
# design cycle


@dataclass(frozen=True)
class CycleConfig:
    iterations: int = 3
    sample_symbols: int = 10_000
    finetune_epochs: int = 5
    temperature: float = 1.0
    streams: int = 64
    batch_size: int = 16
    lr: float = 0.001
    seed: int = 0

    def finetune_config(self, iteration: int) -> TrainingConfig:
        return TrainingConfig(epochs=self.finetune_epochs, batch_size=self.batch_size, lr=self.lr,
                              seed=_seed(self.seed, iteration, 1))

    def sample_config(self, iteration: int, epoch: int, n_symbols: int | None = None) -> SampleConfig:
        return SampleConfig(n_symbols=n_symbols or self.sample_symbols, temperature=self.temperature,
                            seed=_seed(self.seed, iteration, epoch, 2), streams=self.streams)


@dataclass
class IterationLog:
    iteration: int
    sampled: int
    valid: int
    unique: int
    predicted_active: int
    new_actives: int
    pool_size: int

    @property
    def active_ratio(self) -> float:
        return self.predicted_active / self.unique if self.unique else 0.0


@dataclass
class CycleState:
    iteration: int
    pool: list[str]
    log: list[IterationLog] = field(default_factory=list)
    checkpoint: Checkpoint | None = None


@contextmanager
def _lock(state_dir: Path) -> Iterator[None]:
    path = state_dir / "cycle.lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateLocked(f"{path} exists; another run owns this directory (delete it if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def _score_round(tpm: ClassifierModel, lines: Sequence[str], training: set[str]) -> tuple[GenerationStats, list[str]]:
    stats = generation_stats(lines, training)
    return stats, predicted_actives(tpm, stats.unique_canonical)


def run_cycle(
    base: Checkpoint,
    tpm: ClassifierModel,
    config: CycleConfig = CycleConfig(),
    state_dir: str | Path | None = None,
    training_set: Sequence[str] = (),
) -> CycleState:
    """Iteration 0 samples the unbiased model; each later iteration fine-tunes
    (cumulatively) on the active pool, samples after every epoch, and adds
    newly predicted actives to the pool.

    With ``state_dir`` every finished iteration is written to ``iter_NNN/``
    and a rerun with the same config resumes after the last finished one.
    """
    training = set(training_set)
    if state_dir is None:
        return _cycle(base, tpm, config, training, None)
    state_dir = Path(state_dir)
    state_dir.mkdir(parents=True, exist_ok=True)
    with _lock(state_dir):
        # the iteration count may grow between runs; everything else must match
        fixed = {k: v for k, v in asdict(config).items() if k != "iterations"}
        manifest = {"config": fixed, "base_digest": hashlib.blake2b(to_bytes(base), digest_size=16).hexdigest()}
        mpath = state_dir / "manifest.json"
        if mpath.exists():
            old = json.loads(mpath.read_text())
            if old != manifest:
                raise ValueError(f"{mpath} was written for a different config or base model")
        else:
            mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return _cycle(base, tpm, config, training, state_dir)


def _resume(state_dir: Path) -> CycleState | None:
    done = sorted(p for p in state_dir.glob("iter_*") if (p / "log.json").exists())
    if not done:
        return None
    last = done[-1]
    logs = [IterationLog(**json.loads((p / "log.json").read_text())) for p in done]
    return CycleState(logs[-1].iteration, _read_lines(last / "pool.smi"), logs, load_checkpoint(last / "model.ckpt"))


def _save_iteration(state_dir: Path, st: CycleState, samples: Sequence[str], stats: GenerationStats) -> None:
    d = state_dir / f"iter_{st.iteration:03d}"
    d.mkdir(exist_ok=True)
    _write_lines(d / "samples.smi", samples)
    _write_lines(d / "pool.smi", st.pool)
    entry = st.log[-1]
    (d / "stats.txt").write_text(format_report({**stats.as_dict(), **asdict(entry), "active_ratio": entry.active_ratio}))
    save_checkpoint(st.checkpoint, d / "model.ckpt")
    (d / "log.json").write_text(json.dumps(asdict(entry), sort_keys=True) + "\n")


def _cycle(base: Checkpoint, tpm: ClassifierModel, config: CycleConfig, training: set[str],
           state_dir: Path | None) -> CycleState:
    st = _resume(state_dir) if state_dir is not None else None
    if st is None:
        rounds = max(1, config.finetune_epochs)
        samples = sample_lines(base, config.sample_config(0, 0, config.sample_symbols * rounds))
        stats, actives = _score_round(tpm, samples, training)
        pool = list(dict.fromkeys(actives))
        entry = IterationLog(0, stats.lines, stats.valid, stats.unique, len(actives), len(pool), len(pool))
        st = CycleState(0, pool, [entry], base)
        log.info("iteration 0: %d lines, %d valid, %d unique, %d predicted active",
                 stats.lines, stats.valid, stats.unique, len(actives))
        if state_dir is not None:
            _save_iteration(state_dir, st, samples, stats)
    else:
        log.info("resuming after iteration %d (pool %d)", st.iteration, len(st.pool))

    if config.iterations > 0 and not st.pool:
        raise EmptyActivePool(
            "no predicted actives after iteration 0; sample more molecules or relax the TPM threshold")

    while st.iteration < config.iterations:
        it = st.iteration + 1
        samples: list[str] = []

        def after_epoch(epoch: int, ckpt: Checkpoint) -> None:
            if epoch > 0:
                samples.extend(sample_lines(ckpt, config.sample_config(it, epoch)))

        result = fine_tune(st.checkpoint, st.pool, config.finetune_config(it), on_epoch=after_epoch)
        stats, actives = _score_round(tpm, samples, training)
        known = set(st.pool)
        new = [s for s in actives if s not in known]
        st = CycleState(it, st.pool + new, st.log, result.final)
        st.log.append(IterationLog(it, stats.lines, stats.valid, stats.unique, len(actives), len(new), len(st.pool)))
        log.info("iteration %d: %d lines, %d unique, %d predicted active, %d new, pool %d",
                 it, stats.lines, stats.unique, len(actives), len(new), len(st.pool))
        if state_dir is not None:
            _save_iteration(state_dir, st, samples, stats)
    return st


# --------------------------------------------------------------------------
# per-epoch sweep


@dataclass
class SweepEpoch:
    epoch: int
    samples: list[str]
    stats: GenerationStats
    predicted_active: int | None = None

    @property
    def active_ratio(self) -> float | None:
        if self.predicted_active is None:
            return None
        return self.predicted_active / self.stats.unique if self.stats.unique else 0.0


def epoch_sweep(
    base: Checkpoint,
    actives: Sequence[str],
    epochs: int = 5,
    sample_symbols: int = 10_000,
    config: CycleConfig = CycleConfig(),
    tpm: ClassifierModel | None = None,
    training_set: Sequence[str] = (),
    out_dir: str | Path | None = None,
) -> list[SweepEpoch]:
    """Fine-tune on ``actives`` and sample after every epoch (epoch 0 is the base model)."""
    training = set(training_set)
    out: list[SweepEpoch] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def after_epoch(epoch: int, ckpt: Checkpoint) -> None:
        samples = sample_lines(ckpt, config.sample_config(0, epoch, sample_symbols))
        stats = generation_stats(samples, training)
        hits = len(predicted_actives(tpm, stats.unique_canonical)) if tpm is not None else None
        rec = SweepEpoch(epoch, samples, stats, hits)
        out.append(rec)
        if out_path is not None:
            _write_lines(out_path / f"samples_epoch_{epoch:02d}.smi", samples)
            fields = dict(stats.as_dict(), epoch=epoch)
            if hits is not None:
                fields.update(predicted_active=hits, active_ratio=rec.active_ratio)
            (out_path / f"stats_epoch_{epoch:02d}.txt").write_text(format_report(fields))

    ft = TrainingConfig(epochs=epochs, batch_size=config.batch_size, lr=config.lr, seed=_seed(config.seed, 0, 1))
    if epochs == 0:
        after_epoch(0, base)
    else:
        fine_tune(base, actives, ft, on_epoch=after_epoch)
    return out
