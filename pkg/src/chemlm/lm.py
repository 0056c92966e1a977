"""Character-level chemical language model: vocabulary, training, fine-tuning, sampling."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from chemlm import container
from chemlm.container import CorruptPayload, VersionMismatch  # noqa: F401  (re-exported)
from chemlm.nn import (
    AdamState,
    Params,
    RnnState,
    adam_step,
    bptt_gradients,
    clip_gradients,
    forward_sequence,
    hidden_sizes_of,
    init_params,
    lstm_step,
    sequence_loss,
    softmax,
)

log = logging.getLogger(__name__)

EOL = "\n"
_SYMBOL_RE = re.compile(r"Cl|Br|.", re.DOTALL)


class EmptyCorpus(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class VocabularyMismatch(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


def split_symbols(text: str) -> list[str]:
    """Split into vocabulary symbols; two-letter halogens stay whole."""
    return _SYMBOL_RE.findall(text)


class Vocabulary:
    """Ordered symbol list with a reverse index; EOL is always a member."""

    def __init__(self, symbols: Iterable[str]) -> None:
        self.symbols: tuple[str, ...] = tuple(symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")
        if EOL not in self.symbols:
            raise ValueError("vocabulary must contain the end-of-line symbol")
        self.index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and other.symbols == self.symbols

    def __repr__(self) -> str:
        return f"Vocabulary({list(self.symbols)!r})"

    @property
    def eol(self) -> int:
        return self.index[EOL]

    def encode(self, text: str) -> list[int]:
        out = []
        for sym in split_symbols(text):
            try:
                out.append(self.index[sym])
            except KeyError:
                raise VocabularyMismatch(f"symbol {sym!r} not in vocabulary") from None
        return out

    def decode(self, indices: Iterable[int]) -> str:
        return "".join(self.symbols[i] for i in indices)

    def unknown_symbols(self, line: str) -> list[str]:
        return [s for s in split_symbols(line) if s not in self.index]


def build_vocabulary(lines: Iterable[str]) -> Vocabulary:
    """Sorted set of every symbol in the corpus, plus EOL."""
    symbols = {EOL}
    seen_any = False
    for line in lines:
        line = line.rstrip("\n")
        if not line:
            continue
        seen_any = True
        symbols.update(split_symbols(line))
    if not seen_any:
        raise EmptyCorpus("corpus has no non-empty lines")
    return Vocabulary(sorted(symbols))


def encode_one_hot(k: int, size: int) -> np.ndarray:
    if not 0 <= k < size:
        raise IndexOutOfRange(f"index {k} outside 0..{size - 1}")
    v = np.zeros(size)
    v[k] = 1.0
    return v


# --------------------------------------------------------------------------
# configuration and checkpoints


@dataclass(frozen=True)
class TrainingConfig:
    layers: int = 3
    hidden: int = 256
    dropout: float = 0.2
    batch_size: int = 128
    unroll: int = 64
    clip: float = 5.0
    lr: float = 0.001
    epochs: int = 10
    seed: int = 0
    patience: int | None = None
    preview: int = 0
    dtype: str = "float32"
    windows: str = "line"

    def __post_init__(self) -> None:
        if self.windows not in ("line", "contiguous"):
            raise ValueError("windows must be 'line' or 'contiguous'")
        for name in ("layers", "hidden", "batch_size", "unroll"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.clip <= 0 or self.lr <= 0:
            raise ValueError("clip and lr must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")


@dataclass
class Checkpoint:
    vocabulary: Vocabulary
    params: Params
    dropout: float = 0.2
    seed: int = 0
    history: list[dict] = field(default_factory=list)
    optimizer: AdamState | None = None

    kind = "language-model"

    @property
    def hidden_sizes(self) -> list[int]:
        return hidden_sizes_of(self.params)

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "Checkpoint":
        opt = None
        if self.optimizer is not None:
            o = self.optimizer
            opt = replace(o, m={k: v.copy() for k, v in o.m.items()}, v={k: v.copy() for k, v in o.v.items()})
        return Checkpoint(self.vocabulary, {k: v.copy() for k, v in self.params.items()},
                          self.dropout, self.seed, [dict(h) for h in self.history], opt)


def _freeze(params: Params) -> Params:
    return {k: np.asarray(v, dtype=np.float32).copy() for k, v in params.items()}


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "kind": ckpt.kind,
        "vocabulary": list(ckpt.vocabulary.symbols),
        "hidden_sizes": ckpt.hidden_sizes,
        "dropout": ckpt.dropout,
        "seed": ckpt.seed,
        "history": ckpt.history,
        "optimizer": None,
    }
    tensors = dict(ckpt.params)
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        meta["optimizer"] = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "step": o.step}
        for k in ckpt.params:
            tensors[f"adam.m/{k}"] = o.m[k]
            tensors[f"adam.v/{k}"] = o.v[k]
    return container.encode(meta, tensors)


def from_bytes(blob: bytes) -> Checkpoint:
    meta, tensors = container.decode(blob)
    if meta.get("kind") != Checkpoint.kind:
        raise CorruptPayload(f"expected a language-model checkpoint, found {meta.get('kind')!r}")
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    opt = None
    if meta.get("optimizer") is not None:
        o = meta["optimizer"]
        opt = AdamState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"],
                        {k: tensors[f"adam.m/{k}"] for k in params}, {k: tensors[f"adam.v/{k}"] for k in params})
    ckpt = Checkpoint(Vocabulary(meta["vocabulary"]), params, meta["dropout"], meta["seed"], meta["history"], opt)
    if ckpt.hidden_sizes != meta["hidden_sizes"] or params["out.weight"].shape[0] != len(ckpt.vocabulary):
        raise CorruptPayload("tensor shapes disagree with the declared architecture")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# training


def corpus_indices(lines: Iterable[str], vocab: Vocabulary) -> np.ndarray:
    """Concatenate lines into one index stream: EOL, line, EOL, line, ..., EOL."""
    out: list[int] = [vocab.eol]
    for line in lines:
        line = line.rstrip("\n")
        if line:
            out.extend(vocab.encode(line))
            out.append(vocab.eol)
    return np.asarray(out, dtype=np.int64)


def make_windows(stream: np.ndarray, unroll: int, eol: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(input, target) windows of ``unroll`` symbols cut from the index stream.

    With ``eol`` given, one window starts at every EOL in the stream, so each
    molecule is seen from a zero state with EOL as its first input (the same
    situation the sampler starts every line in). Without it, windows are
    contiguous at offsets 0, T, 2T, ... Either way a final window aligned to
    the end of the stream covers any remainder, and streams shorter than
    ``unroll + 1`` give one shorter window.
    """
    n = len(stream) - 1
    if n < 1:
        raise EmptyCorpus("corpus too short to form a training window")
    t = min(unroll, n)
    if eol is None:
        starts = list(range(0, n - t + 1, t))
    else:
        starts = [int(i) for i in np.flatnonzero(stream[:-1] == eol) if i + t <= n]
        if not starts:
            starts = [0]
    if starts[-1] + t < n:
        starts.append(n - t)
    idx = np.asarray(starts)[:, None] + np.arange(t)[None, :]
    return stream[idx], stream[idx + 1]


def _check_corpus(lines: Sequence[str], vocab: Vocabulary) -> tuple[list[str], list[tuple[int, str]]]:
    kept, skipped = [], []
    for no, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line:
            continue
        bad = vocab.unknown_symbols(line)
        if bad:
            skipped.append((no, bad[0]))
        else:
            kept.append(line)
    return kept, skipped


class Trainer:
    """Minibatch BPTT with clipping and ADAM over a fixed window set."""

    def __init__(self, ckpt: Checkpoint, config: TrainingConfig, optimizer: AdamState | None = None) -> None:
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.vocabulary = ckpt.vocabulary
        self.dropout = ckpt.dropout
        self.params = {k: v.astype(self.dtype) for k, v in ckpt.params.items()}
        if optimizer is None:
            optimizer = AdamState.for_params(self.params, lr=config.lr)
        else:
            optimizer = replace(optimizer, lr=config.lr,
                                m={k: v.astype(self.dtype) for k, v in optimizer.m.items()},
                                v={k: v.astype(self.dtype) for k, v in optimizer.v.items()})
        self.optimizer = optimizer
        self.rng = np.random.default_rng(config.seed)
        self.history = [dict(h) for h in ckpt.history]
        self.seed = ckpt.seed

    def run_epoch(self, inputs: np.ndarray, targets: np.ndarray, epoch: int) -> float:
        cfg = self.config
        order = self.rng.permutation(len(inputs))
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            sel = order[lo : lo + cfg.batch_size]
            loss, grads = bptt_gradients(self.params, inputs[sel], targets[sel], self.dropout, self.rng)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}, batch {b}")
            grads, _ = clip_gradients(grads, cfg.clip)
            adam_step(self.optimizer, self.params, grads)
            total += loss * len(sel)
            count += len(sel)
        return total / count

    def checkpoint(self, with_optimizer: bool = True) -> Checkpoint:
        opt = None
        if with_optimizer:
            o = self.optimizer
            opt = replace(o, m=_freeze(o.m), v=_freeze(o.v))
        return Checkpoint(self.vocabulary, _freeze(self.params), self.dropout, self.seed,
                          [dict(h) for h in self.history], opt)


EpochCallback = Callable[[int, Checkpoint], None]


def train(
    lines: Sequence[str],
    config: TrainingConfig = TrainingConfig(),
    vocabulary: Vocabulary | None = None,
    on_epoch: EpochCallback | None = None,
) -> Checkpoint:
    """Train from scratch; ``history`` of the returned checkpoint holds the per-epoch losses."""
    if vocabulary is None:
        vocabulary = build_vocabulary(lines)
    kept, skipped = _check_corpus(lines, vocabulary)
    if skipped:
        no, sym = skipped[0]
        raise VocabularyMismatch(f"line {no}: symbol {sym!r} not in vocabulary ({len(skipped)} lines affected)")
    if not kept:
        raise EmptyCorpus("corpus has no non-empty lines")
    rng = np.random.default_rng(config.seed)
    params = init_params(len(vocabulary), [config.hidden] * config.layers, rng, dtype=np.dtype(config.dtype))
    base = Checkpoint(vocabulary, params, config.dropout, config.seed)
    trainer = Trainer(base, replace(config, seed=config.seed + 1))
    return _fit(trainer, kept, config, phase="train", on_epoch=on_epoch)[-1]


def _fit(trainer: Trainer, lines: list[str], config: TrainingConfig, phase: str,
         on_epoch: EpochCallback | None) -> list[Checkpoint]:
    eol = trainer.vocabulary.eol if config.windows == "line" else None
    inputs, targets = make_windows(corpus_indices(lines, trainer.vocabulary), config.unroll, eol)
    snapshots = []
    best, stale = math.inf, 0
    for epoch in range(1, config.epochs + 1):
        loss = trainer.run_epoch(inputs, targets, epoch)
        entry = {"phase": phase, "epoch": epoch, "loss": loss, "windows": int(len(inputs))}
        trainer.history.append(entry)
        ckpt = trainer.checkpoint()
        log.info("%s epoch %d: loss %.4f nats/symbol", phase, epoch, loss)
        if config.preview:
            preview = sample_lines(ckpt, SampleConfig(n_molecules=config.preview, seed=config.seed + epoch))
            for line in preview:
                log.info("  sample: %s", line)
        if on_epoch is not None:
            on_epoch(epoch, ckpt)
        snapshots.append(ckpt)
        if config.patience is not None:
            if loss < best - 1e-6:
                best, stale = loss, 0
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("no improvement for %d epochs, stopping", stale)
                    break
    if not snapshots:
        snapshots.append(trainer.checkpoint())
    return snapshots


@dataclass
class FineTuneResult:
    checkpoints: list[Checkpoint]
    skipped: list[tuple[int, str]]

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[-1]


def fine_tune(
    base: Checkpoint,
    lines: Sequence[str],
    config: TrainingConfig | None = None,
    on_epoch: EpochCallback | None = None,
) -> FineTuneResult:
    """Continue training ``base`` on a small corpus with fresh optimizer moments.

    Architecture, vocabulary and (unless the config differs) dropout come from
    ``base``; ``layers``/``hidden`` in ``config`` are ignored. Lines containing
    symbols outside the vocabulary are skipped and reported. ``checkpoints[0]``
    is the base model itself, followed by one checkpoint per epoch.
    """
    config = config or TrainingConfig(epochs=5)
    kept, skipped = _check_corpus(lines, base.vocabulary)
    for no, sym in skipped:
        log.warning("line %d skipped: symbol %r not in vocabulary", no, sym)
    if not kept:
        raise VocabularyMismatch(f"all {len(skipped)} lines contain symbols outside the vocabulary")
    start = base.copy()
    start.optimizer = None
    if config.dropout != base.dropout:
        start.dropout = config.dropout
    trainer = Trainer(start, config)
    epoch0 = start.copy()
    if on_epoch is not None:
        on_epoch(0, epoch0)
    snaps = _fit(trainer, kept, config, phase="finetune", on_epoch=on_epoch) if config.epochs else []
    return FineTuneResult([epoch0] + snaps, skipped)


def evaluate_loss(ckpt: Checkpoint, lines: Sequence[str], unroll: int = 64, batch_size: int = 128) -> float:
    """Mean next-symbol cross-entropy on ``lines`` in eval mode (no dropout), in nats/symbol.

    Uses line-anchored windows, so every molecule is scored from its start.
    """
    kept, skipped = _check_corpus(lines, ckpt.vocabulary)
    if skipped:
        no, sym = skipped[0]
        raise VocabularyMismatch(f"line {no}: symbol {sym!r} not in vocabulary")
    inputs, targets = make_windows(corpus_indices(kept, ckpt.vocabulary), unroll, ckpt.vocabulary.eol)
    params = {k: v.astype(np.float64) for k, v in ckpt.params.items()}
    total = 0.0
    for lo in range(0, len(inputs), batch_size):
        x, y = inputs[lo : lo + batch_size], targets[lo : lo + batch_size]
        logits, _ = forward_sequence(params, x)
        total += sequence_loss(logits, y) * x.size
    return total / inputs.size


# --------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SampleConfig:
    """Exactly one of ``n_symbols`` / ``n_molecules`` must be set."""

    n_symbols: int | None = None
    n_molecules: int | None = None
    temperature: float = 1.0
    seed: int = 0
    seed_policy: str = "eol"
    streams: int = 1
    max_line_length: int = 256
    carry_state: bool = False

    def __post_init__(self) -> None:
        if (self.n_symbols is None) == (self.n_molecules is None):
            raise ValueError("set exactly one of n_symbols and n_molecules")
        if (self.n_symbols or 0) < 0 or (self.n_molecules or 0) < 0:
            raise ValueError("sample size must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.seed_policy not in ("eol", "random"):
            raise ValueError("seed_policy must be 'eol' or 'random'")
        if self.streams < 1 or self.max_line_length < 1:
            raise ValueError("streams and max_line_length must be positive")


def _quota(total: int, streams: int) -> list[int]:
    return [total // streams + (1 if s < total % streams else 0) for s in range(streams)]


def sample_lines(ckpt: Checkpoint, config: SampleConfig, probe: Callable[[np.ndarray], None] | None = None) -> list[str]:
    """Sample molecules symbol by symbol, feeding each draw back as the next input.

    Every stream starts from the zero state, and by default returns to it
    after each EOL, so every line begins exactly as training windows do.
    ``carry_state=True`` keeps the recurrent state running across lines
    instead. Lines are returned stream by
    stream in generation order; an unfinished trailing line is discarded, and
    a line reaching ``max_line_length`` symbols is closed there. ``probe``
    receives every next-symbol distribution (for diagnostics and tests).
    """
    vocab = ckpt.vocabulary
    eol = vocab.eol
    params = {k: v.astype(np.float64) for k, v in ckpt.params.items()}
    rng = np.random.default_rng(config.seed)
    S = config.streams
    by_symbols = config.n_symbols is not None
    quota = _quota(config.n_symbols if by_symbols else config.n_molecules, S)
    active = np.array([q > 0 for q in quota])
    produced = np.zeros(S, dtype=np.int64)  # symbols (by_symbols) or lines
    done: list[list[str]] = [[] for _ in range(S)]
    current: list[list[int]] = [[] for _ in range(S)]
    state = RnnState.zeros(hidden_sizes_of(params), batch=S)

    if config.seed_policy == "random":
        choices = np.array([i for i in range(len(vocab)) if i != eol])
        x = choices[rng.integers(0, len(choices), S)]
        for s in range(S):
            current[s].append(int(x[s]))
        if by_symbols:
            produced += 1
    else:
        x = np.full(S, eol, dtype=np.int64)

    while active.any():
        state, y = lstm_step(params, state, None, symbols=x)
        p = softmax(y, config.temperature)
        if probe is not None:
            probe(p)
        u = rng.random(S)
        x = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), len(vocab) - 1)
        for s in np.flatnonzero(active):
            k = int(x[s])
            if by_symbols:
                produced[s] += 1
            if k == eol or len(current[s]) + 1 >= config.max_line_length:
                if k != eol:
                    current[s].append(k)
                    x[s] = eol
                done[s].append(vocab.decode(current[s]))
                current[s] = []
                if not config.carry_state:
                    for layer in range(len(state.h)):
                        state.h[layer][s] = 0.0
                        state.c[layer][s] = 0.0
                if not by_symbols:
                    produced[s] += 1
            else:
                current[s].append(k)
            if produced[s] >= quota[s]:
                active[s] = False
    return [line for stream in done for line in stream]


def sample_stream(ckpt: Checkpoint, config: SampleConfig) -> str:
    """Line-oriented sample text, one molecule per LF-terminated line."""
    return "".join(line + EOL for line in sample_lines(ckpt, config))


def config_dict(config) -> dict:
    return asdict(config)
