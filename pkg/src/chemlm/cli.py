"""Command-line entry point: ``chemlm <command> ...``.

Every option can also come from a JSON config file (``--config``): either a
flat object, an object keyed by command name, or a manifest written by an
earlier run. Precedence is defaults < config file < command-line flags, and
the resolved values are recorded in the run manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Iterator, TextIO

from chemlm import __version__

log = logging.getLogger("chemlm")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# option registry: argparse sees default=None so explicit flags are detectable

DEFAULTS: dict[str, dict[str, Any]] = {}


def _opt(p: argparse.ArgumentParser, cmd: str, flag: str, default: Any = None, **kw) -> None:
    dest = kw.pop("dest", flag.lstrip("-").replace("-", "_"))
    DEFAULTS.setdefault(cmd, {})[dest] = default
    if flag.startswith("-"):
        p.add_argument(flag, dest=dest, default=None, **kw)
    else:
        p.add_argument(dest, default=None, **kw)


def _training_opts(p, cmd: str, epochs: int) -> None:
    _opt(p, cmd, "--layers", 3, type=int, help="stacked LSTM layers")
    _opt(p, cmd, "--hidden", 256, type=int, help="units per layer")
    _opt(p, cmd, "--dropout", 0.2, type=float)
    _opt(p, cmd, "--batch", 128, type=int, help="windows per minibatch")
    _opt(p, cmd, "--unroll", 64, type=int, help="BPTT window length")
    _opt(p, cmd, "--clip", 5.0, type=float, help="global gradient-norm clip")
    _opt(p, cmd, "--lr", 0.001, type=float)
    _opt(p, cmd, "--epochs", epochs, type=int)
    _opt(p, cmd, "--patience", None, type=int, help="stop after this many epochs without improvement")
    _opt(p, cmd, "--preview", 0, type=int, help="log this many sampled lines after each epoch")
    _opt(p, cmd, "--dtype", "float32", choices=["float32", "float64"])
    _opt(p, cmd, "--windows", "line", choices=["line", "contiguous"])


def _sample_opts(p, cmd: str) -> None:
    _opt(p, cmd, "--temperature", 1.0, type=float)
    _opt(p, cmd, "--streams", 64, type=int, help="parallel sampling streams")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="chemlm", description="Chemical language model toolkit.")
    ap.add_argument("--version", action="version", version=f"chemlm {__version__}")
    ap.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    ap.add_argument("--out-dir", default=None, help="directory for outputs and the run manifest (default .)")
    ap.add_argument("--config", default=None, help="JSON config file or earlier manifest")
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("canon", help="canonicalize a SMILES file")
    _opt(p, "canon", "input", "-", nargs="?")
    _opt(p, "canon", "--out", "-")
    _opt(p, "canon", "--skip-invalid", False, action="store_true", help="drop invalid lines instead of failing")

    p = sub.add_parser("vocab", help="print the symbol vocabulary of a corpus as JSON")
    _opt(p, "vocab", "input", "-", nargs="?")
    _opt(p, "vocab", "--out", "-")

    p = sub.add_parser("train", help="train a language model from scratch")
    _opt(p, "train", "input", "-", nargs="?")
    _opt(p, "train", "--model", "model.ckpt", help="output checkpoint")
    _training_opts(p, "train", 10)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on a small corpus")
    _opt(p, "finetune", "input", "-", nargs="?")
    _opt(p, "finetune", "--base", None, help="base checkpoint")
    _opt(p, "finetune", "--model", "finetuned.ckpt", help="output checkpoint (final epoch)")
    _opt(p, "finetune", "--epoch-dir", None, help="also save one checkpoint per epoch here")
    _opt(p, "finetune", "--batch", 16, type=int)
    _opt(p, "finetune", "--unroll", 64, type=int)
    _opt(p, "finetune", "--clip", 5.0, type=float)
    _opt(p, "finetune", "--lr", 0.001, type=float)
    _opt(p, "finetune", "--epochs", 5, type=int)
    _opt(p, "finetune", "--dtype", "float32", choices=["float32", "float64"])

    p = sub.add_parser("sample", help="sample SMILES from a checkpoint")
    _opt(p, "sample", "--model", None, help="checkpoint")
    _opt(p, "sample", "--symbols", None, type=int, help="total symbols to generate")
    _opt(p, "sample", "--molecules", None, type=int, help="number of lines to generate")
    _opt(p, "sample", "--seed-policy", "eol", choices=["eol", "random"])
    _opt(p, "sample", "--carry-state", False, action="store_true", help="keep recurrent state across lines")
    _opt(p, "sample", "--out", "-")
    _sample_opts(p, "sample")

    p = sub.add_parser("fp", help="export fingerprints and descriptors as CSV")
    _opt(p, "fp", "input", "-", nargs="?")
    _opt(p, "fp", "--out", "-")
    _opt(p, "fp", "--radius", 2, type=int)
    _opt(p, "fp", "--width", 2048, type=int)
    _opt(p, "fp", "--dense", False, action="store_true", help="one column per bit")

    p = sub.add_parser("tpm-fit", help="fit the target prediction model")
    _opt(p, "tpm-fit", "--activities", None, help="CSV of smiles,measure,value")
    _opt(p, "tpm-fit", "--actives", None, help="SMILES file of actives (alternative to --activities)")
    _opt(p, "tpm-fit", "--inactives", None, help="SMILES file of inactives")
    _opt(p, "tpm-fit", "--measure", "pIC50", help="measure name of the threshold rule")
    _opt(p, "tpm-fit", "--cutoff", 7.0, type=float, help="active iff p-value > cutoff")
    _opt(p, "tpm-fit", "--radius", 2, type=int)
    _opt(p, "tpm-fit", "--width", 2048, type=int)
    _opt(p, "tpm-fit", "--l2", 1e-3, type=float)
    _opt(p, "tpm-fit", "--max-epochs", 5000, type=int)
    _opt(p, "tpm-fit", "--model", "tpm.ckpt")

    p = sub.add_parser("tpm-predict", help="score SMILES with a fitted TPM")
    _opt(p, "tpm-predict", "input", "-", nargs="?")
    _opt(p, "tpm-predict", "--model", None)
    _opt(p, "tpm-predict", "--out", "-")

    p = sub.add_parser("split", help="random disjoint train/test split")
    _opt(p, "split", "input", "-", nargs="?")
    _opt(p, "split", "--train", "train.smi")
    _opt(p, "split", "--test", "test.smi")
    _opt(p, "split", "--test-size", None, type=int)
    _opt(p, "split", "--test-fraction", 0.5, type=float)

    p = sub.add_parser("eval", help="generation statistics, reproduction/EOR and histograms")
    _opt(p, "eval", "--generated", None, help="sampled lines")
    _opt(p, "eval", "--training", None, help="training corpus (for novelty)")
    _opt(p, "eval", "--test", None, help="held-out test set (reproduction)")
    _opt(p, "eval", "--random", None, help="samples of the unbiased model (EOR)")
    _opt(p, "eval", "--reference", None, help="reference set for the nearest-neighbour similarity histogram")
    _opt(p, "eval", "--bin-width", 0.05, type=float)
    _opt(p, "eval", "--out", "-")

    p = sub.add_parser("cycle", help="run the generate/score/fine-tune cycle")
    _opt(p, "cycle", "--model", None, help="base checkpoint")
    _opt(p, "cycle", "--tpm", None, help="TPM checkpoint")
    _opt(p, "cycle", "--state-dir", "cycle_state")
    _opt(p, "cycle", "--training", None, help="training corpus (novelty filter)")
    _opt(p, "cycle", "--iterations", 3, type=int)
    _opt(p, "cycle", "--sample-symbols", 10_000, type=int, help="symbols sampled after each epoch")
    _opt(p, "cycle", "--epochs", 5, type=int)
    _opt(p, "cycle", "--batch", 16, type=int)
    _opt(p, "cycle", "--lr", 0.001, type=float)
    _sample_opts(p, "cycle")

    p = sub.add_parser("sweep", help="fine-tune and sample after every epoch")
    _opt(p, "sweep", "input", "-", nargs="?")
    _opt(p, "sweep", "--model", None, help="base checkpoint")
    _opt(p, "sweep", "--tpm", None, help="optional TPM for predicted-active ratios")
    _opt(p, "sweep", "--training", None)
    _opt(p, "sweep", "--epochs", 5, type=int)
    _opt(p, "sweep", "--sample-symbols", 10_000, type=int)
    _opt(p, "sweep", "--batch", 16, type=int)
    _opt(p, "sweep", "--lr", 0.001, type=float)
    _sample_opts(p, "sweep")
    return ap


GLOBAL_DEFAULTS = {"seed": 0, "out_dir": "."}


def resolve(args: argparse.Namespace) -> tuple[dict[str, Any], dict[str, str]]:
    """Merge defaults < config file < flags; returns (values, source of each value)."""
    cmd = args.command
    values = {**GLOBAL_DEFAULTS, **DEFAULTS.get(cmd, {})}
    sources = {k: "default" for k in values}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if "resolved" in doc and "command" in doc:
            if doc["command"] != cmd:
                raise UsageError(f"manifest is for '{doc['command']}', not '{cmd}'")
            doc = doc["resolved"]
        section = {k: v for k, v in doc.items() if not isinstance(v, dict)}
        section.update(doc.get(cmd, {}) if isinstance(doc.get(cmd), dict) else {})
        for k, v in section.items():
            k = k.replace("-", "_")
            if k not in values:
                raise UsageError(f"unknown config key '{k}' for {cmd}")
            values[k] = v
            sources[k] = "config"
    for k, v in vars(args).items():
        if k in values and v is not None:
            values[k] = v
            sources[k] = "flag"
    return values, sources


# --------------------------------------------------------------------------
# I/O helpers


def read_lines(path: str) -> list[str]:
    try:
        if path == "-":
            return sys.stdin.read().splitlines()
        return Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc


@contextmanager
def open_out(path: str, out_dir: Path) -> Iterator[TextIO]:
    if path == "-":
        yield sys.stdout
        sys.stdout.flush()
        return
    target = _out_path(path, out_dir)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="") as fh:
        yield fh


def _out_path(path: str, out_dir: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else out_dir / p


def _in_path(path: str | None, what: str) -> str:
    if not path:
        raise UsageError(f"{what} is required")
    return path


def _digest(path: str) -> str | None:
    if path in (None, "-") or not Path(path).is_file():
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# commands


def cmd_canon(c: dict, out_dir: Path) -> None:
    from chemlm.smiles import canonicalize

    lines = read_lines(c["input"])
    out = []
    for no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append(canonicalize(line.strip()))
        except ValueError as exc:
            if c["skip_invalid"]:
                log.warning("%s:%d: skipped: %s", c["input"], no, exc)
                continue
            raise DataError(f"{c['input']}:{no}: {exc}") from exc
    with open_out(c["out"], out_dir) as fh:
        fh.writelines(s + "\n" for s in out)


def cmd_vocab(c: dict, out_dir: Path) -> None:
    from chemlm.lm import EmptyCorpus, build_vocabulary

    try:
        vocab = build_vocabulary(read_lines(c["input"]))
    except EmptyCorpus as exc:
        raise DataError(f"{c['input']}: {exc}") from exc
    with open_out(c["out"], out_dir) as fh:
        json.dump({"size": len(vocab), "symbols": list(vocab.symbols)}, fh)
        fh.write("\n")


def _training_config(c: dict, seed: int, **over):
    from chemlm.lm import TrainingConfig

    fields = dict(layers=c.get("layers", 3), hidden=c.get("hidden", 256), dropout=c.get("dropout", 0.2),
                  batch_size=c["batch"], unroll=c["unroll"], clip=c["clip"], lr=c["lr"], epochs=c["epochs"],
                  seed=seed, patience=c.get("patience"), preview=c.get("preview", 0), dtype=c["dtype"],
                  windows=c.get("windows", "line"))
    fields.update(over)
    try:
        return TrainingConfig(**fields)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(c: dict, out_dir: Path) -> None:
    from chemlm.lm import EmptyCorpus, save_checkpoint, train

    lines = read_lines(c["input"])
    config = _training_config(c, c["seed"])
    try:
        ckpt = train(lines, config)
    except EmptyCorpus as exc:
        raise DataError(f"{c['input']}: {exc}") from exc
    save_checkpoint(ckpt, _out_path(c["model"], out_dir))
    for h in ckpt.history:
        print(f"epoch {h['epoch']}: loss {h['loss']:.6f}", file=sys.stderr)


def _load_lm(path: str | None):
    from chemlm.lm import load_checkpoint
    from chemlm.container import CheckpointError

    path = _in_path(path, "--model/--base checkpoint")
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_finetune(c: dict, out_dir: Path) -> None:
    from chemlm.lm import VocabularyMismatch, fine_tune, save_checkpoint

    base = _load_lm(c["base"])
    lines = read_lines(c["input"])
    config = _training_config(c, c["seed"], dropout=base.dropout)
    epoch_dir = _out_path(c["epoch_dir"], out_dir) if c["epoch_dir"] else None
    if epoch_dir is not None:
        epoch_dir.mkdir(parents=True, exist_ok=True)

    def keep(epoch, ckpt):
        if epoch_dir is not None:
            save_checkpoint(ckpt, epoch_dir / f"epoch_{epoch:02d}.ckpt")

    try:
        result = fine_tune(base, lines, config, on_epoch=keep)
    except VocabularyMismatch as exc:
        raise DataError(f"{c['input']}: {exc}") from exc
    for no, sym in result.skipped:
        print(f"{c['input']}:{no}: skipped, symbol {sym!r} not in vocabulary", file=sys.stderr)
    save_checkpoint(result.final, _out_path(c["model"], out_dir))


def cmd_sample(c: dict, out_dir: Path) -> None:
    from chemlm.lm import SampleConfig, sample_stream

    ckpt = _load_lm(c["model"])
    if c["symbols"] is None and c["molecules"] is None:
        c["molecules"] = 100
    try:
        sc = SampleConfig(n_symbols=c["symbols"], n_molecules=c["molecules"], temperature=c["temperature"],
                          seed=c["seed"], seed_policy=c["seed_policy"], streams=c["streams"],
                          carry_state=bool(c["carry_state"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    text = sample_stream(ckpt, sc)
    with open_out(c["out"], out_dir) as fh:
        fh.write(text)


def cmd_fp(c: dict, out_dir: Path) -> None:
    from chemlm.metrics import write_feature_csv
    from chemlm.smiles import canonicalize

    lines = [s.strip() for s in read_lines(c["input"])]
    for no, s in enumerate(lines, 1):
        if s:
            try:
                canonicalize(s)
            except ValueError as exc:
                raise DataError(f"{c['input']}:{no}: {exc}") from exc
    with open_out(c["out"], out_dir) as fh:
        write_feature_csv([s for s in lines if s], fh, c["radius"], c["width"], dense=bool(c["dense"]))


def cmd_tpm_fit(c: dict, out_dir: Path) -> None:
    from chemlm.tpm import (FitConfig, ThresholdRule, fit, label_by_threshold, labeled_from_smiles,
                            read_activity_csv, save_model)

    src = c["activities"] or c["actives"]
    try:
        if c["activities"]:
            records = read_activity_csv(io.StringIO("\n".join(read_lines(src))))
            data = label_by_threshold(records, ThresholdRule(c["measure"], c["cutoff"]), c["radius"], c["width"])
        elif c["actives"] and c["inactives"]:
            data = labeled_from_smiles(read_lines(c["actives"]), read_lines(c["inactives"]), c["radius"], c["width"])
        else:
            raise UsageError("give --activities, or both --actives and --inactives")
        model = fit(data, FitConfig(l2=c["l2"], max_epochs=c["max_epochs"], seed=c["seed"]))
    except ValueError as exc:
        raise DataError(f"{src}: {exc}") from exc
    save_model(model, _out_path(c["model"], out_dir))
    print(f"fitted on {len(data)} molecules ({sum(data.labels)} active)", file=sys.stderr)


def cmd_tpm_predict(c: dict, out_dir: Path) -> None:
    from chemlm.container import CheckpointError
    from chemlm.tpm import load_model, score_smiles

    path = _in_path(c["model"], "--model")
    try:
        model = load_model(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    lines = [s.strip() for s in read_lines(c["input"]) if s.strip()]
    scored = {s: (p, lab) for s, p, lab in score_smiles(model, lines)}
    with open_out(c["out"], out_dir) as fh:
        fh.write("smiles,probability,label\n")
        for s in lines:
            if s in scored:
                p, lab = scored[s]
                fh.write(f"{s},{p:.6f},{int(lab)}\n")
            else:
                fh.write(f"{s},,\n")


def cmd_split(c: dict, out_dir: Path) -> None:
    from chemlm.pipeline import CorpusLineError, CorpusTooSmall, SplitSpec, split_dataset

    try:
        train, test = split_dataset(read_lines(c["input"]),
                                    SplitSpec(c["test_fraction"], c["test_size"], c["seed"]))
    except CorpusLineError as exc:
        raise DataError(f"{c['input']}:{exc}") from exc
    except CorpusTooSmall as exc:
        raise DataError(f"{c['input']}: {exc}") from exc
    for path, rows in ((c["train"], train), (c["test"], test)):
        with open_out(path, out_dir) as fh:
            fh.writelines(s + "\n" for s in rows)


def cmd_eval(c: dict, out_dir: Path) -> None:
    from chemlm.evaluation import (edit_distance_histogram, enrichment_report, format_report, generation_stats,
                                   reproduction_ratio, similarity_histogram, write_histogram_csv)
    from chemlm.metrics import ecfp_from_smiles

    gen_path = _in_path(c["generated"], "--generated")
    training = [s for s in read_lines(c["training"]) if s] if c["training"] else []
    stats = generation_stats(read_lines(gen_path), training)
    fields: dict[str, Any] = dict(stats.as_dict())
    if c["test"]:
        test_set = {s for s in (canonical(x) for x in read_lines(c["test"])) if s}
        if not test_set:
            raise DataError(f"{c['test']}: no valid molecules in test set")
        gen_set = set(stats.unique_canonical)
        fields["reproduction_ratio"] = reproduction_ratio(gen_set, test_set)
        if c["random"]:
            random_set = set(generation_stats(read_lines(c["random"]), training).unique_canonical)
            if not random_set or not gen_set:
                raise DataError("EOR needs at least one valid molecule in both --generated and --random")
            fields.update(enrichment_report(gen_set, random_set, test_set).as_dict())
        reproduced = sorted(gen_set & test_set)
        if training and reproduced:
            hist = edit_distance_histogram(reproduced, training)
            with open_out("edit_distance_hist.csv", out_dir) as fh:
                write_histogram_csv(hist, fh)
    if c["reference"]:
        ref = [ecfp_from_smiles(s) for s in (canonical(x) for x in read_lines(c["reference"])) if s]
        if not ref:
            raise DataError(f"{c['reference']}: no valid molecules")
        fps = [ecfp_from_smiles(s) for s in stats.unique_canonical]
        hist = similarity_histogram(fps, ref, c["bin_width"])
        with open_out("similarity_hist.csv", out_dir) as fh:
            write_histogram_csv(hist, fh)
    with open_out(c["out"], out_dir) as fh:
        fh.write(format_report(fields))


def canonical(line: str) -> str | None:
    from chemlm.evaluation import canonical_or_none

    return canonical_or_none(line.strip()) if line.strip() else None


def _load_tpm(path: str | None):
    from chemlm.container import CheckpointError
    from chemlm.tpm import load_model

    path = _in_path(path, "--tpm")
    try:
        return load_model(path)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_cycle(c: dict, out_dir: Path) -> None:
    from chemlm.evaluation import format_report
    from chemlm.pipeline import CycleConfig, EmptyActivePool, run_cycle

    base = _load_lm(c["model"])
    tpm = _load_tpm(c["tpm"])
    training = [s for s in read_lines(c["training"]) if s] if c["training"] else []
    cfg = CycleConfig(iterations=c["iterations"], sample_symbols=c["sample_symbols"], finetune_epochs=c["epochs"],
                      temperature=c["temperature"], streams=c["streams"], batch_size=c["batch"], lr=c["lr"],
                      seed=c["seed"])
    try:
        state = run_cycle(base, tpm, cfg, _out_path(c["state_dir"], out_dir), training)
    except EmptyActivePool as exc:
        raise DataError(str(exc)) from exc
    for entry in state.log:
        print(format_report({"iteration": entry.iteration, "sampled": entry.sampled, "valid": entry.valid,
                             "unique": entry.unique, "predicted_active": entry.predicted_active,
                             "active_ratio": entry.active_ratio, "pool_size": entry.pool_size}), end="")


def cmd_sweep(c: dict, out_dir: Path) -> None:
    from chemlm.lm import VocabularyMismatch
    from chemlm.pipeline import CycleConfig, epoch_sweep

    base = _load_lm(c["model"])
    tpm = _load_tpm(c["tpm"]) if c["tpm"] else None
    training = [s for s in read_lines(c["training"]) if s] if c["training"] else []
    cfg = CycleConfig(temperature=c["temperature"], streams=c["streams"], batch_size=c["batch"], lr=c["lr"],
                      seed=c["seed"])
    try:
        rows = epoch_sweep(base, read_lines(c["input"]), c["epochs"], c["sample_symbols"], cfg, tpm, training,
                           out_dir)
    except VocabularyMismatch as exc:
        raise DataError(f"{c['input']}: {exc}") from exc
    for r in rows:
        ratio = "" if r.active_ratio is None else f" active_ratio={r.active_ratio:.4f}"
        print(f"epoch {r.epoch}: valid={r.stats.valid} unique={r.stats.unique}{ratio}", file=sys.stderr)


COMMANDS: dict[str, Callable[[dict, Path], None]] = {
    "canon": cmd_canon, "vocab": cmd_vocab, "train": cmd_train, "finetune": cmd_finetune, "sample": cmd_sample,
    "fp": cmd_fp, "tpm-fit": cmd_tpm_fit, "tpm-predict": cmd_tpm_predict, "split": cmd_split, "eval": cmd_eval,
    "cycle": cmd_cycle, "sweep": cmd_sweep,
}

_INPUT_KEYS = ("input", "base", "model", "tpm", "activities", "actives", "inactives", "generated", "training",
               "test", "random", "reference")


def write_manifest(out_dir: Path, cmd: str, values: dict, sources: dict, started: float, argv: list[str]) -> Path:
    digests = {}
    for k in _INPUT_KEYS:
        v = values.get(k)
        if isinstance(v, str) and not (k == "model" and cmd in ("train", "finetune", "tpm-fit")):
            d = _digest(v)
            if d:
                digests[v] = d
    doc = {
        "command": cmd,
        "argv": argv,
        "resolved": values,
        "sources": sources,
        "seed": values["seed"],
        "input_sha256": digests,
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out_dir / f"manifest_{cmd}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    started = time.time()
    try:
        values, sources = resolve(args)
        out_dir = Path(values["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        with _threads(args.threads):
            COMMANDS[args.command](dict(values), out_dir)
        write_manifest(out_dir, args.command, values, sources, started, argv)
    except UsageError as exc:
        print(f"chemlm {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"chemlm {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


@contextmanager
def _threads(n: int | None) -> Iterator[None]:
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


if __name__ == "__main__":
    sys.exit(main())
