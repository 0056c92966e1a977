from __future__ import annotations

import hashlib
import math

import numpy as np
import pytest

from chemlm import container
from chemlm.container import CorruptPayload, VersionMismatch
from chemlm.lm import (
    EOL,
    EmptyCorpus,
    IndexOutOfRange,
    SampleConfig,
    TrainingConfig,
    Vocabulary,
    VocabularyMismatch,
    build_vocabulary,
    corpus_indices,
    encode_one_hot,
    evaluate_loss,
    fine_tune,
    from_bytes,
    load_checkpoint,
    make_windows,
    sample_lines,
    sample_stream,
    save_checkpoint,
    split_symbols,
    to_bytes,
    train,
)

TINY = TrainingConfig(layers=2, hidden=16, dropout=0.0, batch_size=4, unroll=16, lr=0.01, epochs=2, seed=3)


@pytest.fixture(scope="module")
def tiny_model():
    return train(["CCO", "c1ccccc1", "CC(=O)O", "CCN"], TINY)


@pytest.fixture(scope="module")
def ten_molecules():
    return ["CCO", "c1ccccc1", "CC(=O)O", "CCN", "OCCO", "CC(C)C", "C1CCCCC1", "c1ccncc1", "CCCl", "NC(N)=O"]


@pytest.fixture(scope="module")
def memorized_ten(ten_molecules):
    cfg = TrainingConfig(layers=2, hidden=64, dropout=0.0, batch_size=10, unroll=16, lr=0.01, epochs=300,
                         seed=0, dtype="float64")
    return train(ten_molecules, cfg)


# --------------------------------------------------------------------------
# vocabulary and encoding


def test_symbols_and_vocabulary_examples():
    assert split_symbols("ClCBr") == ["Cl", "C", "Br"]
    v = build_vocabulary(["c1c", "C1O"])
    assert v.symbols == (EOL, "1", "C", "O", "c")
    assert v.encode("C1O") == [2, 1, 3] and v.decode([4, 1, 0]) == "c1\n"


def test_vocabulary_errors():
    with pytest.raises(EmptyCorpus):
        build_vocabulary(["", "\n"])
    with pytest.raises(VocabularyMismatch):
        build_vocabulary(["CC"]).encode("CN")
    with pytest.raises(ValueError):
        Vocabulary(["C", "O"])


def test_one_hot_three_symbol_example():
    # the three-symbol vocabulary {c, 1, EOL} in that order
    v = Vocabulary(["c", "1", EOL])
    assert encode_one_hot(v.index["c"], 3).tolist() == [1.0, 0.0, 0.0]
    assert encode_one_hot(v.index["1"], 3).tolist() == [0.0, 1.0, 0.0]
    assert encode_one_hot(v.eol, 3).tolist() == [0.0, 0.0, 1.0]
    with pytest.raises(IndexOutOfRange):
        encode_one_hot(3, 3)


def test_corpus_stream_and_windows():
    v = build_vocabulary(["CO", "C"])  # EOL=0, C=1, O=2
    stream = corpus_indices(["CO", "", "C"], v)
    assert stream.tolist() == [0, 1, 2, 0, 1, 0]
    x, y = make_windows(stream, 2, v.eol)
    assert x.tolist() == [[0, 1], [0, 1]] and y.tolist() == [[1, 2], [1, 0]]
    cx, cy = make_windows(stream, 2)
    assert cx.tolist() == [[0, 1], [2, 0], [0, 1]] and cy.tolist() == [[1, 2], [0, 1], [1, 0]]
    sx, sy = make_windows(stream, 64, v.eol)
    assert sx.tolist() == [stream[:-1].tolist()] and sy.tolist() == [stream[1:].tolist()]


def test_windows_are_shifted_by_one():
    v = build_vocabulary(["CCO", "c1ccccc1", "CN"])
    stream = corpus_indices(["CCO", "c1ccccc1", "CN"] * 5, v)
    for eol in (None, v.eol):
        x, y = make_windows(stream, 7, eol)
        assert x.shape[1] == 7 and x.shape == y.shape
        np.testing.assert_array_equal(x[:, 1:], y[:, :-1])
    x, _ = make_windows(stream, 7, v.eol)
    assert np.all(x[:-1, 0] == v.eol)


# --------------------------------------------------------------------------
# training


def test_initial_loss_is_log_vocab_size(corpus_small):
    cfg = TrainingConfig(layers=2, hidden=32, epochs=0, dropout=0.0, seed=1)
    ck = train(corpus_small[:50], cfg)
    k = len(ck.vocabulary)
    assert evaluate_loss(ck, corpus_small[:50]) == pytest.approx(math.log(k), rel=0.02)


def test_deterministic_corpus_loss_goes_to_zero():
    cfg = TrainingConfig(layers=1, hidden=16, dropout=0.0, batch_size=8, unroll=8, lr=0.02, epochs=150,
                         seed=0, dtype="float64")
    ck = train(["CCO"] * 8, cfg)
    assert ck.history[-1]["loss"] < 0.05
    assert evaluate_loss(ck, ["CCO"]) < 0.05


def test_training_is_deterministic(tiny_model):
    again = train(["CCO", "c1ccccc1", "CC(=O)O", "CCN"], TINY)
    assert to_bytes(again) == to_bytes(tiny_model)
    assert [h["loss"] for h in tiny_model.history] == [h["loss"] for h in again.history]


def test_training_rejects_bad_inputs():
    with pytest.raises(EmptyCorpus):
        train(["", ""], TINY)
    with pytest.raises(VocabularyMismatch):
        train(["CCN"], TINY, vocabulary=build_vocabulary(["CCO"]))
    with pytest.raises(ValueError):
        TrainingConfig(dropout=1.0)


def test_patience_stops_early():
    cfg = TrainingConfig(layers=1, hidden=4, dropout=0.0, batch_size=4, unroll=8, lr=1e-9, epochs=20,
                         patience=2, seed=0)
    ck = train(["CCO", "CCN"], cfg)
    assert len(ck.history) < 20


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bytes(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    loaded = load_checkpoint(path)
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()
    assert loaded.vocabulary == tiny_model.vocabulary
    for k, v in tiny_model.params.items():
        np.testing.assert_array_equal(loaded.params[k], v)
    assert loaded.history == tiny_model.history


def test_truncated_or_corrupted_checkpoint(tiny_model, tmp_path):
    blob = to_bytes(tiny_model)
    with pytest.raises(CorruptPayload):
        from_bytes(blob[:-20])
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    with pytest.raises(CorruptPayload):
        from_bytes(bytes(flipped))
    path = tmp_path / "t.ckpt"
    path.write_bytes(blob[: len(blob) // 3])
    with pytest.raises(CorruptPayload):
        load_checkpoint(path)


def test_version_mismatch(tiny_model):
    meta, tensors = container.decode(to_bytes(tiny_model))
    blob = container.encode(meta, tensors)
    assert from_bytes(blob).vocabulary == tiny_model.vocabulary
    future = blob.replace(b'"format_version":1', b'"format_version":7')
    payload = future[4:-8]
    future = container.MAGIC + payload + hashlib.blake2b(payload, digest_size=8).digest()
    with pytest.raises(VersionMismatch):
        from_bytes(future)


def test_loaded_checkpoint_samples_identically(tiny_model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path)
    cfg = SampleConfig(n_symbols=300, seed=5, streams=3)
    assert sample_lines(load_checkpoint(path), cfg) == sample_lines(tiny_model, cfg)


# --------------------------------------------------------------------------
# sampling


def test_sampling_is_pure_function_of_seed(tiny_model):
    cfg = SampleConfig(n_molecules=20, seed=11, streams=4)
    assert sample_stream(tiny_model, cfg) == sample_stream(tiny_model, cfg)
    assert sample_stream(tiny_model, cfg) != sample_stream(tiny_model, SampleConfig(n_molecules=20, seed=12, streams=4))


def test_sample_quotas(tiny_model):
    lines = sample_lines(tiny_model, SampleConfig(n_molecules=17, seed=0, streams=5))
    assert len(lines) == 17
    text = sample_stream(tiny_model, SampleConfig(n_molecules=3, seed=0))
    assert text.endswith("\n") and text.count("\n") == 3
    assert sample_lines(tiny_model, SampleConfig(n_molecules=0)) == []


def test_every_sampling_distribution_is_valid(tiny_model):
    seen = []

    def probe(p):
        seen.append(p.copy())

    sample_lines(tiny_model, SampleConfig(n_symbols=200, seed=2, streams=2, temperature=0.7), probe)
    assert seen
    for p in seen:
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


def test_max_line_length_closes_lines(tiny_model):
    lines = sample_lines(tiny_model, SampleConfig(n_molecules=30, seed=1, max_line_length=3, temperature=3.0))
    assert all(len(split_symbols(s)) <= 3 for s in lines)


def test_cold_sampling_repeats_single_line():
    cfg = TrainingConfig(layers=1, hidden=16, dropout=0.0, batch_size=8, unroll=8, lr=0.02, epochs=150,
                         seed=0, dtype="float64")
    ck = train(["CC(=O)O"] * 8, cfg)
    lines = sample_lines(ck, SampleConfig(n_molecules=20, temperature=1e-3, seed=4))
    assert lines == ["CC(=O)O"] * 20


def test_memorized_ten_molecules_reappear(memorized_ten, ten_molecules):
    lines = sample_lines(memorized_ten, SampleConfig(n_molecules=1000, seed=0, streams=50))
    assert len(lines) == 1000
    assert len(set(lines) & set(ten_molecules)) >= 8


def test_random_seed_policy_runs(tiny_model):
    lines = sample_lines(tiny_model, SampleConfig(n_molecules=5, seed=0, seed_policy="random"))
    assert len(lines) == 5


# --------------------------------------------------------------------------
# fine-tuning


def test_fine_tune_epoch_zero_is_base(tiny_model):
    res = fine_tune(tiny_model, ["CCO", "CCN"], TrainingConfig(epochs=2, batch_size=2, dropout=0.0, seed=0))
    assert len(res.checkpoints) == 3
    for k, v in tiny_model.params.items():
        np.testing.assert_array_equal(res.checkpoints[0].params[k], v)
    final = res.final
    assert final.vocabulary == tiny_model.vocabulary
    assert {k: v.shape for k, v in final.params.items()} == {k: v.shape for k, v in tiny_model.params.items()}
    assert any(not np.array_equal(final.params[k], v) for k, v in tiny_model.params.items())
    assert [h["phase"] for h in final.history][-2:] == ["finetune", "finetune"]


def test_fine_tune_skips_out_of_vocabulary_lines(tiny_model):
    res = fine_tune(tiny_model, ["CCO", "CCBr", "CCS"], TrainingConfig(epochs=1, batch_size=2, seed=0))
    assert [no for no, _ in res.skipped] == [2, 3]
    with pytest.raises(VocabularyMismatch):
        fine_tune(tiny_model, ["CBr", "S"], TrainingConfig(epochs=1))


def test_fine_tune_on_own_corpus_does_not_hurt(memorized_ten, ten_molecules):
    before = evaluate_loss(memorized_ten, ten_molecules)
    res = fine_tune(memorized_ten, ten_molecules,
                    TrainingConfig(epochs=3, batch_size=10, lr=0.001, dropout=0.0, seed=0, dtype="float64"))
    assert evaluate_loss(res.final, ten_molecules) <= before * 1.05 + 1e-3
