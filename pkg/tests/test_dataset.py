"""
Tests for the synthetic corpus, tokenizer, vocabulary and dataset directories
"""

import numpy as np
import pytest

from vti.core.errors import ContractViolation, DatasetIOError, ParseError
from vti.schemas.records import CONDITIONS, SPECIAL_TOKENS, UNK_ID
from vti.services.dataset_service import (
    MANIFEST_NAME,
    STYLE_FAMILIES,
    VOCAB_NAME,
    Vocabulary,
    assign_splits,
    build_vocab,
    load_dataset,
    read_pgm,
    split_records,
    synth_generate,
    synth_record,
    tokenize,
    vocab_from_records,
    write_dataset,
    write_pgm,
)
from vti.services.metrics_service import label_report


# ============================================================================
# Synthetic corpus
# ============================================================================

def test_synth_is_deterministic():
    """Test same seed, same corpus; different seed, different corpus"""
    a = synth_generate(10, seed=5)
    b = synth_generate(10, seed=5)
    assert a == b
    assert a != synth_generate(10, seed=6)
    assert synth_record(7, seed=5) == a[7]


def test_synth_record_layout():
    """Test image range, closing sentence and label/sentence agreement"""
    for record in synth_generate(40, seed=1):
        assert record.image.shape == (32, 32)
        assert record.image.min() >= 0.0 and record.image.max() <= 1.0
        assert len(record.sentences) == len(record.labels) + 1
        assert record.labels <= set(CONDITIONS)
        assert label_report(record.sentences) == set(record.labels)


def test_label_free_record_has_only_closing_sentence():
    """Test a record with no findings carries exactly one sentence"""
    empty = [r for r in synth_generate(60, seed=2) if not r.labels]
    assert empty
    assert all(len(r.sentences) == 1 for r in empty)


def test_condition_drawn_in_its_region():
    """Test a present condition brightens its own block"""
    from vti.services.dataset_service import condition_region
    records = synth_generate(30, seed=4)
    for record in records:
        for name in CONDITIONS:
            rows, cols = condition_region(name)
            peak = record.image[rows, cols].max()
            if name in record.labels:
                assert peak > 0.3
            else:
                assert peak <= 0.06


def test_style_count_contract():
    """Test unsupported style counts are rejected"""
    with pytest.raises(ContractViolation):
        synth_record(0, seed=0, style_count=0)
    with pytest.raises(ContractViolation):
        synth_record(0, seed=0, style_count=9)
    assert {r.style for r in synth_generate(30, seed=0, style_count=1)} == {0}


def test_synthetic_sentences_are_short():
    """Test every template and every generated sentence has at most 12 tokens"""
    for family in STYLE_FAMILIES:
        for options in family.values():
            assert all(1 <= len(tokenize(s)) <= 12 for s in options)
    records = synth_generate(200, seed=8)
    assert max(len(tokenize(s)) for r in records for s in r.sentences) <= 12


@pytest.mark.slow
def test_condition_frequencies():
    """Test each condition appears in roughly 35% of 2000 records"""
    records = synth_generate(2000, seed=7)
    for name in CONDITIONS:
        freq = sum(name in r.labels for r in records) / len(records)
        assert 0.30 <= freq <= 0.40, name


# ============================================================================
# Tokenizer and vocabulary
# ============================================================================

def test_tokenize_examples():
    """Test lowercasing, punctuation stripping and token filtering"""
    assert tokenize("The heart is Enlarged.") == ["the", "heart", "is", "enlarged"]
    assert tokenize("  effusion,   noted;  ") == ["effusion", "noted"]
    assert tokenize("12 3.5 -- ok") == ["ok"]
    assert tokenize("") == []


def test_build_vocab_examples():
    """Test special ids, frequency order and the min_freq cut"""
    v = build_vocab([["b", "a", "b"], ["c", "a", "b"], ["d"]], min_freq=2)
    assert tuple(v.id_to_token[:5]) == SPECIAL_TOKENS
    assert v.id_to_token[5:] == ["b", "a"]
    assert v.encode(["a", "c", "zzz"]) == [6, UNK_ID, UNK_ID]
    assert len(build_vocab([["x", "y"]], min_freq=1)) == 7
    with pytest.raises(ContractViolation):
        build_vocab([["x"]], min_freq=0)


def test_vocabulary_decode_stops_at_eos():
    """Test decode skips specials and ends at the first [EOS]"""
    v = build_vocab([["lung", "clear"]], min_freq=1)
    ids = [1, v.token_to_id["lung"], 3, v.token_to_id["clear"], 2, v.token_to_id["lung"]]
    assert v.decode(ids) == ["lung", "clear"]
    assert v.decode_text(ids) == "lung clear"


def test_vocabulary_save_load(tmp_path):
    """Test the vocabulary file is one token per line in id order"""
    v = vocab_from_records(synth_generate(20, seed=0), min_freq=1)
    v.save(tmp_path / VOCAB_NAME)
    assert Vocabulary.load(tmp_path / VOCAB_NAME) == v
    (tmp_path / "bad.txt").write_text("[PAD]\n[BOS]\n\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        Vocabulary.load(tmp_path / "bad.txt")
    assert info.value.line == 3
    with pytest.raises(DatasetIOError):
        Vocabulary.load(tmp_path / "missing.txt")


def test_encode_record_drops_empty_sentences(synth_records, vocab):
    """Test records encode to non-empty id lists"""
    record = synth_records[0]
    record.sentences.append("... 42")
    example = vocab.encode_record(record)
    assert len(example.sentences) == len(record.sentences) - 1
    assert all(example.sentences)


def test_encode_record_truncates_long_sentences(synth_records, vocab):
    """Test max_tokens keeps the first ids of an over-long sentence"""
    record = synth_records[0]
    record.sentences.append(" ".join(["normal"] * 40))
    assert len(vocab.encode_record(record).sentences[-1]) == 40
    example = vocab.encode_record(record, max_tokens=16)
    assert example.sentences[-1] == vocab.encode_text("normal") * 16
    assert max(len(s) for s in example.sentences) <= 16
    assert example.sentences[:-1] == vocab.encode_record(synth_records[0]).sentences[:-1]
    with pytest.raises(ContractViolation):
        vocab.encode_record(record, max_tokens=0)


# ============================================================================
# Splits and dataset directories
# ============================================================================

def test_split_counts():
    """Test 10000 records split 7000/1000/2000"""
    splits = assign_splits(10_000, seed=7)
    assert abs(splits.count("train") - 7000) <= 1
    assert abs(splits.count("val") - 1000) <= 1
    assert abs(splits.count("test") - 2000) <= 1
    assert splits == assign_splits(10_000, seed=7)
    assert splits != assign_splits(10_000, seed=8)


def test_pgm_round_trip(tmp_path):
    """Test quantized images survive the PGM round trip exactly"""
    image = np.round(np.random.default_rng(0).random((8, 5)) * 255) / 255
    write_pgm(tmp_path / "a.pgm", image)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), image)
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ParseError):
        read_pgm(tmp_path / "b.pgm")


def test_write_and_load_dataset(tmp_path, synth_records, vocab):
    """Test a written directory loads back into equal records"""
    written = write_dataset(synth_records, tmp_path, seed=3, vocab=vocab)
    assert (tmp_path / MANIFEST_NAME).is_file() and (tmp_path / VOCAB_NAME).is_file()
    loaded = load_dataset(tmp_path, image_size=32)
    assert loaded == written
    assert [r.sentences for r in loaded] == [r.sentences for r in synth_records]
    assert {r.split for r in loaded} <= {"train", "val", "test"}
    assert sum(len(split_records(loaded, s)) for s in ("train", "val", "test")) == len(loaded)


def test_load_missing_image_names_path(tmp_path, synth_records):
    """Test a missing image raises an I/O error naming the file"""
    write_dataset(synth_records[:3], tmp_path)
    target = tmp_path / synth_records[1].image_path
    target.unlink()
    with pytest.raises(DatasetIOError) as info:
        load_dataset(tmp_path)
    assert str(target) in str(info.value)


def test_load_missing_manifest(tmp_path):
    """Test a directory without a manifest is an I/O error"""
    with pytest.raises(DatasetIOError):
        load_dataset(tmp_path)


def test_load_malformed_manifest_reports_line(tmp_path, synth_records):
    """Test a broken manifest line is a parse error with its line number"""
    write_dataset(synth_records[:3], tmp_path)
    manifest = tmp_path / MANIFEST_NAME
    lines = manifest.read_text(encoding="utf-8").splitlines()
    lines[1] = '{"image": "images/rec_000001.pgm", "sentences": "not a list"'
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_dataset(tmp_path)
    assert info.value.line == 2


def test_load_rejects_unknown_label(tmp_path, synth_records):
    """Test manifest labels must be known conditions"""
    write_dataset(synth_records[:1], tmp_path)
    (tmp_path / MANIFEST_NAME).write_text(
        '{"image": "images/rec_000000.pgm", "sentences": ["x"], "labels": ["edema"]}\n', encoding="utf-8"
    )
    with pytest.raises(ParseError):
        load_dataset(tmp_path)


def test_load_rejects_wrong_image_size(tmp_path, synth_records):
    """Test images must match the configured size"""
    write_dataset(synth_records[:2], tmp_path)
    with pytest.raises(ContractViolation):
        load_dataset(tmp_path, image_size=64)
