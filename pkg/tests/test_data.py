import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from ddp_workbench.data import (
    Corpus, DataError, SynthConfig, count_label, ingest, read_embeddings, split_corpus, synthesize,
    write_corpus, write_embeddings,
)
from ddp_workbench.models import PAD, UNK


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines))
    return path


@pytest.fixture
def emb_file(tmp_path):
    return write_lines(tmp_path / "emb.txt", ["a 1.0 0.0", "b 0.0 1.0", "c 0.5 0.5"])


def test_empty_corpus_is_an_error(tmp_path, emb_file):
    with pytest.raises(DataError, match="empty"):
        ingest(write_lines(tmp_path / "c.jsonl", []), emb_file)


def test_short_texts_are_dropped_and_counted(tmp_path, emb_file):
    lines = [json.dumps({"text": ["a", "b", "c"], "label": 0}),
             json.dumps({"text": ["a", "b", "c", "a", "b"], "label": 1})]
    corpus, _ = ingest(write_lines(tmp_path / "c.jsonl", lines), emb_file)
    assert len(corpus) == 1 and corpus.n_dropped == 1


def test_unknown_tokens_map_to_unk(tmp_path, emb_file):
    corpus, table = ingest(write_lines(tmp_path / "c.jsonl", [json.dumps({"text": list("abczz"), "label": 0})]), emb_file)
    ids = corpus.instances[0][0]
    assert ids[3] == ids[4] == table.vocab[UNK]
    assert table.vocab[PAD] == 0


def test_malformed_line_reports_line_number(tmp_path, emb_file):
    lines = [json.dumps({"text": list("abcab"), "label": 0}), "{not json", ""]
    with pytest.raises(DataError, match=":2:"):
        ingest(write_lines(tmp_path / "c.jsonl", lines), emb_file)
    with pytest.raises(DataError, match=":1:"):
        ingest(write_lines(tmp_path / "d.jsonl", [json.dumps({"text": "abcab", "label": 0})]), emb_file)


def test_embedding_errors(tmp_path):
    with pytest.raises(DataError, match=":2:"):
        read_embeddings(write_lines(tmp_path / "e.txt", ["a 1 2", "b 1 2 3"]))
    with pytest.raises(DataError, match=":1:"):
        read_embeddings(write_lines(tmp_path / "f.txt", ["a 1 x"]))
    with pytest.raises(DataError):
        read_embeddings(write_lines(tmp_path / "g.txt", [f"{PAD} 1 0"]))


def test_round_trip(tmp_path, task):
    write_corpus(tmp_path / "c.jsonl", task.corpus, task.table)
    write_embeddings(tmp_path / "e.txt", task.table)
    corpus, table = ingest(tmp_path / "c.jsonl", tmp_path / "e.txt")
    assert corpus == task.corpus and corpus.n_dropped == 0
    assert table.vocab == task.table.vocab
    assert_array_equal(table.matrix, task.table.matrix)


def test_synthetic_instances_always_carry_sentiment(task):
    polar = {task.table.vocab[t] for t in task.sentiment_tokens}
    for ids, _ in task.corpus.instances:
        assert polar & set(ids)


def test_counting_oracle_is_perfect(task):
    assert all(count_label(ids, task.table) == y for ids, y in task.corpus.instances)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 40), st.integers(0, 2))
def test_synthesis_is_seeded_and_labelled_by_counts(seed, vocab, minority):
    cfg = SynthConfig(vocab_size=vocab, n_instances=30, seed=seed, max_minority=minority)
    a, b = synthesize(cfg), synthesize(cfg)
    assert a.corpus == b.corpus
    assert_array_equal(a.table.matrix, b.table.matrix)
    assert all(count_label(ids, a.table) == y for ids, y in a.corpus.instances)


def test_synthetic_task_is_linearly_separable(task):
    # mean-pooled embeddings projected on the sentiment direction
    u = task.table.matrix[task.table.vocab["pos0"]] - task.table.matrix[task.table.vocab["neg0"]]
    proj = np.array([task.table.embed(ids).embeddings.mean(axis=0) @ u for ids, _ in task.corpus.instances])
    y = np.array(task.corpus.labels)
    assert proj[y == 1].min() > 0 > proj[y == 0].max()


def test_synthesis_rejects_tiny_vocabulary():
    with pytest.raises(DataError):
        SynthConfig(vocab_size=3)


def test_length_filter_never_hits_synthetic_corpora(tmp_path, task):
    write_corpus(tmp_path / "c.jsonl", task.corpus, task.table)
    write_embeddings(tmp_path / "e.txt", task.table)
    assert ingest(tmp_path / "c.jsonl", tmp_path / "e.txt")[0].n_dropped == 0


def test_split_partitions_the_corpus(task):
    parts = split_corpus(task.corpus, seed=1)
    sizes = [len(parts[k]) for k in ("train", "valid", "test")]
    assert sizes == [360, 120, 120]
    joined = sorted(map(tuple, (ids for p in parts.values() for ids, _ in p.instances)))
    assert joined == sorted(map(tuple, (ids for ids, _ in task.corpus.instances)))
    assert parts["test"].split == "test"


def test_corpus_invariants():
    with pytest.raises(DataError):
        Corpus([([], 0)])
    with pytest.raises(DataError):
        Corpus([([1, 2], -1)])
    with pytest.raises(DataError):
        Corpus([([1, 2], 0)], split="dev")
