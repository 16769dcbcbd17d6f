import numpy as np
import pytest

from textdistill import Tensor, backward, tape
from textdistill import ops
from textdistill import textdata as td


class TestTokenize:
    def test_empty(self):
        assert td.tokenize("") == []

    def test_punctuation_split(self):
        assert td.tokenize("Good movie!") == ["good", "movie", "!"]

    def test_inner_punctuation(self):
        assert td.tokenize("A&B test") == ["a", "&", "b", "test"]

    def test_whitespace_collapse(self):
        assert td.tokenize("  a\t b\n") == ["a", "b"]


class TestCsvLoading:
    def _write(self, tmp_path, rows):
        p = tmp_path / "data.csv"
        p.write_text("\n".join(rows) + "\n", encoding="utf-8")
        return p

    def test_label_becomes_zero_based_and_fields_concatenate(self, tmp_path):
        p = self._write(tmp_path, ['"3","title","body"'])
        texts, labels, c = td.load_csv_texts(p, num_classes=4)
        assert texts == ["title body"]
        assert labels.tolist() == [2]
        assert c == 4

    def test_zero_label_rejected(self, tmp_path):
        p = self._write(tmp_path, ['"0","x"'])
        with pytest.raises(td.LabelOutOfDeclaredRange):
            td.load_csv_texts(p)

    def test_label_above_declared_range(self, tmp_path):
        p = self._write(tmp_path, ['"5","x"'])
        with pytest.raises(td.LabelOutOfDeclaredRange):
            td.load_csv_texts(p, num_classes=4)

    def test_too_few_fields(self, tmp_path):
        p = self._write(tmp_path, ['"1","a"', '"2"'])
        with pytest.raises(td.MalformedRow) as exc:
            td.load_csv_texts(p)
        assert exc.value.line_no == 2

    def test_non_integer_label(self, tmp_path):
        p = self._write(tmp_path, ['"x","a"'])
        with pytest.raises(td.MalformedRow):
            td.load_csv_texts(p)

    def test_class_count_inferred(self, tmp_path):
        p = self._write(tmp_path, ['"1","a"', '"3","b"'])
        _, labels, c = td.load_csv_texts(p)
        assert c == 3 and labels.tolist() == [0, 2]

    def test_field_policies(self, tmp_path):
        p = self._write(tmp_path, ['"1","t","b"'])
        assert td.load_csv_texts(p, field_policy="first")[0] == ["t"]
        assert td.load_csv_texts(p, field_policy="last")[0] == ["b"]


class TestVocab:
    def test_min_count_filters(self):
        v = td.build_vocab(["a a b"], min_count=2)
        assert v.id_to_token == ["<pad>", "<unk>", "a"]

    def test_min_count_one_keeps_all(self):
        v = td.build_vocab(["a a b"], min_count=1)
        assert v.id_to_token == ["<pad>", "<unk>", "a", "b"]

    def test_frequency_then_lexicographic(self):
        v = td.build_vocab(["b b c c a"])
        assert v.id_to_token[2:] == ["b", "c", "a"]

    def test_order_independent(self):
        texts = ["red green blue", "green blue", "blue"]
        a = td.build_vocab(texts)
        b = td.build_vocab(list(reversed(texts)))
        assert a.id_to_token == b.id_to_token

    def test_unknown_maps_to_unk(self):
        v = td.build_vocab(["a"])
        assert v.id_for("zzz") == td.UNK_ID


class TestEmbeddings:
    def _write_vectors(self, tmp_path, entries):
        p = tmp_path / "vecs.txt"
        lines = [tok + " " + " ".join(f"{x:.6f}" for x in vec) for tok, vec in entries]
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return p

    def test_in_vocab_rows_match_file_exactly(self, tmp_path):
        p = self._write_vectors(tmp_path, [("a", [0.1, -0.2, 0.3])])
        vocab = td.build_vocab(["a b"])
        table = td.load_embeddings(p, vocab, dim=3, seed=0)
        np.testing.assert_array_equal(table.vectors[vocab.id_for("a")],
                                      [0.1, -0.2, 0.3])

    def test_pad_row_forced_zero(self, tmp_path):
        p = self._write_vectors(tmp_path, [("<pad>", [9.0, 9.0]), ("a", [1.0, 2.0])])
        vocab = td.build_vocab(["a"])
        table = td.load_embeddings(p, vocab, dim=2, seed=0)
        np.testing.assert_array_equal(table.vectors[td.PAD_ID], [0.0, 0.0])

    def test_oov_rows_match_file_std(self, tmp_path):
        rng = np.random.default_rng(7)
        entries = [(f"w{i}", rng.normal(0, 0.38, size=4)) for i in range(50)]
        p = self._write_vectors(tmp_path, entries)
        # vocabulary is entirely out of the file: every row is drawn randomly
        vocab = td.build_vocab([" ".join(f"x{i}" for i in range(2500))])
        table = td.load_embeddings(p, vocab, dim=4, seed=1)
        drawn = table.vectors[2:]  # ~10k entries
        file_std = np.concatenate([v for _, v in entries]).std()
        assert drawn.size >= 10000
        assert abs(drawn.std() - file_std) / file_std < 0.05

    def test_dim_mismatch_reports_line(self, tmp_path):
        p = self._write_vectors(tmp_path, [("a", [1.0, 2.0]), ("b", [1.0])])
        with pytest.raises(td.DimMismatch) as exc:
            td.load_embeddings(p, td.build_vocab(["a"]), dim=2, seed=0)
        assert exc.value.line_no == 2

    def test_unparseable_float(self, tmp_path):
        p = tmp_path / "vecs.txt"
        p.write_text("a 1.0 oops\n", encoding="utf-8")
        with pytest.raises(td.UnparseableFloat):
            td.load_embeddings(p, td.build_vocab(["a"]), dim=2, seed=0)

    def test_random_table_stats_and_pad(self):
        vocab = td.build_vocab([" ".join(f"t{i}" for i in range(4000))])
        table = td.random_embedding_table(vocab, dim=8, seed=3, sigma=0.4)
        np.testing.assert_array_equal(table.vectors[td.PAD_ID], np.zeros(8))
        assert abs(table.std - 0.4) / 0.4 < 0.05

    def test_content_hash_sensitive(self):
        vocab = td.build_vocab(["a b c"])
        t1 = td.random_embedding_table(vocab, dim=4, seed=0)
        t2 = td.random_embedding_table(vocab, dim=4, seed=1)
        assert t1.content_hash() != t2.content_hash()
        assert t1.content_hash() == td.random_embedding_table(vocab, dim=4, seed=0).content_hash()


class TestEncode:
    def test_pad_to_length(self):
        vocab = td.build_vocab(["a"])
        np.testing.assert_array_equal(td.encode(["a"], vocab, 3),
                                      [vocab.id_for("a"), 0, 0])

    def test_truncation(self):
        vocab = td.build_vocab(["a b c d e"])
        ids = td.encode(["a", "b", "c", "d", "e"], vocab, 3)
        assert len(ids) == 3 and 0 not in ids

    def test_unknown_tokens(self):
        vocab = td.build_vocab(["a"])
        np.testing.assert_array_equal(td.encode(["x", "y"], vocab, 3),
                                      [td.UNK_ID, td.UNK_ID, td.PAD_ID])

    def test_round_trip_in_vocab(self):
        vocab = td.build_vocab(["alpha beta gamma"])
        toks = ["gamma", "alpha"]
        ids = td.encode(toks, vocab, 5)
        back = [vocab.id_to_token[i] for i in ids if i != td.PAD_ID]
        assert back == toks


class TestEmbedBatch:
    def test_all_pad_row_is_zero(self):
        vocab = td.build_vocab(["a"])
        table = td.random_embedding_table(vocab, dim=4, seed=0)
        out = td.embed_batch(np.zeros((1, 3), dtype=np.int32), table)
        np.testing.assert_array_equal(out.data, np.zeros((1, 3, 4)))

    def test_rows_stack_in_order(self):
        vocab = td.build_vocab(["a b"])
        table = td.random_embedding_table(vocab, dim=4, seed=0)
        i, j = vocab.id_for("a"), vocab.id_for("b")
        out = td.embed_batch(np.array([[i, j]]), table)
        np.testing.assert_allclose(out.data[0, 0], table.vectors[i], rtol=1e-6)
        np.testing.assert_allclose(out.data[0, 1], table.vectors[j], rtol=1e-6)

    def test_id_out_of_range(self):
        vocab = td.build_vocab(["a"])
        table = td.random_embedding_table(vocab, dim=4, seed=0)
        with pytest.raises(td.IdOutOfRange):
            td.embed_batch(np.array([[len(table)]]), table)

    def test_backward_does_not_touch_table(self):
        vocab = td.build_vocab(["a b c"])
        table = td.random_embedding_table(vocab, dim=4, seed=0)
        before = table.vectors.copy()
        with tape():
            batch = td.embed_batch(np.array([[2, 3]]), table)
            w = Tensor(np.ones((1, 2, 4)), requires_grad=True)
            loss = ops.sum_all(ops.mul(batch, w))
            backward(loss, [w])
        assert batch.node is None or batch.node.op == "leaf"  # constant input
        np.testing.assert_array_equal(table.vectors, before)


def _toy_dataset(n=5, num_classes=2, max_len=4, seed=0):
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, 6, size=(n, max_len)).astype(np.int32)
    labels = rng.integers(0, num_classes, size=n)
    return td.Dataset(ids, labels, num_classes)


class TestBatchIterator:
    def test_batch_sizes_within_epoch(self):
        it = td.BatchIterator(_toy_dataset(5), batch_size=2, seed=0)
        sizes = [len(it.next_batch()[1]) for _ in range(3)]
        assert sizes == [2, 2, 1]
        assert it.batches_per_epoch == 3

    def test_epoch_covers_every_example(self):
        ds = _toy_dataset(7, seed=1)
        it = td.BatchIterator(ds, batch_size=3, seed=5)
        seen = np.concatenate([it.next_batch()[0] for _ in range(it.batches_per_epoch)])
        assert sorted(map(tuple, seen)) == sorted(map(tuple, ds.token_ids))

    def test_epoch_labels_are_permutation(self):
        ds = _toy_dataset(9, seed=2)
        it = td.BatchIterator(ds, batch_size=4, seed=5)
        labels = np.concatenate([it.next_batch()[1] for _ in range(it.batches_per_epoch)])
        assert sorted(labels) == sorted(ds.labels)

    def test_same_seed_identical_sequences(self):
        ds = _toy_dataset(8, seed=3)
        a = td.BatchIterator(ds, batch_size=3, seed=9)
        b = td.BatchIterator(ds, batch_size=3, seed=9)
        for _ in range(6):  # crosses an epoch boundary
            xa, ya = a.next_batch()
            xb, yb = b.next_batch()
            np.testing.assert_array_equal(xa, xb)
            np.testing.assert_array_equal(ya, yb)

    def test_different_seeds_differ(self):
        ds = _toy_dataset(20, seed=4)
        a = td.BatchIterator(ds, batch_size=20, seed=0)
        b = td.BatchIterator(ds, batch_size=20, seed=1)
        assert not np.array_equal(a.next_batch()[0], b.next_batch()[0])

    def test_reshuffles_between_epochs(self):
        ds = _toy_dataset(16, seed=5)
        it = td.BatchIterator(ds, batch_size=16, seed=0)
        first = it.next_batch()[0]
        second = it.next_batch()[0]
        assert not np.array_equal(first, second)
        assert it.epoch == 1
