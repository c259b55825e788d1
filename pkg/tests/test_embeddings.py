import numpy as np
import pytest

from hme import embeddings as emb
from hme.autodiff import Tape, tensor_sum, take


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


class TestLoad:
    def test_vec_with_header(self, tmp_path):
        path = write(tmp_path, "t.vec", "2 3\na 1 2 3\nb 4 5 6\n")
        t = emb.load_text_embeddings(path, "vec_with_header", language_id="en")
        assert t.vocab == {"a": 0, "b": 1}
        assert t.dim == 3
        np.testing.assert_array_equal(t.vectors.data, [[1, 2, 3], [4, 5, 6]])
        assert not t.trainable

    def test_glove_infers_dim(self, tmp_path):
        path = write(tmp_path, "t.txt", "x 0.5 -0.5\n")
        t = emb.load_text_embeddings(path, "glove_no_header")
        assert t.dim == 2
        np.testing.assert_array_equal(t.vectors.data, [[0.5, -0.5]])

    def test_dim_mismatch_names_line(self, tmp_path):
        path = write(tmp_path, "bad.vec", "1 3\na 1 2\n")
        with pytest.raises(emb.EmbeddingFormatError, match=r"bad\.vec:2"):
            emb.load_text_embeddings(path, "vec_with_header")

    def test_unparsable_float_names_line(self, tmp_path):
        path = write(tmp_path, "bad.vec", "2 2\na 1 2\nb x 2\n")
        with pytest.raises(emb.EmbeddingFormatError, match=r"bad\.vec:3"):
            emb.load_text_embeddings(path, "vec_with_header")

    def test_empty_file(self, tmp_path):
        path = write(tmp_path, "empty.vec", "")
        with pytest.raises(emb.EmbeddingFormatError):
            emb.load_text_embeddings(path, "vec_with_header")

    def test_manifest_dim_enforced(self, tmp_path):
        path = write(tmp_path, "t.vec", "1 3\na 1 2 3\n")
        with pytest.raises(emb.EmbeddingFormatError, match="manifest"):
            emb.load_text_embeddings(path, "vec_with_header", expected_dim=5)

    def test_duplicate_first_wins(self, tmp_path):
        path = write(tmp_path, "d.txt", "a 1 1\na 2 2\nb 3 3\n")
        t = emb.load_text_embeddings(path, "glove_no_header")
        np.testing.assert_array_equal(t.vectors.data[t.vocab["a"]], [1, 1])
        assert len(t.vocab) == 2

    def test_limit_truncates(self, tmp_path):
        path = write(tmp_path, "l.txt", "a 1\nb 2\nc 3\n")
        t = emb.load_text_embeddings(path, "glove_no_header", limit=2)
        assert set(t.vocab) == {"a", "b"}

    def test_crlf_tolerated(self, tmp_path):
        p = tmp_path / "crlf.vec"
        p.write_bytes(b"1 2\r\na 1 2\r\n")
        t = emb.load_text_embeddings(str(p), "vec_with_header")
        np.testing.assert_array_equal(t.vectors.data, [[1, 2]])


class TestLookup:
    def table(self, tmp_path):
        path = write(tmp_path, "t.vec", "2 2\nwalking 1 2\ndead 3 4\n")
        return emb.load_text_embeddings(path, "vec_with_header")

    def test_exact_row(self, tmp_path):
        t = self.table(tmp_path)
        np.testing.assert_array_equal(emb.lookup(t, "dead").data, [3, 4])

    def test_oov_zero_vector(self, tmp_path):
        t = self.table(tmp_path)
        np.testing.assert_array_equal(emb.lookup(t, "missing").data, [0, 0])

    def test_lowercase_fallback(self, tmp_path):
        t = self.table(tmp_path)
        np.testing.assert_array_equal(emb.lookup(t, "Walking").data, [1, 2])

    def test_trainable_unk_shares_row(self):
        t = emb.init_char_table({"a", "b"}, dim=4, seed=0)
        u1 = emb.lookup(t, "é")
        u2 = emb.lookup(t, "ø")
        np.testing.assert_array_equal(u1.data, u2.data)
        np.testing.assert_array_equal(u1.data, t.vectors.data[t.unk_index])


class TestCharTable:
    def test_deterministic(self):
        a = emb.init_char_table("abc", 8, seed=1)
        b = emb.init_char_table("abc", 8, seed=1)
        assert a.fingerprint() == b.fingerprint()
        c = emb.init_char_table("abc", 8, seed=2)
        assert a.fingerprint() != c.fingerprint()

    def test_padding_row_zero(self):
        t = emb.init_char_table("abc", 8, seed=1)
        np.testing.assert_array_equal(t.vectors.data[t.pad_index], np.zeros(8))

    def test_special_tokens_have_rows(self):
        t = emb.init_char_table("abc", 8, seed=1)
        for tok in emb.SPECIAL_TOKENS:
            assert tok in t.vocab

    def test_uniform_range(self):
        t = emb.init_char_table("abcdefgh", 16, seed=3)
        body = t.vectors.data[1:]
        assert body.max() <= 0.1 and body.min() >= -0.1

    def test_empty_alphabet_rejected(self):
        with pytest.raises(ValueError):
            emb.init_char_table(set(), 8, seed=0)


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    path = write(tmp_path, "src.vec",
                 "3 4\n" + "\n".join(
                     f"w{i} " + " ".join(repr(float(v)) for v in rng.normal(size=4))
                     for i in range(3)) + "\n")
    t = emb.load_text_embeddings(path, "vec_with_header", language_id="x")
    out = str(tmp_path / "saved.vec")
    emb.save_text_embeddings(t, out)
    t2 = emb.load_text_embeddings(out, "vec_with_header", language_id="x")
    assert t.vocab == t2.vocab
    np.testing.assert_array_equal(t.vectors.data, t2.vectors.data)
    assert t.fingerprint() == t2.fingerprint()


def test_frozen_table_gets_no_gradient(tmp_path):
    path = write(tmp_path, "t.vec", "2 2\na 1 2\nb 3 4\n")
    t = emb.load_text_embeddings(path, "vec_with_header")
    with Tape():
        out = tensor_sum(emb.lookup(t, "a"))
        with pytest.raises(RuntimeError):
            out.backward()   # nothing trainable anywhere on this graph
    assert t.vectors.grad is None


def test_trainable_table_receives_gradient():
    t = emb.init_char_table("ab", 4, seed=0)
    with Tape():
        tensor_sum(take(t.vectors, np.array([2, 2]))).backward()
    assert t.vectors.grad is not None
    assert t.vectors.grad[2].sum() == pytest.approx(8.0)


def test_manifest_language_order(tmp_path):
    p1 = write(tmp_path, "a.vec", "1 2\nx 1 2\n")
    p2 = write(tmp_path, "b.vec", "1 2\ny 3 4\n")
    man = emb.EmbeddingManifest([
        emb.ManifestEntry("word", "en", p1, "vec_with_header", 2),
        emb.ManifestEntry("word", "es", p2, "vec_with_header", 2),
    ])
    tables = man.load_tables("word")
    assert [t.language_id for t in tables] == ["en", "es"]


def test_manifest_subword_requires_merges(tmp_path):
    with pytest.raises(ValueError, match="merges"):
        emb.ManifestEntry("subword", "en", "x.vec", "vec_with_header", 2)
