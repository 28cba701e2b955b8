import pytest

from lattle.errors import VocabularyError
from lattle.tokenizer import CLS_ID, PAD_ID, UNK_ID, Vocabulary, build_vocab, split_words


class TestBuildVocab:
    def test_reserved_ids(self):
        v = build_vocab(["a"])
        assert (v.id("[PAD]"), v.id("[UNK]"), v.id("[CLS]")) == (PAD_ID, UNK_ID, CLS_ID) == (0, 1, 2)

    def test_sentence_tokens_present(self):
        v = build_vocab(["Age is 25."])
        for tok in ("age", "is", "25", "."):
            assert tok in v

    def test_min_freq(self):
        v = build_vocab(["a b", "a c"], min_freq=2)
        assert "a" in v and "b" not in v
        assert v.encode("b c a") == [UNK_ID, UNK_ID, v.id("a")]

    def test_deterministic(self):
        corpus = ["x is 1. y is 2.", "x is 3."]
        assert build_vocab(corpus).tokens == build_vocab(corpus).tokens

    def test_frequency_then_lexical_order(self):
        v = build_vocab(["b a b c"])
        assert v.tokens[3:] == ["b", "a", "c"]

    def test_empty_corpus(self):
        with pytest.raises(VocabularyError):
            build_vocab([])

    def test_save_load_round_trip(self, tmp_path):
        v = build_vocab(["Age is 25. Sex is male."])
        v.save(tmp_path / "vocab.tsv")
        assert Vocabulary.load(tmp_path / "vocab.tsv") == v


class TestEncode:
    def test_sentence(self):
        v = build_vocab(["Age is 25."])
        assert v.encode("Age is 25.") == [v.id("age"), v.id("is"), v.id("25"), v.id(".")]

    def test_unknown_word(self):
        v = build_vocab(["Age is 25."])
        assert v.encode("Age is 99.")[2] == UNK_ID

    def test_truncates_to_max_length(self):
        v = build_vocab(["w"])
        assert len(v.encode(" ".join(["w"] * 2000))) == 1024

    def test_split_words(self):
        assert split_words("Sex is male. x is 0.5.") == ["sex", "is", "male", ".", "x", "is", "0.5", "."]

    def test_decode_skips_padding(self):
        v = build_vocab(["a b"])
        assert v.decode([v.id("a"), PAD_ID, v.id("b")]) == "a b"
