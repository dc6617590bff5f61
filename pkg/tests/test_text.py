from hypothesis import given, strategies as st

from ptkbench.text import Analyzer, ENGLISH_STOPWORDS, content_words, split_words, tokenize


def test_stemmed_example():
    assert tokenize("Ottoman Empire's rule") == ["ottoman", "empir", "rule"]


def test_empty_and_stopword_only():
    assert tokenize("") == []
    assert tokenize("A the of") == []


def test_toggles():
    assert Analyzer(stem=False)("Running shoes") == ["running", "shoes"]
    assert Analyzer(stem=False, stopwords="none")("The cat") == ["the", "cat"]
    assert Analyzer(stem=False, stopwords=("cat",))("The cat") == ["the"]


def test_unicode_letters_are_kept():
    assert split_words("Café_au-lait, 42x!") == ["café", "au", "lait", "42x"]


def test_config_hash_tracks_config():
    a, b = Analyzer(), Analyzer(stem=False)
    assert a.config_hash() != b.config_hash()
    assert Analyzer.from_config(a.config()) == a
    assert Analyzer.from_config(Analyzer(stopwords=("x", "y")).config()) == Analyzer(stopwords=("x", "y"))


def test_content_words_unstemmed():
    assert content_words("What Turkish souvenirs are popular?") == ["turkish", "souvenirs", "popular"]


@given(st.text(max_size=80))
def test_tokens_are_lowercase_alnum_and_not_stopwords(text):
    for tok in Analyzer(stem=False)(text):
        assert tok == tok.lower() and tok.isalnum() and tok not in ENGLISH_STOPWORDS
