import numpy as np
import pytest

from mdctr.errors import ConfigError, ValidationError
from mdctr.prompt import (
    BOS, EOS, PAD, RESERVED, UNK, InteractionRecord, Vocabulary, build_vocab, encode, render_prompt,
    tokenize, words,
)


def record(**kw):
    base = dict(domain="Gift Cards", user_id="u1", history=["Harmonicas (12 ct)"], item_id="p9",
                title="Gift Card $25", brand="Fun Express", price="25.00", label=1)
    base.update(kw)
    return InteractionRecord(**base)


def test_render_fills_template():
    text = render_prompt(record())
    assert text.startswith(
        "Gift Cards: The user ID is user_u1, who clicked product 'Harmonicas (12 ct)' recently. "
        "The ID of the current product is product_p9, "
    )
    assert text.endswith("the title is Gift Card $25, the brand is Fun Express, the price is 25.00.")


def test_render_two_history_slots_keep_most_recent():
    text = render_prompt(record(history=["a", "b", "c"]))
    assert "who clicked product 'b' and product 'c' recently." in text
    assert "'a'" not in text


def test_render_empty_history():
    assert "who has no recent clicks" in render_prompt(record(history=[]))


@pytest.mark.parametrize("field", ["domain", "user_id", "item_id", "title", "brand", "price"])
def test_missing_field_is_named(field):
    with pytest.raises(ValidationError, match=field):
        render_prompt(record(**{field: ""}))


def test_label_and_history_limits():
    with pytest.raises(ValidationError):
        record(label=2).validate()
    with pytest.raises(ValidationError, match="limit is 2"):
        record(history=["a", "b", "c"]).validate(max_history=2)


def test_render_injective_on_triples():
    texts = {
        render_prompt(record(domain=d, user_id=u, item_id=i))
        for d in ("Fashion", "Gift Cards") for u in ("u1", "u2") for i in ("p1", "p2")
    }
    assert len(texts) == 8


def test_ablation_lengths_strictly_decrease():
    r = record()
    full, idn, ido = (len(render_prompt(r, m)) for m in ("full", "id_name", "id_only"))
    assert full > idn > ido
    with pytest.raises(ConfigError):
        render_prompt(r, "bag_of_words")


def test_words_lowercase_and_split_punctuation():
    assert words("Gift Card $25, product_p9!") == ["gift", "card", "25", "product", "p9"]


def test_vocab_frequency_then_lexicographic():
    v = build_vocab(["a b", "b"], 10)
    assert v.tokens[:4] == list(RESERVED)
    assert v.tokens[4:] == ["b", "a"]
    tie = build_vocab(["z y x"], 10)
    assert tie.tokens[4:] == ["x", "y", "z"]


def test_vocab_truncation_and_determinism():
    v = build_vocab(["a b", "b"], len(RESERVED) + 1)
    assert v.tokens == [*RESERVED, "b"]
    assert build_vocab(["q r s", "r"], 6).index == build_vocab(["q r s", "r"], 6).index


def test_vocab_errors(tmp_path):
    with pytest.raises(ValidationError):
        build_vocab([], 10)
    with pytest.raises(ConfigError):
        build_vocab(["a"], 3)
    with pytest.raises(ValidationError):
        Vocabulary(["a", "b"])
    with pytest.raises(ValidationError):
        Vocabulary([*RESERVED, "a", "a"])


def test_vocab_roundtrip(tmp_path):
    v = build_vocab(["gift card", "card"], 100)
    path = tmp_path / "vocab.txt"
    v.save(path)
    assert path.read_text().splitlines()[0] == "[PAD]\t0"
    assert Vocabulary.load(path).tokens == v.tokens


def test_tokenize_pads_and_masks():
    v = build_vocab(["hello world"], 10)
    seq = tokenize("hello world", v, 8)
    assert seq.ids.tolist() == [BOS, v.id("hello"), v.id("world"), EOS, PAD, PAD, PAD, PAD]
    assert seq.attention_mask.tolist() == [1, 1, 1, 1, 0, 0, 0, 0]
    assert ((seq.ids != PAD) == (seq.attention_mask == 1)).all()


def test_tokenize_unknown_word():
    v = build_vocab(["hello"], 10)
    assert tokenize("hello stranger", v, 6).ids.tolist()[:4] == [BOS, v.id("hello"), UNK, EOS]


def test_tokenize_truncates_before_eos():
    v = build_vocab(["a b c d e f"], 20)
    seq = tokenize("a b c d e f", v, 5)
    assert seq.ids.tolist() == [BOS, v.id("a"), v.id("b"), v.id("c"), EOS]
    assert seq.attention_mask.all()
    with pytest.raises(ConfigError):
        tokenize("a", v, 1)


def test_encode_matches_tokenize_and_is_deterministic():
    recs = [record(), record(history=[], user_id="u2", label=0)]
    v = build_vocab([render_prompt(r) for r in recs], 100)
    ids, mask = encode(recs, v, 40)
    for i, r in enumerate(recs):
        seq = tokenize(render_prompt(r), v, 40)
        np.testing.assert_array_equal(ids[i], seq.ids)
        np.testing.assert_array_equal(mask[i], seq.attention_mask)
    ids2, _ = encode(recs, v, 40)
    np.testing.assert_array_equal(ids, ids2)
