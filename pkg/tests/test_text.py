import numpy as np
import pytest

from eimlab.text import (
    NULL,
    EditDirection,
    EditPlan,
    PlanEntry,
    SemanticVocabulary,
    TextEmbedding,
    UnknownTokenError,
    apply_text_direction,
    differing_rows,
    encode_prompt,
    extended_direction,
    multi_attr_manipulate,
    pool,
    text_direction,
)

FACES = (("expression", ("neutral", "smile")), ("coat", ("none", "purple", "black")), ("age", ("young", "old")))


@pytest.fixture
def faces():
    return SemanticVocabulary(FACES, width=16, seed=3)


def test_single_token_is_table_row(faces):
    emb = encode_prompt(faces, [("expression", "smile")])
    assert emb.tokens.shape == (1, 16)
    np.testing.assert_array_equal(emb.tokens[0], faces.table[faces.index(("expression", "smile"))])


def test_encoding_is_deterministic(faces):
    p = faces.prompt({"expression": "smile", "coat": "black"})
    assert encode_prompt(faces, p).tokens.tobytes() == encode_prompt(faces, p).tokens.tobytes()
    again = SemanticVocabulary(FACES, width=16, seed=3)
    assert again.table.tobytes() == faces.table.tobytes()


def test_vocab_rows_are_unit_and_unique(vocab):
    np.testing.assert_allclose(np.linalg.norm(vocab.table, axis=1), 1.0, atol=1e-12)
    assert len({r.tobytes() for r in vocab.table}) == len(vocab.tokens)


def test_one_token_edit_changes_one_row(faces):
    a = encode_prompt(faces, faces.prompt({"expression": "smile", "coat": "none"}))
    b = encode_prompt(faces, faces.prompt({"expression": "smile", "coat": "purple"}))
    changed = np.flatnonzero(np.any(a.tokens != b.tokens, axis=1))
    assert changed.tolist() == [1]


def test_unknown_token_named(faces):
    with pytest.raises(UnknownTokenError, match="mustache"):
        encode_prompt(faces, [("expression", "mustache")])
    with pytest.raises(UnknownTokenError):
        faces.prompt({"hat": "red"})


def test_prompt_slots_and_null(vocab):
    p = vocab.prompt({"color": "red", "object": "square"})
    assert len(p) == len(vocab.attribute_names)
    assert p[1] == ("color", "red") and p[0] == NULL


def test_vocab_json_roundtrip(faces):
    back = SemanticVocabulary.from_json(faces.to_json())
    assert back.table.tobytes() == faces.table.tobytes()


def test_pool_cases():
    r = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(pool(TextEmbedding(r)), r[0])
    np.testing.assert_array_equal(pool(TextEmbedding(np.vstack([r, -r]))), np.zeros(3))
    x = np.random.default_rng(0).standard_normal((3, 5))
    ref = [sum(x[i, j] for i in range(3)) / 3 for j in range(5)]
    np.testing.assert_allclose(pool(TextEmbedding(x)), ref, atol=1e-12)
    with pytest.raises(ValueError):
        TextEmbedding(np.zeros((0, 3)))


def test_text_direction(faces):
    a = encode_prompt(faces, faces.prompt({"expression": "neutral", "coat": "none"}))
    b = encode_prompt(faces, faces.prompt({"expression": "smile", "coat": "none"}))
    assert not text_direction(a, b, 0.0).delta.any()
    assert not text_direction(a, a, 0.7).delta.any()
    n = text_direction(a, b, 0.5)
    np.testing.assert_array_equal(np.flatnonzero(np.any(n.delta != 0, axis=1)), [0])
    np.testing.assert_allclose(n.delta[0], 0.5 * (b.tokens[0] - a.tokens[0]), atol=1e-15)
    with pytest.raises(ValueError):
        text_direction(a, TextEmbedding(np.zeros((2, 16))), 1.0)


def test_apply_text_direction(faces):
    a = encode_prompt(faces, faces.prompt({"expression": "neutral"}))
    b = encode_prompt(faces, faces.prompt({"expression": "smile"}))
    zero = EditDirection("text", np.zeros_like(a.tokens))
    np.testing.assert_array_equal(apply_text_direction(a, zero).tokens, a.tokens)
    n = text_direction(a, b, 1.0)
    np.testing.assert_allclose(apply_text_direction(a, n).tokens, b.tokens, atol=1e-12)
    back = apply_text_direction(apply_text_direction(a, n), -n)
    np.testing.assert_allclose(back.tokens, a.tokens, atol=1e-15)
    with pytest.raises(TypeError):
        apply_text_direction(a, EditDirection("image", n.delta))


def test_multi_attr_manipulate(faces):
    c0 = encode_prompt(faces, faces.prompt({"expression": "neutral", "coat": "none", "age": "young"}))
    c1 = encode_prompt(faces, faces.prompt({"expression": "smile", "coat": "purple", "age": "young"}))
    plan = EditPlan((PlanEntry("expression", "neutral", "smile", 0.0), PlanEntry("coat", "none", "purple", 0.0)))
    np.testing.assert_array_equal(multi_attr_manipulate(c0, c1, plan).tokens, c0.tokens)
    full = multi_attr_manipulate(c0, c1, plan.with_alpha(1.0)).tokens
    np.testing.assert_array_equal(full[:2], c1.tokens[:2])
    mixed = EditPlan((PlanEntry("expression", "neutral", "smile", 0.3), PlanEntry("coat", "none", "purple", 0.7)))
    out = multi_attr_manipulate(c0, c1, mixed).tokens
    for row, a in ((0, 0.3), (1, 0.7)):
        ref = [(1 - a) * x + a * y for x, y in zip(c0.tokens[row], c1.tokens[row])]
        np.testing.assert_allclose(out[row], ref, atol=1e-12)
    np.testing.assert_array_equal(out[2], c0.tokens[2])
    short = encode_prompt(faces, [("coat", "none")])
    with pytest.raises(KeyError):
        multi_attr_manipulate(short, short, EditPlan.single("expression", "neutral", "smile"))


def test_plan_rejects_duplicates():
    with pytest.raises(ValueError):
        EditPlan((PlanEntry("color", "red", "blue"), PlanEntry("color", "red", "green")))


def test_extended_direction():
    np.testing.assert_array_equal(extended_direction([1.0, 0.0], 1, 2), [1, 0, 0, 0])
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = rng.standard_normal(7)
        e = extended_direction(n, int(rng.integers(1, 5)), 4)
        assert abs(np.linalg.norm(e) - np.linalg.norm(n)) < 1e-12
    assert extended_direction([0.6, 0.8], 1, 3) @ extended_direction([0.8, -0.6], 3, 3) == 0.0
    with pytest.raises(IndexError):
        extended_direction([1.0], 0, 2)
    with pytest.raises(IndexError):
        extended_direction([1.0], 3, 2)


def test_differing_rows():
    assert differing_rows([("a", "1"), ("b", "2")], [("a", "1"), ("b", "3")]) == [1]
