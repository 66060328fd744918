import numpy as np
import orjson
import pytest
import torch

from genplugin.corpus import ItemMeta
from genplugin.errors import CorpusError
from genplugin.textembed import TextProjector, extract, hash_embed, project, tokenize

ITEMS = [ItemMeta("a", "Red Lipstick", "matte finish"), ItemMeta("b", "Camping tent"), ItemMeta("c", "red tent")]


def test_tokenize_lowercases_and_splits():
    assert tokenize("Matte-Finish, 24h!") == ["matte", "finish", "24h"]


def test_hash_embed_is_unit_norm_and_seeded():
    texts = [m.text for m in ITEMS]
    a = hash_embed(texts, 16, seed=1)
    assert a.shape == (3, 16) and a.dtype == np.float32
    np.testing.assert_allclose(np.linalg.norm(a, axis=1), 1.0, atol=1e-5)
    np.testing.assert_array_equal(a, hash_embed(texts, 16, seed=1))
    assert not np.allclose(a, hash_embed(texts, 16, seed=2))


def test_shared_tokens_make_texts_closer():
    e = hash_embed(["red tent", "camping tent", "matte lipstick gloss"], 64, seed=0)
    assert e[0] @ e[1] > e[0] @ e[2]


def test_extract_hits_cache_on_second_call(tmp_path):
    first = extract(ITEMS, "hash", dim=8, seed=0, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.f32"))) == 1
    second = extract(ITEMS, "hash", dim=8, seed=0, cache_dir=tmp_path)
    np.testing.assert_array_equal(first, second)


def test_extract_cache_key_depends_on_corpus(tmp_path):
    extract(ITEMS, "hash", dim=8, seed=0, cache_dir=tmp_path)
    extract(ITEMS[:2], "hash", dim=8, seed=0, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.f32"))) == 2


def test_file_extractor_reports_missing_items(tmp_path):
    path = tmp_path / "vectors.jsonl"
    path.write_bytes(orjson.dumps({"item": "a", "vector": [1.0, 0.0]}) + b"\n")
    with pytest.raises(CorpusError, match="no vector"):
        extract(ITEMS, "file", vector_file=path)


def test_file_extractor_keeps_row_order(tmp_path):
    path = tmp_path / "vectors.jsonl"
    path.write_bytes(b"".join(
        orjson.dumps({"item": m.item_id, "vector": [float(i), 1.0]}) + b"\n"
        for i, m in reversed(list(enumerate(ITEMS)))
    ))
    matrix = extract(ITEMS, "file", vector_file=path)
    np.testing.assert_array_equal(matrix[:, 0], [0.0, 1.0, 2.0])


def test_projector_rejects_wrong_dimension():
    proj = TextProjector(8, 4)
    assert proj(torch.zeros(3, 8)).shape == (3, 4)
    with pytest.raises(ValueError, match="projector input"):
        proj(torch.zeros(3, 6))


def test_projector_does_not_backpropagate_into_embeddings():
    e = torch.randn(2, 8, requires_grad=True)
    TextProjector(8, 4)(e).sum().backward()
    assert e.grad is None


def test_project_applies_the_projector():
    torch.manual_seed(0)
    proj = TextProjector(8, 4)
    e = torch.randn(5, 8)
    torch.testing.assert_close(project(e, proj), proj(e))


def test_zero_weights_give_the_output_bias():
    proj = TextProjector(5, 3)
    with torch.no_grad():
        proj.fc1.weight.zero_()
        proj.fc2.weight.zero_()
        proj.fc2.bias.copy_(torch.tensor([1.0, -2.0, 0.5]))
    out = proj(torch.randn(4, 5))
    torch.testing.assert_close(out, torch.tensor([[1.0, -2.0, 0.5]]).expand(4, 3))


def test_identity_layers_without_activation_pass_input_through():
    proj = TextProjector(4, 4, activation=False)
    with torch.no_grad():
        for fc in (proj.fc1, proj.fc2):
            fc.weight.copy_(torch.eye(4))
            fc.bias.zero_()
    e = torch.randn(3, 4)
    torch.testing.assert_close(proj(e), e)


def test_projector_gradient_matches_finite_differences():
    torch.manual_seed(0)
    proj = TextProjector(6, 4).double()
    e = torch.randn(5, 6, dtype=torch.float64)
    target = torch.randn(5, 4, dtype=torch.float64)

    def loss():
        return ((proj(e) - target) ** 2).sum()

    loss().backward()
    w = proj.fc1.weight
    analytic = w.grad.clone()
    eps = 1e-6
    numeric = torch.zeros_like(w)
    with torch.no_grad():
        for idx in np.ndindex(*w.shape):
            original = w[idx].item()
            w[idx] = original + eps
            up = loss().item()
            w[idx] = original - eps
            down = loss().item()
            w[idx] = original
            numeric[idx] = (up - down) / (2 * eps)
    torch.testing.assert_close(numeric, analytic, rtol=1e-4, atol=1e-8)
