import numpy as np
import pytest

from genplugin.semid import Codebooks, IdTrie, _nearest, _reseed_empty, assign_ids, build_trie, fit_codebooks


def test_codebook_larger_than_catalog_is_rejected():
    with pytest.raises(ValueError, match="exceeds number of items"):
        fit_codebooks(np.eye(3), 2, 4, seed=0)


def test_residual_error_does_not_grow_with_levels():
    x = np.random.default_rng(0).standard_normal((40, 6))
    books = fit_codebooks(x, 3, 4, seed=0, n_init=2)
    assert books.levels == 3 and books.sizes == [4, 4, 4]
    assert books.errors[0] >= books.errors[1] >= books.errors[2] - 1e-9


def test_four_point_example_quantizes_exactly_in_two_levels():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]])
    books = fit_codebooks(x, 2, 2, seed=0)
    first = books.centroids[0][np.argsort(books.centroids[0][:, 0])]
    np.testing.assert_allclose(first, [[0.0, 0.5], [10.0, 0.5]], atol=1e-9)
    second = books.centroids[1][np.argsort(books.centroids[1][:, 1])]
    np.testing.assert_allclose(second, [[0.0, -0.5], [0.0, 0.5]], atol=1e-9)
    assert books.errors == pytest.approx([0.25, 0.0], abs=1e-12)


def test_empty_centroid_is_moved_onto_worst_quantized_point():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [4.0, 0.0], [4.0, 3.0]])
    stranded = np.array([[0.0, 0.5], [4.0, 1.5], [100.0, 100.0]])
    c = _reseed_empty(x, stranded, 3, level=0)
    owners = np.bincount(_nearest(x, c), minlength=3)
    assert (owners > 0).all()
    # the points of the wider cluster are the worst quantized
    assert c[2].tolist() in ([4.0, 0.0], [4.0, 3.0])


def test_too_few_distinct_residuals_leave_codes_unused(caplog):
    x = np.array([[0.0, 0.0], [0.0, 0.0], [3.0, 3.0], [3.0, 3.0]])
    books = fit_codebooks(x, 1, 3, seed=0, n_init=1)
    assert books.sizes == [3]
    assert books.errors[0] == pytest.approx(0.0, abs=1e-12)
    assert "codes unused" in caplog.text


def test_codebooks_save_and_load(tmp_path):
    books = fit_codebooks(np.random.default_rng(1).standard_normal((10, 3)), 2, 3, seed=0, n_init=1)
    books.save(tmp_path / "cb")
    again = Codebooks.load(tmp_path / "cb")
    assert again.errors == books.errors
    for a, b in zip(books.centroids, again.centroids):
        np.testing.assert_array_equal(a, b)


def test_ids_are_unique_and_trie_covers_catalog(tiny_ids):
    _, sids = tiny_ids
    tuples = {tuple(row) for row in sids.codes.tolist()}
    assert len(tuples) == sids.n_items
    assert len(sids.trie) == sids.n_items
    for item, row in enumerate(sids.codes.tolist()):
        assert sids.trie.lookup(row) == item
    assert sorted(item for _, item in sids.trie) == list(range(sids.n_items))


def test_identical_embeddings_get_disambiguation_token():
    x = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [5.0, 5.0]])
    books = fit_codebooks(x, 1, 2, seed=0, n_init=1)
    sids = assign_ids(books, x)
    assert sids.disambiguated
    assert sids.levels == 2 and sids.vocab_sizes == [2, 3]
    # counter follows ascending item index inside the colliding group
    assert sids.codes[:3, 1].tolist() == [0, 1, 2]
    assert sids.codes[3, 1] == 0


def test_collision_free_assignment_has_no_extra_level():
    x = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    sids = assign_ids(fit_codebooks(x, 1, 3, seed=0, n_init=1), x)
    assert not sids.disambiguated and sids.levels == 1


def test_trie_allowed_tokens_and_lookup():
    trie = build_trie(np.array([[0, 2], [0, 1], [3, 0]]))
    assert trie.allowed([]) == [0, 3]
    assert trie.allowed([0]) == [1, 2]
    assert trie.allowed([1]) == []
    assert trie.allowed([0, 1]) == []
    assert trie.lookup([0, 1]) == 1
    assert trie.lookup([0]) is None
    assert (3, 0) in trie and (3, 1) not in trie


def test_trie_rejects_duplicate_tuples():
    trie = IdTrie()
    trie.insert([1, 2], 0)
    with pytest.raises(ValueError, match="duplicate"):
        trie.insert([1, 2], 1)


def test_manifest_round_trip(tiny_split, tiny_ids):
    _, sids = tiny_ids
    again = type(sids).from_manifest(sids.manifest(tiny_split.item_ids), tiny_split.item_ids)
    np.testing.assert_array_equal(again.codes, sids.codes)
    assert again.vocab_sizes == sids.vocab_sizes
