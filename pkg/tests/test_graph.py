import numpy as np
import pytest

from chebspectral.graph import (CsrMatrix, EdgeList, GraphFormatError, csr_equal,
                                gen_sbm, is_symmetric, load_edge_list,
                                load_imbalance, normalized_laplacian,
                                save_edge_list, spmm_serial, tile_ranges)


def n_components(g: EdgeList) -> int:
    """Union-find oracle for the connected-component count."""
    parent = list(range(g.n_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in g.edges:
        ru, rv = find(int(u)), find(int(v))
        if ru != rv:
            parent[ru] = rv
    return len({find(i) for i in range(g.n_nodes)})


# ---------------------------------------------------------------- loading

def test_tsv_direct_parse(tmp_path):
    p = tmp_path / "g.tsv"
    p.write_text("0 1\n1 2\n")
    g = load_edge_list(p, "tsv")
    assert g.n_nodes == 3
    assert np.array_equal(g.edges, [[0, 1], [1, 2]])


def test_tsv_canonicalization_dedupes(tmp_path):
    p = tmp_path / "g.tsv"
    p.write_text("2 1\n1\t2\n")
    g = load_edge_list(p, "tsv")
    assert np.array_equal(g.edges, [[1, 2]])


def test_tsv_header_comments_isolated(tmp_path):
    p = tmp_path / "g.tsv"
    p.write_text("# comment\n%N 4\n0 1\n")
    g = load_edge_list(p, "tsv")
    assert g.n_nodes == 4
    assert g.degrees().tolist() == [1, 1, 0, 0]


@pytest.mark.parametrize("content,fragment", [
    ("0 0\n", "self-loop"),
    ("%N 2\n0 5\n", "out of range"),
    ("0 x\n", "non-integer"),
    ("0 1 2\n", "two indices"),
    ("0 -1\n", "negative"),
])
def test_tsv_errors_carry_line_numbers(tmp_path, content, fragment):
    p = tmp_path / "bad.tsv"
    p.write_text(content)
    with pytest.raises(GraphFormatError) as err:
        load_edge_list(p, "tsv")
    assert fragment in str(err.value)
    assert "line" in str(err.value)


def test_matrix_market_pattern_matches_tsv(tmp_path):
    tsv = tmp_path / "g.tsv"
    tsv.write_text("0 1\n1 2\n")
    mm = tmp_path / "g.mtx"
    mm.write_text("%%MatrixMarket matrix coordinate pattern symmetric\n"
                  "% a comment\n3 3 2\n2 1\n3 2\n")
    a = normalized_laplacian(load_edge_list(tsv, "tsv"))
    b = normalized_laplacian(load_edge_list(mm, "mm"))
    assert csr_equal(a, b)  # bit-exact across formats


def test_matrix_market_real_symmetric(tmp_path):
    mm = tmp_path / "g.mtx"
    mm.write_text("%%MatrixMarket matrix coordinate real symmetric\n"
                  "3 3 3\n2 1 1.0\n3 2 0.5\n3 1 0.0\n")
    g = load_edge_list(mm, "mm")
    assert np.array_equal(g.edges, [[0, 1], [1, 2]])  # explicit zero dropped


def test_matrix_market_rejects_general(tmp_path):
    mm = tmp_path / "g.mtx"
    mm.write_text("%%MatrixMarket matrix coordinate pattern general\n1 1 0\n")
    with pytest.raises(GraphFormatError):
        load_edge_list(mm, "mm")


def test_save_load_roundtrip(tmp_path):
    g, _ = gen_sbm(30, 3, 0.4, 0.1, seed=9)
    for fmt, name in [("tsv", "g.tsv"), ("mm", "g.mtx")]:
        path = tmp_path / name
        save_edge_list(g, path, fmt)
        back = load_edge_list(path, fmt)
        assert back.n_nodes == g.n_nodes
        assert np.array_equal(back.edges, g.edges)


# ---------------------------------------------------------------- laplacian

def test_laplacian_path_graph():
    g = EdgeList.from_pairs(2, [(0, 1)])
    assert np.array_equal(normalized_laplacian(g).to_dense(),
                          [[1.0, -1.0], [-1.0, 1.0]])


def test_laplacian_k3_values_and_spectrum():
    g = EdgeList.from_pairs(3, [(0, 1), (0, 2), (1, 2)])
    dense = normalized_laplacian(g).to_dense()
    expect = np.full((3, 3), -0.5)
    np.fill_diagonal(expect, 1.0)
    assert np.array_equal(dense, expect)
    w = np.linalg.eigvalsh(dense)
    assert np.allclose(w, [0.0, 1.5, 1.5], atol=1e-14)


def test_laplacian_isolated_node_identity_row():
    g = EdgeList.from_pairs(3, [(0, 1)])
    dense = normalized_laplacian(g).to_dense()
    assert np.array_equal(dense[2], [0.0, 0.0, 1.0])
    assert np.array_equal(dense[:, 2], [0.0, 0.0, 1.0])


@pytest.mark.parametrize("seed", range(10))
def test_laplacian_spectrum_bounds_and_zero_multiplicity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 120))
    g, _ = gen_sbm(n, int(rng.integers(1, 4)), 0.5, 0.08, seed=seed + 100)
    lap = normalized_laplacian(g)
    assert is_symmetric(lap)
    w = np.linalg.eigvalsh(lap.to_dense())
    assert w.min() >= -1e-10 and w.max() <= 2.0 + 1e-10
    # 0-eigenvalue multiplicity equals component count, counting isolated
    # nodes as their own (identity-row) components contributes eigenvalue 1,
    # so only non-singleton components produce zeros.
    iso = int((g.degrees() == 0).sum())
    zeros = int((np.abs(w) < 1e-10).sum())
    assert zeros == n_components(g) - iso


# ---------------------------------------------------------------- spmm

def test_spmm_identity():
    a = CsrMatrix.identity(5)
    v = np.arange(15.0).reshape(5, 3)
    assert np.array_equal(spmm_serial(a, v), v)


def test_spmm_laplacian_annihilates_constant():
    g = EdgeList.from_pairs(2, [(0, 1)])
    lap = normalized_laplacian(g)
    assert np.array_equal(spmm_serial(lap, np.ones((2, 1))), np.zeros((2, 1)))


def test_spmm_matches_dense_oracle():
    rng = np.random.default_rng(11)
    d = rng.random((8, 8))
    d[d > 0.5] = 0.0
    a = CsrMatrix.from_dense(d)
    v = rng.standard_normal((8, 3))
    ref = d @ v
    assert np.linalg.norm(spmm_serial(a, v) - ref) <= 1e-13 * max(np.linalg.norm(ref), 1)


def test_spmm_dimension_mismatch():
    with pytest.raises(ValueError):
        spmm_serial(CsrMatrix.identity(4), np.ones((5, 2)))


# ---------------------------------------------------------------- gen_sbm

def test_sbm_disjoint_cliques():
    g, truth = gen_sbm(12, 3, 1.0, 0.0, seed=0)
    assert truth.labels.tolist() == [i % 3 for i in range(12)]
    for u, v in g.edges:
        assert u % 3 == v % 3
    assert g.n_edges == 3 * (4 * 3 // 2)  # three 4-cliques


def test_sbm_deterministic():
    g1, _ = gen_sbm(100, 4, 0.3, 0.05, seed=42)
    g2, _ = gen_sbm(100, 4, 0.3, 0.05, seed=42)
    assert np.array_equal(g1.edges, g2.edges)
    g3, _ = gen_sbm(100, 4, 0.3, 0.05, seed=43)
    assert not np.array_equal(g1.edges, g3.edges)


def test_sbm_invalid_probabilities():
    with pytest.raises(ValueError):
        gen_sbm(10, 2, 0.1, 0.5, seed=0)
    with pytest.raises(ValueError):
        gen_sbm(10, 2, 1.5, 0.0, seed=0)


# ---------------------------------------------------------------- load imbalance

def test_imbalance_uniform_diagonal():
    # identity spreads nnz evenly over the diagonal tiles
    a = CsrMatrix.identity(64)
    assert load_imbalance(a, 2) == pytest.approx(2.0)  # 2 of 4 tiles empty
    dense = np.ones((64, 64))
    assert load_imbalance(CsrMatrix.from_dense(dense), 2) == pytest.approx(1.0)


def test_imbalance_single_block_limit():
    # all nnz in the top-left tile of a 2x2 grid
    a = CsrMatrix.from_coo(8, [0, 1, 2], [1, 2, 3], [1.0, 1.0, 1.0])
    assert load_imbalance(a, 2) == pytest.approx(4.0)


def test_imbalance_matches_bruteforce():
    rng = np.random.default_rng(5)
    d = rng.random((100, 100))
    d[d > 0.1] = 0.0
    a = CsrMatrix.from_dense(d)
    q = 3
    ranges = tile_ranges(100, q)
    counts = np.zeros((q, q), dtype=int)
    for i, (r0, r1) in enumerate(ranges):
        for j, (c0, c1) in enumerate(ranges):
            counts[i, j] = int((d[r0:r1, c0:c1] != 0).sum())
    expect = q * q * counts.max() / counts.sum()
    assert load_imbalance(a, q) == pytest.approx(expect)


def test_imbalance_empty_matrix():
    with pytest.raises(ValueError):
        load_imbalance(CsrMatrix.from_coo(4, [], [], []), 2)
