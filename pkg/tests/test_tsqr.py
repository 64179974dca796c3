import numpy as np
import pytest

from chebspectral.chebdav import block_orthonormalize, qr_posdiag
from chebspectral.dist_spmm import distribute_dense
from chebspectral.procgrid import GridTopology, run_spmd
from chebspectral.tsqr import (distribute_rows_1d, ortho_block_against,
                               tree_base, tsqr_factor, tsqr_form_q)


def run_tsqr(x, p, branching=None, **kw):
    """Factor x over p ranks; returns (R copies, local Qs in rank order)."""
    def fn(ctx):
        dv = distribute_rows_1d(x, p, ctx.rank)
        tree = tsqr_factor(dv, ctx, branching=branching)
        q = tsqr_form_q(tree)
        return tree.r, q.local

    run = run_spmd(p, fn, **kw)
    rs = [r for r, _ in run.results]
    q = np.vstack([ql for _, ql in run.results])
    return rs, q, run


# ---------------------------------------------------------------- tree shapes

def test_tree_base_binary_default():
    assert tree_base(16) == (2, 4)
    assert tree_base(16, 4) == (4, 2)
    assert tree_base(9) == (3, 2)
    assert tree_base(1) == (2, 0)


def test_tree_base_rejects_imperfect_branching():
    with pytest.raises(ValueError):
        tree_base(9, 2)
    # without an explicit branching any p at least gets the flat tree
    assert tree_base(12) == (12, 1)


# ---------------------------------------------------------------- factorization

def test_p1_is_ordinary_qr():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((12, 4))
    rs, q, _ = run_tsqr(x, 1)
    assert np.abs(q.T @ q - np.eye(4)).max() <= 1e-13
    q_ref, r_ref = qr_posdiag(x)
    assert np.array_equal(rs[0], r_ref)
    assert np.array_equal(q, q_ref)


def test_p4_matches_explicit_two_level_structure():
    # hand-built two-level binary reference: leaf QRs, pairwise stacks,
    # final stack; the tree must reproduce it exactly
    rng = np.random.default_rng(1)
    n = 3
    blocks = [rng.standard_normal((5, n)) for _ in range(4)]
    x = np.vstack(blocks)

    leaf = [qr_posdiag(b)[1] for b in blocks]
    _, r01 = qr_posdiag(np.vstack([leaf[0], leaf[1]]))
    _, r23 = qr_posdiag(np.vstack([leaf[2], leaf[3]]))
    _, r0123 = qr_posdiag(np.vstack([r01, r23]))

    def fn(ctx):
        dv = distribute_rows_1d(x, 4, ctx.rank)
        tree = tsqr_factor(dv, ctx)
        assert len(tree.levels) == 2
        for qk, slot in tree.levels:
            assert qk.shape == (2 * n, n)
            assert slot in (0, 1)
        return tree.r

    run = run_spmd(4, fn)
    for r in run.results:
        assert np.array_equal(r, r0123)
    q_ref, r_ref = qr_posdiag(x)
    assert np.abs(r0123 - r_ref).max() <= 1e-12 * max(1.0, np.abs(r_ref).max())


def test_p8_reconstruction():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((64, 6))
    rs, q, _ = run_tsqr(x, 8)
    r = rs[0]
    assert np.linalg.norm(x - q @ r) <= 1e-12 * np.linalg.norm(x)
    assert np.abs(q.T @ q - np.eye(6)).max() <= 1e-12
    for other in rs[1:]:
        assert np.array_equal(other, r)  # replicated


@pytest.mark.parametrize("p,n,rows", [(4, 8, 40), (9, 5, 45), (16, 3, 64)])
def test_r_matches_reference_qr(p, n, rows):
    rng = np.random.default_rng(p * 100 + n)
    x = rng.standard_normal((rows, n))
    rs, _, _ = run_tsqr(x, p)
    _, r_ref = qr_posdiag(x)
    assert np.diag(rs[0]).min() >= 0.0
    assert np.abs(rs[0] - r_ref).max() <= 1e-12 * max(1.0, np.abs(r_ref).max())


def test_leaf_padding_small_rows():
    # 8 rows over 4 ranks with 6 columns: 2-row leaves get zero-padded
    rng = np.random.default_rng(3)
    x = rng.standard_normal((8, 6))
    rs, q, _ = run_tsqr(x, 4)
    _, r_ref = qr_posdiag(x)
    assert np.allclose(rs[0], r_ref, atol=1e-12)
    assert np.linalg.norm(x - q @ rs[0]) <= 1e-12 * np.linalg.norm(x)
    assert q.shape == (8, 6)


def test_collective_count_equals_tree_height():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((64, 4))
    for p, height in [(1, 0), (4, 2), (9, 2), (16, 4)]:
        _, _, run = run_tsqr(x, p)
        for c in run.counters:
            calls = c.by_collective.get("allgather", [0, 0, 0])[0]
            assert calls == height


def test_form_q_charges_no_communication():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((32, 4))

    def fn(ctx):
        dv = distribute_rows_1d(x, 4, ctx.rank)
        tree = tsqr_factor(dv, ctx)
        before = (ctx.counters.messages, ctx.counters.words)
        tsqr_form_q(tree)
        after = (ctx.counters.messages, ctx.counters.words)
        return before == after

    run = run_spmd(4, fn)
    assert all(run.results)


def test_sign_fault_injection_breaks_convention():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((24, 4))
    x[:, 0] *= -1.0  # make a negative leading diagonal likely in raw QR

    def fn(ctx):
        dv = distribute_rows_1d(x, 4, ctx.rank)
        return tsqr_factor(dv, ctx, _skip_sign_fix=True).r

    run = run_spmd(4, fn)
    _, r_ref = qr_posdiag(x)
    raw = run.results[0]
    assert not np.allclose(raw, r_ref, atol=1e-10)  # convention violated
    assert np.allclose(np.abs(raw), np.abs(r_ref), atol=1e-10)  # only signs


# ---------------------------------------------------------------- ortho

def test_ortho_empty_locked_is_pure_tsqr():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((40, 4))

    def fn(ctx):
        dv = distribute_rows_1d(x, 4, ctx.rank)
        return ortho_block_against(dv, None, ctx).local

    run = run_spmd(4, fn)
    q = np.vstack(run.results)
    assert np.abs(q.T @ q - np.eye(4)).max() <= 1e-12


def test_ortho_replacement_policy():
    rng = np.random.default_rng(8)
    locked_full, _ = qr_posdiag(rng.standard_normal((36, 4)))
    inside = locked_full @ rng.standard_normal((4, 2))  # in the locked span

    def fn(ctx):
        g = ctx.grid
        locked = distribute_dense(locked_full, g, "v", ctx.rank)
        dv = distribute_dense(inside, g, "v", ctx.rank)
        out = ortho_block_against(dv, locked, ctx,
                                  rng=np.random.Generator(np.random.Philox(3)))
        return out.local

    run = run_spmd(4, fn)
    q = np.vstack(run.results)
    assert np.abs(locked_full.T @ q).max() <= 1e-10
    assert np.abs(q.T @ q - np.eye(2)).max() <= 1e-10


def test_ortho_gram_p9():
    rng = np.random.default_rng(9)
    locked_full, _ = qr_posdiag(rng.standard_normal((90, 8)))
    fresh = rng.standard_normal((90, 4))

    def fn(ctx):
        g = ctx.grid
        locked = distribute_dense(locked_full, g, "v", ctx.rank)
        dv = distribute_dense(fresh, g, "v", ctx.rank)
        return ortho_block_against(dv, locked, ctx).local

    run = run_spmd(9, fn)
    q = np.vstack([run.results[r] for r in range(9)])
    combined = np.column_stack([locked_full, q])
    assert np.abs(combined.T @ combined - np.eye(12)).max() <= 1e-11


def test_ortho_p1_bitwise_matches_serial_twin():
    rng = np.random.default_rng(10)
    locked_full, _ = qr_posdiag(rng.standard_normal((25, 5)))
    fresh = rng.standard_normal((25, 3))
    serial = block_orthonormalize(fresh, locked_full,
                                  rng=np.random.Generator(np.random.Philox(4)))

    def fn(ctx):
        locked = distribute_dense(locked_full, ctx.grid, "v", ctx.rank)
        dv = distribute_dense(fresh, ctx.grid, "v", ctx.rank)
        return ortho_block_against(dv, locked, ctx,
                                   rng=np.random.Generator(np.random.Philox(4))).local

    run = run_spmd(1, fn)
    assert np.array_equal(run.results[0], serial)
