"""Competition mechanics: preparation, QCL, RRE, RCA.

Derived expectations are frozen from independent straight-line oracles
defined in this file (exhaustive scans, per-element reimplementations,
scalar arithmetic).
"""
import numpy as np
import pytest

from queryseg.competition import (
    CompetitionConfig,
    competition_score,
    leader_laggard_lists,
    pairwise_mask_iou,
    pairwise_rank,
    prepare_state,
    qcl_update,
    quantize_state,
    rank_attention_weights,
    rank_normalize,
    relationship_bias,
    relative_state,
    strongest_competitor,
)
from queryseg.tensor import Tensor, grad_check, softmax_axis


# ----------------------------------------------------------------------
# preparation


def test_score_direct_arithmetic():
    k = competition_score(np.array([[0.2, 0.8]]), np.array([0.5]))
    assert k[0] == pytest.approx(0.4)


def test_score_zero_iou():
    assert competition_score(np.array([[0.9, 0.1]]), np.array([0.0]))[0] == 0.0


def test_score_uniform():
    k = competition_score(np.full((1, 4), 0.25), np.array([1.0]))
    assert k[0] == pytest.approx(0.25)


def test_rank_tie_is_leading():
    c_score, c_rank = pairwise_rank(np.array([0.4, 0.4]))
    assert np.all(c_rank == 1)
    assert np.all(c_score == 0.0)


def test_rank_ordered_pair():
    _, c_rank = pairwise_rank(np.array([0.9, 0.1]))
    assert c_rank[0, 1] == 1 and c_rank[1, 0] == -1


def test_rank_diagonal_always_leading():
    rng = np.random.default_rng(3)
    for _ in range(20):
        _, c_rank = pairwise_rank(rng.normal(size=6))
        assert np.all(np.diag(c_rank) == 1)


def test_rank_antisymmetric_scores():
    rng = np.random.default_rng(4)
    c_score, _ = pairwise_rank(rng.normal(size=9))
    assert np.allclose(c_score, -c_score.T)


def test_mask_iou_identical_rows():
    logits = np.array([[2.0, -2.0, 2.0], [2.0, -2.0, 2.0]])
    iou = pairwise_mask_iou(logits)
    assert np.all(iou == 1.0)


def test_mask_iou_disjoint():
    logits = np.array([[5.0, -5.0], [-5.0, 5.0]])
    iou = pairwise_mask_iou(logits)
    assert iou[0, 1] == 0.0 and iou[1, 0] == 0.0


def test_mask_iou_half_overlap():
    # masks {0,1,2} and {1,2,3}: intersection 2, union 4
    logits = np.array([[1.0, 1.0, 1.0, -1.0], [-1.0, 1.0, 1.0, 1.0]])
    assert pairwise_mask_iou(logits)[0, 1] == pytest.approx(0.5)


def test_mask_iou_both_empty():
    logits = np.full((2, 3), -4.0)
    iou = pairwise_mask_iou(logits)
    assert iou[0, 1] == 0.0
    assert iou[0, 0] == 1.0 and iou[1, 1] == 1.0


def test_mask_iou_symmetry_unit_diagonal():
    rng = np.random.default_rng(5)
    iou = pairwise_mask_iou(rng.normal(size=(6, 20)))
    assert np.allclose(iou, iou.T)
    assert np.all(np.diag(iou) == 1.0)


# ----------------------------------------------------------------------
# strongest competitor / leader-laggard


def _brute_force_competitor(c_iou):
    out = []
    for i in range(c_iou.shape[0]):
        best_j, best = -1, -np.inf
        for j in range(c_iou.shape[0]):
            if j == i:
                continue
            if c_iou[i, j] > best:
                best, best_j = c_iou[i, j], j
        out.append(best_j)
    return np.array(out)


def test_competitor_by_inspection():
    c_iou = np.array([[1.0, 0.3, 0.7], [0.3, 1.0, 0.1], [0.7, 0.1, 1.0]])
    assert np.array_equal(strongest_competitor(c_iou), [2, 0, 0])


def test_competitor_tie_rule():
    n = 5
    c_iou = np.eye(n)
    expected = [1] + [0] * (n - 1)  # all off-diagonal tied at 0 -> lowest j != i
    assert np.array_equal(strongest_competitor(c_iou), expected)


def test_competitor_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        half = rng.uniform(0, 1, size=(n, n))
        c_iou = (half + half.T) / 2
        np.fill_diagonal(c_iou, 1.0)
        assert np.array_equal(strongest_competitor(c_iou), _brute_force_competitor(c_iou))


def _brute_force_leader_laggard(b, c_rank):
    n = len(b)
    c_cq, lead, lag = [], [], []
    for i in range(n):
        rank = c_rank[i][b[i]]
        c_cq.append(rank)
        if rank > 0:
            lead.append(i)
            lag.append(b[i])
        else:
            lead.append(b[i])
            lag.append(i)
    return np.array(c_cq), np.array(lead), np.array(lag)


def test_leader_laggard_hand_trace():
    # two queries, the first clearly stronger, mutual competitors
    _, c_rank = pairwise_rank(np.array([0.9, 0.1]))
    b = np.array([1, 0])
    c_cq, lead, lag = leader_laggard_lists(b, c_rank)
    assert np.array_equal(lead, [0, 0])
    assert np.array_equal(lag, [1, 1])
    assert np.array_equal(c_cq, [1, -1])


def test_leader_laggard_all_tied():
    n = 4
    _, c_rank = pairwise_rank(np.full(n, 0.5))
    b = np.array([1, 0, 0, 0])
    _, lead, lag = leader_laggard_lists(b, c_rank)
    assert np.array_equal(lead, np.arange(n))
    assert np.array_equal(lag, b)


def test_leader_laggard_matches_element_oracle():
    rng = np.random.default_rng(13)
    for _ in range(500):
        n = int(rng.integers(2, 16))
        k = rng.uniform(0, 1, size=n)
        _, c_rank = pairwise_rank(k)
        half = rng.uniform(0, 1, size=(n, n))
        c_iou = (half + half.T) / 2
        np.fill_diagonal(c_iou, 1.0)
        b = strongest_competitor(c_iou)
        got = leader_laggard_lists(b, c_rank)
        want = _brute_force_leader_laggard(b, c_rank)
        for g, w in zip(got, want):
            assert np.array_equal(g, w)


def test_leader_laggard_role_set_property():
    rng = np.random.default_rng(17)
    for _ in range(100):
        n = int(rng.integers(2, 10))
        k = rng.uniform(0, 1, size=n)
        _, c_rank = pairwise_rank(k)
        b = rng.integers(0, n, size=n)
        b = np.where(b == np.arange(n), (b + 1) % n, b)
        _, lead, lag = leader_laggard_lists(b, c_rank)
        for i in range(n):
            assert {int(lead[i]), int(lag[i])} == {i, int(b[i])}
            assert (lead[i] == i) == (k[i] >= k[b[i]])


# ----------------------------------------------------------------------
# QCL update


def _qcl_fixture(rng, n=4, dm=6):
    q = Tensor(rng.uniform(0.2, 1.0, size=(n, dm)), requires_grad=True)
    e_le = Tensor(rng.normal(size=(n, dm)), requires_grad=True)
    e_la = Tensor(rng.normal(size=(n, dm)), requires_grad=True)
    fuse = tuple(
        Tensor(v, requires_grad=True)
        for v in (rng.normal(scale=0.3, size=(2 * dm, 2 * dm)), np.zeros(2 * dm),
                  rng.normal(scale=0.3, size=(dm, 2 * dm)), np.zeros(dm))
    )
    update = tuple(
        Tensor(v, requires_grad=True)
        for v in (rng.normal(scale=0.3, size=(2 * dm, 2 * dm)), np.zeros(2 * dm),
                  rng.normal(scale=0.3, size=(dm, 2 * dm)), np.zeros(dm))
    )
    return q, e_le, e_la, fuse, update


def test_qcl_zero_mlps_give_zero():
    rng = np.random.default_rng(19)
    q, e_le, e_la, _, _ = _qcl_fixture(rng)
    zeros2 = (Tensor(np.zeros((12, 12))), Tensor(np.zeros(12)),
              Tensor(np.zeros((6, 12))), Tensor(np.zeros(6)))
    out = qcl_update(q, e_le, e_la, zeros2, zeros2, np.arange(4), np.arange(4))
    assert np.all(out.data == 0.0)


def test_qcl_identity_wiring():
    # second MLP wired to pass the (positive) queries straight through
    rng = np.random.default_rng(23)
    n, dm = 4, 6
    q, e_le, e_la, fuse, _ = _qcl_fixture(rng, n, dm)
    ident = np.eye(2 * dm)
    select_first = np.concatenate([np.eye(dm), np.zeros((dm, dm))], axis=1)
    update = (Tensor(ident), Tensor(np.zeros(2 * dm)),
              Tensor(select_first), Tensor(np.zeros(dm)))
    out = qcl_update(q, e_le, e_la, fuse, update, np.arange(n), np.arange(n))
    np.testing.assert_allclose(out.data, q.data, atol=1e-12)


def test_qcl_gradients_and_gather_sparsity():
    rng = np.random.default_rng(29)
    q, e_le, e_la, fuse, update = _qcl_fixture(rng)
    i_leader = np.array([0, 0, 3, 3])
    i_laggard = np.array([1, 1, 1, 2])
    w = Tensor(rng.normal(size=(4, 6)))

    def f():
        return (qcl_update(q, e_le, e_la, fuse, update, i_leader, i_laggard) * w).sum()

    params = [q, e_le, e_la, *fuse, *update]
    assert grad_check(f, params, eps=1e-6) <= 1e-4
    for p in params:
        p.zero_grad()
    f().backward()
    assert np.all(e_le.grad[[1, 2]] == 0.0)   # rows never gathered as leader
    assert np.all(e_le.grad[[0, 3]] != 0.0)
    assert np.all(e_la.grad[[0, 3]] == 0.0)   # rows never gathered as laggard


# ----------------------------------------------------------------------
# relative state and quantization


def test_relative_state_values():
    assert relative_state(np.array([[1]]), np.array([[0.7]]))[0, 0] == pytest.approx(0.7)
    assert relative_state(np.array([[-1]]), np.array([[1.0]]))[0, 0] == pytest.approx(-1.0)
    assert relative_state(np.array([[-1]]), np.array([[0.0]]))[0, 0] == 0.0


def test_quantize_reference_points():
    assert quantize_state(np.array(0.0), 0.1, 24) == 12
    assert quantize_state(np.array(-1.0), 0.1, 24) == 2
    assert quantize_state(np.array(1.0), 0.1, 24) == 22


def test_quantize_sweep_stays_in_table():
    sweep = np.linspace(-1.0, 1.0, 10001)
    idx = quantize_state(sweep, 0.1, 24)
    assert idx.min() == 2 and idx.max() == 22
    assert np.all((idx >= 0) & (idx < 24))


def test_quantize_random_property():
    rng = np.random.default_rng(31)
    for _ in range(200):
        v = rng.uniform(0.01, 0.5)
        y = int(rng.integers(1, 30)) * 2
        r = rng.uniform(-1, 1, size=(5, 5))
        idx = quantize_state(r, v, y)
        assert np.all((idx >= 0) & (idx < y))


# ----------------------------------------------------------------------
# relationship bias


def test_bias_zero_table():
    table = Tensor(np.zeros((8, 3)))
    vq = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    vk = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
    out = relationship_bias(table, np.zeros((2, 2), dtype=int), vq, vk)
    assert np.all(out.data == 0.0)


def test_bias_scalar_arithmetic():
    # d=1: bias = w*vq + w*vk = 2*0.5 + 2*1.5 = 4
    table = Tensor(np.array([[2.0]]))
    vq = Tensor(np.array([[0.5]]))
    vk = Tensor(np.array([[1.5]]))
    out = relationship_bias(table, np.zeros((1, 1), dtype=int), vq, vk)
    assert out.data[0, 0] == pytest.approx(4.0)


def test_bias_out_of_range_index():
    table = Tensor(np.zeros((4, 2)))
    v = Tensor(np.zeros((2, 2)))
    with pytest.raises(IndexError):
        relationship_bias(table, np.full((2, 2), 4), v, v)


def test_bias_gradients_touch_only_used_rows():
    rng = np.random.default_rng(37)
    table = Tensor(rng.normal(size=(10, 3)), requires_grad=True)
    vq = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    vk = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    r_hat = np.array([[2, 5, 5], [2, 2, 7], [5, 7, 2]])
    w = Tensor(rng.normal(size=(3, 3)))

    def f():
        return (relationship_bias(table, r_hat, vq, vk) * w).sum()

    assert grad_check(f, [table, vq, vk], eps=1e-6) <= 1e-4
    for p in (table, vq, vk):
        p.zero_grad()
    f().backward()
    used = sorted(set(r_hat.ravel().tolist()))
    unused = [r for r in range(10) if r not in used]
    assert np.all(table.grad[unused] == 0.0)
    assert np.all(np.any(table.grad[used] != 0.0, axis=1))


# ----------------------------------------------------------------------
# rank cross attention


def test_rank_attention_worked_example():
    # hand trace: Q=[[1],[3]], F=[[2],[-1]] with unit head dim and no scaling
    q = np.array([[1.0], [3.0]])
    f = np.array([[2.0], [-1.0]])
    x = Tensor(q @ f.T)
    assert np.array_equal(x.data, [[2.0, -1.0], [6.0, -3.0]])
    norm = rank_normalize(x)
    np.testing.assert_allclose(norm.data, [[0.0, 1.0], [1.0, 0.0]], atol=1e-12)
    z = rank_attention_weights(x)
    np.testing.assert_allclose(z.data, [[0.7311, 0.2689], [0.9975, 0.0025]], atol=1e-4)


def test_rank_attention_single_query_is_plain_softmax():
    rng = np.random.default_rng(41)
    x = Tensor(rng.normal(size=(1, 7)))
    assert np.array_equal(rank_attention_weights(x).data, softmax_axis(x, axis=1).data)


def test_rank_attention_constant_column():
    x = Tensor(np.array([[2.0, 1.0], [2.0, 3.0]]))
    norm = rank_normalize(x)
    assert norm.data[0, 0] == 1.0 and norm.data[1, 0] == 1.0


def test_rank_attention_invariants():
    rng = np.random.default_rng(43)
    for _ in range(100):
        n = int(rng.integers(2, 8))
        m = int(rng.integers(2, 10))
        x = Tensor(rng.normal(size=(n, m)))
        norm = rank_normalize(x)
        z = rank_attention_weights(x)
        spread = x.data.max(axis=0) - x.data.min(axis=0)
        for col in range(m):
            if spread[col] <= 0:
                continue
            assert norm.data[:, col].max() == 1.0
            assert norm.data[:, col].min() == 0.0
            assert norm.data[:, col].argmax() == x.data[:, col].argmax()
            top = x.data[:, col].argmax()
            assert (x.data * norm.data)[top, col] == pytest.approx(x.data[top, col])
        assert np.all(np.abs(z.data.sum(axis=1) - 1.0) < 1e-9)


def test_rank_attention_differentiable():
    rng = np.random.default_rng(47)
    x = Tensor(rng.permutation(np.linspace(-2, 2, 12)).reshape(3, 4), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda: (rank_attention_weights(x) * w).sum(), [x], eps=1e-6) <= 1e-4


# ----------------------------------------------------------------------
# assembled state


def test_prepare_state_invariants_hold():
    rng = np.random.default_rng(53)
    cfg = CompetitionConfig()
    for _ in range(25):
        n, m, c = 6, 15, 4
        logits_cls = rng.normal(size=(n, c + 1))
        p = np.exp(logits_cls) / np.exp(logits_cls).sum(axis=1, keepdims=True)
        s = rng.uniform(0, 1, size=n)
        masks = rng.normal(size=(n, m))
        state = prepare_state(p, s, masks, 0.5, cfg, num_object_classes=c)
        state.validate()
        assert np.all((state.r_hat >= 0) & (state.r_hat < cfg.table_len))
        assert np.all((state.r_state >= -1.0) & (state.r_state <= 1.0))


def test_prepare_state_score_ignores_no_object_column():
    cfg = CompetitionConfig()
    p = np.array([[0.1, 0.2, 0.7], [0.3, 0.3, 0.4]])  # last column is no-object
    s = np.array([1.0, 1.0])
    state = prepare_state(p, s, np.zeros((2, 4)), 0.5, cfg, num_object_classes=2)
    np.testing.assert_allclose(state.k, [0.2, 0.3])
