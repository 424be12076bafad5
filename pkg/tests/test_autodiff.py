"""Tape, primitive ops, backward rules, and the finite-difference checker."""

import numpy as np
import pytest

from ugn import autodiff as ad
from ugn.autodiff import AutodiffError, ParamStore, Tape, Tensor, gradient_check
from ugn.graph import build_graph, normalize


def rng_for(name: str) -> np.random.Generator:
    return np.random.default_rng(abs(hash(name)) % (2**32))


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_row_softmax_uniform_row():
    out = ad.row_softmax(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.values, [[1 / 3, 1 / 3, 1 / 3]])


def test_row_softmax_matches_brute_force():
    x = rng_for("softmax").standard_normal((4, 6))
    out = ad.row_softmax(Tensor(x)).values
    expected = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out.sum(axis=1), np.ones(4), atol=1e-12)


def test_row_softmax_is_shift_stable():
    x = np.array([[1000.0, 1000.0, 999.0]])
    out = ad.row_softmax(Tensor(x)).values
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out.sum(), 1.0, atol=1e-12)


def test_l2_row_normalize_three_four_five():
    out = ad.l2_row_normalize(Tensor([[3.0, 4.0]]))
    np.testing.assert_allclose(out.values, [[0.6, 0.8]])


def test_l2_row_normalize_rejects_zero_row():
    with pytest.raises(AutodiffError, match="zero-norm row for node 17"):
        ad.l2_row_normalize(Tensor([[1.0, 1.0], [0.0, 0.0]]), row_ids=[4, 17])


def test_softplus_at_zero_is_ln_two():
    out = ad.softplus(Tensor([[0.0]]))
    np.testing.assert_allclose(out.item(), np.log(2.0))


def test_scalar_and_vector_promotion():
    assert Tensor(3.0).shape == (1, 1)
    assert Tensor([1.0, 2.0, 3.0]).shape == (1, 3)


def test_constant_ops_stay_off_tape():
    out = ad.add(Tensor([[1.0]]), Tensor([[2.0]]))
    assert out.tape is None
    assert out.item() == 3.0


# ---------------------------------------------------------------------------
# error reporting
# ---------------------------------------------------------------------------

def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(AutodiffError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(AutodiffError, match=r"\(2, 3\) vs \(3, 2\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_log_rejects_non_positive():
    with pytest.raises(AutodiffError, match="non-positive"):
        ad.log(Tensor([[1.0, 0.0]]))


def test_mixing_two_tapes_is_an_error():
    t1, t2 = Tape(), Tape()
    a = t1.leaf([[1.0]])
    b = t2.leaf([[2.0]])
    with pytest.raises(AutodiffError, match="two different tapes"):
        ad.add(a, b)


def test_backward_rejects_non_scalar_loss():
    tape = Tape()
    x = tape.leaf([[1.0, 2.0]])
    with pytest.raises(AutodiffError, match="1x1"):
        tape.backward(x)


def test_backward_rejects_foreign_loss():
    tape = Tape()
    tape.leaf([[1.0]])
    other = Tape()
    loss = ad.sum_all(other.leaf([[1.0]]))
    with pytest.raises(AutodiffError, match="not recorded on this tape"):
        tape.backward(loss)


# ---------------------------------------------------------------------------
# backward pass basics
# ---------------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    tape = Tape()
    x = tape.leaf(rng_for("sum").standard_normal((3, 4)))
    grads = tape.backward(ad.sum_all(x))
    np.testing.assert_array_equal(grads[x.node_id], np.ones((3, 4)))


def test_backward_of_sum_of_squares():
    tape = Tape()
    x = tape.leaf([[1.0, 2.0]])
    grads = tape.backward(ad.sum_all(ad.multiply(x, x)))
    np.testing.assert_allclose(grads[x.node_id], [[2.0, 4.0]])


def test_unreachable_leaf_has_no_gradient():
    tape = Tape()
    x = tape.leaf([[1.0]])
    y = tape.leaf([[5.0]])
    grads = tape.backward(ad.sum_all(ad.multiply(x, x)))
    assert grads[y.node_id] is None


def test_reused_tensor_accumulates_gradient():
    tape = Tape()
    x = tape.leaf([[3.0]])
    # x*x + x: gradient 2x + 1 = 7
    loss = ad.sum_all(ad.add(ad.multiply(x, x), x))
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x.node_id], [[7.0]])


def test_tape_replay_is_bit_identical():
    def run():
        tape = Tape()
        x = tape.leaf(np.linspace(-1.0, 1.0, 12).reshape(3, 4))
        loss = ad.mean_all(ad.row_softmax(ad.relu(ad.scale(x, 1.7))))
        grads = tape.backward(loss)
        return loss.values.copy(), grads[x.node_id].copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)


# ---------------------------------------------------------------------------
# finite-difference checks, one per primitive
# ---------------------------------------------------------------------------

def fd_case(name, f, inputs, tolerance=1e-6):
    result = gradient_check(f, inputs, step=1e-5, tolerance=tolerance)
    assert result.passed, f"{name}: {result}"


def test_matmul_gradients_match_finite_differences():
    rng = rng_for("matmul")
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 2))
    fd_case("matmul", lambda x, y: ad.sum_all(ad.multiply(ad.matmul(x, y), ad.matmul(x, y))),
            [a, b])


@pytest.mark.parametrize("op", [
    ("add", lambda x, y: ad.sum_all(ad.multiply(ad.add(x, y), ad.add(x, y)))),
    ("subtract", lambda x, y: ad.sum_all(ad.exp(ad.scale(ad.subtract(x, y), 0.3)))),
    ("multiply", lambda x, y: ad.sum_all(ad.multiply(ad.multiply(x, y), x))),
], ids=lambda op: op[0])
def test_binary_op_gradients(op):
    rng = rng_for(op[0])
    fd_case(op[0], op[1], [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))])


@pytest.mark.parametrize("name,build", [
    ("scale", lambda x: ad.sum_all(ad.multiply(ad.scale(x, -2.5), ad.scale(x, -2.5)))),
    ("relu", lambda x: ad.sum_all(ad.multiply(ad.relu(x), ad.relu(x)))),
    ("leaky_relu", lambda x: ad.sum_all(ad.multiply(ad.leaky_relu(x, 0.2), x))),
    ("exp", lambda x: ad.mean_all(ad.exp(ad.scale(x, 0.5)))),
    ("log", lambda x: ad.mean_all(ad.log(ad.add(ad.multiply(x, x), Tensor(np.ones((3, 4))))))),
    ("softplus", lambda x: ad.sum_all(ad.multiply(ad.softplus(x), x))),
    ("row_softmax", lambda x: ad.sum_all(ad.multiply(ad.row_softmax(x), Tensor(W_SOFTMAX)))),
    ("row_sum", lambda x: ad.sum_all(ad.multiply(ad.row_sum(x), ad.row_sum(x)))),
    ("row_mean", lambda x: ad.sum_all(ad.multiply(ad.row_mean(x), ad.row_mean(x)))),
    ("mean_all", lambda x: ad.multiply(ad.mean_all(x), ad.mean_all(x))),
    ("column_slice", lambda x: ad.sum_all(ad.multiply(ad.column_slice(x, 1, 3), ad.column_slice(x, 1, 3)))),
    ("l2_row_normalize", lambda x: ad.sum_all(ad.multiply(ad.l2_row_normalize(x), Tensor(W_SOFTMAX)))),
    ("transpose", lambda x: ad.sum_all(ad.multiply(ad.transpose(x), ad.transpose(x)))),
    ("gather_rows", lambda x: ad.sum_all(ad.multiply(ad.gather_rows(x, [2, 0, 2]), ad.gather_rows(x, [2, 0, 2])))),
    ("reshape", lambda x: ad.sum_all(ad.multiply(ad.reshape(x, 4, 3), ad.reshape(x, 4, 3)))),
    ("tile_rows", lambda x: ad.sum_all(ad.multiply(ad.tile_rows(x, 3), Tensor(np.tile(W_SOFTMAX, (3, 1)))))),
], ids=lambda case: case if isinstance(case, str) else case[0] if isinstance(case, tuple) else None)
def test_unary_op_gradients(name, build):
    rng = rng_for(name)
    x = rng.standard_normal((3, 4)) + 0.05  # nudge away from relu kinks
    fd_case(name, build, [x])


W_SOFTMAX = np.arange(12).reshape(3, 4) * 0.37 + 0.1


def test_concat_gradients():
    rng = rng_for("concat")
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
    fd_case("concat_rows",
            lambda x, y: ad.sum_all(ad.multiply(ad.concat_rows([x, y]), ad.concat_rows([x, y]))),
            [a, b])
    c, d = rng.standard_normal((3, 2)), rng.standard_normal((3, 5))
    fd_case("concat_cols",
            lambda x, y: ad.sum_all(ad.multiply(ad.concat_cols([x, y]), ad.concat_cols([x, y]))),
            [c, d])


def test_broadcast_add_and_multiply_gradients():
    rng = rng_for("broadcast")
    x = rng.standard_normal((4, 3))
    row = rng.standard_normal((1, 3))
    col = rng.standard_normal((4, 1))
    fd_case("add row", lambda a, b: ad.sum_all(ad.multiply(ad.add(a, b), ad.add(a, b))), [x, row])
    fd_case("mul col", lambda a, b: ad.sum_all(ad.multiply(ad.multiply(a, b), a)), [x, col])
    fd_case("outer add", lambda a, b: ad.sum_all(ad.exp(ad.scale(ad.add(a, ad.transpose(b)), 0.2))),
            [col, col.copy()])


def test_clamp_min_gradient_masks_clamped_entries():
    tape = Tape()
    x = tape.leaf([[2.0, -3.0]])
    grads = tape.backward(ad.sum_all(ad.clamp_min(x, 0.5)))
    np.testing.assert_array_equal(grads[x.node_id], [[1.0, 0.0]])


def test_sparse_dense_matmul_gradient():
    graph = build_graph(4, [(0, 1), (1, 2), (2, 3), (0, 3)],
                        rng_for("sp").standard_normal((4, 2)), [0, 0, 1, 1], 2)
    adj = normalize(graph, "symmetric")
    x = rng_for("spx").standard_normal((4, 3))
    fd_case("sparse_dense_matmul",
            lambda h: ad.sum_all(ad.multiply(ad.sparse_dense_matmul(adj, h),
                                             ad.sparse_dense_matmul(adj, h))),
            [x])


def test_gradient_check_catches_a_wrong_backward_rule():
    def bad_square(x):
        # deliberately wrong adjoint: claims d(x^2)/dx = 3x
        return x.tape.record(x.values ** 2, [x], [lambda g: g * 3.0 * x.values])

    def f(x):
        if x.tape is None:  # finite-difference replay path
            return ad.sum_all(ad.multiply(x, x))
        return ad.sum_all(bad_square(x))

    result = gradient_check(f, [np.array([[1.0, 2.0]])], step=1e-5, tolerance=1e-5)
    assert not result.passed
    assert result.max_rel_error > 1e-2


def test_gradient_check_passes_softmax_column_objective():
    rng = rng_for("softmax check")

    def f(x):
        return ad.sum_all(ad.column_slice(ad.row_softmax(x), 0, 1))

    result = gradient_check(f, [rng.standard_normal((3, 4))], step=1e-5, tolerance=1e-5)
    assert result.passed, str(result)


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------

def test_adjoint_linearity():
    rng = rng_for("linearity")
    x0 = rng.standard_normal((3, 3))
    a, b = 1.7, -0.6

    def grad_of(fn):
        tape = Tape()
        x = tape.leaf(x0)
        return tape.backward(fn(x))[x.node_id]

    f = lambda x: ad.sum_all(ad.multiply(x, x))
    g = lambda x: ad.mean_all(ad.exp(ad.scale(x, 0.5)))
    combined = lambda x: ad.add(ad.scale(f(x), a), ad.scale(g(x), b))
    np.testing.assert_allclose(grad_of(combined), a * grad_of(f) + b * grad_of(g), atol=1e-12)


def test_row_softmax_gradient_rows_sum_to_zero_under_constant_upstream():
    rng = rng_for("softmax rows")
    tape = Tape()
    x = tape.leaf(rng.standard_normal((5, 4)))
    grads = tape.backward(ad.sum_all(ad.row_softmax(x)))
    np.testing.assert_allclose(grads[x.node_id].sum(axis=1), np.zeros(5), atol=1e-12)


def test_sparse_matmul_agrees_with_densified_adjacency():
    rng = rng_for("sparse dense")
    for seed in range(3):
        n = 12 + 4 * seed
        pairs = set()
        r = np.random.default_rng(seed)
        for _ in range(3 * n):
            u, v = r.integers(0, n, 2)
            if u != v:
                pairs.add((min(u, v), max(u, v)))
        graph = build_graph(n, sorted(pairs), rng.standard_normal((n, 3)),
                            np.zeros(n, dtype=int), 1)
        for kind in ("symmetric", "row_mean", "sum"):
            adj = normalize(graph, kind)
            h = rng.standard_normal((n, 5))
            sparse_out = ad.sparse_dense_matmul(adj, Tensor(h)).values
            dense_out = adj.to_dense() @ h
            np.testing.assert_allclose(sparse_out, dense_out, atol=1e-12)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

def test_param_store_rejects_duplicate_names():
    store = ParamStore()
    store.add("w", np.ones((2, 2)))
    with pytest.raises(AutodiffError, match="already registered"):
        store.add("w", np.ones((2, 2)))


def test_param_store_gradients_include_zeros_for_unreachable():
    store = ParamStore()
    store.add("used", np.ones((1, 2)))
    store.add("unused", np.ones((2, 2)))
    tape = Tape()
    leaves = store.bind(tape)
    loss = ad.sum_all(ad.multiply(leaves["used"], leaves["used"]))
    grads = store.gradients(leaves, tape.backward(loss))
    np.testing.assert_allclose(grads["used"], [[2.0, 2.0]])
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_param_store_checkpoint_roundtrip_is_byte_identical(tmp_path):
    rng = rng_for("ckpt")
    store = ParamStore()
    store.add("layer1.w", rng.standard_normal((3, 2)))
    store.add("layer1.b", np.zeros((1, 2)))
    p1 = tmp_path / "a.json"
    p2 = tmp_path / "b.json"
    store.save(p1)
    reloaded = ParamStore.load(p1)
    reloaded.save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    for name in store.names():
        np.testing.assert_array_equal(store.value(name), reloaded.value(name))


def test_param_store_fingerprint_tracks_values():
    store = ParamStore()
    store.add("w", np.ones((2, 2)))
    before = store.fingerprint()
    assert before == store.fingerprint()
    store.set_value("w", np.full((2, 2), 2.0))
    assert store.fingerprint() != before
