import numpy as np
import pytest

from src import autodiff as ad
from src.autodiff import Adam, NonFiniteError, ParamStore, Tape, Tensor, grad_check


def _param(shape, seed=0, name="p"):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True, name=name)


def test_ops_outside_tape_record_nothing():
    a = _param((2, 3))
    out = ad.sum(ad.exp(a))
    assert out._tape is None
    assert not out.requires_grad
    with pytest.raises(RuntimeError):
        out.backward()


def test_backward_accumulates_into_leaves():
    a = _param((3,))
    with Tape() as tape:
        loss = ad.sum(a * a)
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, 2 * a.data)


def test_shared_parameter_gradients_add_up():
    a = _param((2, 2))
    with Tape() as tape:
        loss = ad.sum(a + a) + ad.sum(ad.scale(a, 3.0))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, np.full((2, 2), 5.0))


def test_tape_is_single_use_and_not_nested():
    a = _param((2,))
    with Tape() as tape:
        loss = ad.sum(a)
        with pytest.raises(RuntimeError):
            Tape().__enter__()
    tape.backward(loss)
    with pytest.raises(RuntimeError):
        tape.backward(loss)


def test_backward_needs_scalar():
    a = _param((2,))
    with Tape() as tape:
        out = a * a
    with pytest.raises(ValueError):
        tape.backward(out)


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        ad.log(Tensor([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        ad.exp(Tensor([1000.0]))


def test_broadcast_only_over_leading_dims():
    a = _param((2, 3, 4))
    ad.add(a, _param((3, 4), seed=1))
    with pytest.raises(ValueError):
        ad.add(a, _param((2, 1, 4), seed=1))


def test_masked_fill_and_softmax_give_exact_zeros():
    logits = Tensor([[1.0, 2.0, 3.0]])
    probs = ad.softmax(ad.masked_fill(logits, np.array([[False, True, False]])))
    assert probs.data[0, 1] == 0.0
    np.testing.assert_allclose(probs.data.sum(), 1.0)


def test_log_softmax_is_stable():
    out = ad.log_softmax(Tensor([[1000.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.0, -1000.0]], atol=1e-9)


def test_layer_norm_normalizes():
    x = Tensor(np.random.default_rng(0).normal(3.0, 2.0, size=(4, 16)))
    out = ad.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.data.std(axis=-1), 1.0, atol=1e-3)


def test_masked_mean_skips_padding():
    x = Tensor(np.array([[[1.0, 3.0], [3.0, 1.0], [100.0, 100.0]]]))
    out = ad.masked_mean(x, np.array([[True, True, False]]))
    np.testing.assert_allclose(out.data, [[2.0, 2.0]])
    with pytest.raises(ValueError):
        ad.masked_mean(x, np.zeros((1, 3), dtype=bool))


def test_cosine_similarity():
    a = Tensor([[1.0, 0.0], [1.0, 1.0]])
    b = Tensor([[2.0, 0.0], [0.0, 3.0]])
    np.testing.assert_allclose(ad.cosine_similarity(a, b).data, [[1.0, 0.0], [2 ** -0.5, 2 ** -0.5]])


@pytest.mark.parametrize(
    "build",
    [
        lambda a, b: ad.sum(ad.sigmoid(a @ b)),
        lambda a, b: ad.sum(ad.relu(a) * ad.exp(ad.scale(a, 0.1))),
        lambda a, b: ad.sum(ad.log_softmax(a, axis=-1) * ad.softmax(a, axis=0)),
        lambda a, b: ad.sum(ad.l2_normalize(a) * a),
        lambda a, b: ad.sum(ad.cosine_similarity(a, ad.transpose(b, (1, 0)))),
        lambda a, b: ad.mean(ad.concat([a, ad.reshape(b, (3, 4))], axis=1)),
        lambda a, b: ad.sum(ad.getitem(a, (np.array([0, 2, 2]), slice(1, 3))) * 2.0),
        lambda a, b: ad.sum(ad.log(ad.sigmoid(a))),
    ],
)
def test_elementwise_and_shape_grads(build):
    a = _param((3, 4), seed=1, name="a")
    b = _param((4, 3), seed=2, name="b")
    assert grad_check(lambda: build(a, b), [a, b]) < 1e-5


def test_layer_norm_and_masked_mean_grads():
    x = _param((2, 3, 5), seed=3)
    gamma = _param((5,), seed=4)
    beta = _param((5,), seed=5)
    mask = np.array([[True, True, False], [True, False, False]])
    w = Tensor(np.random.default_rng(6).normal(size=(2, 5)))

    def f():
        return ad.sum(ad.masked_mean(ad.layer_norm(x, gamma, beta), mask) * w)

    assert grad_check(f, [x, gamma, beta]) < 1e-5


def test_batched_and_shared_matmul_grads():
    a = _param((2, 3, 4), seed=7)
    b = _param((2, 4, 2), seed=8)
    w = _param((4, 5), seed=9)

    def f():
        return ad.sum(ad.matmul(a, b)) + ad.sum(ad.sigmoid(a @ w))

    assert grad_check(f, [a, b, w]) < 1e-5


def test_embedding_lookup_grad_scatters_repeats():
    table = _param((5, 3), seed=10)
    ids = np.array([[0, 2], [2, 4]])
    with Tape() as tape:
        loss = ad.sum(ad.embedding_lookup(table, ids))
    tape.backward(loss)
    np.testing.assert_allclose(table.grad[:, 0], [1.0, 0.0, 2.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        ad.embedding_lookup(table, np.array([5]))


def test_dropout_is_identity_in_eval_and_scales_in_train():
    x = Tensor(np.ones((1000,)))
    rng = np.random.default_rng(0)
    assert ad.dropout(x, 0.5, rng, training=False) is x
    out = ad.dropout(x, 0.5, rng, training=True)
    assert set(np.unique(out.data)) <= {0.0, 2.0}
    assert 0.4 < (out.data == 0).mean() < 0.6


def test_grad_check_flags_a_wrong_gradient():
    a = _param((4,), seed=11)

    def f():
        return ad.sum(a * a)

    assert grad_check(f, [a], analytic=[np.zeros(4)]) > 0.5
    # 10% too large everywhere: |0.2 a| / |4.2 a|
    assert grad_check(f, [a], analytic=[2.2 * a.data]) > 1e-2


def test_grad_check_is_exact_on_a_quadratic():
    a = Tensor(np.array([0.5, -1.0, 0.25, 1.5]), requires_grad=True)

    def f():
        return ad.sum(a * a)

    assert grad_check(f, [a]) < 1e-9


def test_param_store_and_adam():
    store = ParamStore()
    p = store.add("w", np.array([1.0, -2.0]))
    with pytest.raises(ValueError):
        store.add("w", np.zeros(1))
    assert store.n_parameters() == 2

    opt = Adam(store, lr=0.1)
    for _ in range(300):
        with Tape() as tape:
            loss = ad.sum(p * p)
        tape.backward(loss)
        opt.step()
        assert p.grad is None
    assert store.step == 300
    assert np.all(np.abs(p.data) < 0.5)


def test_decoupled_weight_decay_shrinks_without_gradient():
    store = ParamStore()
    p = store.add("w", np.array([1.0]))
    Adam(store, lr=0.1, weight_decay=0.5).step()
    np.testing.assert_allclose(p.data, [1.0 - 0.1 * 0.5])
