import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mdg import autodiff as ad
from mdg.autodiff import Tensor
from mdg.autodiff.checkpoint import dumps_tensors, loads_tensors
from mdg.errors import ContractError, DataError, DomainError

from conftest import finite_diff_check, rel_err
from gradcases import OP_CASES, op_grad_error


def grad_of(fn, *arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*ts).backward()
    return [t.grad for t in ts]


def check_grads(fn, *arrays, tol=1e-4):
    grads = grad_of(fn, *arrays)
    for k, a in enumerate(arrays):
        def scalar(x, k=k):
            args = [Tensor(b) for b in arrays]
            args[k] = Tensor(x)
            return fn(*args).item()
        num = finite_diff_check(scalar, a.copy())
        assert rel_err(grads[k], num) < tol, (k, grads[k], num)


def test_add_example():
    assert np.array_equal(ad.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])


def test_sqrt_example():
    x = Tensor([4.0], requires_grad=True)
    y = ad.sqrt(x)
    assert y.data[0] == 2.0
    y.sum().backward()
    assert x.grad[0] == 0.25


def test_gelu_grad_at_point():
    check_grads(lambda x: ad.gelu(x).sum(), np.array([0.7]), tol=1e-6)


def test_domain_errors():
    with pytest.raises(DomainError):
        ad.log([-1.0])
    with pytest.raises(DomainError):
        ad.sqrt([-0.5])


def test_shape_mismatch():
    with pytest.raises(ContractError):
        ad.add(np.ones(3), np.ones(4))
    with pytest.raises(ContractError):
        ad.matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_matmul_examples():
    assert np.array_equal(ad.matmul(np.eye(2), [[5.0, 6.0], [7.0, 8.0]]).data, [[5, 6], [7, 8]])
    assert ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data[0, 0] == 11.0


def test_matmul_grad():
    rng = np.random.default_rng(0)
    check_grads(lambda a, b: (ad.matmul(a, b) ** 2).sum(), rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), tol=1e-6)


def test_matmul_batched_broadcast_grad():
    rng = np.random.default_rng(1)
    check_grads(lambda a, b: ad.tanh(ad.matmul(a, b)).sum(), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2)))


UNARY = ["neg", "exp", "tanh", "relu", "gelu", "sin", "cos"]


@pytest.mark.parametrize("op", UNARY + ["log", "sqrt"])
def test_unary_grads(op):
    rng = np.random.default_rng(2)
    x = rng.uniform(0.3, 2.0, size=(3, 4)) * (1 if op in ("log", "sqrt") else rng.choice([-1, 1], size=(3, 4)))
    check_grads(lambda a: (ad.elementwise(op, a) * np.arange(12).reshape(3, 4)).sum(), x)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_grads_with_broadcast(op):
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(4,))
    check_grads(lambda x, y: (ad.elementwise(op, x, y) ** 2).sum(), a, b)


def test_pow_const_grad():
    check_grads(lambda a: ad.pow_const(a, 3.0).sum(), np.array([0.5, -1.2, 2.0]))


@pytest.mark.parametrize("name,fn", [
    ("sum_axis", lambda a: (ad.sum_(a, axis=1) ** 2).sum()),
    ("mean", lambda a: (ad.mean(a, axis=0) ** 2).sum()),
    ("max", lambda a: (ad.max_(a, axis=1) ** 2).sum()),
    ("reshape", lambda a: (ad.reshape(a, (4, 3)) * np.arange(12).reshape(4, 3)).sum()),
    ("transpose", lambda a: (ad.transpose(a, (1, 0)) * np.arange(12).reshape(4, 3)).sum()),
    ("getitem", lambda a: (a[1:, ::2] ** 2).sum()),
    ("take", lambda a: (ad.take(a, np.array([[0, 2], [2, 1]])) ** 2).sum()),
    ("concat", lambda a: (ad.concat([a, a * 2.0], axis=0) ** 2).sum()),
    ("stack", lambda a: (ad.stack([a, ad.exp(a)], axis=1) ** 2).sum()),
    ("where", lambda a: ad.where(a.data > 0, a * a, ad.sin(a)).sum()),
    ("broadcast", lambda a: (ad.broadcast_to(a, (2, 3, 4)) * np.arange(24).reshape(2, 3, 4)).sum()),
    ("einsum", lambda a: (ad.einsum("ij,kj->ik", a, a) ** 2).sum()),
    ("abs", lambda a: ad.abs_(a).sum()),
    ("wrap", lambda a: ad.wrap_angle(a * 0.5).sum()),
    ("softmax", lambda a: (ad.softmax_lastdim(a) * np.arange(12).reshape(3, 4)).sum()),
    ("layernorm", lambda a: (ad.layernorm(a, np.array([1.0, 2.0, 0.5, 1.5]), np.zeros(4)) * np.arange(12).reshape(3, 4)).sum()),
])
def test_structural_grads(name, fn):
    rng = np.random.default_rng(4)
    check_grads(fn, rng.normal(size=(3, 4)))


def test_layernorm_gain_bias_grads():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(3, 4))
    check_grads(lambda a, g, b: (ad.layernorm(a, g, b) * w).sum(),
                rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4), tol=1e-5)


def test_softmax_examples():
    assert np.allclose(ad.softmax_lastdim([0.0, 0.0, 0.0]).data, 1 / 3)
    y = ad.softmax_lastdim([1000.0, 0.0]).data
    assert np.isfinite(y).all() and y[0] == 1.0
    m = ad.softmax_lastdim([2.0, 1.0, 3.0], mask=[True, True, False]).data
    e = np.exp([2.0, 1.0])
    assert np.allclose(m[:2], e / e.sum()) and m[2] == 0.0
    with pytest.raises(ContractError):
        ad.softmax_lastdim([[1.0, 2.0]], mask=[[False, False]])


def test_layernorm_examples():
    one, zero = np.ones(3), np.zeros(3)
    assert np.allclose(ad.layernorm([5.0, 5.0, 5.0], one, zero).data, 0.0)
    assert np.allclose(ad.layernorm([1.0, 3.0], np.ones(2), np.zeros(2)).data, [-1, 1], atol=1e-4)


def test_matmul_softmax_chain_grad():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(3, 4))
    check_grads(lambda a, b: (ad.softmax_lastdim(ad.matmul(a, b)) * w).sum(),
                rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), tol=1e-5)


def test_backward_examples():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])
    loss.backward()
    assert np.array_equal(x.grad, [4.0, 8.0, 12.0])
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_shared_subgraph_visited_once():
    x = Tensor([1.5], requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    assert x.grad[0] == pytest.approx(6.0)


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    with pytest.raises(ContractError):
        y.sum().backward()


def test_forward_deterministic():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(8, 9)), rng.normal(size=(9, 7))
    r1 = ad.softmax_lastdim(ad.matmul(a, b)).data
    r2 = ad.softmax_lastdim(ad.matmul(a, b)).data
    assert r1.tobytes() == r2.tobytes()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 1), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (4,), elements=st.floats(-5, 5)),
       st.sampled_from(["add", "sub", "mul"]))
def test_broadcast_equals_tiled(a, b, op):
    out = ad.elementwise(op, a, b).data
    tiled = ad.elementwise(op, np.tile(a, (1, 4)), np.tile(b, (3, 1))).data
    assert np.array_equal(out, tiled)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=st.floats(-3, 3)), st.sampled_from(UNARY + ["mul", "div"]))
def test_random_gradcheck(x, op):
    y = np.linspace(0.5, 1.5, 6).reshape(2, 3)
    if op in ("mul", "div"):
        fn = lambda a: (ad.elementwise(op, a, y) ** 2).sum()
    else:
        x = x + np.where(np.abs(x) < 1e-3, 0.01, 0.0)   # keep relu off its kink
        fn = lambda a: (ad.elementwise(op, a) * y).sum()
    check_grads(fn, x)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    tensors = {"a.w": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "s": np.array(2.5)}
    blob = dumps_tensors(tensors, "model.d_model=4\n")
    back, meta = loads_tensors(blob)
    assert meta == "model.d_model=4\n"
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape
    assert blob[:8] == b"MDGCKPT1"
    ad.save_tensors(tmp_path / "c.bin", tensors)
    again, _ = ad.load_tensors(tmp_path / "c.bin")
    assert again.keys() == tensors.keys()


def test_checkpoint_corruption():
    blob = dumps_tensors({"x": np.ones(3)})
    with pytest.raises(DataError):
        loads_tensors(blob[:-1])
    with pytest.raises(DataError):
        loads_tensors(blob + b"\0")
    with pytest.raises(DataError):
        loads_tensors(b"NOTMAGIC" + blob[8:])


@pytest.mark.parametrize("name", [c[0] for c in OP_CASES])
def test_op_table_gradients(name):
    _, fn, arrays = next(c for c in OP_CASES if c[0] == name)
    assert op_grad_error(fn, arrays) < 1e-4
