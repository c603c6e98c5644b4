import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plan2vec import autodiff as ad
from plan2vec.nn import MLP

from oracles import adam_reference, directional_fd, relative_error, smooth_l1_reference

F64 = np.float64
H = 1e-3
PROBES = 100
TOL = 1e-3


def T(x, grad=True):
    return ad.Tensor(np.asarray(x, dtype=F64), requires_grad=grad, dtype=F64)


def away_from(x, points, margin):
    """Nudge entries of ``x`` that sit within ``margin`` of a kink."""
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin) * 2
    return x


def unit_directions(rng, shapes):
    """Random probe direction of unit total norm, split across the given shapes."""
    us = [rng.normal(size=s) for s in shapes]
    norm = math.sqrt(sum(float(np.sum(u * u)) for u in us))
    return [u / norm for u in us]


def grad_check(build, shapes, rng, sampler=None, probes=PROBES):
    """Compare the tape gradient with a central difference along a random direction.

    ``build`` maps input Tensors to a scalar Tensor. Returns the worst relative error.
    """
    worst = 0.0
    for _ in range(probes):
        xs = [sampler(rng, s) if sampler else rng.normal(size=s) for s in shapes]
        us = unit_directions(rng, shapes)
        inputs = [T(x) for x in xs]
        with ad.Tape() as tape:
            loss = build(*inputs)
        ad.backward(tape, loss)
        analytic = sum(float(np.sum(t.grad * u)) for t, u in zip(inputs, us))

        flat = np.concatenate([x.ravel() for x in xs])
        dirn = np.concatenate([u.ravel() for u in us])

        def f(v):
            parts, off = [], 0
            for s in shapes:
                n = int(np.prod(s))
                parts.append(T(v[off : off + n].reshape(s), grad=False))
                off += n
            return build(*parts).item()

        worst = max(worst, relative_error(analytic, directional_fd(f, flat, dirn, H)))
    return worst


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------

def test_smooth_l1_examples():
    assert ad.smooth_l1(ad.Tensor([0.0]), np.zeros(1)).item() == 0.0
    assert ad.smooth_l1(ad.Tensor([2.5]), np.zeros(1)).item() == pytest.approx(2.0)
    assert ad.smooth_l1(ad.Tensor([0.5]), np.zeros(1)).item() == pytest.approx(0.125)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-10, 10)))
def test_smooth_l1_matches_piecewise_formula(x):
    got = ad.smooth_l1(T(x, False), np.zeros_like(x)).item()
    assert got == pytest.approx(float(np.mean(smooth_l1_reference(x))), rel=1e-9, abs=1e-12)


def test_lp_norm_examples():
    assert ad.lp_norm(ad.Tensor([3.0, 4.0]), 2).item() == 5.0
    assert ad.lp_norm(ad.Tensor([3.0, -4.0]), 1).item() == 7.0
    assert ad.lp_norm(T([3.0, 4.0], False), 1.5).item() == pytest.approx((3**1.5 + 4**1.5) ** (1 / 1.5))


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-100, 100)), st.sampled_from([1.0, 1.2, 1.5, 2.0]))
def test_lp_norm_nonnegative_and_zero_only_at_origin(v, p):
    n = ad.lp_norm(T(v, False), p).item()
    assert n >= 0
    assert (n == 0) == bool(np.all(v == 0))


def test_lp_norm_gradient_at_3_4():
    x = ad.Tensor([3.0, 4.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.lp_norm(x, 2)
    ad.backward(tape, y)
    np.testing.assert_allclose(x.grad, [0.6, 0.8], rtol=1e-6)


def test_relu_dead_unit_gradient():
    x = ad.Tensor([-1.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.sum_(ad.relu(x))
    ad.backward(tape, y)
    assert x.grad[0] == 0.0


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)|\(4, 5\).*\(2, 3\)"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 5))))
    with pytest.raises(ValueError, match=r"\(3,\).*\(4,\)|\(4,\).*\(3,\)"):
        ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))


def test_backward_rejects_non_scalar_and_foreign_loss():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        ad.backward(tape, y)
    with ad.Tape() as other:
        z = ad.sum_(x * 3.0)
    with pytest.raises(ValueError):
        ad.backward(tape, z)


def test_backward_visits_each_node_once():
    x = ad.Tensor([2.0], requires_grad=True)
    with ad.Tape() as tape:
        y = x * x  # x used twice by one node
        z = ad.sum_(y + y)  # y used twice by one node
    ad.backward(tape, z)
    assert x.grad[0] == pytest.approx(8.0)  # d/dx 2x^2


def test_nce_examples():
    s = ad.Tensor([0.3, -1.2])
    loss = ad.nce_loss(s, ad.reshape(s, (2, 1)))
    assert loss.item() == pytest.approx(math.log(2), rel=1e-6)
    big = ad.nce_loss(ad.Tensor([60.0]), ad.Tensor([[0.0, 0.0]]))
    assert big.item() < 1e-20


# ---------------------------------------------------------------------------
# gradient suite (float64; see README for why)
# ---------------------------------------------------------------------------

def _positive(rng, s):
    return rng.uniform(0.2, 2.0, size=s) * rng.choice([-1, 1], size=s)


OPS = {
    "add": (lambda a, b: ad.sum_(ad.mul(ad.add(a, b), ad.add(a, b))), [(3, 4), (3, 4)], None),
    "add_broadcast": (lambda a, b: ad.sum_(ad.mul(ad.add(a, b), a)), [(3, 4), (4,)], None),
    "sub": (lambda a, b: ad.sum_(ad.mul(ad.sub(a, b), a)), [(5,), (5,)], None),
    "mul": (lambda a, b: ad.sum_(ad.mul(a, b)), [(2, 3), (2, 3)], None),
    "matmul": (lambda a, b: ad.sum_(ad.mul(ad.matmul(a, b), ad.matmul(a, b))), [(3, 4), (4, 2)], None),
    "linear": (lambda x, w, b: ad.sum_(ad.mul(ad.linear(x, w, b), ad.linear(x, w, b))), [(4, 3), (3, 2), (2,)], None),
    "relu": (lambda a: ad.sum_(ad.mul(ad.relu(a), a)), [(6,)], lambda rng, s: away_from(rng.normal(size=s), [0], 0.01)),
    "softplus": (lambda a: ad.sum_(ad.mul(ad.softplus(a), a)), [(6,)], None),
    "abs": (lambda a: ad.sum_(ad.mul(ad.abs_(a), a)), [(6,)], _positive),
    "sum_axis": (lambda a: ad.sum_(ad.mul(ad.sum_(a, axis=0), ad.sum_(a, axis=0))), [(3, 4)], None),
    "mean": (lambda a: ad.mean(ad.mul(a, a)), [(3, 4)], None),
    "reshape": (lambda a: ad.sum_(ad.mul(ad.reshape(a, (2, 6)), ad.reshape(a, (2, 6)))), [(3, 4)], None),
    "getitem": (lambda a: ad.sum_(ad.mul(ad.getitem(a, np.array([0, 2, 2])), ad.getitem(a, np.array([1, 1, 0])))),
                [(3, 2)], None),
    "concat": (lambda a, b: ad.sum_(ad.mul(ad.concat([a, b], axis=1), ad.concat([b, a], axis=1))),
               [(2, 3), (2, 3)], None),
    "lp_norm_p1": (lambda a: ad.sum_(ad.lp_norm(a, 1.0)), [(4, 3)], _positive),
    "lp_norm_p2": (lambda a: ad.sum_(ad.lp_norm(a, 2.0)), [(4, 3)], None),
    "lp_norm_p1.2": (lambda a: ad.sum_(ad.lp_norm(a, 1.2)), [(4, 3)], _positive),
    "lp_norm_p1.5": (lambda a: ad.sum_(ad.lp_norm(a, 1.5)), [(4, 3)], _positive),
    "smooth_l1": (lambda a: ad.smooth_l1(a, np.zeros(8)), [(8,)],
                  lambda rng, s: away_from(rng.normal(scale=1.5, size=s), [-1, 1], 0.01)),
    "log_softmax": (lambda a: ad.sum_(ad.mul(ad.log_softmax(a), a)), [(3, 5)], None),
    "nce_loss": (lambda p, n: ad.nce_loss(p, n), [(4,), (4, 3)], None),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradient_finite_difference(name):
    build, shapes, sampler = OPS[name]
    worst = grad_check(build, shapes, np.random.default_rng(abs(hash(name)) % 2**32), sampler)
    assert worst < TOL, f"{name}: worst relative error {worst:.2e}"


def mlp64(sizes, seed=0, final_activation=None):
    net = MLP(sizes, seed, final_activation)
    for p in net.parameters:
        p.data = p.data.astype(F64)
    return net


def siamese_loss(net, a, b, target, p=2.0):
    za, zb = net(a), net(b)
    return ad.smooth_l1(ad.lp_norm(ad.sub(za, zb), p), target)


def test_full_siamese_network_gradient():
    rng = np.random.default_rng(7)
    net = mlp64([12, 16, 8, 4], seed=3)
    worst = 0.0
    for _ in range(PROBES):
        a = ad.Tensor(rng.normal(size=(5, 12)), dtype=F64)
        b = ad.Tensor(rng.normal(size=(5, 12)), dtype=F64)
        target = rng.uniform(0, 3, size=5)
        params = net.parameters
        for p in params:
            p.zero_grad()
        with ad.Tape() as tape:
            loss = siamese_loss(net, a, b, target)
        ad.backward(tape, loss)
        us = unit_directions(rng, [p.shape for p in params])
        analytic = sum(float(np.sum(p.grad * u)) for p, u in zip(params, us))
        base = [p.data.copy() for p in params]

        def f(t):
            for p, b0, u in zip(params, base, us):
                p.data = b0 + t * u
            return siamese_loss(net, a, b, target).item()

        numeric = directional_fd(f, 0.0, 1.0, H)
        for p, b0 in zip(params, base):
            p.data = b0
        worst = max(worst, relative_error(analytic, numeric))
    assert worst < TOL, worst


def test_float32_gradient_agrees_loosely():
    """The default float32 path computes the same gradient as float64 up to rounding."""
    rng = np.random.default_rng(0)
    x64 = rng.normal(size=(4, 6))
    grads = []
    for dtype in (np.float32, F64):
        net = MLP([6, 8, 3], seed=1)
        for p in net.parameters:
            p.data = p.data.astype(dtype)
        with ad.Tape() as tape:
            loss = ad.sum_(ad.lp_norm(net(ad.Tensor(x64, dtype=dtype)), 2.0))
        ad.backward(tape, loss)
        grads.append(net.weights[0].grad.astype(F64))
    np.testing.assert_allclose(grads[0], grads[1], rtol=1e-4, atol=1e-5)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_is_identity():
    p = ad.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.1)
    for _ in range(5):
        p.grad = np.zeros(2, dtype=np.float32)
        opt.step()
    np.testing.assert_array_equal(p.data, np.array([1.5, -2.0], dtype=np.float32))


def test_adam_first_step_closed_form():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.1)
    p.grad = np.ones(1, dtype=np.float32)
    opt.step()
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_matches_textbook_reference():
    rng = np.random.default_rng(3)
    theta0 = rng.normal(size=4)
    gs = [rng.normal(size=4) for _ in range(25)]
    p = ad.Tensor(theta0, requires_grad=True, dtype=F64)
    opt = ad.Adam([p], lr=0.01)
    for g in gs:
        p.grad = g.copy()
        opt.step()
    np.testing.assert_allclose(p.data, adam_reference(theta0, gs, lr=0.01), rtol=1e-12)
    assert opt.state.step == 25


def test_adam_runs_are_deterministic():
    def run():
        net = MLP([5, 7, 2], seed=4)
        opt = ad.Adam(net.parameters, lr=1e-2)
        x = np.random.default_rng(0).normal(size=(8, 5))
        for _ in range(10):
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = ad.sum_(ad.lp_norm(net(ad.Tensor(x)), 2.0))
            ad.backward(tape, loss)
            opt.step()
        return np.concatenate([p.data.ravel() for p in net.parameters])

    np.testing.assert_array_equal(run(), run())


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_gradient_shapes_match_parameters(n_in, n_out, seed):
    net = MLP([n_in, 4, n_out], seed)
    x = np.random.default_rng(seed).normal(size=(3, n_in))
    with ad.Tape() as tape:
        loss = ad.mean(net(ad.Tensor(x)))
    ad.backward(tape, loss)
    for p in net.parameters:
        assert p.grad.shape == p.shape
