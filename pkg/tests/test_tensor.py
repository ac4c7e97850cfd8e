import math

import numpy as np
import pytest

from pmda import functional as F
from pmda.errors import (ContractError, InvalidLabelError, InvalidShapeError,
                         InvalidStatisticsError, NonFiniteError)
from pmda.tensor import SGD, Tensor, backward, no_grad

from gradcheck import max_rel_error

SEEDS = range(20)


def loop_conv(x, k, b, stride, pad):
    bsz, cin, h, w = x.shape
    cout, _, kk, _ = k.shape
    xp = np.zeros((bsz, cin, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kk) // stride + 1
    wo = (w + 2 * pad - kk) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for u in range(kk):
                            for v in range(kk):
                                acc += xp[n, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


class TestConv2d:
    def test_unit_kernel(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_full_window_sum(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = F.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 10.0

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_matches_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out = F.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad)
        ref = loop_conv(x, k, b, stride, pad)
        assert out.shape == ref.shape
        np.testing.assert_allclose(out.data, ref, atol=1e-5, rtol=1e-5)

    def test_output_shape_pad1(self):
        x = Tensor(np.zeros((2, 3, 8, 8)))
        assert F.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), pad=1).shape == (2, 4, 8, 8)

    def test_shape_errors(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(InvalidShapeError):
            F.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
        with pytest.raises(InvalidShapeError):
            F.conv2d(x, Tensor(np.zeros((1, 2, 5, 5))))
        with pytest.raises(InvalidShapeError):
            F.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros(2)))


class TestPrimitives:
    def test_relu(self):
        assert F.relu(Tensor([-1.5])).data[0] == 0.0
        assert F.relu(Tensor([2.5])).data[0] == 2.5

    def test_softmax_symmetry(self):
        p = F.softmax_channels(Tensor(np.zeros((1, 2, 1, 1))))
        np.testing.assert_array_equal(p.data.ravel(), [0.5, 0.5])

    def test_maxpool_forward_and_route(self):
        # enumerate: the max of [[1,2],[3,4]] sits at (1,1), only that cell gets gradient
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2), requires_grad=True)
        out = F.maxpool2x2(x)
        assert out.data.ravel().tolist() == [4.0]
        F.sum(out).backward()
        expected = np.zeros((2, 2))
        expected[1, 1] = 1.0
        np.testing.assert_array_equal(x.grad[0, 0], expected)

    @pytest.mark.parametrize("pos", [(0, 0), (0, 1), (1, 0), (1, 1)])
    def test_maxpool_each_position(self, pos):
        vals = np.zeros((2, 2))
        vals[pos] = 5.0
        x = Tensor(vals.reshape(1, 1, 2, 2), requires_grad=True)
        F.sum(F.maxpool2x2(x)).backward()
        assert x.grad[0, 0][pos] == 1.0
        assert x.grad.sum() == 1.0

    def test_maxpool_tie_goes_to_first(self):
        x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
        F.sum(F.maxpool2x2(x)).backward()
        assert x.grad[0, 0, 0, 0] == 1.0 and x.grad.sum() == 1.0

    def test_upsample(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        out = F.upsample_nearest2x(x)
        assert out.shape == (1, 1, 4, 4)
        assert out.data[0, 0, 3, 3] == 3.0 and out.data[0, 0, 0, 1] == 0.0

    def test_matvec(self):
        out = F.matvec(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [3.0, 7.0])
        with pytest.raises(InvalidShapeError):
            F.matvec(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(InvalidShapeError):
            F.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
        with pytest.raises(InvalidShapeError):
            F.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_properties(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 5, 3, 3)).astype(np.float32) * 4
        p = F.softmax_channels(Tensor(x)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        shift = rng.standard_normal((2, 1, 3, 3)).astype(np.float32) * 10
        np.testing.assert_allclose(F.softmax_channels(Tensor(x + shift)).data, p, atol=1e-5)

    def test_nonfinite_is_error(self):
        with pytest.raises(NonFiniteError):
            F.sqrt(Tensor([-1.0]))


def two_pass_stats(x, eps):
    b, c, h, w = x.shape
    mu = np.zeros((b, c))
    sig = np.zeros((b, c))
    for i in range(b):
        for j in range(c):
            vals = x[i, j].astype(np.float64).ravel()
            m = sum(vals) / len(vals)
            var = sum((v - m) ** 2 for v in vals) / len(vals)
            mu[i, j] = m
            sig[i, j] = math.sqrt(var + eps)
    return mu, sig


class TestChannelStats:
    def test_constant(self):
        mu, sig = F.channel_stats(Tensor(np.full((1, 1, 3, 3), 3.0)))
        assert mu.data[0, 0] == pytest.approx(3.0)
        assert sig.data[0, 0] == pytest.approx(math.sqrt(1e-5), rel=1e-4)

    def test_two_point(self):
        mu, sig = F.channel_stats(Tensor(np.array([1.0, 3.0]).reshape(1, 1, 1, 2)))
        assert mu.data[0, 0] == pytest.approx(2.0)
        assert sig.data[0, 0] == pytest.approx(math.sqrt(1 + 1e-5), rel=1e-6)

    def test_two_pass_oracle(self):
        x = np.random.default_rng(0).standard_normal((2, 4, 5, 5)).astype(np.float32)
        mu, sig = F.channel_stats(Tensor(x))
        rmu, rsig = two_pass_stats(x, 1e-5)
        np.testing.assert_allclose(mu.data, rmu, atol=1e-6)
        np.testing.assert_allclose(sig.data, rsig, atol=1e-6)


class TestAdain:
    def test_target_stats(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 16, 16))
        x = (x - x.mean(axis=(2, 3), keepdims=True)) / x.std(axis=(2, 3), keepdims=True)
        out = F.adain(Tensor(x.astype(np.float32)), Tensor(np.full((1, 2), 5.0)), Tensor(np.full((1, 2), 2.0)))
        mu, sig = F.channel_stats(out)
        np.testing.assert_allclose(mu.data, 5.0, atol=1e-5)
        np.testing.assert_allclose(sig.data, 2.0, atol=1e-5)

    def test_self_stats_identity(self):
        x = Tensor(np.random.default_rng(2).standard_normal((2, 3, 4, 4)).astype(np.float32))
        mu, sig = F.channel_stats(x)
        np.testing.assert_allclose(F.adain(x, mu, sig).data, x.data, atol=1e-5)

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
        smu = rng.standard_normal((1, 3)).astype(np.float32)
        ssig = rng.uniform(0.5, 2.0, (1, 3)).astype(np.float32)
        out = F.adain(Tensor(x), Tensor(smu), Tensor(ssig)).data
        cmu, csig = two_pass_stats(x, 1e-5)
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    ref = ssig[0, c] * (x[0, c, i, j] - cmu[0, c]) / csig[0, c] + smu[0, c]
                    assert out[0, c, i, j] == pytest.approx(ref, abs=1e-5)

    def test_nonpositive_sigma(self):
        x = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(InvalidStatisticsError):
            F.adain(x, Tensor([[0.0]]), Tensor([[0.0]]))


def loop_ce(logits, target, ignore=255):
    total, n = 0.0, 0
    b, c, h, w = logits.shape
    for i in range(b):
        for y in range(h):
            for x in range(w):
                t = target[i, y, x]
                if t == ignore:
                    continue
                z = logits[i, :, y, x].astype(np.float64)
                m = max(z)
                lse = m + math.log(sum(math.exp(v - m) for v in z))
                total += lse - z[t]
                n += 1
    return total / n


class TestCrossEntropy:
    def test_uniform(self):
        loss = F.softmax_cross_entropy(Tensor(np.zeros((1, 4, 2, 2))), np.zeros((1, 2, 2), int))
        assert loss.item() == pytest.approx(math.log(4), rel=1e-6)

    def test_saturated(self):
        logits = np.zeros((1, 3, 2, 2))
        logits[:, 1] = 20.0
        loss = F.softmax_cross_entropy(Tensor(logits), np.ones((1, 2, 2), int))
        assert loss.item() < 1e-6

    def test_loop_oracle(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
        target = rng.integers(0, 3, (1, 2, 2))
        target[0, 0, 1] = 255
        loss = F.softmax_cross_entropy(Tensor(logits), target)
        assert loss.item() == pytest.approx(loop_ce(logits, target), abs=1e-6)

    def test_invalid_label(self):
        with pytest.raises(InvalidLabelError):
            F.softmax_cross_entropy(Tensor(np.zeros((1, 3, 1, 1))), np.array([[[3]]]))


class TestBackward:
    def test_quadratic(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        F.sum(F.mul(x, x)).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_accumulation_doubles(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32), requires_grad=True)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32), requires_grad=True)
        loss = F.sum(F.relu(F.conv2d(x, k, pad=1)))
        backward(loss)
        first = k.grad.copy()
        backward(loss)
        np.testing.assert_array_equal(k.grad, 2 * first)

    def test_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(F.mul(x, x))

    def test_shared_node_visited_once(self):
        x = Tensor([3.0], requires_grad=True)
        y = F.mul(x, x)
        F.sum(F.add(y, y)).backward()
        assert x.grad[0] == pytest.approx(12.0)

    def test_no_grad(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = F.mul(x, x)
        assert not y.requires_grad

    def test_sgd_momentum(self):
        p = Tensor([1.0], requires_grad=True)
        opt = SGD([p], lr=0.1, momentum=0.9)
        p.grad = np.array([1.0], np.float32)
        opt.step()
        assert p.grad is None
        assert p.data[0] == pytest.approx(0.9)
        p.grad = np.array([1.0], np.float32)
        opt.step()
        assert p.data[0] == pytest.approx(0.9 - 0.1 * 1.9)

    def test_conv_relu_chain_fd(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)

        def f(x, k, b):
            return F.sum(F.square(F.relu(F.conv2d(x, k, b, pad=1))))

        assert max_rel_error(f, [x, k, b]) < 1e-3


# ---------------------------------------------------------- gradient property suite

def _away_from_zero(rng, shape, margin=0.05):
    v = rng.standard_normal(shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-12) * margin, v)


GRAD_CASES = {
    "add": (lambda r: [r.standard_normal((2, 3)), r.standard_normal((1, 3))],
            lambda a, b: F.sum(F.square(F.add(a, b)))),
    "sub": (lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 1))],
            lambda a, b: F.sum(F.square(F.sub(a, b)))),
    "mul": (lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))],
            lambda a, b: F.sum(F.mul(F.mul(a, b), a))),
    "div": (lambda r: [r.standard_normal((2, 3)), r.uniform(0.5, 2.0, (2, 3))],
            lambda a, b: F.sum(F.div(a, b))),
    "scale": (lambda r: [r.standard_normal((3, 2))],
              lambda a: F.sum(F.square(F.scale(a, -1.7)))),
    "sqrt": (lambda r: [r.uniform(0.5, 3.0, (4,))],
             lambda a: F.sum(F.sqrt(a))),
    "relu": (lambda r: [_away_from_zero(r, (2, 2, 3, 3))],
             lambda a: F.sum(F.square(F.relu(a)))),
    # distinct values spaced well beyond h so no window has a near-tie
    "maxpool2x2": (lambda r: [(r.permutation(32) * 0.1 - 1.6).reshape(1, 2, 4, 4)],
                   lambda a: F.sum(F.square(F.maxpool2x2(a)))),
    "upsample_nearest2x": (lambda r: [r.standard_normal((1, 2, 2, 3))],
                           lambda a: F.sum(F.square(F.upsample_nearest2x(a)))),
    "matvec": (lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)],
               lambda m, v: F.sum(F.square(F.matvec(m, v)))),
    "softmax_channels": (lambda r: [r.standard_normal((1, 4, 2, 2)), r.standard_normal((1, 4, 2, 2))],
                         lambda a, w: F.sum(F.mul(F.softmax_channels(a), w))),
    "conv2d": (lambda r: [r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)],
               lambda x, k, b: F.sum(F.square(F.conv2d(x, k, b, stride=2, pad=1)))),
    "channel_stats": (lambda r: [r.standard_normal((2, 3, 3, 3)), r.standard_normal((2, 3)), r.standard_normal((2, 3))],
                      lambda x, a, b: F.add(F.sum(F.mul(F.channel_stats(x)[0], a)),
                                            F.sum(F.mul(F.channel_stats(x)[1], b)))),
    "adain": (lambda r: [r.standard_normal((1, 2, 3, 3)), r.standard_normal((1, 2)), r.uniform(0.5, 2, (1, 2)),
                         r.standard_normal((1, 2, 3, 3))],
              lambda x, m, s, w: F.sum(F.mul(F.adain(x, m, s), w))),
    "softmax_cross_entropy": (lambda r: [r.standard_normal((2, 3, 2, 2)) * 2],
                              lambda z: F.softmax_cross_entropy(z, np.array([[[0, 1], [2, 255]], [[1, 1], [0, 2]]]))),
    "soft_cross_entropy": (lambda r: [r.standard_normal((1, 4, 2, 2))],
                           lambda z: F.soft_cross_entropy(z, np.full((1, 4, 2, 2), 0.2))),
    "l2norm": (lambda r: [r.standard_normal((2, 3))],
               lambda a: F.l2norm(a)),
    "concat_slice": (lambda r: [r.standard_normal((1, 2, 2, 2)), r.standard_normal((2, 2, 2, 2))],
                     lambda a, b: F.sum(F.square(F.batch_slice(F.concat([a, b]), 1, 3)))),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", sorted(GRAD_CASES))
def test_gradient_matches_finite_difference(op, seed):
    make, fn = GRAD_CASES[op]
    arrays = make(np.random.default_rng(1000 + seed))
    assert max_rel_error(fn, arrays) < 1e-3
