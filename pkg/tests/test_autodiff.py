import numpy as np
import pytest

from equiseg import autodiff as ad
from equiseg.autodiff import AdamState, Tensor, adam_step, bce_loss, grad_check
from equiseg.errors import InvalidArgument


def naive_conv(x, k, pads):
    """Direct 6-loop cross-correlation reference."""
    pt, pb, pl, pr = pads
    bsz, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    ho, wo = h + pt + pb - kh + 1, w + pl + pr - kw + 1
    out = np.zeros((bsz, o, ho, wo))
    for b in range(bsz):
        for oo in range(o):
            for y in range(ho):
                for xx in range(wo):
                    out[b, oo, y, xx] = (k[oo] * xp[b, :, y : y + kh, xx : xx + kw]).sum()
    return out


def test_conv_identity_1x1():
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
    k = np.ones((1, 1, 1, 1))
    out = ad.conv2d(Tensor(x), Tensor(k)).data
    assert np.allclose(out, x)


def test_conv_center_counting():
    x = np.ones((1, 1, 3, 3))
    k = np.ones((1, 1, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(k), padding=1).data
    assert out[0, 0, 1, 1] == 9.0


def test_conv_matches_naive_on_random_shapes():
    rng = np.random.default_rng(42)
    for _ in range(50):
        bsz = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        o = int(rng.integers(1, 4))
        kh = int(rng.choice([1, 2, 3, 4, 5, 6, 8]))
        kw = int(rng.choice([1, 2, 3, 4, 5, 6, 8]))
        h = int(rng.integers(kh, kh + 6))
        w = int(rng.integers(kw, kw + 6))
        x = rng.standard_normal((bsz, c, h, w))
        k = rng.standard_normal((o, c, kh, kw))
        pads = (*ad.even_padding(kh), *ad.even_padding(kw))
        got = ad.conv2d(Tensor(x), Tensor(k)).data
        assert np.abs(got - naive_conv(x, k, pads)).max() <= 1e-12


def test_conv_fft_and_im2col_paths_agree():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 12, 12))
    k = rng.standard_normal((4, 3, 6, 6))
    fft = ad._conv2d_fft(Tensor(x), Tensor(k), (2, 3, 2, 3), (12, 12)).data
    im2 = ad._conv2d_im2col(Tensor(x), Tensor(k), (2, 3, 2, 3), (12, 12)).data
    assert np.abs(fft - im2).max() <= 1e-12


def test_conv_channel_mismatch():
    with pytest.raises(InvalidArgument):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_even_padding_convention():
    assert ad.even_padding(6) == (2, 3)
    assert ad.even_padding(3) == (1, 1)
    assert ad.even_padding(2) == (0, 1)


def test_relu_sigmoid_values():
    assert ad.relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    assert np.isclose(ad.sigmoid(Tensor([0.0])).data[0], 0.5)


def test_maxpool_forward_backward():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    out = ad.maxpool2x2(x)
    assert out.data.reshape(-1).tolist() == [4.0]
    out.backward(np.ones_like(out.data))
    assert x.grad.reshape(-1).tolist() == [0.0, 0.0, 0.0, 1.0]


def test_maxpool_tie_breaks_to_first():
    x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
    out = ad.maxpool2x2(x)
    out.backward(np.ones_like(out.data))
    assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_upsample_then_pool_on_constant():
    x = np.full((1, 2, 4, 4), 3.3)
    up = ad.upsample_nearest2x(Tensor(x))
    back = ad.maxpool2x2(up)
    assert np.allclose(back.data, x)


def test_maxpool_of_ramp():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    out = ad.maxpool2x2(Tensor(x)).data
    assert out.reshape(-1).tolist() == [5.0, 7.0, 13.0, 15.0]


# -- bce -----------------------------------------------------------------------


def test_bce_half_is_ln2():
    loss = bce_loss(Tensor([[0.5]]), Tensor([[1.0]]))
    assert np.isclose(float(loss.data), np.log(2.0))


def test_bce_confident_negative_goes_to_zero():
    loss = bce_loss(Tensor([[1e-9]]), Tensor([[0.0]]))
    assert float(loss.data) <= 1e-6


def test_bce_matches_scalar_loop():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, size=(3, 7))
    y = (rng.uniform(size=(3, 7)) > 0.5).astype(float)
    got = float(bce_loss(Tensor(p), Tensor(y)).data)
    want = 0.0
    for i in range(3):
        for j in range(7):
            want += -y[i, j] * np.log(p[i, j]) - (1 - y[i, j]) * np.log(1 - p[i, j])
    want /= 3  # sum over pixels divided by batch size
    assert abs(got - want) <= 1e-12


# -- adam ------------------------------------------------------------------------


def test_adam_zero_gradient_no_change():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st = AdamState([p])
    adam_step([p], [np.zeros(2)], st)
    assert p.data.tolist() == [1.0, -2.0]


def test_adam_first_step_magnitude():
    # bias-corrected first step is lr * g / (|g| + eps) ~= lr
    p = Tensor(np.zeros(3), requires_grad=True)
    st = AdamState([p])
    adam_step([p], [np.full(3, 0.7)], st, lr=2e-4)
    assert np.allclose(np.abs(p.data), 2e-4, rtol=1e-6)


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = Tensor(rng.standard_normal(4), requires_grad=True)
        st = AdamState([p])
        for _ in range(10):
            adam_step([p], [rng.standard_normal(4)], st, lr=1e-3)
        return p.data.copy()

    a, b = run(), run()
    assert (a == b).all()


# -- grad checks -------------------------------------------------------------------


def test_grad_check_linear_function_exact():
    x = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)
    w = Tensor(np.arange(5.0))

    def f():
        return ad.total(ad.mul(x, w))

    assert grad_check(f, [x]) <= 1e-10


def test_grad_check_relu_away_from_kink():
    x = Tensor(np.array([3.0, -4.0, 5.0]), requires_grad=True)

    def f():
        return ad.total(ad.relu(x))

    assert grad_check(f, [x]) <= 1e-8


def test_every_op_grad_check():
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
    k = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.4, requires_grad=True)
    k6 = Tensor(rng.standard_normal((2, 3, 6, 6)) * 0.4, requires_grad=True)
    g = Tensor(rng.standard_normal(4), requires_grad=True)
    y = Tensor((rng.uniform(size=(2, 2, 4, 4)) > 0.7).astype(float))

    def f():
        a = ad.conv2d(x, k)  # im2col path
        b = ad.conv2d(x, k6)  # fft path
        b = ad.concat([a, ad.pad2d(b, (0, 0, 0, 0)), b], axis=1)
        b = ad.take(b, np.array([0, 3, 5, 7]), axis=1)
        b = ad.mul(b, ad.reshape(g, (1, 4, 1, 1)))
        b = ad.transpose(b, (0, 1, 3, 2))
        b = ad.maxpool2x2(b)
        b = ad.amax(ad.reshape(b, (2, 2, 2, 4, 4)), axis=2)
        b = ad.upsample_nearest2x(ad.relu(b))
        b = ad.crop2d(b, 4, 4)
        b = ad.powc(ad.mul(b, b) + 1.0, 0.5)
        p = ad.sigmoid(b)
        return bce_loss(p, y)

    assert grad_check(f, [x, k, k6, g], max_coords=12) <= 1e-6


def test_backward_linearity():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    w1 = Tensor(rng.standard_normal((3, 3)))
    w2 = Tensor(rng.standard_normal((3, 3)))

    def grad_of(fn):
        x.zero_grad()
        fn().backward()
        return x.grad.copy()

    g1 = grad_of(lambda: ad.total(ad.mul(x, w1)))
    g2 = grad_of(lambda: ad.total(ad.mul(x, w2)))
    g12 = grad_of(lambda: ad.total(ad.mul(x, w1)) + ad.total(ad.mul(x, w2)))
    assert np.allclose(g12, g1 + g2, atol=1e-12)


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(InvalidArgument):
        ad.mul(x, 2.0).backward()


def test_fan_in_reuse_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.mul(x, x)  # x used twice
    y.backward()
    assert np.isclose(x.grad[0], 4.0)
