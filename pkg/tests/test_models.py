import numpy as np
import pytest

from weakdet import tensor as T
from weakdet.classifier import PRESENT, ClassifierHead, classifier_loss, classify
from weakdet.errors import DimensionError
from weakdet.losses import LossWeights, detection_loss
from weakdet.tensor import softmax
from weakdet.unet import BASE_WIDTHS, UNetLite, channel_widths

from oracles import numeric_grad, rel_err


def test_channel_widths():
    assert channel_widths(1.0) == BASE_WIDTHS == (32, 64, 128, 256, 512)
    assert channel_widths(0.25) == (8, 16, 32, 64, 128)
    assert channel_widths(0.125) == (4, 8, 16, 32, 64)


@pytest.mark.slow
def test_unet_full_size_shapes():
    net = UNetLite(1.0)
    logits, bridge = net.forward(np.zeros((1, 3, 192, 192), np.float32))
    assert logits.shape == (1, 1, 192, 192)
    assert bridge.shape == (1, 512, 12, 12)


def test_unet_256_shape():
    net = UNetLite(0.125)
    logits, bridge = net.forward(np.zeros((1, 3, 256, 256), np.float32))
    assert logits.shape == (1, 1, 256, 256)
    assert bridge.shape == (1, 64, 16, 16)


@pytest.mark.parametrize("shape", [(1, 3, 40, 32), (1, 3, 32, 32), (1, 1, 48, 48), (3, 48, 48)])
def test_unet_bad_input(shape):
    with pytest.raises(DimensionError):
        UNetLite(0.125).forward(np.zeros(shape, np.float32))


def test_unet_float32_default():
    net = UNetLite(0.125)
    logits, _ = net.forward(np.zeros((2, 3, 48, 48), np.float32))
    assert logits.dtype == np.float32
    assert all(p.value.dtype == np.float32 for p in net.params())


def test_unet_param_names_unique():
    net = UNetLite(0.25)
    names = [p.name for p in net.params() + net.buffers()]
    assert len(names) == len(set(names))


def test_unet_same_seed_same_weights():
    a, b = UNetLite(0.25, seed=3), UNetLite(0.25, seed=3)
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.params(), b.params()))


def test_encode_matches_forward_bridge():
    x = np.random.default_rng(0).random((2, 3, 48, 48)).astype(np.float32)
    net = UNetLite(0.125)
    _, bridge = net.forward(x)
    np.testing.assert_array_equal(net.encode(x), bridge)


def _tiny_loss(net, head, x, y, labels, seed):
    rng = np.random.default_rng(seed)
    logits, bridge = net.forward(x, "train", rng)
    probs = head.forward(bridge, "train", rng)
    v1, g1, _ = detection_loss(logits, y, LossWeights(0.25, 1.0, 3.0))
    v2, g2 = classifier_loss(probs, labels)
    return v1 + v2, g1, g2


class FrozenKinks:
    """Record ReLU masks and max-pool argmaxes on the first pass, replay
    them afterwards.

    The composed network has tens of thousands of ReLU and pooling kinks,
    and a 1e-3 step crosses some of them for almost any parameter. Replaying
    the base-point pattern evaluates the smooth piece that contains the base
    point, whose derivative is exactly what backward computes.
    """

    def __init__(self, monkeypatch):
        self.log = []
        self.pos = None
        relu, pool = T.relu_forward, T.maxpool2_forward

        def relu_fwd(x):
            if self.pos is None:
                out, mask = relu(x)
                self.log.append(mask)
                return out, mask
            mask = self.log[self.pos]
            self.pos += 1
            return x * mask, mask

        def pool_fwd(x):
            if self.pos is None:
                out, cache = pool(x)
                self.log.append(cache)
                return out, cache
            idx, shape = self.log[self.pos]
            self.pos += 1
            n, c, h, w = shape
            win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            win = win.reshape(n, c, h // 2, w // 2, 4)
            return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], (idx, shape)

        monkeypatch.setattr(T, "relu_forward", relu_fwd)
        monkeypatch.setattr(T, "maxpool2_forward", pool_fwd)

    def replay(self):
        self.pos = 0


@pytest.mark.parametrize("seed", range(10))
def test_full_model_gradient(seed, monkeypatch):
    rng = np.random.default_rng(seed)
    net = UNetLite(0.125, seed=seed).astype(np.float64)
    head = ClassifierHead(net.widths[4], hidden=8, seed=seed).astype(np.float64)
    # snapshot running stats: train-mode forwards update them in place
    bufs = [p.value.copy() for p in net.buffers()]
    x = rng.random((2, 3, 48, 48))
    y = np.zeros((2, 1, 48, 48))
    y[0, 0, 12:30, 15:33] = 1
    labels = np.array([1.0, 0.0])

    kinks = FrozenKinks(monkeypatch)

    def loss():
        for p, b in zip(net.buffers(), bufs):
            p.value[...] = b
        if kinks.pos is not None:
            kinks.replay()
        return _tiny_loss(net, head, x, y, labels, seed + 1000)

    net.zero_grad()
    head.zero_grad()
    _, g1, g2 = loss()
    kinks.replay()
    dbridge = head.backward(g2)
    dx = net.backward(g1, dbridge)
    params = net.params() + head.params()
    checked = 0
    for p in params:
        idx = rng.choice(p.value.size, size=min(3, p.value.size), replace=False)
        num = numeric_grad(lambda: loss()[0], p.value, 1e-3, idx)
        a = p.grad.reshape(-1)[idx]
        n = np.array([num[i] for i in idx])
        assert rel_err(a, n, floor=1e-8) < 1e-3, p.name
        checked += 1
    idx = rng.choice(x.size, size=6, replace=False)
    num = numeric_grad(lambda: loss()[0], x, 1e-3, idx)
    assert rel_err(dx.reshape(-1)[idx], [num[i] for i in idx]) < 1e-3
    assert checked == len(params)


# ------------------------------------------------------------ classifier

def test_classifier_probabilities_sum_to_one():
    head = ClassifierHead(16, seed=1)
    p = head.forward(np.random.default_rng(0).standard_normal((5, 16, 3, 3)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_classifier_zero_bridge_bias_only():
    head = ClassifierHead(16, seed=2)
    head.fc_hidden.bias.value[:] = np.linspace(-1, 1, 256)
    head.fc_out.bias.value[:] = [0.3, -0.2]
    p = head.forward(np.zeros((1, 16, 2, 2), np.float32))
    hidden = np.maximum(head.fc_hidden.bias.value, 0)
    z = head.fc_out.weight.value @ hidden + head.fc_out.bias.value
    np.testing.assert_allclose(p[0], softmax(z[None])[0], rtol=1e-6)


def test_classifier_gap_length():
    head = ClassifierHead(512)
    assert classify(np.zeros((1, 512, 12, 12), np.float32), head).shape == (1, 2)
    with pytest.raises(DimensionError):
        head.forward(np.zeros((1, 256, 12, 12), np.float32))


def _probs(p_present):
    p = np.zeros((1, 2))
    p[0, PRESENT] = p_present
    p[0, 1 - PRESENT] = 1 - p_present
    return p


def test_classifier_loss_values():
    assert classifier_loss(_probs(0.5), [1.0])[0] == pytest.approx(np.log(2))
    assert classifier_loss(_probs(1 - 1e-12), [1.0])[0] < 1e-9
    expect = -0.5 * np.log(0.9) - 0.5 * np.log(0.1)
    assert classifier_loss(_probs(0.9), [0.5])[0] == pytest.approx(expect)
    assert expect == pytest.approx(1.2040, abs=1e-4)


@pytest.mark.parametrize("seed", range(10))
def test_classifier_head_gradient(seed):
    rng = np.random.default_rng(seed)
    head = ClassifierHead(6, hidden=5, seed=seed).astype(np.float64)
    bridge = rng.standard_normal((4, 6, 2, 2))
    labels = rng.random(4)

    def loss():
        p = head.forward(bridge, "train", np.random.default_rng(seed))
        return classifier_loss(p, labels)

    head.zero_grad()
    _, g = loss()
    dbridge = head.backward(g)
    for arr, grad in [(p.value, p.grad) for p in head.params()] + [(bridge, dbridge)]:
        num = numeric_grad(lambda: loss()[0], arr, 1e-3)
        n = np.array([num[i] for i in range(arr.size)]).reshape(arr.shape)
        assert rel_err(grad, n) < 1e-4
