import numpy as np
import pytest

from corrprune import nn


def tiny_cnn(seed: int = 0, conv_filters=(2, 3), input_hw: int = 12) -> nn.Network:
    """Small two-conv stack for gradient checks: conv3-pool-conv3-dense."""
    rng = np.random.default_rng(seed)
    c1, c2 = conv_filters
    layers = [
        nn.he_conv(rng, c1, 1, 3, 3),
        nn.ReLU(),
        nn.MaxPool2(),
        nn.he_conv(rng, c2, c1, 3, 3),
        nn.ReLU(),
        nn.Flatten(),
    ]
    probe = nn.Network(list(layers), (1, input_hw, input_hw))
    flat = nn.output_shapes(probe)[-1][0]
    layers.append(nn.he_dense(rng, 10, flat))
    return nn.Network(layers, (1, input_hw, input_hw))


def small_lenet(seed: int = 0, conv_filters=(8, 12), hidden: int = 64) -> nn.Network:
    """Reduced LeNet on 28x28 inputs, cheap enough for pipeline tests."""
    return nn.lenet5(np.random.default_rng(seed), conv_filters=conv_filters, hidden=hidden)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
