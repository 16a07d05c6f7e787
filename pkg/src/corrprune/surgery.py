"""Structural removal of conv filters with exact downstream repair.

Removing output channel v of a conv layer deletes its weight slice and
bias, the matching input-channel slice of the next conv layer, and - when
the conv feeds the classifier head through Flatten - the dense input
columns {v*(h*w) + s : s in [0, h*w)} under the channel-major flatten
convention. Pooling and activations between producer and consumer pass
channel deletions through unchanged. Surgery is copy-based: the input
network is never mutated, which is what makes pipeline rollback trivial.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correlation import Episode
from .nn import Conv2D, Dense, Flatten, MaxPool2, Network, ReLU, ShapeError, forward, output_shapes


class SurgeryError(ValueError):
    """A prune plan is invalid for the given network."""


@dataclass(eq=False)
class PrunePlan:
    """Sorted victim filter indices per conv layer index."""

    victims_by_layer: dict[int, list[int]] = field(default_factory=dict)

    def num_victims(self) -> int:
        return sum(len(v) for v in self.victims_by_layer.values())

    def is_empty(self) -> bool:
        return self.num_victims() == 0


def choose_victims(episode: Episode, net: Network) -> PrunePlan:
    """One victim per pair: the filter with the smaller L1 weight norm.

    Exact ties fall to the higher index. Biases are not part of the norm.
    """
    plan = PrunePlan()
    for layer_index, pairs in episode.pairs_by_layer.items():
        layer = net.layers[layer_index]
        if not isinstance(layer, Conv2D):
            raise SurgeryError(f"layer {layer_index} is not a conv layer")
        rows = np.abs(layer.weights.reshape(layer.c_out, -1)).sum(axis=1)
        victims = []
        for pair in pairs:
            na, nb = rows[pair.a], rows[pair.b]
            victims.append(pair.a if na < nb else pair.b)
        plan.victims_by_layer[layer_index] = sorted(victims)
    return plan


def _consumers(net: Network, conv_index: int) -> tuple[int | None, int | None, tuple | None]:
    """Locate what consumes conv_index's output channels.

    Returns (next_conv_index, dense_index, pre_flatten_shape); exactly one of
    the first two is set. Pooling/activations in between are transparent.
    """
    shapes = output_shapes(net)
    flatten_at = None
    for i in range(conv_index + 1, len(net.layers)):
        layer = net.layers[i]
        if isinstance(layer, (ReLU, MaxPool2)):
            continue
        if isinstance(layer, Flatten):
            flatten_at = i
            continue
        if isinstance(layer, Conv2D):
            return i, None, None
        if isinstance(layer, Dense):
            if flatten_at is None:
                raise SurgeryError(
                    f"conv layer {conv_index} feeds dense layer {i} without a flatten")
            pre = shapes[flatten_at - 1] if flatten_at > 0 else tuple(net.input_shape)
            return None, i, pre
        raise SurgeryError(f"unsupported consumer {type(layer).__name__} at layer {i}")
    raise SurgeryError(f"conv layer {conv_index} has no downstream consumer")


def _validate_plan(net: Network, plan: PrunePlan) -> None:
    for layer_index, victims in plan.victims_by_layer.items():
        if not 0 <= layer_index < len(net.layers):
            raise SurgeryError(f"no layer at index {layer_index}")
        layer = net.layers[layer_index]
        if not isinstance(layer, Conv2D):
            raise SurgeryError(f"layer {layer_index} is not a conv layer")
        if len(set(victims)) != len(victims):
            raise SurgeryError(f"layer {layer_index}: duplicate victim indices {victims}")
        for v in victims:
            if not 0 <= v < layer.c_out:
                raise SurgeryError(
                    f"layer {layer_index}: victim {v} out of range [0, {layer.c_out - 1}]")
        if layer.c_out - len(victims) < 1:
            raise SurgeryError(
                f"layer {layer_index}: removing {len(victims)} of {layer.c_out} "
                f"filters would empty the layer")


def prune_filters(net: Network, plan: PrunePlan) -> Network:
    """Return a new network with the planned filters and all dependent weights removed.

    The input network is left untouched; an invalid plan raises before any
    work is done.
    """
    _validate_plan(net, plan)
    out = net.copy()
    for conv_index in sorted(plan.victims_by_layer):
        victims = sorted(plan.victims_by_layer[conv_index])
        if not victims:
            continue
        layer = out.layers[conv_index]
        next_conv, dense_index, pre_flatten = _consumers(net, conv_index)
        out.layers[conv_index] = Conv2D(
            np.delete(layer.weights, victims, axis=0),
            np.delete(layer.bias, victims))
        if next_conv is not None:
            consumer = out.layers[next_conv]
            out.layers[next_conv] = Conv2D(
                np.delete(consumer.weights, victims, axis=1),
                consumer.bias.copy())
        else:
            _, h, w = pre_flatten
            cols = [v * (h * w) + s for v in victims for s in range(h * w)]
            consumer = out.layers[dense_index]
            out.layers[dense_index] = Dense(
                np.delete(consumer.weights, cols, axis=1),
                consumer.bias.copy())
    output_shapes(out)  # internal consistency check; raises on any slip
    return out


def prune_dense_columns(victims: list[int], spatial_hw: tuple[int, int]) -> list[int]:
    """Flat column indices a dense layer loses when upstream channels vanish."""
    h, w = spatial_hw
    return [v * (h * w) + s for v in sorted(victims) for s in range(h * w)]


def validate_network(net: Network, input_shape: tuple[int, int, int] | None = None,
                     batch_size: int = 2) -> None:
    """Run a dummy forward pass; raise ShapeError naming the broken layer pair."""
    shape = tuple(input_shape) if input_shape is not None else tuple(net.input_shape)
    output_shapes(net)  # symbolic pass gives the best error messages
    logits = forward(net, np.zeros((batch_size, *shape)))
    n_classes = net.num_classes()
    if logits.shape != (batch_size, n_classes):
        raise ShapeError(
            f"expected logits ({batch_size}, {n_classes}), got {logits.shape}")
