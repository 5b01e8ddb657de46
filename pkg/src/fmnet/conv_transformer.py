"""Convolutional self-attention over sequences of feature maps.

Queries and keys are single-channel maps, values keep all ``c`` channels, and the
score of a frame pair (i, j) is itself a map produced by a small conv net over the
channel-concatenation of q_i and k_j.  Scores are softmax-normalised per pixel
over j, and the output for frame i is the pixel-wise weighted sum of values.

The score net has a hidden ReLU layer.  A single linear conv would split into
A(q_i) + A(k_j), and the softmax over j would then cancel the query term.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError
from .nn import Conv2d, Module
from .posenc import FeatureSequence


SCORE_HIDDEN = 4


class ScoreNet(Module):
    """2 -> SCORE_HIDDEN -> 1 channels: conv, relu, conv."""

    def __init__(self, rng: np.random.Generator, hidden: int = SCORE_HIDDEN):
        super().__init__()
        self.add_module("0", Conv2d(2, hidden, rng), attr="conv1")
        self.add_module("1", Conv2d(hidden, 1, rng), attr="conv2")

    def __call__(self, pair: Tensor) -> Tensor:
        return self.conv2(ag.relu(self.conv1(pair)))

    def zero_(self) -> "ScoreNet":
        self.conv1.zero_()
        self.conv2.zero_()
        return self


def attention_map(q_i: Tensor, k_j: Tensor, a_net: ScoreNet) -> Tensor:
    """Score map for one frame pair: ``a_net(concat[q_i, k_j])``, shape [1, h, w]."""
    if q_i.shape != k_j.shape or q_i.shape[0] != 1:
        raise ShapeError("query and key must both be [1, h, w]", q=q_i.shape, k=k_j.shape)
    return a_net(ag.concat([q_i, k_j], axis=0))


class FeedForward(Module):
    def __init__(self, c: int, rng: np.random.Generator):
        super().__init__()
        self.add_module("0", Conv2d(c, c, rng), attr="conv1")
        self.add_module("1", Conv2d(c, c, rng), attr="conv2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(ag.relu(self.conv1(x)))


class ConvAttentionLayer(Module):
    """One layer: conv self-attention then a conv feed-forward, each with a residual."""

    def __init__(self, c: int, rng: np.random.Generator):
        super().__init__()
        self.c = c
        self.qnet = Conv2d(c, 1, rng)
        self.knet = Conv2d(c, 1, rng)
        self.vnet = Conv2d(c, c, rng)
        self.anet = ScoreNet(rng)
        self.ffn = FeedForward(c, rng)

    def zero_(self) -> "ConvAttentionLayer":
        """Zero the value and feed-forward output paths so the layer is the identity."""
        self.vnet.zero_()
        self.ffn.conv2.zero_()
        return self

    def attention_weights(self, x: Tensor) -> Tensor:
        """Per-pixel softmax weights ``[M, M, h, w]``; row i sums to 1 over j."""
        m, _, h, w = x.shape
        q = self.qnet(x)
        k = self.knet(x)
        with ag.op_scope("attention"):
            ii, jj = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
            pairs = ag.concat([q[ii.ravel()], k[jj.ravel()]], axis=1)
            logits = self.anet(pairs).reshape(m, m, h, w)
            return ag.softmax(logits, axis=1)

    def attend(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[0] < 1:
            raise ShapeError("attention needs a non-empty [M, c, h, w] sequence", shape=x.shape)
        weights = self.attention_weights(x)
        v = self.vnet(x)
        with ag.op_scope("attention"):
            return ag.einsum("ijhw,jchw->ichw", weights, v)

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.add(x, self.attend(x))
        return ag.add(y, self.ffn(y))


def conv_self_attention(seq: FeatureSequence, layer: ConvAttentionLayer) -> FeatureSequence:
    if len(seq) == 0:
        raise ShapeError("conv self-attention over an empty sequence")
    return FeatureSequence(layer.attend(seq.maps), seq.positions)


def transformer_layer(seq: FeatureSequence, layer: ConvAttentionLayer) -> FeatureSequence:
    return FeatureSequence(layer(seq.maps), seq.positions)


class ConvTransformer(Module):
    """A stack of identical-shape layers, registered as ``L0``, ``L1``, ..."""

    def __init__(self, c: int, depth: int, rng: np.random.Generator):
        super().__init__()
        if depth < 1:
            raise ShapeError("transformer depth must be at least 1", depth=depth)
        self.layers = [self.add_module(f"L{i}", ConvAttentionLayer(c, rng)) for i in range(depth)]

    @property
    def depth(self) -> int:
        return len(self.layers)

    def __call__(self, seq: FeatureSequence) -> FeatureSequence:
        x = seq.maps
        for layer in self.layers:
            x = layer(x)
        return FeatureSequence(x, seq.positions)


def encode(p_unmasked: FeatureSequence, encoder: ConvTransformer) -> FeatureSequence:
    """Temporal encoder over the retained frames only."""
    if len(p_unmasked) == 0:
        raise ShapeError("encoder received no retained frames")
    with ag.op_scope("encoder"):
        return encoder(p_unmasked)


def decode(t_full: FeatureSequence, decoder: ConvTransformer) -> FeatureSequence:
    """Temporal decoder over the completed full-length sequence."""
    with ag.op_scope("decoder"):
        return decoder(t_full)
