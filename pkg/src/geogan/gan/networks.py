"""Generator and discriminator networks.

Generator: U-Net. ``depth`` stride-2 4x4 conv blocks down, the mirror image up
with skip connections, sigmoid output in [0, 1]. Hidden decoder blocks carry
dropout, which is the model's only noise source.

Discriminator: PatchGAN. For input side S and base width c:

    ======  ==========================  =============  ========
    block   op                          channels       side
    ======  ==========================  =============  ========
    1       conv 4x4 s2, leaky          c              S/2
    2       conv 4x4 s2, IN, leaky      2c             S/4
    3       conv 4x4 s2, IN, leaky      4c             S/8
    4       conv 3x3 s1, IN, leaky      8c (features)  S/8
    head    conv 3x3 s1                 1 (logits)     S/8
    ======  ==========================  =============  ========

The bottleneck feature vector is block 4 average-pooled over space, so its
length is ``8 * base_width``. At S=64 the logit grid is 8x8.
"""
from __future__ import annotations

from typing import List, Optional

import numpy as np

from ..autodiff import functional as F
from ..autodiff.nn import Conv2d, ConvTranspose2d, Module
from ..autodiff.tensor import Tensor
from ..exceptions import ValidationError

D_DOWNSAMPLING = 3


def encoder_widths(base: int, depth: int) -> List[int]:
    return [base * min(2 ** i, 8) for i in range(depth)]


class UNetGenerator(Module):
    def __init__(self, in_channels: int, base_width: int = 16, depth: int = 4,
                 dropout: float = 0.2, image_size: int = 64, seed: int = 0):
        super().__init__()
        if depth < 2:
            raise ValidationError("generator depth must be >= 2")
        if image_size % (2 ** depth):
            raise ValidationError(f"image size {image_size} not divisible by 2**{depth}")
        if not 0.0 <= dropout < 1.0:
            raise ValidationError("dropout must be in [0, 1)")
        rng = np.random.default_rng(seed)
        self.in_channels, self.depth, self.dropout = in_channels, depth, dropout
        self.image_size = image_size
        widths = encoder_widths(base_width, depth)
        self.widths = widths
        self.down = [Conv2d(in_channels if i == 0 else widths[i - 1], widths[i], 4, 2, 1, rng=rng)
                     for i in range(depth)]
        up = []
        for i in range(depth - 1, 0, -1):
            c_in = widths[i] if i == depth - 1 else 2 * widths[i]
            up.append(ConvTranspose2d(c_in, widths[i - 1], 4, 2, 1, rng=rng))
        self.up = up
        self.out = ConvTranspose2d(2 * widths[0], 1, 4, 2, 1, rng=rng)
        self.noise_rng = np.random.default_rng(seed)

    def reseed_noise(self, seed: int) -> None:
        self.noise_rng = np.random.default_rng(seed)

    def init_output_bias(self, prior: float) -> None:
        """Start the sigmoid output at the target mean instead of 0.5."""
        p = min(max(prior, 1e-3), 1 - 1e-3)
        self.out.bias.data[...] = np.float32(np.log(p / (1 - p)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValidationError(f"generator expects (N, {self.in_channels}, H, W), got {x.shape}")
        if x.shape[2] % (2 ** self.depth) or x.shape[3] % (2 ** self.depth):
            raise ValidationError(f"input side {x.shape[2:]} not divisible by 2**{self.depth}")
        skips = []
        h = x
        for i, conv in enumerate(self.down):
            h = conv(h)
            if i > 0 and h.shape[2] > 1:
                h = F.instance_norm(h)
            h = F.leaky_relu(h)
            skips.append(h)
        for j, deconv in enumerate(self.up):
            h = F.instance_norm(deconv(h))
            h = F.dropout(h, self.dropout, self.noise_rng, self.training)
            h = F.relu(h)
            h = F.concat([h, skips[self.depth - 2 - j]], axis=1)
        return F.sigmoid(self.out(h))


class PatchDiscriminator(Module):
    def __init__(self, in_channels: int, base_width: int = 16, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        c = base_width
        self.in_channels = in_channels
        self.c1 = Conv2d(in_channels, c, 4, 2, 1, rng=rng)
        self.c2 = Conv2d(c, 2 * c, 4, 2, 1, rng=rng)
        self.c3 = Conv2d(2 * c, 4 * c, 4, 2, 1, rng=rng)
        self.c4 = Conv2d(4 * c, 8 * c, 3, 1, 1, rng=rng)
        self.head = Conv2d(8 * c, 1, 3, 1, 1, rng=rng)
        self.feature_dim = 8 * c

    def bottleneck(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValidationError(f"discriminator expects (N, {self.in_channels}, H, W), got {x.shape}")
        if x.shape[2] % (2 ** D_DOWNSAMPLING) or x.shape[3] % (2 ** D_DOWNSAMPLING):
            raise ValidationError("discriminator input side must be divisible by 8")
        h = F.leaky_relu(self.c1(x))
        h = F.leaky_relu(F.instance_norm(self.c2(h)))
        h = F.leaky_relu(F.instance_norm(self.c3(h)))
        return F.leaky_relu(F.instance_norm(self.c4(h)))

    def forward(self, x: Tensor, features: Optional[list] = None) -> Tensor:
        h = self.bottleneck(x)
        if features is not None:
            features.append(h)
        return self.head(h)

    def features(self, x: Tensor) -> Tensor:
        """Spatially averaged bottleneck activations, shape (N, feature_dim)."""
        return F.mean(self.bottleneck(x), axis=(2, 3))
