"""Classifier building blocks, tied-weight denoising autoencoders, and the
fortified-network assembly that routes selected hidden states through DAEs.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, activation, conv2d


class ConfigError(ValueError):
    """Invalid layer / network configuration."""


class SequencingError(RuntimeError):
    """Branches run out of order (adversarial before clean, batch mismatch)."""


def _uniform_init(rng: np.random.Generator, shape, fan_in: int,
                  fan_out: int, scheme: str) -> np.ndarray:
    if scheme == "he":
        limit = np.sqrt(6.0 / fan_in)
    elif scheme == "glorot":
        limit = np.sqrt(6.0 / (fan_in + fan_out))
    else:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    return rng.uniform(-limit, limit, size=shape)


def init_for_activation(kind: str) -> str:
    """He-uniform for (leaky) relu, Glorot-uniform for tanh."""
    return "glorot" if kind == "tanh" else "he"


# ---------------------------------------------------------------------------
# plain layers
# ---------------------------------------------------------------------------

class Dense:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 init: str = "he"):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(_uniform_init(rng, (in_dim, out_dim), in_dim,
                                           out_dim, init), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def output_shape(self, shape):
        if shape != (self.in_dim,):
            raise ConfigError(f"Dense expects input shape ({self.in_dim},), got {shape}")
        return (self.out_dim,)


class Conv2d:
    def __init__(self, in_channels: int, filters: int, kernel: int,
                 stride: int, padding: int, rng: np.random.Generator,
                 init: str = "he"):
        self.in_channels = in_channels
        self.filters = filters
        self.kernel_size = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        fan_out = filters * kernel * kernel
        self.weight = Tensor(
            _uniform_init(rng, (filters, in_channels, kernel, kernel),
                          fan_in, fan_out, init),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(filters), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, self.stride, self.padding)
        return out + self.bias.reshape(1, self.filters, 1, 1)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ConfigError(
                f"Conv2d expects input shape ({self.in_channels}, H, W), got {shape}"
            )
        c, h, w = shape
        k, s, p = self.kernel_size, self.stride, self.padding
        if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
            raise ConfigError(f"conv output extent not integral for input {shape}")
        return (self.filters, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)


class Activation:
    def __init__(self, kind: str, slope: float = 0.01):
        self.kind = kind
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return activation(x, self.kind, self.slope)

    def params(self):
        return []

    def output_shape(self, shape):
        return shape


class Flatten:
    def __call__(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], -1)

    def params(self):
        return []

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


# ---------------------------------------------------------------------------
# denoising autoencoders (single hidden layer, tied weights)
# ---------------------------------------------------------------------------

class DenseDAE:
    """Tied-weight single-hidden-layer DAE on flat activations.

    decoded = act(noisy @ W + b_enc) @ W.T + b_dec; only the biases are free
    on the decode side, the decoder weight is the transpose of the encoder's.
    """

    def __init__(self, width: int, bottleneck: int, sigma: float,
                 activation_kind: str, rng: np.random.Generator):
        self.width = width
        self.bottleneck = bottleneck
        self.sigma = sigma
        self.activation_kind = activation_kind
        scheme = init_for_activation(activation_kind)
        self.weight = Tensor(_uniform_init(rng, (width, bottleneck), width,
                                           bottleneck, scheme), requires_grad=True)
        self.enc_bias = Tensor(np.zeros(bottleneck), requires_grad=True)
        self.dec_bias = Tensor(np.zeros(width), requires_grad=True)

    @property
    def decoder_weight(self) -> np.ndarray:
        # transpose view, never a copy: tying holds under any update
        return self.weight.data.T

    def input_shape(self):
        return (self.width,)

    def forward(self, h: Tensor, mode: str, rng: np.random.Generator | None):
        if h.shape[1:] != (self.width,):
            raise ConfigError(
                f"DAE expects batch x {self.width} input, got {h.shape}"
            )
        noisy = _inject_noise(h, self.sigma, mode, rng)
        encoded = activation(noisy @ self.weight + self.enc_bias,
                             self.activation_kind)
        decoded = encoded @ self.weight.T + self.dec_bias
        return decoded, decoded - h

    def params(self):
        return [("weight", self.weight), ("enc_bias", self.enc_bias),
                ("dec_bias", self.dec_bias)]


class ConvDAE:
    """Tied-kernel convolutional DAE: one 5x5 stride-1 same-padding encoder
    conv, decoder is its transposed counterpart (channel-swapped, spatially
    flipped kernel) with a free bias."""

    KERNEL = 5
    PADDING = 2

    def __init__(self, channels: int, filters: int, sigma: float,
                 activation_kind: str, rng: np.random.Generator):
        self.channels = channels
        self.filters = filters
        self.sigma = sigma
        self.activation_kind = activation_kind
        k = self.KERNEL
        scheme = init_for_activation(activation_kind)
        self.weight = Tensor(
            _uniform_init(rng, (filters, channels, k, k),
                          channels * k * k, filters * k * k, scheme),
            requires_grad=True,
        )
        self.enc_bias = Tensor(np.zeros(filters), requires_grad=True)
        self.dec_bias = Tensor(np.zeros(channels), requires_grad=True)

    def input_shape(self):
        return None  # any (channels, H, W)

    def forward(self, h: Tensor, mode: str, rng: np.random.Generator | None):
        if h.data.ndim != 4 or h.shape[1] != self.channels:
            raise ConfigError(
                f"ConvDAE expects batch x {self.channels} x H x W input, got {h.shape}"
            )
        noisy = _inject_noise(h, self.sigma, mode, rng)
        pre = conv2d(noisy, self.weight, 1, self.PADDING)
        encoded = activation(pre + self.enc_bias.reshape(1, self.filters, 1, 1),
                             self.activation_kind)
        tied = self.weight.transpose((1, 0, 2, 3)).flip((2, 3))
        decoded = conv2d(encoded, tied, 1, self.PADDING)
        decoded = decoded + self.dec_bias.reshape(1, self.channels, 1, 1)
        return decoded, decoded - h

    def params(self):
        return [("weight", self.weight), ("enc_bias", self.enc_bias),
                ("dec_bias", self.dec_bias)]


def _inject_noise(h: Tensor, sigma: float, mode: str,
                  rng: np.random.Generator | None) -> Tensor:
    if mode == "eval" or sigma == 0.0:
        return h
    if mode != "train":
        raise ValueError(f"unknown DAE mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode DAE forward needs an rng for the noise draw")
    return h + Tensor(rng.normal(0.0, sigma, size=h.shape))


def dae_forward(dae, h: Tensor, mode: str, rng=None):
    """Run a DAE: (decoded, reconstruction vector decoded - h)."""
    return dae.forward(h, mode, rng)


# ---------------------------------------------------------------------------
# fortified network
# ---------------------------------------------------------------------------

class DAEConfig:
    def __init__(self, sigma: float = 0.01, activation_kind: str = "leaky_relu",
                 bottleneck_factor: float = 0.5):
        self.sigma = sigma
        self.activation_kind = activation_kind
        self.bottleneck_factor = bottleneck_factor


class FortifiedLayer:
    """A DAE attached after base layer `position`, with per-batch caches of
    the clean/adversarial hidden states and their decodings."""

    def __init__(self, dae, position: int):
        self.dae = dae
        self.position = position
        self.clean_h = None
        self.clean_decoded = None
        self.adv_h = None
        self.adv_decoded = None

    def clear(self):
        self.clean_h = self.clean_decoded = None
        self.adv_h = self.adv_decoded = None


def reconstruction_loss(layer: FortifiedLayer) -> Tensor:
    """Mean over the batch of the squared reconstruction error on clean h."""
    if layer.clean_h is None:
        raise SequencingError("clean branch has not run for this batch")
    diff = layer.clean_decoded - layer.clean_h
    return (diff * diff).sum() / float(diff.shape[0])


def adversarial_reconstruction_loss(layer: FortifiedLayer) -> Tensor:
    """Squared error of the adversarial decoding against the clean target."""
    if layer.clean_h is None:
        raise SequencingError("clean branch has not run for this batch")
    if layer.adv_decoded is None:
        raise SequencingError("adversarial branch has not run for this batch")
    if layer.adv_decoded.shape != layer.clean_h.shape:
        raise SequencingError(
            f"batch mismatch between branches: adversarial "
            f"{layer.adv_decoded.shape} vs clean {layer.clean_h.shape}"
        )
    diff = layer.adv_decoded - layer.clean_h
    return (diff * diff).sum() / float(diff.shape[0])


class FortifiedNetwork:
    """Base classifier layers with DAEs spliced in after selected positions.

    `forward` has three branches: 'clean' (train-mode noise, caches h_k and
    decodings for the reconstruction losses), 'adversarial' (train-mode noise,
    caches decodings whose loss targets the cached clean h_k), and 'eval'
    (no noise, no caching, deterministic).
    """

    def __init__(self, layers, fortified: dict):
        self.layers = list(layers)
        self.fortified = dict(sorted(fortified.items()))

    def forward(self, x: Tensor, branch: str = "eval",
                rng: np.random.Generator | None = None) -> Tensor:
        if branch not in ("clean", "adversarial", "eval"):
            raise ValueError(f"unknown branch {branch!r}")
        if branch == "adversarial":
            for fl in self.fortified.values():
                if fl.clean_h is None:
                    raise SequencingError(
                        "adversarial branch called before clean branch"
                    )
                if fl.clean_h.shape[0] != x.shape[0]:
                    raise SequencingError(
                        f"adversarial batch size {x.shape[0]} does not match "
                        f"clean batch size {fl.clean_h.shape[0]}"
                    )
        h = x if isinstance(x, Tensor) else Tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            fl = self.fortified.get(i)
            if fl is None:
                continue
            mode = "eval" if branch == "eval" else "train"
            decoded, _ = fl.dae.forward(h, mode, rng)
            if branch == "clean":
                fl.clean_h = h
                fl.clean_decoded = decoded
                fl.adv_h = fl.adv_decoded = None
            elif branch == "adversarial":
                fl.adv_h = h
                fl.adv_decoded = decoded
            h = decoded
        return h

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x, branch="eval")

    def clear_caches(self):
        for fl in self.fortified.values():
            fl.clear()

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params():
                out.append((f"layer{i}.{name}", p))
        for pos, fl in self.fortified.items():
            for name, p in fl.dae.params():
                out.append((f"dae{pos}.{name}", p))
        return out

    def base_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for name, p in layer.params():
                out.append((f"layer{i}.{name}", p))
        return out


def fortify(base_layers, positions, dae_config: DAEConfig, input_shape,
            rng: np.random.Generator) -> FortifiedNetwork:
    """Decorate `base_layers` with DAEs after each index in `positions`.

    DAE shapes are inferred by tracing `input_shape` (without batch dim)
    through the base layers; base parameters are shared, not copied.
    """
    base_layers = list(base_layers)
    positions = sorted(set(positions))
    for pos in positions:
        if not 0 <= pos < len(base_layers):
            raise ConfigError(
                f"fortified position {pos} out of range for {len(base_layers)} layers"
            )
    fortified = {}
    shape = tuple(input_shape)
    for i, layer in enumerate(base_layers):
        shape = layer.output_shape(shape)
        if i not in positions:
            continue
        if len(shape) == 1:
            width = shape[0]
            bottleneck = max(1, int(round(width * dae_config.bottleneck_factor)))
            dae = DenseDAE(width, bottleneck, dae_config.sigma,
                           dae_config.activation_kind, rng)
        elif len(shape) == 3:
            channels = shape[0]
            filters = max(1, int(round(channels * dae_config.bottleneck_factor)))
            dae = ConvDAE(channels, filters, dae_config.sigma,
                          dae_config.activation_kind, rng)
        else:
            raise ConfigError(f"cannot fortify a layer with output shape {shape}")
        fortified[i] = FortifiedLayer(dae, i)
    return FortifiedNetwork(base_layers, fortified)
