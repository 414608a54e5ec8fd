"""VAE assembly: encoder/decoder built from the kernel layers.

The encoder is a stack of stride-2 downsampling blocks (conv -> BN ->
leaky ReLU), optionally followed per scale by a residual block of
channel-preserving convs, then a single fully connected layer emitting
mean and log-variance of the latent Gaussian. The decoder mirrors it:
linear, reshape, per scale a nearest-neighbour 2x upsample -> conv -> BN
-> leaky ReLU (plus the residual block), and a final conv squashed to
[0,1] with a logistic. Transpose convolutions are deliberately avoided.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import (ChecksumError, DimensionError, ShapeMismatchError,
                     ValidationError, VersionError)

LOG_VAR_CLAMP = 10.0  # keeps exp(log_var) sane early in training
MAGIC = b"RVAE"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 10
    tile_size: int = 32
    hidden_channels: tuple = (16, 32, 64)
    extra_depth: int = 0
    latent_dim: int = 128
    leaky_slope: float = 0.01
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_channels", tuple(self.hidden_channels))
        if not self.hidden_channels:
            raise ValidationError("hidden_channels must be non-empty")
        if self.latent_dim < 1:
            raise ValidationError("latent_dim must be >= 1")
        if self.tile_size % (2 ** len(self.hidden_channels)) != 0:
            raise ValidationError(
                f"tile_size {self.tile_size} not divisible by 2^{len(self.hidden_channels)}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValidationError("leaky_slope must lie in (0,1)")

    @property
    def final_spatial(self):
        return self.tile_size // (2 ** len(self.hidden_channels))

    @property
    def flat_features(self):
        return self.hidden_channels[-1] * self.final_spatial ** 2

    def decoder_channel_pairs(self):
        """Conv (in, out) channel pairs for the upsampling blocks."""
        rev = list(reversed(self.hidden_channels))
        outs = rev[1:] + [rev[-1]]
        return list(zip(rev, outs))


PRESETS = {
    "small": ModelConfig(hidden_channels=(16, 32, 64), extra_depth=0),
    "medium": ModelConfig(hidden_channels=(32, 64, 128), extra_depth=0),
    "large": ModelConfig(hidden_channels=(32, 64, 128), extra_depth=2),
}


def _conv_params(cin, cout):
    return cin * cout * 9 + cout


def count_encoder_parameters(config):
    total = 0
    prev = config.in_channels
    for h in config.hidden_channels:
        total += _conv_params(prev, h) + 2 * h
        total += config.extra_depth * (_conv_params(h, h) + 2 * h)
        prev = h
    total += config.flat_features * 2 * config.latent_dim + 2 * config.latent_dim
    return total


def count_decoder_parameters(config):
    total = config.latent_dim * config.flat_features + config.flat_features
    for cin, cout in config.decoder_channel_pairs():
        total += _conv_params(cin, cout) + 2 * cout
        total += config.extra_depth * (_conv_params(cout, cout) + 2 * cout)
    total += _conv_params(config.hidden_channels[0], config.in_channels)
    return total


def count_parameters(config):
    """Learnable parameter count (conv/linear weights+biases, BN affine)."""
    return count_encoder_parameters(config) + count_decoder_parameters(config)


@dataclass
class LatentCode:
    """Per-tile diagonal Gaussian: mean and log-variance, both length n."""
    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu)
        self.log_var = np.asarray(self.log_var)
        if self.mu.shape != self.log_var.shape or self.mu.ndim != 1:
            raise DimensionError("mu and log_var must be 1-D vectors of equal length")
        K.check_finite(self.mu, "latent mu")
        K.check_finite(self.log_var, "latent log_var")

    @property
    def n(self):
        return self.mu.shape[0]


def reparameterize(code, rng):
    """Sample z = mu + exp(0.5 * log_var) * eps with eps ~ N(0, I)."""
    eps = rng.standard_normal(code.mu.shape)
    return code.mu + np.exp(0.5 * code.log_var) * eps


def elbo_loss(tile, reconstruction, code, beta=1.0):
    """Sum-of-squared-errors reconstruction plus beta-weighted KL to N(0,I).

    Returns (total, recon_term, kl_term).
    """
    if tile.shape != reconstruction.shape:
        raise DimensionError(f"tile {tile.shape} vs reconstruction {reconstruction.shape}")
    recon_term = float(((reconstruction - tile) ** 2).sum())
    kl_term = kl_standard_normal(code.mu, code.log_var)
    total = recon_term + beta * kl_term
    if not np.isfinite(total):
        raise K.NumericError("non-finite ELBO loss")
    return total, recon_term, kl_term


def kl_standard_normal(mu, log_var):
    """KL(N(mu, exp(log_var)) || N(0, I)) for diagonal Gaussians."""
    return float(-0.5 * np.sum(1.0 + log_var - mu ** 2 - np.exp(log_var)))


class VAE:
    """Encoder/decoder pair plus the serialisable parameter bundle.

    Instances are the unit of persistence ("weights bundle"): `save` /
    `load_weights` round-trip every parameter and batch-norm buffer.
    """

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = dtype
        self.training_steps = 0
        rng = np.random.default_rng(seed)
        self.encoder = self._build_encoder(config, rng, dtype)
        self.decoder = self._build_decoder(config, rng, dtype)

    @staticmethod
    def _block(cin, cout, stride, config, rng, dtype):
        return [
            K.Conv2d(cin, cout, stride=stride, pad=1, rng=rng, dtype=dtype),
            K.BatchNorm2d(cout, eps=config.bn_epsilon, momentum=config.bn_momentum, dtype=dtype),
            K.LeakyReLU(config.leaky_slope),
        ]

    @classmethod
    def _residual(cls, ch, config, rng, dtype):
        inner = []
        for _ in range(config.extra_depth):
            inner += cls._block(ch, ch, 1, config, rng, dtype)
        return K.Residual(inner)

    @classmethod
    def _build_encoder(cls, config, rng, dtype):
        layers = []
        prev = config.in_channels
        for h in config.hidden_channels:
            layers += cls._block(prev, h, 2, config, rng, dtype)
            if config.extra_depth:
                layers.append(cls._residual(h, config, rng, dtype))
            prev = h
        layers.append(K.Flatten())
        layers.append(K.Linear(config.flat_features, 2 * config.latent_dim, rng=rng, dtype=dtype))
        return layers

    @classmethod
    def _build_decoder(cls, config, rng, dtype):
        s = config.final_spatial
        layers = [
            K.Linear(config.latent_dim, config.flat_features, rng=rng, dtype=dtype),
            K.Reshape((config.hidden_channels[-1], s, s)),
        ]
        for cin, cout in config.decoder_channel_pairs():
            layers.append(K.UpsampleNearest2x())
            layers += cls._block(cin, cout, 1, config, rng, dtype)
            if config.extra_depth:
                layers.append(cls._residual(cout, config, rng, dtype))
        layers.append(K.Conv2d(config.hidden_channels[0], config.in_channels,
                               stride=1, pad=1, rng=rng, dtype=dtype))
        layers.append(K.Sigmoid())
        return layers

    # -- parameter/bundle plumbing ------------------------------------------

    def param_tensors(self):
        out = []
        for prefix, layers in (("enc", self.encoder), ("dec", self.decoder)):
            for i, layer in enumerate(layers):
                for name, value, grad in layer.params():
                    out.append((f"{prefix}.{i}.{name}", value, grad))
        return out

    def state_items(self):
        """Parameters plus BN running stats, in fixed serialisation order."""
        out = []
        for prefix, layers in (("enc", self.encoder), ("dec", self.decoder)):
            for i, layer in enumerate(layers):
                for name, value, _ in layer.params():
                    out.append((f"{prefix}.{i}.{name}", value))
                for name, value in layer.buffers():
                    out.append((f"{prefix}.{i}.{name}", value))
        return out

    def num_parameters(self):
        return sum(v.size for _, v, _ in self.param_tensors())

    def to_dtype(self, dtype):
        """Copy of this model with all state cast to `dtype`."""
        clone = VAE(self.config, seed=self.seed, dtype=dtype)
        clone.training_steps = self.training_steps
        for (_, src), (_, dst) in zip(self.state_items(), clone.state_items()):
            dst[...] = src.astype(dtype)
        return clone

    # -- forward paths -------------------------------------------------------

    def _validate_tiles(self, tiles, tolerance=1e-4):
        tiles = K.as_tensor_map(tiles, dtype=self.dtype)
        c, t = self.config.in_channels, self.config.tile_size
        if tiles.shape[1:] != (c, t, t):
            raise DimensionError(f"expected (N,{c},{t},{t}) tiles, got {tiles.shape}")
        if tiles.min() < -tolerance or tiles.max() > 1.0 + tolerance:
            raise ValidationError("tiles must be normalized to [0,1] before encoding")
        return tiles

    def encode_raw(self, tiles, mode="infer"):
        """Batched encode: (N,C,T,T) -> (mu, log_var), each (N, n)."""
        tiles = self._validate_tiles(tiles)
        h = K.run_forward(self.encoder, tiles, mode)
        n = self.config.latent_dim
        mu, log_var = h[:, :n], np.clip(h[:, n:], -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        K.check_finite(mu, "encoded mu")
        return mu, log_var

    def encode(self, tile, mode="infer"):
        """Single-tile encode returning a LatentCode."""
        if tile.ndim == 3:
            tile = tile[None]
        mu, log_var = self.encode_raw(tile, mode)
        return LatentCode(mu[0], log_var[0])

    def decode_raw(self, z, mode="infer"):
        z = np.atleast_2d(np.asarray(z, dtype=self.dtype))
        if z.shape[1] != self.config.latent_dim:
            raise DimensionError(f"latent length {z.shape[1]} != n={self.config.latent_dim}")
        return K.run_forward(self.decoder, z, mode)

    def decode(self, z, mode="infer"):
        return self.decode_raw(z, mode)

    # -- training-facing loss with analytic gradients -------------------------

    def loss_and_grad(self, tiles, eps=None, mode="train", accumulate=False):
        """Mean per-tile ELBO over the batch; fills parameter gradients.

        `eps` fixes the reparameterisation noise (shape (N, n)); required for
        deterministic gradient checks, sampled by the caller during training.
        """
        tiles = self._validate_tiles(tiles)
        batch = tiles.shape[0]
        n = self.config.latent_dim
        if eps is None:
            eps = np.zeros((batch, n), dtype=self.dtype)
        if not accumulate:
            K.zero_grads(self.encoder)
            K.zero_grads(self.decoder)

        h = K.run_forward(self.encoder, tiles, mode)
        mu, log_var_raw = h[:, :n], h[:, n:]
        clamp_mask = (log_var_raw > -LOG_VAR_CLAMP) & (log_var_raw < LOG_VAR_CLAMP)
        log_var = np.clip(log_var_raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        std = np.exp(0.5 * log_var)
        z = mu + std * eps
        recon = K.run_forward(self.decoder, z, mode)

        diff = recon - tiles
        recon_term = float((diff ** 2).sum()) / batch
        kl_term = float(-0.5 * np.sum(1.0 + log_var - mu ** 2 - np.exp(log_var))) / batch
        beta = self.config.beta
        total = recon_term + beta * kl_term
        if not np.isfinite(total):
            raise K.NumericError(
                f"non-finite loss (recon={recon_term}, kl={kl_term})")

        grad_recon = (2.0 / batch) * diff
        gz = K.run_backward(self.decoder, grad_recon)
        gmu = gz + (beta / batch) * mu
        glv = gz * eps * 0.5 * std + (beta / batch) * 0.5 * (np.exp(log_var) - 1.0)
        glv = np.where(clamp_mask, glv, 0.0)
        K.run_backward(self.encoder, np.concatenate([gmu, glv], axis=1))
        return total, recon_term, kl_term

    def loss(self, tiles, eps=None, mode="train"):
        """Loss without touching gradients (used by the gradient checker)."""
        tiles = self._validate_tiles(tiles)
        batch = tiles.shape[0]
        n = self.config.latent_dim
        if eps is None:
            eps = np.zeros((batch, n), dtype=self.dtype)
        h = K.run_forward(self.encoder, tiles, mode)
        mu = h[:, :n]
        log_var = np.clip(h[:, n:], -LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        z = mu + np.exp(0.5 * log_var) * eps
        recon = K.run_forward(self.decoder, z, mode)
        recon_term = float(((recon - tiles) ** 2).sum()) / batch
        kl_term = float(-0.5 * np.sum(1.0 + log_var - mu ** 2 - np.exp(log_var))) / batch
        return recon_term + self.config.beta * kl_term

    # -- persistence -----------------------------------------------------------

    def save(self, path):
        save_weights(self, path)


def build(config, seed=0, dtype=np.float32):
    """Fresh VAE with seeded Kaiming-style fan-in initialisation."""
    return VAE(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# Weight container: magic "RVAE", version, config block, shape table,
# float32 little-endian payload, CRC32 of the payload.
# ---------------------------------------------------------------------------

def _config_dict(vae):
    c = vae.config
    return {
        "in_channels": c.in_channels,
        "tile_size": c.tile_size,
        "hidden_channels": list(c.hidden_channels),
        "extra_depth": c.extra_depth,
        "latent_dim": c.latent_dim,
        "leaky_slope": c.leaky_slope,
        "bn_epsilon": c.bn_epsilon,
        "bn_momentum": c.bn_momentum,
        "beta": c.beta,
        "seed": vae.seed,
        "training_steps": vae.training_steps,
    }


def save_weights(vae, path):
    items = vae.state_items()
    header = {
        "config": _config_dict(vae),
        "tensors": [{"name": n, "shape": list(v.shape)} for n, v in items],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = io.BytesIO()
    for _, value in items:
        payload.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    payload = payload.getvalue()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def load_weights(path, dtype=np.float32):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise VersionError(f"{path}: not an RVAE weight container")
    version, = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported container version {version}")
    hlen, = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    off = 12 + hlen
    plen, = struct.unpack_from("<Q", raw, off)
    off += 8
    payload = raw[off:off + plen]
    if len(payload) != plen or len(raw) < off + plen + 4:
        raise ChecksumError(f"{path}: truncated payload")
    crc, = struct.unpack_from("<I", raw, off + plen)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{path}: payload CRC mismatch")

    cfg = header["config"]
    config = ModelConfig(
        in_channels=cfg["in_channels"], tile_size=cfg["tile_size"],
        hidden_channels=tuple(cfg["hidden_channels"]), extra_depth=cfg["extra_depth"],
        latent_dim=cfg["latent_dim"], leaky_slope=cfg["leaky_slope"],
        bn_epsilon=cfg["bn_epsilon"], bn_momentum=cfg["bn_momentum"], beta=cfg["beta"])
    vae = VAE(config, seed=cfg.get("seed", 0), dtype=dtype)
    vae.training_steps = cfg.get("training_steps", 0)

    expected = vae.state_items()
    table = header["tensors"]
    if len(table) != len(expected):
        raise ShapeMismatchError(f"{path}: tensor count {len(table)} != expected {len(expected)}")
    pos = 0
    for entry, (name, value) in zip(table, expected):
        if entry["name"] != name or tuple(entry["shape"]) != value.shape:
            raise ShapeMismatchError(
                f"{path}: tensor '{entry['name']}' shape {entry['shape']} does not match "
                f"config-implied '{name}' {list(value.shape)}")
        nbytes = value.size * 4
        if pos + nbytes > len(payload):
            raise ChecksumError(f"{path}: payload shorter than shape table implies")
        arr = np.frombuffer(payload, dtype="<f4", count=value.size, offset=pos)
        value[...] = arr.reshape(value.shape).astype(dtype)
        pos += nbytes
    if pos != len(payload):
        raise ShapeMismatchError(f"{path}: {len(payload) - pos} trailing payload bytes")
    return vae
