"""Training loop with seeded, bit-reproducible stepping.

Gradient computation and parameter updates are strictly sequential; the
only randomness is the seeded batch shuffle and reparameterisation noise,
so a (seed, config, corpus) triple always produces the same weights.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ValidationError
from .kernels import grad_check
from .model import VAE, build, save_weights

METRICS_FIELDS = ("step", "total", "recon", "kl", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    seed: int  # mandatory: reproducibility is part of the contract
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 2000
    optimizer: str = "adam"  # adam | sgd_momentum
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 500
    precision: str = "f32"  # f32 | f64

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.steps < 0:
            raise ValidationError("rates and sizes must be positive")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValidationError(f"unknown optimizer '{self.optimizer}'")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # list of (name, value, grad)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(v) for _, v, _ in params]
        self.v = [np.zeros_like(v) for _, v, _ in params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, (_, value, grad) in enumerate(self.params):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * grad
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * grad * grad
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(value.dtype)

    def state(self):
        return {"t": np.array(self.t),
                **{f"m{i}": m for i, m in enumerate(self.m)},
                **{f"v{i}": v for i, v in enumerate(self.v)}}


class SGDMomentum:
    def __init__(self, params, lr, momentum=0.9):
        self.params = params
        self.lr, self.momentum = lr, momentum
        self.vel = [np.zeros_like(v) for _, v, _ in params]

    def step(self):
        for i, (_, value, grad) in enumerate(self.params):
            self.vel[i] = self.momentum * self.vel[i] - self.lr * grad
            value += self.vel[i].astype(value.dtype)

    def state(self):
        return {f"vel{i}": v for i, v in enumerate(self.vel)}


def _make_optimizer(cfg, params):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return SGDMomentum(params, cfg.learning_rate, cfg.momentum)


@dataclass
class TrainResult:
    vae: VAE
    metrics: list = field(default_factory=list)  # dicts with METRICS_FIELDS
    checkpoint_path: str | None = None


def _write_metrics(path, metrics):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        writer.writerows(metrics)


def train(model_config, corpus, train_config, out_dir=None, log_every=None):
    """Train a VAE on a (N, C, 32, 32) tile corpus.

    Writes `metrics.csv` and interval checkpoints under `out_dir` when
    given. A non-finite loss aborts the run; the last interval checkpoint
    stays on disk untouched.
    """
    corpus = np.asarray(corpus)
    if corpus.ndim != 4:
        raise ValidationError("corpus must be a (N,C,H,W) tile stack")
    if corpus.shape[0] < train_config.batch_size:
        raise ValidationError(
            f"corpus holds {corpus.shape[0]} tiles < batch_size {train_config.batch_size}")

    vae = build(model_config, seed=train_config.seed, dtype=train_config.dtype)
    if train_config.steps == 0:
        return TrainResult(vae=vae)

    rng = np.random.default_rng(train_config.seed)
    optimizer = _make_optimizer(train_config, vae.param_tensors())
    n = corpus.shape[0]
    order = rng.permutation(n)
    cursor = 0
    metrics = []
    ckpt_path = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for step in range(1, train_config.steps + 1):
        if cursor + train_config.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        batch = corpus[order[cursor:cursor + train_config.batch_size]]
        cursor += train_config.batch_size
        eps = rng.standard_normal((batch.shape[0], model_config.latent_dim))
        t0 = time.perf_counter()
        try:
            total, recon, kl = vae.loss_and_grad(batch.astype(train_config.dtype), eps)
        except NumericError as e:
            if out_dir:
                _write_metrics(os.path.join(out_dir, "metrics.csv"), metrics)
            raise NumericError(
                f"training aborted at step {step}: {e}; "
                f"last checkpoint: {ckpt_path or 'none'}") from e
        optimizer.step()
        vae.training_steps = step
        metrics.append({"step": step, "total": total, "recon": recon, "kl": kl,
                        "wall_ms": (time.perf_counter() - t0) * 1000.0})
        if log_every and step % log_every == 0:
            print(f"step {step:>6}  total {total:10.4f}  recon {recon:10.4f}  kl {kl:8.4f}")
        if out_dir and train_config.checkpoint_interval \
                and step % train_config.checkpoint_interval == 0:
            ckpt_path = os.path.join(out_dir, f"checkpoint_{step:06d}.rvae")
            save_weights(vae, ckpt_path)
            np.savez(ckpt_path + ".opt.npz", **optimizer.state())

    if out_dir:
        _write_metrics(os.path.join(out_dir, "metrics.csv"), metrics)
    return TrainResult(vae=vae, metrics=metrics, checkpoint_path=ckpt_path)


def verify_gradients(model_config, tolerance=1e-4, seed=0, probes=2):
    """Gradient-check the assembled VAE at 64-bit on one random tile."""
    vae = build(model_config, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    tile = rng.random((1, model_config.in_channels,
                       model_config.tile_size, model_config.tile_size))
    eps = rng.standard_normal((1, model_config.latent_dim))

    class _Net:
        def loss(self, x):
            return vae.loss(x, eps)

        def loss_and_grad(self, x):
            return vae.loss_and_grad(x, eps)[0]

        def param_tensors(self):
            return vae.param_tensors()

    return grad_check(_Net(), tile, tolerance=tolerance,
                      rng=np.random.default_rng(seed + 1), probes=probes)
