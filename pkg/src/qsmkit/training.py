"""Weighted multi-output loss, schedule, init, and the training loop."""

import time
from dataclasses import dataclass, field

import numpy as np

from .dipole import NoiseConfig, Volume, add_noise
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .ir2unet import INIT_STD, ir2_forward
from .tensor import Tensor, adam_step, backward, mse, zero_grad


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    loss_lambda: float = 0.5
    noise: NoiseConfig = field(default_factory=lambda: NoiseConfig((0.0, 0.01)))
    seed: int = 0
    checkpoint_every: int = 1
    lr_override: float | None = None  # None -> the standard 1e-3/1e-4/1e-5 schedule

    def __post_init__(self):
        if not 1 <= self.epochs <= 100:
            raise ConfigError(f"epochs must be in [1, 100], got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.loss_lambda <= 1.0:
            raise ConfigError(f"lambda must be in (0, 1], got {self.loss_lambda}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass
class TrainHistory:
    """Per-step records (step, epoch, lr, loss) plus per-epoch summaries."""

    steps: list = field(default_factory=list)
    epoch_mean_loss: list = field(default_factory=list)
    epoch_lr: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)


def loss_weights(t_total, lam):
    """Per-iteration weights lam^(T-t) for t = 1..T (later outputs weigh more)."""
    return [lam ** (t_total - t) for t in range(1, t_total + 1)]


def compute_loss(latent, chi_final, chi_gt, lam):
    """sum_t lam^(T-t) * MSE(chi_t, gt) + MSE(chi_final, gt)."""
    if not latent:
        raise UsageError("compute_loss needs at least one latent output")
    for x in list(latent) + [chi_final]:
        if x.shape != chi_gt.shape:
            raise ShapeError(f"loss term shape {x.shape} != target {chi_gt.shape}")
    total = None
    for w, chi_t in zip(loss_weights(len(latent), lam), latent):
        term = mse(chi_t, chi_gt) * w
        total = term if total is None else total + term
    return total + mse(chi_final, chi_gt)


def lr_schedule(epoch):
    """Piecewise-constant rate: 1e-3 (1-30), 1e-4 (31-60), 1e-5 (61-100)."""
    if not isinstance(epoch, (int, np.integer)) or not 1 <= epoch <= 100:
        raise UsageError(f"epoch must be an integer in [1, 100], got {epoch}")
    if epoch <= 30:
        return 1e-3
    if epoch <= 60:
        return 1e-4
    return 1e-5


def init_weights(net, rng):
    """Draw every conv weight and bias from N(0, 0.01^2); reset BN state.

    Batch-norm affine parameters are set to gamma=1/beta=0 (a near-zero
    gamma would silence the whole network), running stats to (0, 1), and
    optimizer state is cleared.
    """
    for name, p in net.params.items():
        leaf = name.rsplit("/", 1)[1]
        if leaf in ("weight", "bias"):
            p.data = rng.normal(0.0, INIT_STD, p.data.shape).astype(p.data.dtype)
        elif leaf == "gamma":
            p.data = np.ones_like(p.data)
        elif leaf == "beta":
            p.data = np.zeros_like(p.data)
        p.adam_m = np.zeros_like(p.data)
        p.adam_v = np.zeros_like(p.data)
        p.step_count = 0
        p.tensor.grad = None
    for name in net.buffers:
        if name.endswith("running_mean"):
            net.buffers[name] = np.zeros_like(net.buffers[name])
        else:
            net.buffers[name] = np.ones_like(net.buffers[name])
    return net


def _epoch_rngs(seed, epoch):
    ss = np.random.SeedSequence(entropy=(int(seed), int(epoch)))
    shuffle_ss, noise_ss, dropout_ss = ss.spawn(3)
    return (
        np.random.default_rng(shuffle_ss),
        np.random.default_rng(noise_ss),
        np.random.default_rng(dropout_ss),
    )


def train_loop(dataset, net, cfg, checkpoint_fn=None, start_epoch=1, log_fn=None):
    """Seeded epochs of shuffle, noise-augment, forward, backward, Adam.

    ``dataset`` is a sequence of (field_patch, chi_patch) array pairs.
    Epoch RNG streams derive from (seed, epoch), so resuming from a
    checkpoint at an epoch boundary reproduces the straight-through run
    exactly.  Aborts on a non-finite loss.
    """
    if len(dataset) == 0:
        raise UsageError("training dataset is empty")
    d, h, w = dataset[0][0].shape
    if d % 8 or h % 8 or w % 8:
        raise ShapeError(f"patch extents {dataset[0][0].shape} must be divisible by 8")
    params = net.parameters()
    history = TrainHistory()
    step = 0
    for epoch in range(start_epoch, cfg.epochs + 1):
        lr = cfg.lr_override if cfg.lr_override is not None else lr_schedule(epoch)
        shuffle_rng, noise_rng, dropout_rng = _epoch_rngs(cfg.seed, epoch)
        order = shuffle_rng.permutation(len(dataset))
        t0 = time.perf_counter()
        epoch_losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            fields = []
            for i in idx:
                vol = Volume(dataset[i][0])
                fields.append(add_noise(vol, cfg.noise, noise_rng).values)
            x = Tensor(np.stack(fields)[:, None])
            gt = Tensor(np.stack([dataset[i][1] for i in idx])[:, None])
            chi_final, latents = ir2_forward(x, net, "train", dropout_rng)
            loss = compute_loss(latents, chi_final, gt, cfg.loss_lambda)
            val = float(loss.data)
            if not np.isfinite(val):
                raise NumericError(
                    f"non-finite loss {val} at step {step} (epoch {epoch}); aborting"
                )
            backward(loss)
            adam_step(params, lr)
            zero_grad(params)
            history.steps.append((step, epoch, lr, val))
            epoch_losses.append(val)
            step += 1
        history.epoch_mean_loss.append(float(np.mean(epoch_losses)))
        history.epoch_lr.append(lr)
        history.epoch_seconds.append(time.perf_counter() - t0)
        if log_fn is not None:
            log_fn(epoch, history.epoch_mean_loss[-1], lr)
        if checkpoint_fn is not None and (
            epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs
        ):
            checkpoint_fn(epoch, net)
    return net, history
