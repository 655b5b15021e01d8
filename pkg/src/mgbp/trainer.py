"""Training loops: L1-pyramid regression and alternating relativistic GAN.

A dataset is a sequence of high-resolution ``(3, H, W)`` images in [0, 255].
Training pairs are built on the fly: a random patch of an image is the
target, and its bicubic downscale-then-upscale is the network input.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ad
from . import graph as G
from . import perceptual as P
from .graph import ConfigError
from .tensor import bicubic_resize

log = logging.getLogger(__name__)

MODES = ("fidelity", "perceptual")


@dataclass(frozen=True)
class TrainConfig:
    scale_factor: int = 4
    batch_size: int = 16
    patch_size: int | None = None  # None -> 48 * scale_factor
    lr: float = 1e-4
    halving_interval: int = 200000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    max_steps: int = 1000
    flip_h: bool = True
    flip_v: bool = True
    rotate90: bool = True
    mode: str = "fidelity"
    validate_every: int = 100

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patch % self.scale_factor:
            raise ConfigError(
                f"patch size {self.patch} is not divisible by the scale factor "
                f"{self.scale_factor}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0 or self.halving_interval < 1:
            raise ConfigError("lr must be > 0 and halving_interval >= 1")
        if self.max_steps < 0 or self.validate_every < 1:
            raise ConfigError("max_steps must be >= 0 and validate_every >= 1")

    @property
    def patch(self):
        return 48 * self.scale_factor if self.patch_size is None else self.patch_size

    def to_dict(self):
        d = asdict(self)
        d["patch_size"] = self.patch
        return d


def lr_schedule(step, base=1e-4, interval=200000):
    """``base`` halved every ``interval`` steps."""
    return base * 2.0 ** (-(step // interval))


# -- Adam -----------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ad.ContractError(f"{name}: gradient {np.shape(g)} vs parameter {np.shape(p)}")
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        new_p[name] = p - lr * mhat / (np.sqrt(vhat) + eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)


# -- data -----------------------------------------------------------------

def degrade(hr, f):
    """Impaired input: bicubic downscale by ``f`` then upscale back."""
    return bicubic_resize(bicubic_resize(hr, f, "down"), f, "up")


def augment(patch, flip_h, flip_v, k_rot):
    if flip_h:
        patch = patch[..., :, ::-1]
    if flip_v:
        patch = patch[..., ::-1, :]
    return np.ascontiguousarray(np.rot90(patch, k_rot, axes=(-2, -1)))


def usable_images(dataset, patch):
    keep = []
    for i, img in enumerate(dataset):
        if min(img.shape[-2:]) < patch:
            log.warning("image %d (%s) is smaller than the %d patch; skipped",
                        i, img.shape[-2:], patch)
            continue
        keep.append(img)
    if not keep:
        raise ConfigError(f"no image is at least {patch}x{patch}")
    return keep


def sample_patches(dataset, cfg, rng):
    """``(inputs, targets)`` batches of shape ``(B, 3, patch, patch)``.

    ``rng`` is a numpy Generator or a seed. Augmentation is applied to the
    target crop before the impaired input is derived from it.
    """
    rng = np.random.default_rng(rng)
    images = usable_images(dataset, cfg.patch)
    p = cfg.patch
    hr = []
    for _ in range(cfg.batch_size):
        img = images[int(rng.integers(len(images)))]
        y = int(rng.integers(img.shape[-2] - p + 1))
        x = int(rng.integers(img.shape[-1] - p + 1))
        crop = img[..., y:y + p, x:x + p]
        fh = cfg.flip_h and bool(rng.integers(2))
        fv = cfg.flip_v and bool(rng.integers(2))
        k = int(rng.integers(4)) if cfg.rotate90 else 0
        hr.append(augment(crop, fh, fv, k))
    hr = np.stack(hr).astype(float)
    return degrade(hr, cfg.scale_factor), hr


# -- checkpoints and validation -------------------------------------------

@dataclass
class Checkpoint:
    step: int
    params: dict
    value: float
    mode: str


class BestKeeper:
    """Keeps the checkpoint with the lowest validation value seen so far."""

    def __init__(self, mode):
        self.mode = mode
        self.best = None
        self.history = []

    def offer(self, step, params, value):
        self.history.append((step, value))
        if self.best is None or value < self.best.value:
            self.best = Checkpoint(step, {k: v.copy() for k, v in params.items()}, value,
                                   self.mode)
            return True
        return False


def l2_validation(graph, pairs):
    """Mean squared error at W=0 over ``(input, target)`` pairs."""
    total = 0.0
    for x, y in pairs:
        d = G.forward(graph, x, W=0.0) - y
        total += float(np.mean(d * d))
    return total / len(pairs)


def perceptual_validation(graph, pairs, seed=0):
    """RMSE at W=0 plus the mean |VN| statistic at W=1.

    A cheap stand-in for a no-reference quality score; pass a custom
    ``validate`` to the trainer to use a real one.
    """
    total = 0.0
    for i, (x, y) in enumerate(pairs):
        d = G.forward(graph, x, W=0.0) - y
        total += math.sqrt(float(np.mean(d * d)))
        total += P.vn_statistic(G.forward(graph, x, W=1.0, noise_seed=seed + i))
    return total / len(pairs)


# -- loops ----------------------------------------------------------------

def _fidelity_loss_fn(graph, x, target, f):
    def fn(_inputs, params):
        Y0 = G.forward(graph, x, W=0.0, params=params)
        return P.high_fidelity_loss(Y0, target, f)
    return fn


def train_fidelity(graph, dataset, cfg, validation=None, validate=None, on_step=None):
    """Minimize the L1 pyramid loss at W=0 with Adam.

    ``validation`` is a list of ``(input, target)`` pairs (default: one
    fixed batch drawn with a seed derived from ``cfg.seed``). ``validate``
    overrides the L2 validation metric. ``on_step(record)`` receives one
    dict per step. Returns the best checkpoint.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    f = cfg.scale_factor
    rng = np.random.default_rng(cfg.seed)
    if validation is None:
        vx, vy = sample_patches(dataset, cfg, cfg.seed + 1)
        validation = [(vx, vy)]
    validate = validate or l2_validation
    params = {k: v.copy() for k, v in graph.params.items()}
    state = AdamState()
    keeper = BestKeeper("fidelity")
    for step in range(cfg.max_steps):
        x, target = sample_patches(dataset, cfg, rng)
        loss, grads = ad.value_and_grad(_fidelity_loss_fn(graph, x, target, f), {}, params)
        lr = lr_schedule(step, cfg.lr, cfg.halving_interval)
        params, state = adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
        if on_step is not None:
            on_step({"step": step, "loss": float(loss), "lr": lr})
        if (step + 1) % cfg.validate_every == 0 or step + 1 == cfg.max_steps:
            keeper.offer(step + 1, params, validate(graph.with_params(params), validation))
    if keeper.best is None:
        keeper.offer(0, params, validate(graph.with_params(params), validation))
    return keeper.best


def train_perceptual(gen, disc, dataset, cfg, weights=P.LossWeights(), cx_hook=P.zero_cx,
                     validation=None, validate=None, on_step=None):
    """Alternate one discriminator step and one generator step.

    The discriminator minimizes the relativistic loss on the real and fake
    multiscale sets; the generator minimizes the total perceptual loss,
    which needs a W=1 and a W=0 forward pass. Both use Adam with the same
    settings. Returns ``(best generator checkpoint, final disc params)``.
    """
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    f = cfg.scale_factor
    rng = np.random.default_rng(cfg.seed)
    if validation is None:
        vx, vy = sample_patches(dataset, cfg, cfg.seed + 1)
        validation = [(vx, vy)]
    validate = validate or perceptual_validation
    gp = {k: v.copy() for k, v in gen.params.items()}
    dp = {k: v.copy() for k, v in disc.params.items()}
    gstate, dstate = AdamState(), AdamState()
    keeper = BestKeeper("perceptual")
    for step in range(cfg.max_steps):
        x, target = sample_patches(dataset, cfg, rng)
        noise_seed = int(rng.integers(2 ** 31))
        lr = lr_schedule(step, cfg.lr, cfg.halving_interval)

        fake = G.forward(gen.with_params(gp), x, W=1.0, noise_seed=noise_seed)
        loss_d, dgrads = ad.value_and_grad(
            lambda _i, p: P.discriminator_loss(fake, target, disc, f, p), {}, dp)
        dp, dstate = adam_step(dp, dgrads, dstate, lr, cfg.beta1, cfg.beta2, cfg.eps)

        def gen_loss(_i, p):
            Y1 = G.forward(gen, x, W=1.0, noise_seed=noise_seed, params=p)
            Y0 = G.forward(gen, x, W=0.0, params=p)
            return P.total_perceptual_loss(Y1, Y0, target, disc, weights, cx_hook, f, dp)

        loss_g, ggrads = ad.value_and_grad(gen_loss, {}, gp)
        gp, gstate = adam_step(gp, ggrads, gstate, lr, cfg.beta1, cfg.beta2, cfg.eps)
        if on_step is not None:
            on_step({"step": step, "loss_d": float(loss_d), "loss_g": float(loss_g), "lr": lr})
        if (step + 1) % cfg.validate_every == 0 or step + 1 == cfg.max_steps:
            keeper.offer(step + 1, gp, validate(gen.with_params(gp), validation))
    if keeper.best is None:
        keeper.offer(0, gp, validate(gen.with_params(gp), validation))
    return keeper.best, dp
