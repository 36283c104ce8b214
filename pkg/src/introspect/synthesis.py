"""Sample generation by gradient ascent on the classifier score.

Samples start from noise (or from a frozen random decoder, or from a
previous model's samples), climb f via per-sample Adam, and stop when
their score reaches a threshold drawn uniformly between the minimum and
maximum score of a reference batch of real examples.  A literal
Langevin update (step eps/2 times the gradient plus N(0, eps) noise) is
available as an alternative mode.

The anysize path keeps a single large working canvas, repeatedly scores
random model-sized patches, and averages the per-patch pixel gradients
on overlapping pixels before each update.  Patch positions are drawn
uniformly over the full canvas with wrap-around extraction, which gives
every canvas pixel (in particular every central-crop pixel) exactly the
same coverage probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, NumericError, UsageError
from .nets import eval_f
from .optim import PixelAdam


@dataclass(frozen=True)
class SynthesisConfig:
    init_mode: str = "gaussian"    # gaussian | frozen_net | from_samples
    init_sigma: float = 0.3
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    max_steps: int = 300
    optimizer: str = "adam"        # adam | langevin
    langevin_eps: float = 0.01
    langevin_decay: float = 1.0    # per-step multiplier on eps
    langevin_noise: bool = True
    dropout_on: bool = False
    divergence_limit: float = 1e3

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.init_mode == "gaussian" and self.init_sigma <= 0:
            raise ConfigurationError("init_sigma must be > 0")
        if self.init_mode not in ("gaussian", "frozen_net", "from_samples"):
            raise ConfigurationError(f"unknown init mode {self.init_mode!r}")
        if self.optimizer not in ("adam", "langevin"):
            raise ConfigurationError(f"unknown ascent optimizer {self.optimizer!r}")


@dataclass
class SynthesisResult:
    samples: np.ndarray           # clipped to [-1, 1] at emission
    stop_steps: np.ndarray        # step at which each sample stopped (1-based)
    final_scores: np.ndarray      # score recorded at stop time
    threshold: float
    budget_exhausted: np.ndarray  # True where max_steps ran out
    reinitialized: np.ndarray     # True where divergence forced a restart


def init_samples(config: SynthesisConfig, count, shape, rng,
                 initializer=None, source_samples=None) -> np.ndarray:
    """Initial batch for the ascent, deterministic given the generator."""
    shape = tuple(shape)
    if count == 0:
        return np.zeros((0,) + shape)
    if config.init_mode == "gaussian":
        return rng.normal(0.0, config.init_sigma, (count,) + shape)
    if config.init_mode == "frozen_net":
        if initializer is None:
            raise ConfigurationError("frozen_net init requires an initializer network")
        codes = rng.uniform(-1.0, 1.0, (count, 512, 4, 4))
        out = initializer.generate(codes)
        if out.shape[1:] != shape:
            raise ConfigurationError(
                f"initializer produces {out.shape[1:]}, model expects {shape}")
        return out
    if source_samples is None or len(source_samples) == 0:
        raise ConfigurationError("from_samples init requires source samples")
    idx = rng.integers(0, len(source_samples), count)
    return np.asarray(source_samples)[idx].reshape((count,) + shape).copy()


def early_stop_threshold(f_pos_scores, rng) -> float:
    """Uniform draw between the min and max reference score."""
    scores = np.asarray(f_pos_scores, dtype=np.float64)
    if scores.size == 0:
        raise UsageError("early_stop_threshold: need at least one positive score")
    return float(rng.uniform(scores.min(), scores.max()))


def model_score_and_grad(params, spec, train=False, dropout_rng=None):
    """Callable mapping a batch to (scores, per-sample input gradients)."""
    def fn(x):
        xt = ad.tensor(x)
        s = eval_f(params, spec, xt, train, dropout_rng)
        g = ad.grad(ad.reduce_sum(s), xt)
        return s.data, g.data
    return fn


def synthesize(score_and_grad, config: SynthesisConfig, init_batch: np.ndarray,
               threshold: float, noise_rng=None, reinit_rng=None) -> SynthesisResult:
    """Ascend f per sample until the threshold or the step budget is hit.

    score_and_grad takes the current (n_active, ...) batch and returns
    per-sample scores and input gradients.  Samples whose entries exceed
    the divergence limit are re-initialized once from reinit_rng and
    abort the run if they diverge again.
    """
    if not np.isfinite(threshold):
        raise UsageError("synthesize: threshold must be finite")
    x = np.array(init_batch, dtype=np.float64)
    n = x.shape[0]
    stop_steps = np.zeros(n, dtype=np.int64)
    final_scores = np.zeros(n)
    budget = np.zeros(n, dtype=bool)
    reinit = np.zeros(n, dtype=bool)
    if n == 0:
        return SynthesisResult(x, stop_steps, final_scores, threshold, budget, reinit)

    adam = PixelAdam(x.shape, config.lr, config.beta1, config.beta2)
    active = np.ones(n, dtype=bool)
    eps_t = config.langevin_eps
    for step in range(1, config.max_steps + 1):
        idx = np.flatnonzero(active)
        scores, grads = score_and_grad(x[idx])
        done = scores >= threshold
        done_idx = idx[done]
        stop_steps[done_idx] = step
        final_scores[done_idx] = scores[done]
        active[done_idx] = False
        live = idx[~done]
        if live.size == 0:
            break
        if step == config.max_steps:
            # budget exhausted before the update for these samples
            stop_steps[live] = step
            final_scores[live] = scores[~done]
            budget[live] = True
            break
        if config.optimizer == "adam":
            mask = np.zeros(n, dtype=bool)
            mask[live] = True
            x = adam.ascend(x, grads_full(grads, live, x.shape), mask)
        else:
            g_full = grads_full(grads, live, x.shape)
            delta = 0.5 * eps_t * g_full
            if config.langevin_noise and noise_rng is not None:
                noise = np.zeros_like(x)
                noise[live] = np.sqrt(eps_t) * noise_rng.standard_normal(x[live].shape)
                delta = delta + noise
            x = x + np.where(grads_mask(live, x.shape), delta, 0.0)
            eps_t *= config.langevin_decay
        bad = np.flatnonzero(np.abs(x).reshape(n, -1).max(axis=1) > config.divergence_limit)
        bad = bad[active[bad]]
        if bad.size:
            already = bad[reinit[bad]]
            if already.size:
                raise NumericError(f"synthesis diverged twice for samples {already.tolist()}")
            if reinit_rng is None:
                raise NumericError(f"synthesis diverged for samples {bad.tolist()}")
            reinit[bad] = True
            x[bad] = reinit_rng.normal(0.0, config.init_sigma, (bad.size,) + x.shape[1:])
            adam.reset_rows(bad)
    return SynthesisResult(np.clip(x, -1.0, 1.0), stop_steps, final_scores,
                           threshold, budget, reinit)


def grads_full(grads, live, shape):
    out = np.zeros(shape)
    out[live] = grads
    return out


def grads_mask(live, shape):
    m = np.zeros(shape, dtype=bool)
    m[live] = True
    return m


# ---------------------------------------------------------------------------
# Anysize generation
# ---------------------------------------------------------------------------

def sample_patch_locations(rng, count, canvas_hw, patch) -> np.ndarray:
    """Uniform top-left corners over the full canvas (wrap-around extraction).

    Every canvas pixel is covered by exactly patch*patch of the possible
    offsets, so coverage probability is identical for all pixels.
    """
    h, w = canvas_hw
    if patch > h or patch > w:
        raise ConfigurationError(f"patch {patch} larger than canvas {canvas_hw}")
    return np.stack([rng.integers(0, h, count), rng.integers(0, w, count)], axis=1)


def extract_patches(canvas, locations, patch) -> np.ndarray:
    c, h, w = canvas.shape
    out = np.empty((len(locations), c, patch, patch))
    for i, (ti, tj) in enumerate(locations):
        rows = (ti + np.arange(patch)) % h
        cols = (tj + np.arange(patch)) % w
        out[i] = canvas[np.ix_(range(c), rows, cols)]
    return out


def average_patch_gradients(patch_grads, locations, canvas_shape) -> tuple:
    """Mean of the per-patch gradients on every covered canvas pixel.

    Returns (averaged field, coverage counts); uncovered pixels get zero.
    """
    c, h, w = canvas_shape
    acc = np.zeros(canvas_shape)
    counts = np.zeros((h, w))
    patch = patch_grads.shape[-1]
    ones = np.ones((patch, patch))
    for g, (ti, tj) in zip(patch_grads, locations):
        rows = (ti + np.arange(patch)) % h
        cols = (tj + np.arange(patch)) % w
        sel = np.ix_(range(c), rows, cols)
        acc[sel] += g
        counts[np.ix_(rows, cols)] += ones
    avg = np.where(counts[None] > 0, acc / np.maximum(counts[None], 1.0), 0.0)
    return avg, counts


@dataclass
class AnysizeResult:
    image: np.ndarray        # central crop, clipped to [-1, 1]
    canvas: np.ndarray       # full working image, unclipped
    mean_scores: list = field(default_factory=list)  # per-iteration patch score means


def anysize_synthesize(score_and_grad, config: SynthesisConfig, rng,
                       working_size=320, center_size=256, patch=64,
                       patches_per_iter=200, iters=50, channels=3) -> AnysizeResult:
    """Grow one large texture from a patch-sized model.

    Each iteration scores patches_per_iter random patches, averages their
    input gradients on overlapping pixels, and applies a single Adam
    update to the working canvas.  Ends with the clipped central crop.
    """
    if working_size < patch or center_size > working_size:
        raise ConfigurationError("need patch <= center <= working size")
    canvas = rng.normal(0.0, config.init_sigma, (channels, working_size, working_size))
    adam = PixelAdam((1,) + canvas.shape, config.lr, config.beta1, config.beta2)
    always = np.array([True])
    mean_scores = []
    for _ in range(iters):
        locs = sample_patch_locations(rng, patches_per_iter, (working_size, working_size), patch)
        patches = extract_patches(canvas, locs, patch)
        scores, grads = score_and_grad(patches)
        mean_scores.append(float(scores.mean()))
        avg, _ = average_patch_gradients(grads, locs, canvas.shape)
        canvas = adam.ascend(canvas[None], avg[None], always)[0]
        if not np.all(np.isfinite(canvas)):
            raise NumericError("anysize synthesis produced non-finite canvas")
    m = (working_size - center_size) // 2
    crop = canvas[:, m:m + center_size, m:m + center_size]
    return AnysizeResult(np.clip(crop, -1.0, 1.0), canvas, mean_scores)
