"""Texture optimizers: spatially-masked discrete-continuous descent and
its baselines (pure relaxation, Gumbel-Softmax, straight-through), with
single-detector and fusion-stage ensemble losses.

Each iteration of the main method samples a fresh Bernoulli(alpha) mask:
masked cells freeze their material choice hard and train colors, the
rest keep the continuous relaxation and train the choice. The two
gradient streams are blocked complementarily, so every cell trains
exactly one of {color, choice} per iteration.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from . import autodiff as ad
from . import compose, detectors, pattern
from .compose import EotConfig, PersonAppearance
from .seeding import rng_for

ENSEMBLE_STAGES = ("early", "mid", "late", "indep")


class AttackError(Exception):
    pass


class AttackMethod(str, Enum):
    SDCO = "sdco"
    NOSRD = "nosrd"
    GUMBEL = "gumbel"
    STE = "ste"
    RANDOM = "random"


@dataclass(frozen=True)
class AttackConfig:
    method: AttackMethod = AttackMethod.SDCO
    alpha: float = 0.7          # mask probability (fraction discretized)
    eta: float = 0.02           # descent step size
    iterations: int = 500       # T
    batch: int = 8              # scene/view samples per iteration
    ensemble_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    eot: EotConfig = field(default_factory=EotConfig)
    seed: int = 0
    gumbel_tau: float = 0.5
    temperature: float = 0.05   # smooth-max temperature of the loss
    capture_grads: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", AttackMethod(self.method))
        if self.iterations < 0:
            raise AttackError("iterations must be >= 0")
        if not self.eta > 0:
            raise AttackError("eta must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise AttackError("alpha must lie in [0,1]")
        if len(self.ensemble_weights) != 4:
            raise AttackError("ensemble_weights needs one weight per stage")
        if any(w < 0 for w in self.ensemble_weights):
            raise AttackError("ensemble weights must be >= 0")
        if not any(w > 0 for w in self.ensemble_weights):
            raise AttackError("at least one ensemble weight must be positive")
        if self.method == AttackMethod.GUMBEL and not self.gumbel_tau > 0:
            raise AttackError("gumbel_tau must be positive")


@dataclass
class AttackRun:
    final_params: pattern.NorpParams  # binarized
    loss_trace: list
    config: AttackConfig
    wall_clock_s: float
    film_fraction: float
    captures: list = field(default_factory=list)


def config_to_dict(config):
    d = asdict(config)
    d["method"] = config.method.value
    d["ensemble_weights"] = list(config.ensemble_weights)
    return d


# -- losses -------------------------------------------------------------------


def ensemble_loss(losses, weights):
    """Weighted sum of per-fusion-stage losses."""
    if len(losses) != 4 or len(weights) != 4:
        raise AttackError("ensemble loss expects four stages")
    if any(w < 0 for w in weights):
        raise AttackError("ensemble weights must be >= 0")
    total = None
    for loss, w in zip(losses, weights):
        term = ad.as_tensor(loss) * float(w)
        total = term if total is None else total + term
    return total


def _targets_loss(targets, pair_tensors, box, config):
    """Objectness of a single target, an independent pair, or an ensemble."""
    if isinstance(targets, dict):
        losses = []
        for stage, w in zip(ENSEMBLE_STAGES, config.ensemble_weights):
            if w == 0:
                losses.append(ad.Tensor(0.0))
                continue
            if stage not in targets:
                raise AttackError(f"ensemble stage {stage!r} has no detector")
            losses.append(detectors.objectness(
                targets[stage], pair_tensors, box,
                temperature=config.temperature,
            ))
        return ensemble_loss(losses, config.ensemble_weights)
    return detectors.objectness(
        targets, pair_tensors, box, temperature=config.temperature
    )


def adversarial_loss(targets, params, constants, scene, uv_maps,
                     eot_config=None, rng=None, appearance=None,
                     config=None):
    """Detector confidence of the clothed person in one composed scene."""
    config = config or AttackConfig()
    appearance = appearance or PersonAppearance()
    vis, thm = pattern.realize_fields(
        ad.Tensor(params.rgb), ad.Tensor(params.p_tilde), constants
    )
    out_rgb, out_thm, box = compose.compose_scene(
        vis, thm, appearance, uv_maps, scene, eot_config=eot_config, rng=rng
    )
    return _targets_loss(targets, (out_rgb, out_thm), box, config)


# -- scene pools ---------------------------------------------------------------


def build_scene_pool(backgrounds, uv_maps, n_scenes, seed,
                     distance_range=None):
    """Random (background, angle, distance, position) draws for training."""
    frame_hw = (backgrounds[0].height, backgrounds[0].width)
    lo = compose.min_fit_distance(frame_hw)
    hi = compose.DISTANCE_RANGE[1]
    if distance_range is not None:
        lo, hi = max(distance_range[0], lo), distance_range[1]
    scenes = []
    for i in range(n_scenes):
        rng = rng_for(seed, "attack-pool", i)
        bg = backgrounds[rng.integers(0, len(backgrounds))]
        angle = float(rng.uniform(0.0, 360.0))
        distance = float(rng.uniform(lo, hi))
        cx, cy = compose.sample_placement(rng, frame_hw, distance)
        scenes.append(compose.make_scene(bg, (cx, cy), distance, angle, uv_maps))
    return scenes


# -- the optimizer family ------------------------------------------------------


def _gumbel_pair_delta(rng, shape):
    """g1 - g0 for two independent Gumbel draws per cell."""
    u = rng.random((2,) + shape)
    g = -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))
    return g[0] - g[1]


def _batch_objective(variant, targets, constants, scenes, uv_maps,
                     appearance, config, iteration, mask, gumbel_delta):
    """Mean scene loss as a function of the two leaf tensors."""

    def objective(rgb_leaf, p_leaf):
        if variant == AttackMethod.SDCO:
            vis, thm = pattern.realize_fields(
                rgb_leaf, p_leaf, constants, mask=mask
            )
        elif variant == AttackMethod.NOSRD:
            vis, thm = pattern.realize_fields(rgb_leaf, p_leaf, constants)
        elif variant == AttackMethod.GUMBEL:
            eps = 1e-6
            logit_gap = ad.log(p_leaf + eps) - ad.log(1.0 - p_leaf + eps)
            p_soft = ad.sigmoid(
                (logit_gap + ad.Tensor(gumbel_delta)) * (1.0 / config.gumbel_tau)
            )
            vis, thm = pattern.realize_from_p(rgb_leaf, p_soft, constants)
        elif variant == AttackMethod.STE:
            hard = pattern.hard_choice(p_leaf.data)
            p_ste = p_leaf + ad.Tensor(hard - p_leaf.data)
            vis, thm = pattern.realize_from_p(rgb_leaf, p_ste, constants)
        else:
            raise AttackError(f"no gradient loop for method {variant}")
        total = None
        for b, scene in enumerate(scenes):
            rng_b = rng_for(config.seed, "attack-scene",
                            iteration * config.batch + b)
            out_rgb, out_thm, box = compose.compose_scene(
                vis, thm, appearance, uv_maps, scene,
                eot_config=config.eot, rng=rng_b,
            )
            term = _targets_loss(targets, (out_rgb, out_thm), box, config)
            total = term if total is None else total + term
        return total / float(len(scenes))

    return objective


def _optimize(params0, constants, targets, scenes, config, uv_maps,
              appearance, variant):
    if not scenes:
        raise AttackError("empty scene pool")
    started = time.perf_counter()
    rgb = params0.rgb.copy()
    p_tilde = params0.p_tilde.copy()
    h, w = p_tilde.shape
    trace = []
    captures = []
    for j in range(config.iterations):
        mask = None
        gumbel_delta = None
        if variant == AttackMethod.SDCO:
            mask_rng = rng_for(config.seed, "attack-mask", j)
            mask = pattern.sample_srd_mask(w, h, config.alpha, mask_rng)
        elif variant == AttackMethod.GUMBEL:
            noise_rng = rng_for(config.seed, "attack-gumbel", j)
            gumbel_delta = _gumbel_pair_delta(noise_rng, p_tilde.shape)
        batch_rng = rng_for(config.seed, "attack-batch", j)
        batch_scenes = [
            scenes[batch_rng.integers(0, len(scenes))]
            for _ in range(config.batch)
        ]
        rgb_leaf = ad.Tensor(rgb, requires_grad=True, name="rgb")
        p_leaf = ad.Tensor(p_tilde, requires_grad=True, name="p_tilde")
        objective = _batch_objective(
            variant, targets, constants, batch_scenes, uv_maps, appearance,
            config, j, mask, gumbel_delta,
        )
        try:
            value, (g_rgb, g_p) = ad.value_and_grad(
                objective, [rgb_leaf, p_leaf]
            )
        except ad.EngineError as exc:
            raise AttackError(f"non-finite loss at iteration {j}: {exc}") from exc
        if variant == AttackMethod.SDCO:
            mask3 = np.repeat(mask.mask[:, :, None], 3, axis=2)
            g_rgb = ad.block_gradient(g_rgb, mask3, "keep-where-one")
            g_p = ad.block_gradient(g_p, mask.mask, "keep-where-zero")
        if config.capture_grads:
            captures.append({
                "mask": None if mask is None else mask.mask.copy(),
                "grad_rgb": g_rgb.data.copy(),
                "grad_p": g_p.data.copy(),
            })
        rgb_leaf = ad.sgd_step(rgb_leaf, g_rgb, config.eta)
        p_leaf = ad.sgd_step(p_leaf, g_p, config.eta)
        clamped = pattern.clamp_params(rgb_leaf.data, p_leaf.data)
        rgb = clamped.rgb.copy()
        p_tilde = clamped.p_tilde.copy()
        trace.append(value)
    final = pattern.binarize(pattern.NorpParams(rgb=rgb, p_tilde=p_tilde))
    return AttackRun(
        final_params=final,
        loss_trace=trace,
        config=config,
        wall_clock_s=time.perf_counter() - started,
        film_fraction=pattern.film_area_fraction(final),
        captures=captures,
    )


def _require_method(config, method):
    if config.method != method:
        raise AttackError(
            f"config.method is {config.method.value!r}, expected {method.value!r}"
        )


def sdco_optimize(params0, constants, targets, scenes, config, uv_maps,
                  appearance=None):
    """Masked discrete-continuous descent (the main method)."""
    _require_method(config, AttackMethod.SDCO)
    return _optimize(params0, constants, targets, scenes, config, uv_maps,
                     appearance or PersonAppearance(), AttackMethod.SDCO)


def nosrd_optimize(params0, constants, targets, scenes, config, uv_maps,
                   appearance=None):
    """Ablation: fully continuous relaxation, binarized only at the end."""
    _require_method(config, AttackMethod.NOSRD)
    return _optimize(params0, constants, targets, scenes, config, uv_maps,
                     appearance or PersonAppearance(), AttackMethod.NOSRD)


def gumbel_optimize(params0, constants, targets, scenes, config, uv_maps,
                    appearance=None):
    """Baseline: soft two-category Gumbel relaxation of the choice."""
    _require_method(config, AttackMethod.GUMBEL)
    return _optimize(params0, constants, targets, scenes, config, uv_maps,
                     appearance or PersonAppearance(), AttackMethod.GUMBEL)


def ste_optimize(params0, constants, targets, scenes, config, uv_maps,
                 appearance=None):
    """Baseline: hard forward, identity-surrogate backward."""
    _require_method(config, AttackMethod.STE)
    return _optimize(params0, constants, targets, scenes, config, uv_maps,
                     appearance or PersonAppearance(), AttackMethod.STE)


def optimize(params0, constants, targets, scenes, config, uv_maps,
             appearance=None):
    """Dispatch on config.method."""
    fn = {
        AttackMethod.SDCO: sdco_optimize,
        AttackMethod.NOSRD: nosrd_optimize,
        AttackMethod.GUMBEL: gumbel_optimize,
        AttackMethod.STE: ste_optimize,
    }.get(config.method)
    if fn is None:
        raise AttackError(f"method {config.method.value!r} is not an optimizer")
    return fn(params0, constants, targets, scenes, config, uv_maps,
              appearance=appearance)


# -- control patterns ----------------------------------------------------------


def random_pattern(width, height, constants, seed=0):
    """Unoptimized control: uniform colors, fair-coin material choice."""
    if constants.body_thermal.shape != (height, width):
        raise AttackError("constants grid does not match the texture size")
    rng = rng_for(seed, "random-pattern")
    rgb = rng.uniform(0.0, 1.0, (height, width, 3))
    p = (rng.random((height, width)) < 0.5).astype(np.float64)
    return pattern.binarize(pattern.NorpParams(rgb=rgb, p_tilde=p))


def clean_pattern(width, height, color=(0.45, 0.50, 0.62)):
    """Ordinary clothing control: one solid printed color, no film."""
    rgb = np.tile(np.asarray(color, dtype=np.float64), (height, width, 1))
    return pattern.NorpParams(rgb=rgb, p_tilde=np.ones((height, width)))


# -- persistence ---------------------------------------------------------------


def content_hash(params, config):
    payload = params.rgb.tobytes() + params.p_tilde.tobytes()
    payload += json.dumps(config_to_dict(config), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


def save_run(run, constants, prefix):
    """Texture bundle plus a JSON run record at `prefix`."""
    pattern.save_texture(run.final_params, constants, prefix)
    record = {
        "config": config_to_dict(run.config),
        "loss_trace": run.loss_trace,
        "wall_clock_s": run.wall_clock_s,
        "film_fraction": run.film_fraction,
        "content_hash": content_hash(run.final_params, run.config),
    }
    with open(f"{prefix}_run.json", "w") as fh:
        json.dump(record, fh, sort_keys=True, indent=2)
        fh.write("\n")
