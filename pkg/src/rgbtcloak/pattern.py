"""The two-material clothing texture: learnable variables and realization.

Each texture cell is either printable fabric (free RGB color, warm body
thermal) or aluminum film (fixed gray, cold thermal), never both. A cell's
material choice is a continuous relaxation p-tilde in [0,1] that is
discretized to {0,1} for the physical garment; the realization map blends
the two material tuples linearly in p.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import imageio
from .seeding import rng_for

FORMAT_VERSION = 1


class PatternError(Exception):
    pass


def _frozen(arr):
    out = np.asarray(arr, dtype=np.float64).copy()
    out.setflags(write=False)
    return out


def _check_unit(name, arr):
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise PatternError(f"{name} values must lie in [0,1]")


@dataclass(frozen=True)
class NorpParams:
    """Learnable texture variables: rgb [H,W,3] and p_tilde [H,W]."""

    rgb: np.ndarray
    p_tilde: np.ndarray

    def __post_init__(self):
        rgb = _frozen(self.rgb)
        p = _frozen(self.p_tilde)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise PatternError(f"rgb must be [H,W,3], got {rgb.shape}")
        if p.shape != rgb.shape[:2]:
            raise PatternError(
                f"p_tilde {p.shape} does not match rgb grid {rgb.shape[:2]}"
            )
        _check_unit("rgb", rgb)
        _check_unit("p_tilde", p)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "p_tilde", p)

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]

    def is_binary(self):
        return bool(np.all((self.p_tilde == 0.0) | (self.p_tilde == 1.0)))


@dataclass(frozen=True)
class MaterialConstants:
    """Measured material values: film color/thermal and body thermal field."""

    film_rgb: np.ndarray  # [3]
    film_thermal: float
    body_thermal: np.ndarray  # [H,W]

    def __post_init__(self):
        film_rgb = _frozen(self.film_rgb)
        body = _frozen(self.body_thermal)
        ft = float(self.film_thermal)
        if film_rgb.shape != (3,):
            raise PatternError(f"film_rgb must have 3 entries, got {film_rgb.shape}")
        if body.ndim != 2:
            raise PatternError(f"body_thermal must be [H,W], got {body.shape}")
        _check_unit("film_rgb", film_rgb)
        _check_unit("body_thermal", body)
        if not 0.0 <= ft <= 1.0:
            raise PatternError("film_thermal must lie in [0,1]")
        if ft >= body.min():
            raise PatternError(
                "film_thermal must read colder than every body_thermal cell"
            )
        object.__setattr__(self, "film_rgb", film_rgb)
        object.__setattr__(self, "body_thermal", body)
        object.__setattr__(self, "film_thermal", ft)


@dataclass(frozen=True)
class NorpTexture:
    """Realized texture: rgb [H,W,3] and thermal [H,W], both in [0,1]."""

    rgb: np.ndarray
    thermal: np.ndarray

    def __post_init__(self):
        rgb = _frozen(self.rgb)
        thermal = _frozen(self.thermal)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or thermal.shape != rgb.shape[:2]:
            raise PatternError(
                f"texture fields disagree: rgb {rgb.shape}, thermal {thermal.shape}"
            )
        _check_unit("texture rgb", rgb)
        _check_unit("texture thermal", thermal)
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "thermal", thermal)


@dataclass(frozen=True)
class SrdMask:
    """Binary per-cell discretization mask with its sampling probability."""

    mask: np.ndarray
    alpha: float

    def __post_init__(self):
        m = np.asarray(self.mask)
        if not np.all((m == 0) | (m == 1)):
            raise PatternError("mask entries must be 0 or 1")
        m = m.astype(np.float64).copy()
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "alpha", float(self.alpha))


def default_constants(width, height, seed=0, film_rgb=(0.75, 0.75, 0.75),
                      film_thermal=0.10, body_base=0.85, body_noise=0.05):
    """Stand-in material constants; the real ones are device measurements.

    The body thermal field is the base level plus smooth low-amplitude
    noise, mimicking a captured body-surface temperature map.
    """
    rng = rng_for(seed, "body-thermal")
    coarse = rng.uniform(-1.0, 1.0, (4, 4))
    ys = np.linspace(0, 3, height)
    xs = np.linspace(0, 3, width)
    y0 = np.minimum(ys.astype(int), 2)
    x0 = np.minimum(xs.astype(int), 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    smooth = (c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx
              + c10 * fy * (1 - fx) + c11 * fy * fx)
    body = np.clip(body_base + body_noise * smooth, 0.0, 1.0)
    return MaterialConstants(
        film_rgb=np.asarray(film_rgb, dtype=np.float64),
        film_thermal=film_thermal,
        body_thermal=body,
    )


def init_params(width, height, seed=0, strategy="uniform-rgb-mid-p"):
    """Fresh texture variables.

    Strategies: "uniform-random" (rgb and p-tilde uniform), "mid-gray"
    (everything 0.5), "uniform-rgb-mid-p" (uniform colors, undecided
    material) — the attack default, so early iterations explore both
    materials.
    """
    if width < 1 or height < 1:
        raise PatternError("texture grid dimensions must be >= 1")
    rng = rng_for(seed, "init-params")
    if strategy == "uniform-random":
        rgb = rng.uniform(0.0, 1.0, (height, width, 3))
        p = rng.uniform(0.0, 1.0, (height, width))
    elif strategy == "mid-gray":
        rgb = np.full((height, width, 3), 0.5)
        p = np.full((height, width), 0.5)
    elif strategy == "uniform-rgb-mid-p":
        rgb = rng.uniform(0.0, 1.0, (height, width, 3))
        p = np.full((height, width), 0.5)
    else:
        raise PatternError(f"unknown init strategy {strategy!r}")
    return NorpParams(rgb=rgb, p_tilde=p)


def sample_srd_mask(width, height, alpha, rng):
    """Per-cell iid Bernoulli(alpha) discretization mask."""
    if not 0.0 <= alpha <= 1.0:
        raise PatternError(f"alpha must lie in [0,1], got {alpha}")
    mask = (rng.random((height, width)) < alpha).astype(np.float64)
    return SrdMask(mask=mask, alpha=alpha)


def hard_choice(p_tilde):
    """Threshold the relaxation: 1 where p_tilde >= 0.5 (fabric), else 0."""
    return (np.asarray(p_tilde) >= 0.5).astype(np.float64)


def realize_from_p(rgb_t, p_t, constants):
    """Eq.-style two-material blend on engine tensors.

    vis = p*rgb + (1-p)*film_rgb ; thm = p*body + (1-p)*film_thermal.
    Differentiable w.r.t. whatever rgb_t / p_t carry gradients for.
    """
    rgb_t = ad.as_tensor(rgb_t)
    p_t = ad.as_tensor(p_t)
    p3 = ad.reshape(p_t, p_t.shape + (1,))
    one_minus = 1.0 - p3
    film_rgb = ad.Tensor(constants.film_rgb[None, None, :])
    vis = p3 * rgb_t + one_minus * film_rgb
    thm = p_t * ad.Tensor(constants.body_thermal) + (1.0 - p_t) * constants.film_thermal
    return vis, thm


def realize_fields(rgb_t, p_tilde_t, constants, mask=None):
    """Realize with optional per-cell discretization.

    Where the mask is 1 the material choice is frozen hard (no gradient
    reaches p-tilde there); where it is 0 (or the mask is absent) the
    continuous relaxation is used.
    """
    p_tilde_t = ad.as_tensor(p_tilde_t)
    if mask is None:
        return realize_from_p(rgb_t, p_tilde_t, constants)
    m = mask.mask if isinstance(mask, SrdMask) else np.asarray(mask, dtype=np.float64)
    if m.shape != p_tilde_t.shape:
        raise PatternError(
            f"mask {m.shape} does not match p_tilde {p_tilde_t.shape}"
        )
    hard = ad.Tensor(hard_choice(p_tilde_t.data) * m)
    p_eff = p_tilde_t * ad.Tensor(1.0 - m) + hard
    return realize_from_p(rgb_t, p_eff, constants)


def realize(params, constants, mask=None):
    """Numpy-facing realization returning a NorpTexture."""
    _check_grid(params, constants)
    vis, thm = realize_fields(
        ad.Tensor(params.rgb), ad.Tensor(params.p_tilde), constants, mask=mask
    )
    return NorpTexture(rgb=np.clip(vis.data, 0.0, 1.0),
                       thermal=np.clip(thm.data, 0.0, 1.0))


def _check_grid(params, constants):
    if constants.body_thermal.shape != params.p_tilde.shape:
        raise PatternError(
            f"body_thermal {constants.body_thermal.shape} does not match "
            f"texture grid {params.p_tilde.shape}"
        )


def binarize(params):
    """Final discretization: p = 1(p_tilde >= 0.5); colors untouched."""
    return NorpParams(rgb=params.rgb, p_tilde=hard_choice(params.p_tilde))


def clamp_params(params_rgb, params_p=None):
    """Clip raw variable arrays to [0,1] and wrap as NorpParams."""
    if isinstance(params_rgb, NorpParams):
        p = params_rgb
        return NorpParams(rgb=np.clip(p.rgb, 0.0, 1.0),
                          p_tilde=np.clip(p.p_tilde, 0.0, 1.0))
    return NorpParams(rgb=np.clip(params_rgb, 0.0, 1.0),
                      p_tilde=np.clip(params_p, 0.0, 1.0))


def film_area_fraction(params):
    """Fraction of cells that binarize to aluminum film (p = 0)."""
    return float(np.mean(hard_choice(params.p_tilde) == 0.0))


# -- persistence ------------------------------------------------------------


def save_texture(params, constants, prefix):
    """Write the texture bundle next to `prefix`.

    Files: `<prefix>_rgb.png` (8-bit), `<prefix>_ptilde.png` and
    `<prefix>_thermal.png` (16-bit), `<prefix>_meta.json`. Colors are
    quantized to the 8-bit print palette on save, so a loaded texture
    re-saves to bit-identical files.
    """
    _check_grid(params, constants)
    # snap to file precision first so the bundle is self-consistent and
    # a load/save cycle is byte-stable
    quantized = NorpParams(
        rgb=imageio.quantize8(params.rgb),
        p_tilde=imageio.quantize16(params.p_tilde),
    )
    imageio.save_png8(f"{prefix}_rgb.png", quantized.rgb)
    imageio.save_png16(f"{prefix}_ptilde.png", quantized.p_tilde)
    tex = realize(quantized, constants)
    imageio.save_png16(f"{prefix}_thermal.png", tex.thermal)
    meta = {
        "format_version": FORMAT_VERSION,
        "width": params.width,
        "height": params.height,
        "film_rgb": list(constants.film_rgb),
        "film_thermal": constants.film_thermal,
        "body_thermal": [list(row) for row in constants.body_thermal],
    }
    with open(f"{prefix}_meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_texture(prefix):
    """Read a texture bundle back; inverse of save_texture."""
    try:
        with open(f"{prefix}_meta.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise PatternError(f"no texture metadata at {prefix}_meta.json") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise PatternError(
            f"texture format version {meta.get('format_version')} "
            f"is not {FORMAT_VERSION}"
        )
    rgb, depth = imageio.load_png(f"{prefix}_rgb.png")
    if depth != 8 or rgb.ndim != 3:
        raise PatternError(f"{prefix}_rgb.png is not an 8-bit RGB image")
    p_tilde, depth = imageio.load_png(f"{prefix}_ptilde.png")
    if depth != 16:
        raise PatternError(f"{prefix}_ptilde.png is not a 16-bit image")
    params = NorpParams(rgb=rgb, p_tilde=p_tilde)
    constants = MaterialConstants(
        film_rgb=np.asarray(meta["film_rgb"], dtype=np.float64),
        film_thermal=float(meta["film_thermal"]),
        body_thermal=np.asarray(meta["body_thermal"], dtype=np.float64),
    )
    if (params.height, params.width) != (meta["height"], meta["width"]):
        raise PatternError("texture images disagree with metadata dimensions")
    _check_grid(params, constants)
    return params, constants
