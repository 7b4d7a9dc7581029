"""Billboard scene composition for aligned visible/thermal pairs.

A per-angle UV map substitutes for true 3D rendering: each view angle
exposes a contiguous cyclic half of the texture (front vs. back of the
garment), sprite size follows a pinhole 1/distance law, and pasting is a
per-pixel alpha blend that applies identical geometry to both modalities.
"""

import json
import os
import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import imageio
from .pattern import NorpParams
from .seeding import rng_for

FRAME = 160                 # default square scene size in pixels
REF_HEIGHT_PX = 100.0       # person pixel height at the reference distance
REF_DISTANCE_M = 2.5
BASE_SPRITE = (120, 52)     # UV-map resolution (height, width)
DISTANCE_RANGE = (2.5, 20.0)

PALETTES = ("indoor", "outdoor-day", "outdoor-night")


class ComposeError(Exception):
    pass


def _frozen(arr, dtype=np.float64):
    out = np.asarray(arr, dtype=dtype).copy()
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RgbtImage:
    """Aligned visible/thermal pair, values in [0,1]."""

    rgb: np.ndarray      # [H,W,3]
    thermal: np.ndarray  # [H,W]

    def __post_init__(self):
        rgb = _frozen(self.rgb)
        thm = _frozen(self.thermal)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or thm.shape != rgb.shape[:2]:
            raise ComposeError(
                f"misaligned pair: rgb {rgb.shape}, thermal {thm.shape}"
            )
        if rgb.min() < 0 or rgb.max() > 1 or thm.min() < 0 or thm.max() > 1:
            raise ComposeError("image values must lie in [0,1]")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "thermal", thm)

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]


@dataclass(frozen=True)
class UvMap:
    """Sprite-pixel to texture-cell lookup for one view angle.

    coords holds (row, col) texture coordinates per sprite pixel, NaN
    outside the clothing region. Columns of the visible band wrap
    cyclically (the garment closes around the body).
    """

    angle_deg: float
    coords: np.ndarray       # [h,w,2] float, NaN sentinel
    silhouette: np.ndarray   # [h,w] bool
    skin_region: np.ndarray  # [h,w] bool
    band_start: int
    band_width: int
    texture_hw: tuple

    def band_columns(self):
        w = self.texture_hw[1]
        return {(self.band_start + k) % w for k in range(self.band_width)}


@dataclass(frozen=True)
class PersonAppearance:
    """Exposed-skin visible color and thermal level."""

    skin_rgb: tuple = (0.82, 0.62, 0.50)
    skin_thermal: float = 0.92

    def __post_init__(self):
        vals = tuple(float(v) for v in self.skin_rgb) + (float(self.skin_thermal),)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ComposeError("appearance values must lie in [0,1]")


@dataclass(frozen=True)
class Scene:
    """One evaluation/attack placement on a background."""

    background: RgbtImage
    center_xy: tuple         # pixels
    distance_m: float
    angle_deg: float
    gt_box: tuple            # (x0, y0, x1, y1), pixel coords
    label: bool = True

    def __post_init__(self):
        lo, hi = DISTANCE_RANGE
        if not lo <= self.distance_m <= hi:
            raise ComposeError(
                f"distance {self.distance_m} outside supported range {DISTANCE_RANGE}"
            )
        x0, y0, x1, y1 = self.gt_box
        if not (0 <= x0 < x1 <= self.background.width
                and 0 <= y0 < y1 <= self.background.height):
            raise ComposeError(f"gt_box {self.gt_box} outside image bounds")


@dataclass(frozen=True)
class EotConfig:
    """Physical-nuisance jitter ranges applied during optimization.

    Geometry (scale, translation) is shared across modalities; the
    thermal channel gets only an offset plus noise, no exposure-style
    brightness/contrast.
    """

    scale_jitter: float = 0.10
    translate_px: float = 3.0
    brightness: float = 0.15
    contrast: tuple = (0.85, 1.15)
    thermal_offset: float = 0.08
    noise_std_rgb: float = 0.01
    noise_std_thm: float = 0.01

    @staticmethod
    def identity():
        return EotConfig(scale_jitter=0.0, translate_px=0.0, brightness=0.0,
                         contrast=(1.0, 1.0), thermal_offset=0.0,
                         noise_std_rgb=0.0, noise_std_thm=0.0)


@dataclass(frozen=True)
class DatasetSample:
    """One training/eval scene: image pair, person label, tight box."""

    image: RgbtImage
    label: bool
    gt_box: tuple  # None for negatives
    meta: dict = field(default_factory=dict)


# -- UV maps ----------------------------------------------------------------


def _silhouette_parts(h, w, angle_deg, shape_jitter):
    """Rasterize the humanoid silhouette and skin region at one angle."""
    ys = (np.arange(h) + 0.5) / h                      # 0 top .. 1 bottom
    xs = ((np.arange(w) + 0.5) / w - 0.5) * (w / h)    # height units
    y = ys[:, None]
    x = xs[None, :]
    kw = 0.78 + 0.22 * abs(np.cos(np.deg2rad(angle_deg)))
    torso_hw = (0.130 + shape_jitter[0]) * kw
    arm_ext = (0.060 + shape_jitter[1]) * kw
    leg_hw = (0.115 + shape_jitter[2]) * kw

    head = (x / 0.065) ** 2 + ((y - 0.075) / 0.062) ** 2 <= 1.0
    neck = (np.abs(x) <= 0.022) & (y >= 0.130) & (y <= 0.162)
    torso = (np.abs(x) <= torso_hw) & (y >= 0.158) & (y <= 0.52)
    arms = (np.abs(x) > torso_hw) & (np.abs(x) <= torso_hw + arm_ext) \
        & (y >= 0.170) & (y <= 0.50)
    legs = (np.abs(x) >= 0.020 * kw) & (np.abs(x) <= leg_hw) \
        & (y >= 0.52) & (y <= 0.985)

    skin = head | neck
    silhouette = skin | torso | arms | legs
    return silhouette, skin


def build_uv_maps(texture_width, texture_height, n_angles=20,
                  sprite_hw=BASE_SPRITE, seed=0):
    """One UvMap per view angle, deterministic in the seed.

    Angles a and a+180 expose disjoint cyclic halves of the texture
    width, so front and back of the garment carry independent pattern.
    """
    if n_angles < 4 or 360 % n_angles != 0:
        raise ComposeError("n_angles must be >= 4 and divide 360")
    h, w = sprite_hw
    if h < 8 or w < 8:
        raise ComposeError(f"sprite {sprite_hw} below the 8x8 minimum")
    rng = rng_for(seed, "uv-shape")
    shape_jitter = rng.uniform(-0.006, 0.006, 3)
    half = texture_width // 2
    maps = []
    for k in range(n_angles):
        angle = k * (360.0 / n_angles)
        silhouette, skin = _silhouette_parts(h, w, angle, shape_jitter)
        clothing = silhouette & ~skin
        coords = np.full((h, w, 2), np.nan)
        band_start = int(round(angle / 360.0 * texture_width)) % texture_width

        ys = (np.arange(h) + 0.5) / h
        cloth_top, cloth_bot = 0.158, 0.985
        v = (ys - cloth_top) / (cloth_bot - cloth_top) * (texture_height - 1)
        v = np.clip(v, 0.0, texture_height - 1)
        for i in range(h):
            cols = np.nonzero(clothing[i])[0]
            if cols.size == 0:
                continue
            lo, hi = cols.min(), cols.max()
            frac = (cols - lo) / max(hi - lo, 1)
            u = band_start + frac * max(half - 1, 0)
            coords[i, cols, 0] = v[i]
            coords[i, cols, 1] = np.mod(u, texture_width)
        coords.setflags(write=False)
        sil = silhouette.copy()
        sil.setflags(write=False)
        sk = skin.copy()
        sk.setflags(write=False)
        maps.append(UvMap(
            angle_deg=angle, coords=coords, silhouette=sil, skin_region=sk,
            band_start=band_start, band_width=half,
            texture_hw=(texture_height, texture_width),
        ))
    return maps


def uv_map_for_angle(uv_maps, angle_deg):
    """The map whose angle is nearest to angle_deg (mod 360)."""
    a = angle_deg % 360.0
    return min(
        uv_maps,
        key=lambda m: min(abs(m.angle_deg - a), 360.0 - abs(m.angle_deg - a)),
    )


# -- rendering ---------------------------------------------------------------


def sprite_size_at(distance_m, sprite_hw=BASE_SPRITE,
                   ref_height_px=REF_HEIGHT_PX, ref_distance_m=REF_DISTANCE_M):
    """Pinhole sprite size (h, w) in pixels at a camera distance."""
    if distance_m <= 0:
        raise ComposeError("distance must be positive")
    h_px = int(round(ref_height_px * ref_distance_m / distance_m))
    if h_px < 4:
        raise ComposeError(
            f"distance {distance_m} m puts the person below resolvable scale"
        )
    w_px = max(int(round(h_px * sprite_hw[1] / sprite_hw[0])), 2)
    return h_px, w_px


def _nearest_index(n_target, n_base):
    return np.clip(
        np.rint((np.arange(n_target) + 0.5) * n_base / n_target - 0.5),
        0, n_base - 1,
    ).astype(np.int64)


def render_person(tex_rgb, tex_thm, appearance, uv, distance_m,
                  ref_height_px=REF_HEIGHT_PX, ref_distance_m=REF_DISTANCE_M):
    """Render the clothed person sprite at a distance.

    tex_rgb [Ht,Wt,3] and tex_thm [Ht,Wt] may be engine tensors carrying
    gradients; clothing pixels sample them bilinearly through the UV map
    (cyclic in columns), skin pixels take the appearance constants.
    Returns (rgb tensor [h,w,3], thermal tensor [h,w], alpha ndarray).
    """
    tex_rgb = ad.as_tensor(tex_rgb)
    tex_thm = ad.as_tensor(tex_thm)
    if tex_rgb.shape[:2] != uv.texture_hw or tex_thm.shape != uv.texture_hw:
        raise ComposeError(
            f"texture {tex_rgb.shape[:2]} does not match UV map {uv.texture_hw}"
        )
    base_h, base_w = uv.silhouette.shape
    h, w = sprite_size_at(distance_m, (base_h, base_w),
                          ref_height_px, ref_distance_m)
    ri = _nearest_index(h, base_h)
    ci = _nearest_index(w, base_w)
    sil = uv.silhouette[ri][:, ci]
    skin = uv.skin_region[ri][:, ci]
    coords = uv.coords[ri][:, ci]
    cloth = sil & ~skin

    flat_cloth = np.flatnonzero(cloth.reshape(-1))
    flat_skin = np.flatnonzero(skin.reshape(-1))
    rows = coords[..., 0].reshape(-1)[flat_cloth]
    cols = coords[..., 1].reshape(-1)[flat_cloth]

    parts_rgb = []
    parts_thm = []
    if flat_cloth.size:
        cloth_rgb = ad.sample_bilinear(tex_rgb, rows, cols, wrap_cols=True)
        cloth_thm = ad.sample_bilinear(tex_thm, rows, cols, wrap_cols=True)
        parts_rgb.append(ad.embed(cloth_rgb, flat_cloth, (h, w)))
        parts_thm.append(ad.embed(cloth_thm, flat_cloth, (h, w)))
    if flat_skin.size:
        skin_rgb_vals = np.tile(np.asarray(appearance.skin_rgb), (flat_skin.size, 1))
        skin_thm_vals = np.full(flat_skin.size, appearance.skin_thermal)
        parts_rgb.append(ad.embed(ad.Tensor(skin_rgb_vals), flat_skin, (h, w)))
        parts_thm.append(ad.embed(ad.Tensor(skin_thm_vals), flat_skin, (h, w)))
    if not parts_rgb:
        raise ComposeError("empty silhouette at this scale")
    rgb = parts_rgb[0]
    thm = parts_thm[0]
    for extra_rgb, extra_thm in zip(parts_rgb[1:], parts_thm[1:]):
        rgb = rgb + extra_rgb
        thm = thm + extra_thm
    alpha = sil.astype(np.float64)
    return rgb, thm, alpha


# -- EOT ---------------------------------------------------------------------


def eot_transform(rgb_t, thm_t, alpha, config, rng):
    """Sampled physical perturbation of a sprite.

    Applies one shared scale/sub-pixel shift to both modalities (RGB-T
    stays aligned), brightness/contrast to the visible channel, an
    offset to the thermal channel, then per-modality noise and a clamp.
    Returns (rgb, thermal, alpha, integer translation (dx, dy)).
    """
    rgb_t = ad.as_tensor(rgb_t)
    thm_t = ad.as_tensor(thm_t)
    h, w = alpha.shape

    s = rng.uniform(1.0 - config.scale_jitter, 1.0 + config.scale_jitter)
    tx = rng.uniform(-config.translate_px, config.translate_px)
    ty = rng.uniform(-config.translate_px, config.translate_px)
    bright = rng.uniform(-config.brightness, config.brightness)
    contrast = rng.uniform(config.contrast[0], config.contrast[1])
    t_off = rng.uniform(-config.thermal_offset, config.thermal_offset)

    dx_int, fx = int(np.floor(tx)), tx - np.floor(tx)
    dy_int, fy = int(np.floor(ty)), ty - np.floor(ty)

    ho = max(int(round(h * s)), 2)
    wo = max(int(round(w * s)), 2)
    rr = (np.arange(ho) + 0.5) * (h / ho) - 0.5 - fy
    cc = (np.arange(wo) + 0.5) * (w / wo) - 0.5 - fx
    rows = np.repeat(rr, wo)
    cols = np.tile(cc, ho)

    rgb_s = ad.reshape(ad.sample_bilinear(rgb_t, rows, cols), (ho, wo, 3))
    thm_s = ad.reshape(ad.sample_bilinear(thm_t, rows, cols), (ho, wo))
    alpha_s = ad.sample_bilinear(
        ad.Tensor(alpha), rows, cols
    ).data.reshape(ho, wo)

    noise_rgb = rng.normal(0.0, 1.0, (ho, wo, 3)) * config.noise_std_rgb
    noise_thm = rng.normal(0.0, 1.0, (ho, wo)) * config.noise_std_thm

    rgb_out = ad.clip01(rgb_s * contrast + (bright + noise_rgb))
    thm_out = ad.clip01(thm_s + (t_off + noise_thm))
    return rgb_out, thm_out, alpha_s, (dx_int, dy_int)


# -- paste --------------------------------------------------------------------


def paste(rgb_t, thm_t, alpha, background, center_xy):
    """Alpha-blend a sprite onto both modalities of a background.

    out = alpha * sprite + (1 - alpha) * background, per pixel; pixels
    outside the sprite footprint are bit-identical to the background.
    Returns (rgb [H,W,3], thermal [H,W], full-frame alpha ndarray).
    """
    rgb_t = ad.as_tensor(rgb_t)
    thm_t = ad.as_tensor(thm_t)
    fh, fw = background.height, background.width
    sh, sw = alpha.shape
    cx, cy = center_xy
    top = int(round(cy - sh / 2.0))
    left = int(round(cx - sw / 2.0))

    r0, r1 = max(top, 0), min(top + sh, fh)
    c0, c1 = max(left, 0), min(left + sw, fw)
    if r0 >= r1 or c0 >= c1:
        raise ComposeError(
            f"sprite centered at {center_xy} lies fully outside the frame"
        )
    sr0, sc0 = r0 - top, c0 - left
    sr1, sc1 = sr0 + (r1 - r0), sc0 + (c1 - c0)

    rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    flat = (rr * fw + cc).reshape(-1)

    crop_rgb = rgb_t[sr0:sr1, sc0:sc1, :]
    crop_thm = thm_t[sr0:sr1, sc0:sc1]
    crop_alpha = alpha[sr0:sr1, sc0:sc1]

    n = flat.size
    full_rgb = ad.embed(ad.reshape(crop_rgb, (n, 3)), flat, (fh, fw))
    full_thm = ad.embed(ad.reshape(crop_thm, (n,)), flat, (fh, fw))
    alpha_full = np.zeros((fh, fw))
    alpha_full[r0:r1, c0:c1] = crop_alpha

    a1 = ad.Tensor(alpha_full)
    a3 = ad.Tensor(alpha_full[:, :, None])
    out_rgb = a3 * full_rgb + (1.0 - a3) * ad.Tensor(background.rgb)
    out_thm = a1 * full_thm + (1.0 - a1) * ad.Tensor(background.thermal)
    return out_rgb, out_thm, alpha_full


def alpha_bbox(alpha_full, threshold=0.5):
    """Tight (x0, y0, x1, y1) box around alpha >= threshold pixels."""
    on = alpha_full >= threshold
    if not on.any():
        raise ComposeError("alpha mask is empty; nothing to box")
    rows = np.flatnonzero(on.any(axis=1))
    cols = np.flatnonzero(on.any(axis=0))
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def make_scene(background, center_xy, distance_m, angle_deg, uv_maps,
               label=True):
    """Scene record with the nominal (jitter-free) ground-truth box."""
    uv = uv_map_for_angle(uv_maps, angle_deg)
    h, w = sprite_size_at(distance_m, uv.silhouette.shape)
    ri = _nearest_index(h, uv.silhouette.shape[0])
    ci = _nearest_index(w, uv.silhouette.shape[1])
    sil = uv.silhouette[ri][:, ci].astype(np.float64)
    cx, cy = center_xy
    top = int(round(cy - h / 2.0))
    left = int(round(cx - w / 2.0))
    fh, fw = background.height, background.width
    full = np.zeros((fh, fw))
    r0, r1 = max(top, 0), min(top + h, fh)
    c0, c1 = max(left, 0), min(left + w, fw)
    if r0 >= r1 or c0 >= c1:
        raise ComposeError("scene placement lies outside the frame")
    full[r0:r1, c0:c1] = sil[r0 - top:r1 - top, c0 - left:c1 - left]
    return Scene(background=background, center_xy=(cx, cy),
                 distance_m=distance_m, angle_deg=angle_deg,
                 gt_box=alpha_bbox(full), label=label)


def compose_scene(tex_rgb, tex_thm, appearance, uv_maps, scene,
                  eot_config=None, rng=None):
    """realize->render->EOT->paste chain for one scene.

    With eot_config None the geometry is exact (evaluation mode).
    Returns (rgb tensor, thermal tensor, actual gt box).
    """
    uv = uv_map_for_angle(uv_maps, scene.angle_deg)
    rgb_s, thm_s, alpha = render_person(
        tex_rgb, tex_thm, appearance, uv, scene.distance_m
    )
    cx, cy = scene.center_xy
    if eot_config is not None:
        if rng is None:
            raise ComposeError("EOT composition needs an rng")
        rgb_s, thm_s, alpha, (dx, dy) = eot_transform(
            rgb_s, thm_s, alpha, eot_config, rng
        )
        cx, cy = cx + dx, cy + dy
    out_rgb, out_thm, alpha_full = paste(
        rgb_s, thm_s, alpha, scene.background, (cx, cy)
    )
    return out_rgb, out_thm, alpha_bbox(alpha_full)


# -- synthetic backgrounds -----------------------------------------------------


def _smooth_field(rng, h, w, lo, hi, cells=3):
    """Coarse random grid bilinearly upsampled to a smooth [lo,hi] field."""
    coarse = rng.uniform(0.0, 1.0, (cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    out = c00 * (1 - fy) * (1 - fx) + c01 * (1 - fy) * fx \
        + c10 * fy * (1 - fx) + c11 * fy * fx
    return lo + (hi - lo) * out


_PALETTE_SPEC = {
    "indoor": {
        "rgb_lo": (0.35, 0.32, 0.30), "rgb_hi": (0.70, 0.66, 0.62),
        "blob_colors": [(0.45, 0.35, 0.28), (0.55, 0.55, 0.58),
                        (0.36, 0.42, 0.52), (0.60, 0.52, 0.40)],
        "thermal_lo": 0.18, "thermal_hi": 0.42, "warm_blob_hi": 0.62,
    },
    "outdoor-day": {
        "rgb_lo": (0.40, 0.48, 0.35), "rgb_hi": (0.80, 0.85, 0.90),
        "blob_colors": [(0.30, 0.45, 0.25), (0.50, 0.42, 0.30),
                        (0.55, 0.60, 0.65), (0.42, 0.50, 0.34)],
        "thermal_lo": 0.15, "thermal_hi": 0.45, "warm_blob_hi": 0.68,
    },
    "outdoor-night": {
        "rgb_lo": (0.04, 0.04, 0.07), "rgb_hi": (0.22, 0.22, 0.28),
        "blob_colors": [(0.10, 0.10, 0.16), (0.18, 0.15, 0.10),
                        (0.08, 0.12, 0.14), (0.16, 0.16, 0.18)],
        "thermal_lo": 0.12, "thermal_hi": 0.38, "warm_blob_hi": 0.66,
    },
}


def _add_blobs(rng, canvas, colors, n_lo, n_hi, max_alpha=0.85):
    h, w = canvas.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(rng.integers(n_lo, n_hi + 1)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(10, 40), rng.uniform(10, 40)
        weight = np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
        a = rng.uniform(0.4, max_alpha)
        if canvas.ndim == 3:
            color = np.asarray(colors[rng.integers(0, len(colors))])
            canvas += (a * weight)[:, :, None] * (color[None, None, :] - canvas)
        else:
            level = colors[rng.integers(0, len(colors))]
            canvas += a * weight * (level - canvas)
    return canvas


def gen_backgrounds(n, height=FRAME, width=FRAME, seed=0, palette="indoor"):
    """Procedural aligned background pairs; thermal decorrelated from rgb."""
    if n < 1:
        raise ComposeError("need at least one background")
    if palette not in _PALETTE_SPEC:
        raise ComposeError(f"unknown palette {palette!r}; choose from {PALETTES}")
    spec = _PALETTE_SPEC[palette]
    out = []
    for i in range(n):
        rng = rng_for(seed, f"background-{palette}", i)
        rgb = np.stack(
            [_smooth_field(rng, height, width, lo, hi)
             for lo, hi in zip(spec["rgb_lo"], spec["rgb_hi"])],
            axis=2,
        )
        rgb = _add_blobs(rng, rgb, spec["blob_colors"], 3, 7)
        rgb += rng.normal(0.0, 0.01, rgb.shape)
        thm = _smooth_field(rng, height, width,
                            spec["thermal_lo"], spec["thermal_hi"], cells=4)
        warm_levels = [rng.uniform(spec["thermal_lo"], spec["warm_blob_hi"])
                       for _ in range(4)]
        thm = _add_blobs(rng, thm, warm_levels, 2, 5, max_alpha=0.7)
        thm += rng.normal(0.0, 0.008, thm.shape)
        out.append(RgbtImage(rgb=np.clip(rgb, 0, 1), thermal=np.clip(thm, 0, 1)))
    return out


def load_backgrounds(directory):
    """Read `<name>_rgb.png` / `<name>_thm.png` pairs from a directory."""
    names = {}
    for fname in sorted(os.listdir(directory)):
        m = re.match(r"(.+)_(rgb|thm)\.png$", fname)
        if m:
            names.setdefault(m.group(1), set()).add(m.group(2))
    if not names:
        raise ComposeError(f"no pairs found in {directory}")
    pairs = []
    for name in sorted(names):
        kinds = names[name]
        for kind in ("rgb", "thm"):
            if kind not in kinds:
                raise ComposeError(f"missing pair member {name}_{kind}.png")
        rgb, _ = imageio.load_png(os.path.join(directory, f"{name}_rgb.png"))
        thm, _ = imageio.load_png(os.path.join(directory, f"{name}_thm.png"))
        if rgb.ndim != 3:
            raise ComposeError(f"{name}_rgb.png is not a 3-channel image")
        if thm.ndim != 2:
            raise ComposeError(f"{name}_thm.png is not single-channel")
        if rgb.shape[:2] != thm.shape:
            raise ComposeError(
                f"dimension mismatch in pair {name}: {rgb.shape[:2]} vs {thm.shape}"
            )
        pairs.append(RgbtImage(rgb=rgb, thermal=thm))
    return pairs


# -- benign clothing + dataset -------------------------------------------------


def benign_texture(texture_hw, constants, rng, variety=1.0):
    """A plausible non-adversarial garment texture.

    Colors are one to three random blocks; with increasing variety some
    garments carry random film flecks (up to ~60% coverage), so trained
    detectors see partly-cold clothing as normal.
    """
    h, w = texture_hw
    n_colors = rng.integers(1, 4)
    colors = rng.uniform(0.05, 0.95, (n_colors, 3))
    bands = np.sort(rng.choice(np.arange(1, h), size=n_colors - 1, replace=False)) \
        if n_colors > 1 else np.array([], dtype=int)
    rgb = np.zeros((h, w, 3))
    start = 0
    for ci, stop in enumerate(list(bands) + [h]):
        rgb[start:stop] = colors[ci]
        start = stop
    if rng.random() < 0.5 * variety:
        fleck_q = rng.uniform(0.0, 0.6 * variety)
        p = (rng.random((h, w)) >= fleck_q).astype(np.float64)
    else:
        p = np.ones((h, w))
    params = NorpParams(rgb=rgb, p_tilde=p)
    from .pattern import realize  # local import to avoid cycle at module load

    return realize(params, constants)


_SKIN_TONES = [(0.93, 0.80, 0.69), (0.82, 0.62, 0.50),
               (0.66, 0.48, 0.36), (0.45, 0.32, 0.24)]


def sample_appearance(rng):
    tone = _SKIN_TONES[rng.integers(0, len(_SKIN_TONES))]
    return PersonAppearance(skin_rgb=tone,
                            skin_thermal=float(rng.uniform(0.88, 0.96)))


def min_fit_distance(frame_hw, jitter_slack=6):
    """Closest distance whose sprite (plus jitter slack) fits the frame."""
    fh, fw = frame_hw
    usable_h = fh - 2 * jitter_slack - 2
    usable_w = fw - 2 * jitter_slack - 2
    if usable_h < 4 or usable_w < 2:
        raise ComposeError(f"frame {frame_hw} too small for any person")
    d_h = REF_HEIGHT_PX * REF_DISTANCE_M / usable_h
    d_w = (REF_HEIGHT_PX * BASE_SPRITE[1] / BASE_SPRITE[0]) \
        * REF_DISTANCE_M / usable_w
    return max(d_h, d_w, DISTANCE_RANGE[0])


def sample_placement(rng, frame_hw, distance_m, jitter_slack=6):
    """Person center such that the sprite stays inside the frame."""
    h, w = sprite_size_at(distance_m)
    fh, fw = frame_hw
    mx = w / 2 + jitter_slack
    my = h / 2 + jitter_slack
    if 2 * mx >= fw or 2 * my >= fh:
        raise ComposeError("sprite too large for the frame")
    cx = rng.uniform(mx, fw - mx)
    cy = rng.uniform(my, fh - my)
    return float(cx), float(cy)


def gen_detector_dataset(backgrounds, n_scenes, positive_fraction=0.5,
                         clothing_variety=1.0, seed=0, uv_maps=None,
                         texture_hw=(32, 24), constants=None,
                         eot_config=None, distances=DISTANCE_RANGE):
    """Labeled scenes for detector training.

    Positives render a benign-textured person at a random angle,
    distance, and position (one person per scene, exact class counts);
    negatives are untouched backgrounds. Deterministic in the seed.
    """
    if not 0.0 < positive_fraction < 1.0:
        raise ComposeError("positive_fraction must lie in (0,1)")
    if uv_maps is None:
        uv_maps = build_uv_maps(texture_hw[1], texture_hw[0], seed=seed)
    if constants is None:
        from .pattern import default_constants

        constants = default_constants(texture_hw[1], texture_hw[0], seed=seed)
    if eot_config is None:
        eot_config = EotConfig()
    n_pos = int(round(n_scenes * positive_fraction))
    order_rng = rng_for(seed, "dataset-order")
    labels = np.array([True] * n_pos + [False] * (n_scenes - n_pos))
    order_rng.shuffle(labels)
    frame_hw = (backgrounds[0].height, backgrounds[0].width)
    dist_lo = max(distances[0], min_fit_distance(frame_hw))
    dist_hi = max(distances[1], dist_lo + 1e-6)
    samples = []
    for i in range(n_scenes):
        rng = rng_for(seed, "dataset-scene", i)
        bg = backgrounds[rng.integers(0, len(backgrounds))]
        if not labels[i]:
            samples.append(DatasetSample(image=bg, label=False, gt_box=None,
                                         meta={"scene": i}))
            continue
        tex = benign_texture(texture_hw, constants, rng, variety=clothing_variety)
        appearance = sample_appearance(rng)
        angle = float(rng.uniform(0.0, 360.0))
        distance = float(rng.uniform(dist_lo, dist_hi))
        cx, cy = sample_placement(rng, (bg.height, bg.width), distance)
        scene = make_scene(bg, (cx, cy), distance, angle, uv_maps)
        rgb_t, thm_t, box = compose_scene(
            ad.Tensor(tex.rgb), ad.Tensor(tex.thermal), appearance,
            uv_maps, scene, eot_config=eot_config, rng=rng,
        )
        image = RgbtImage(rgb=np.clip(rgb_t.data, 0, 1),
                          thermal=np.clip(thm_t.data, 0, 1))
        samples.append(DatasetSample(
            image=image, label=True, gt_box=box,
            meta={"scene": i, "angle": angle, "distance": distance,
                  "center": (cx, cy)},
        ))
    return samples


def save_dataset(samples, directory):
    """Persist scenes as PNG pairs plus a JSON index."""
    os.makedirs(directory, exist_ok=True)
    index = []
    for i, s in enumerate(samples):
        stem = f"scene_{i:05d}"
        imageio.save_png8(os.path.join(directory, f"{stem}_rgb.png"), s.image.rgb)
        imageio.save_png16(os.path.join(directory, f"{stem}_thm.png"),
                           s.image.thermal)
        index.append({
            "id": stem,
            "label": bool(s.label),
            "gt_box": list(s.gt_box) if s.gt_box else None,
            "meta": {k: (list(v) if isinstance(v, tuple) else v)
                     for k, v in s.meta.items()},
        })
    with open(os.path.join(directory, "index.json"), "w") as fh:
        json.dump(index, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(directory):
    """Inverse of save_dataset."""
    with open(os.path.join(directory, "index.json")) as fh:
        index = json.load(fh)
    samples = []
    for entry in index:
        rgb, _ = imageio.load_png(os.path.join(directory, f"{entry['id']}_rgb.png"))
        thm, _ = imageio.load_png(os.path.join(directory, f"{entry['id']}_thm.png"))
        samples.append(DatasetSample(
            image=RgbtImage(rgb=rgb, thermal=thm),
            label=entry["label"],
            gt_box=tuple(entry["gt_box"]) if entry["gt_box"] else None,
            meta=entry.get("meta", {}),
        ))
    return samples
