"""Underwater image formation: attenuation, lighting, and stereo augmentation.

Renders the in-water appearance of an in-air (restored) stereo pair from its
depth maps: wavelength-dependent attenuation and backscatter of the water
column, caustic flicker, co-moving point lights with inverse-square falloff,
near-surface sunlight gradients, and floating-particle distractors.

Images are float arrays in [0, 1], shape (H, W, 3); depth rasters are (H, W)
z-depths in meters with NaN marking invalid pixels. All randomness flows
through explicit seeds so a given sample renders identically every time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraIntrinsics, StereoCalib

# Approximate per-channel (R, G, B) beam attenuation in 1/m for the classic
# oceanic (I..III) and coastal (1C..9C) water types, red to blue. These are
# engineering defaults for augmentation sampling, not survey-grade constants;
# override them via AugmentationConfig.jerlov_table.
DEFAULT_JERLOV_TABLE: dict[str, tuple[float, float, float]] = {
    "I": (0.35, 0.05, 0.02),
    "IA": (0.36, 0.055, 0.025),
    "IB": (0.37, 0.06, 0.03),
    "II": (0.40, 0.08, 0.06),
    "III": (0.45, 0.14, 0.14),
    "1C": (0.45, 0.12, 0.12),
    "3C": (0.50, 0.19, 0.22),
    "5C": (0.60, 0.31, 0.38),
    "7C": (0.70, 0.50, 0.65),
    "9C": (0.80, 0.70, 0.90),
}


@dataclass(frozen=True)
class WaterParams:
    """Water column: per-channel attenuation beta (1/m) and veiling light b_inf."""

    beta: tuple[float, float, float]
    b_inf: tuple[float, float, float]

    def __post_init__(self):
        if any(b < 0 for b in self.beta):
            raise ValueError(f"WaterParams: beta must be >= 0, got {self.beta}")
        if any(not 0.0 <= b <= 1.0 for b in self.b_inf):
            raise ValueError(f"WaterParams: b_inf must lie in [0, 1], got {self.b_inf}")

    @classmethod
    def clear(cls) -> "WaterParams":
        return cls(beta=(0.0, 0.0, 0.0), b_inf=(0.0, 0.0, 0.0))


@dataclass(frozen=True)
class LightSpec:
    """Point light rigidly attached to the left camera frame."""

    position: tuple[float, float, float]
    power: float
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class CausticSpec:
    texture_id: int
    strength: float
    light_dir: tuple[float, float, float] = (0.0, 0.0, -1.0)


@dataclass(frozen=True)
class SunSpec:
    """Image-space sunlight: 'planar' top-down ramp or 'radial' halo."""

    mode: str
    color: tuple[float, float, float]
    brightness: float
    sat_distance: float
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.mode not in ("planar", "radial"):
            raise ValueError(f"SunSpec: mode must be 'planar' or 'radial', got {self.mode!r}")
        if self.sat_distance <= 0:
            raise ValueError("SunSpec: sat_distance must be positive")


@dataclass(frozen=True)
class ParticleSpec:
    count: int
    radius_range: tuple[float, float] = (1.0, 6.0)
    aspect_range: tuple[float, float] = (0.35, 1.0)
    opacity_range: tuple[float, float] = (0.05, 0.5)
    seed: int = 0


@dataclass(frozen=True)
class AugmentationSample:
    """One fully-specified draw of the augmentation distribution."""

    water: WaterParams
    lights: tuple[LightSpec, ...] = ()
    caustic: CausticSpec | None = None
    sun: SunSpec | None = None
    particles: ParticleSpec | None = None
    seed: int = 0

    @classmethod
    def empty(cls) -> "AugmentationSample":
        """The identity sample: clear water, no lights, no distractors."""
        return cls(water=WaterParams.clear())


@dataclass
class AugmentationConfig:
    """Ranges the augmentation sampler draws from."""

    jerlov_table: dict[str, tuple[float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_JERLOV_TABLE)
    )
    beta_scale_range: tuple[float, float] = (0.8, 1.25)
    b_inf_range: tuple[tuple[float, float], ...] = ((0.0, 0.12), (0.02, 0.25), (0.05, 0.35))
    light_count_range: tuple[int, int] = (0, 2)
    light_power_range: tuple[float, float] = (0.5, 3.0)
    light_offset_range: tuple[float, float] = (-0.5, 0.5)
    caustic_probability: float = 0.5
    caustic_strength_range: tuple[float, float] = (0.1, 0.8)
    caustic_texture_ids: tuple[int, ...] = tuple(range(16))
    sun_probability: float = 0.5
    sun_brightness_range: tuple[float, float] = (0.05, 0.4)
    sun_sat_distance_range: tuple[float, float] = (0.3, 1.0)  # fraction of image height
    particle_count_range: tuple[int, int] = (0, 25)
    particle_radius_range: tuple[float, float] = (1.0, 6.0)
    particle_opacity_range: tuple[float, float] = (0.05, 0.5)


@dataclass(frozen=True)
class AugmentedPair:
    left: np.ndarray
    right: np.ndarray
    mask_left: np.ndarray
    mask_right: np.ndarray


# ---------------------------------------------------------------------------
# water column
# ---------------------------------------------------------------------------


def transmission(depth: np.ndarray, beta) -> np.ndarray:
    """Per-channel transmission exp(-beta_c z).

    Args:
        depth: (H, W) z-depth in meters; NaN propagates.
        beta: 3 per-channel attenuation coefficients, 1/m, >= 0.

    Returns:
        (H, W, 3) transmission in (0, 1]; NaN where depth is NaN.
    """
    depth = np.asarray(depth, dtype=float)
    beta = np.asarray(beta, dtype=float).reshape(3)
    if np.any(beta < 0):
        raise ValueError(f"transmission: beta must be >= 0, got {beta}")
    return np.exp(-depth[..., None] * beta)


def apply_water_column(image: np.ndarray, depth: np.ndarray, water: WaterParams) -> np.ndarray:
    """Attenuate a scene radiance image and add veiling backscatter.

    I_c = J_c t_c + b_inf_c (1 - t_c) with t_c = exp(-beta_c z). Pixels with
    invalid (NaN) depth are treated as infinitely far water and receive pure
    backscatter b_inf.
    """
    image = np.asarray(image, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if image.shape[:2] != depth.shape:
        raise ValueError(
            f"apply_water_column: image {image.shape} and depth {depth.shape} disagree"
        )
    t = transmission(depth, water.beta)
    t = np.where(np.isnan(t), 0.0, t)
    b_inf = np.asarray(water.b_inf, dtype=float)
    out = image * t + b_inf * (1.0 - t)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------


def compute_normals(depth: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Unit surface normals from a depth raster, oriented toward the camera.

    Normals come from the cross product of the back-projected image-axis
    tangent vectors (central differences). A fronto-parallel plane yields
    (0, 0, -1). Pixels whose stencil touches invalid depth get NaN normals.
    """
    depth = np.asarray(depth, dtype=float)
    points = intrinsics.backproject(depth)
    dv = np.gradient(points, axis=0)
    du = np.gradient(points, axis=1)
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm
    n[np.broadcast_to(norm < 1e-12, n.shape)] = np.nan
    # orient every normal against the viewing ray so surfaces face the camera
    rays = intrinsics.ray_grid(*depth.shape)
    flip = np.sum(n * rays, axis=-1, keepdims=True) > 0.0
    return np.where(flip, -n, n)


# ---------------------------------------------------------------------------
# caustics
# ---------------------------------------------------------------------------


@lru_cache(maxsize=64)
def caustic_texture(texture_id: int, shape: tuple[int, int]) -> np.ndarray:
    """Procedural caustic texture in [0, 1]: bright webbing on Voronoi edges."""
    h, w = shape
    rng = np.random.default_rng(np.random.SeedSequence([0xCA57, int(texture_id)]))
    n_sites = max(8, (h * w) // 220)
    sites = rng.uniform([0.0, 0.0], [w, h], size=(n_sites, 2))
    uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    dist, _ = cKDTree(sites).query(pix, k=2)
    sigma = 1.0 + 0.15 * np.sqrt(h * w) / 10.0
    tex = np.exp(-(((dist[:, 1] - dist[:, 0]) / sigma) ** 2)).reshape(h, w)
    tex.setflags(write=False)
    return tex


def render_caustics(texture: np.ndarray, normals: np.ndarray, light_dir) -> np.ndarray:
    """Caustic irradiance: texture modulated by a clamped Lambert term.

    Args:
        texture: (H, W) caustic texture in [0, 1].
        normals: (H, W, 3) unit normals (camera-facing); NaN rows contribute 0.
        light_dir: unit 3-vector pointing from the surface toward the light.

    Returns:
        (H, W) caustic intensity texture * max(0, <light_dir, n>).
    """
    texture = np.asarray(texture, dtype=float)
    normals = np.asarray(normals, dtype=float)
    d = np.asarray(light_dir, dtype=float).reshape(3)
    d = d / np.linalg.norm(d)
    lam = np.sum(normals * d, axis=-1)
    lam = np.where(np.isnan(lam), 0.0, np.maximum(lam, 0.0))
    return texture * lam


def warp_texture_stereo(texture: np.ndarray, depth_left: np.ndarray, calib: StereoCalib) -> np.ndarray:
    """Reproject a left-view texture into the right view using left depth.

    Forward splat with a z-buffer: each valid left pixel lands at column
    u - fx * baseline / z in the right image and the nearest surface wins on
    collision. Disoccluded pixels stay 0.
    """
    texture = np.asarray(texture, dtype=float)
    depth_left = np.asarray(depth_left, dtype=float)
    if texture.shape != depth_left.shape:
        raise ValueError("warp_texture_stereo: texture and depth shapes disagree")
    h, w = texture.shape
    disparity = calib.disparity_of_depth(depth_left)
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    target_u = np.rint(uu - disparity)
    valid = np.isfinite(target_u) & (target_u >= 0) & (target_u < w) & (depth_left > 0)
    tu = target_u[valid].astype(int)
    tv = vv[valid]
    tz = depth_left[valid]
    tt = texture[valid]
    # write far-to-near so the nearest surface ends up on top
    order = np.argsort(-tz, kind="stable")
    out = np.zeros_like(texture)
    out[tv[order], tu[order]] = tt[order]
    return out


# ---------------------------------------------------------------------------
# artificial lights, sun, particles
# ---------------------------------------------------------------------------


def render_point_light(
    depth: np.ndarray,
    normals: np.ndarray,
    intrinsics: CameraIntrinsics,
    light: LightSpec,
    water: WaterParams,
) -> np.ndarray:
    """Irradiance from a camera-attached point light with water attenuation.

    For a surface point x with normal n and light offset L = p - x:
    I_c = P C_c / |L|^2 * max(0, <L/|L|, n>) * exp(-beta_c |L|). The Lambert
    term uses the normalized direction so intensity is bounded by the
    inverse-square falloff. Invalid depth or normals contribute 0.
    """
    depth = np.asarray(depth, dtype=float)
    points = intrinsics.backproject(depth)
    p = np.asarray(light.position, dtype=float).reshape(3)
    lvec = p - points
    dist = np.linalg.norm(lvec, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        lhat = lvec / dist[..., None]
        lambert = np.sum(lhat * normals, axis=-1)
        falloff = light.power / (dist * dist)
    lambert = np.where(np.isnan(lambert), 0.0, np.maximum(lambert, 0.0))
    good = np.isfinite(dist) & (dist > 1e-6)
    falloff = np.where(good, falloff, 0.0)
    dist = np.where(good, dist, 0.0)
    beta = np.asarray(water.beta, dtype=float)
    att = np.exp(-dist[..., None] * beta)
    color = np.asarray(light.color, dtype=float)
    return (falloff * lambert)[..., None] * color * att


def apply_sunlight(image: np.ndarray, sun: SunSpec, water: WaterParams) -> np.ndarray:
    """Add an image-space sunlight gradient tinted by the water column.

    Planar mode ramps linearly from the top row down, reaching zero at
    sat_distance rows; radial mode decays linearly with pixel distance from
    `center`. The added color is the sun color filtered through one meter of
    the given water (attenuated toward b_inf), so strongly absorbing channels
    shift toward the veiling light. Output is clamped to [0, 1].
    """
    image = np.asarray(image, dtype=float)
    h, w = image.shape[:2]
    if sun.mode == "planar":
        rows = np.arange(h, dtype=float)
        gain = np.clip(1.0 - rows / sun.sat_distance, 0.0, 1.0)[:, None]
        gain = np.broadcast_to(gain, (h, w))
    else:
        uu, vv = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
        r = np.hypot(uu - sun.center[0], vv - sun.center[1])
        gain = np.clip(1.0 - r / sun.sat_distance, 0.0, 1.0)
    beta = np.asarray(water.beta, dtype=float)
    b_inf = np.asarray(water.b_inf, dtype=float)
    t1 = np.exp(-beta)  # one meter of water path
    tint = np.asarray(sun.color, dtype=float) * (t1 + b_inf * (1.0 - t1))
    out = image + sun.brightness * gain[..., None] * tint
    return np.clip(out, 0.0, 1.0)


def render_particles(shape: tuple[int, int], spec: ParticleSpec) -> np.ndarray:
    """Opacity raster of soft elliptical particles, ready for additive blending.

    Each particle is an ellipse with random center, radii, orientation, and
    peak opacity; its opacity falls off as 1 - rho^2 with normalized
    elliptical radius rho. Overlaps add and the raster is clipped to [0, 1].
    """
    h, w = shape
    out = np.zeros((h, w), dtype=float)
    rng = np.random.default_rng(np.random.SeedSequence([0x9A27, int(spec.seed)]))
    for _ in range(spec.count):
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        a = rng.uniform(*spec.radius_range)
        b = a * rng.uniform(*spec.aspect_range)
        theta = rng.uniform(0.0, np.pi)
        peak = rng.uniform(*spec.opacity_range)
        reach = int(np.ceil(max(a, b))) + 1
        x0, x1 = max(0, int(cx) - reach), min(w, int(cx) + reach + 1)
        y0, y1 = max(0, int(cy) - reach), min(h, int(cy) + reach + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1, dtype=float) - cx
        ys = np.arange(y0, y1, dtype=float) - cy
        xx, yy = np.meshgrid(xs, ys)
        ct, st = np.cos(theta), np.sin(theta)
        xr = ct * xx + st * yy
        yr = -st * xx + ct * yy
        rho2 = (xr / a) ** 2 + (yr / b) ** 2
        out[y0:y1, x0:x1] += peak * np.clip(1.0 - rho2, 0.0, 1.0)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# sampling and full pipeline
# ---------------------------------------------------------------------------


def sample_augmentation(config: AugmentationConfig, seed: int) -> AugmentationSample:
    """Draw one augmentation sample; identical seeds give identical samples.

    Water type is chosen uniformly from the Jerlov table, then each channel's
    beta is scaled by a single draw from beta_scale_range.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED, int(seed)]))
    types = sorted(config.jerlov_table)
    chosen = types[int(rng.integers(len(types)))]
    scale = rng.uniform(*config.beta_scale_range)
    beta = tuple(float(b * scale) for b in config.jerlov_table[chosen])
    b_inf = tuple(float(rng.uniform(lo, hi)) for lo, hi in config.b_inf_range)
    water = WaterParams(beta=beta, b_inf=b_inf)

    n_lights = int(rng.integers(config.light_count_range[0], config.light_count_range[1] + 1))
    lights = []
    for _ in range(n_lights):
        offset = rng.uniform(*config.light_offset_range, size=3)
        power = rng.uniform(*config.light_power_range)
        color = 1.0 - rng.uniform(0.0, 0.25, size=3)
        lights.append(
            LightSpec(position=tuple(map(float, offset)), power=float(power),
                      color=tuple(map(float, color)))
        )

    caustic = None
    if rng.uniform() < config.caustic_probability:
        caustic = CausticSpec(
            texture_id=int(rng.choice(config.caustic_texture_ids)),
            strength=float(rng.uniform(*config.caustic_strength_range)),
        )

    sun = None
    if rng.uniform() < config.sun_probability:
        mode = "planar" if rng.uniform() < 0.5 else "radial"
        sun = SunSpec(
            mode=mode,
            color=tuple(1.0 - rng.uniform(0.0, 0.3, size=3)),
            brightness=float(rng.uniform(*config.sun_brightness_range)),
            sat_distance=float(rng.uniform(*config.sun_sat_distance_range)),
            center=(float(rng.uniform(0.0, 1.0)), float(rng.uniform(0.0, 1.0))),
        )

    particles = None
    n_particles = int(
        rng.integers(config.particle_count_range[0], config.particle_count_range[1] + 1)
    )
    if n_particles > 0:
        particles = ParticleSpec(
            count=n_particles,
            radius_range=config.particle_radius_range,
            opacity_range=config.particle_opacity_range,
            seed=int(seed),
        )

    return AugmentationSample(
        water=water, lights=tuple(lights), caustic=caustic, sun=sun,
        particles=particles, seed=int(seed),
    )


def _relight_view(
    image: np.ndarray,
    depth: np.ndarray,
    intrinsics: CameraIntrinsics,
    sample: AugmentationSample,
    lights: tuple[LightSpec, ...],
    caustic_tex: np.ndarray | None,
    particle_seed: int,
) -> np.ndarray:
    out = np.asarray(image, dtype=float)
    normals = None
    if lights or caustic_tex is not None:
        normals = compute_normals(depth, intrinsics)
    if lights:
        light_sum = np.zeros_like(out)
        for light in lights:
            light_sum += render_point_light(depth, normals, intrinsics, light, sample.water)
        out = out * (1.0 + light_sum)
    if caustic_tex is not None:
        c = sample.caustic.strength * render_caustics(
            caustic_tex, normals, sample.caustic.light_dir
        )
        out = out * (1.0 + c[..., None])
    out = np.clip(out, 0.0, 1.0)
    out = apply_water_column(out, depth, sample.water)
    if sample.sun is not None:
        h = out.shape[0]
        sun = sample.sun
        # sat_distance and center are stored as fractions of the image size
        sun_px = SunSpec(
            mode=sun.mode,
            color=sun.color,
            brightness=sun.brightness,
            sat_distance=sun.sat_distance * h,
            center=(sun.center[0] * out.shape[1], sun.center[1] * h),
        )
        out = apply_sunlight(out, sun_px, sample.water)
    if sample.particles is not None:
        spec = sample.particles
        view_spec = ParticleSpec(
            count=spec.count,
            radius_range=spec.radius_range,
            aspect_range=spec.aspect_range,
            opacity_range=spec.opacity_range,
            seed=particle_seed,
        )
        op = render_particles(out.shape[:2], view_spec)
        out = np.clip(out + op[..., None], 0.0, 1.0)
    return out


def augment_pair(
    left: np.ndarray,
    right: np.ndarray,
    depth_left: np.ndarray,
    depth_right: np.ndarray,
    calib: StereoCalib,
    sample: AugmentationSample,
    t_min: float = 0.05,
) -> AugmentedPair:
    """Render an underwater-augmented stereo pair with stereo-consistent effects.

    Point lights stay fixed in the left camera frame (the right view sees them
    shifted by the baseline); the caustic texture is generated in the left
    view and reprojected into the right view through the left depth map, so
    the flicker pattern lands on the same 3D surface in both images. Particles
    are view-local distractors and are drawn independently per view.

    Returns the two augmented images plus the per-view visibility masks (true
    where every channel's transmission stays >= t_min).

    With the empty sample the images pass through byte-exact wherever depth is
    valid (invalid depth renders as backscatter).
    """
    left = np.asarray(left, dtype=float)
    right = np.asarray(right, dtype=float)
    if left.shape != right.shape or left.shape[:2] != np.shape(depth_left):
        raise ValueError("augment_pair: image/depth shapes disagree")
    lights_l = sample.lights
    lights_r = tuple(
        LightSpec(
            position=(l.position[0] - calib.baseline, l.position[1], l.position[2]),
            power=l.power,
            color=l.color,
        )
        for l in sample.lights
    )
    tex_l = tex_r = None
    if sample.caustic is not None:
        tex_l = caustic_texture(sample.caustic.texture_id, left.shape[:2])
        tex_r = warp_texture_stereo(tex_l, depth_left, calib)
    out_l = _relight_view(
        left, depth_left, calib.left, sample, lights_l, tex_l, particle_seed=sample.seed * 2 + 1
    )
    out_r = _relight_view(
        right, depth_right, calib.left, sample, lights_r, tex_r, particle_seed=sample.seed * 2 + 2
    )
    from . import losses  # deferred: losses imports optics types

    mask_l = losses.visibility_mask(sample.water, depth_left, t_min)
    mask_r = losses.visibility_mask(sample.water, depth_right, t_min)
    return AugmentedPair(left=out_l, right=out_r, mask_left=mask_l, mask_right=mask_r)
