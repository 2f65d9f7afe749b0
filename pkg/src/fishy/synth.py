"""Synthetic OoD dataset generation by alpha-compositing overlay objects.

Backgrounds carry a semantic class raster (255 = void) and an ego-vehicle
mask. Overlays are placed with a category-dependent vertical prior, colour
matched to the pixels underneath, and composited after optional fog has
been added to the background. Output masks use 0 = in-distribution,
1 = OoD, 255 = ignore.
"""
from __future__ import annotations

import colorsys
import dataclasses
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ContractViolation, PlacementInfeasible
from .numerics import atomic_write, derive_rng, resize_bilinear

log = logging.getLogger(__name__)

ID_LABEL = 0
OOD_LABEL = 1
IGNORE_LABEL = 255
CATEGORIES = ("mammal-like", "airborne-like", "neutral")


@dataclass
class ObjectAsset:
    rgba: np.ndarray
    category: str
    asset_id: str
    min_size_ok: bool = True

    def __post_init__(self):
        self.rgba = np.asarray(self.rgba, dtype=np.float64)
        if self.rgba.ndim != 3 or self.rgba.shape[2] != 4:
            raise ContractViolation("asset raster must be (h, w, 4)")
        if self.category not in CATEGORIES:
            raise ContractViolation(f"unknown asset category {self.category!r}")
        alpha = self.rgba[..., 3]
        if not np.any(alpha > 0):
            raise ContractViolation(f"asset {self.asset_id} is fully transparent")
        border = np.concatenate([alpha[0], alpha[-1], alpha[:, 0], alpha[:, -1]])
        if np.any(border > 0):
            raise ContractViolation(f"asset {self.asset_id} touches its raster border")

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgba.shape[:2]

    def opaque_area(self, threshold: float = 0.5) -> int:
        return int(np.sum(self.rgba[..., 3] > threshold))


@dataclass
class SceneSpec:
    image: np.ndarray
    ego_mask: np.ndarray
    depth_proxy: np.ndarray | None = None
    labels: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.ego_mask = np.asarray(self.ego_mask, dtype=bool)
        if self.ego_mask.shape != self.image.shape[:2]:
            raise ContractViolation("ego mask shape differs from the background")
        if self.labels is None:
            self.labels = np.where(self.ego_mask, IGNORE_LABEL, 0).astype(np.uint8)
        if self.depth_proxy is None:
            self.depth_proxy = planar_depth(*self.image.shape[:2])

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def eval_mask(self) -> np.ndarray:
        """Background label mask: ID everywhere except void / ego pixels."""
        return np.where((self.labels == IGNORE_LABEL) | self.ego_mask, IGNORE_LABEL, ID_LABEL).astype(np.uint8)


@dataclass
class FogParams:
    beta: float = 0.01
    atmospheric_light: tuple[float, float, float] = (0.8, 0.8, 0.82)
    per_image_probability: float = 0.5

    def __post_init__(self):
        if self.beta < 0:
            raise ContractViolation("fog attenuation must be >= 0")
        if not 0.0 <= self.per_image_probability <= 1.0:
            raise ContractViolation("fog probability must lie in [0, 1]")


@dataclass(frozen=True)
class Placement:
    scale: float
    x: int
    y: int
    height: int
    width: int

    @property
    def center_y(self) -> float:
        return self.y + self.height / 2.0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 128
    n_train: int = 40
    n_validation: int = 30
    n_test: int = 100
    n_assets: int = 48
    asset_size: tuple[int, int] = (10, 22)
    validation_asset_fraction: float = 0.25
    objects_per_image: tuple[int, int] = (1, 2)
    scale_range: tuple[float, float] = (0.7, 1.4)
    lower_half_prob: dict = field(
        default_factory=lambda: {"mammal-like": 0.75, "airborne-like": 0.25, "neutral": None}
    )
    color_strength: float = 0.5
    fog_probability: float = 0.5
    fog_beta_range: tuple[float, float] = (0.005, 0.02)
    atmospheric_light: tuple[float, float, float] = (0.8, 0.8, 0.82)
    depth_near: float = 2.0
    depth_far: float = 50.0
    alpha_threshold: float = 0.5
    target_prevalence: float | None = None
    max_objects: int = 12
    max_placement_attempts: int = 1000

    def __post_init__(self):
        for name in ("asset_size", "objects_per_image", "scale_range", "fog_beta_range", "atmospheric_light"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ConfigError("scale_range must be positive and ordered")
        if not 0.0 < self.validation_asset_fraction < 1.0:
            raise ConfigError("validation_asset_fraction must lie in (0, 1)")
        if self.target_prevalence is not None and not 0.0 < self.target_prevalence < 0.5:
            raise ConfigError("target_prevalence must lie in (0, 0.5)")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def planar_depth(height: int, width: int, horizon: int | None = None, near: float = 2.0, far: float = 50.0):
    """Depth rising linearly from ``near`` at the bottom row to ``far`` at the horizon row."""
    horizon = height // 2 if horizon is None else int(horizon)
    rows = np.arange(height, dtype=np.float64)
    span = max(height - 1 - horizon, 1)
    d = near + (far - near) * (height - 1 - rows) / span
    d = np.where(rows <= horizon, far, d)
    return np.repeat(d[:, None], width, axis=1)


def sample_placement(
    rng: np.random.Generator,
    scene: SceneSpec,
    asset: ObjectAsset,
    config: SynthConfig | None = None,
    scale: float | None = None,
) -> Placement:
    """Random footprint avoiding the ego vehicle; vertical position follows the category prior."""
    config = config or SynthConfig()
    H, W = scene.shape
    h, w = asset.shape
    p_lower = config.lower_half_prob.get(asset.category)
    for _ in range(config.max_placement_attempts):
        s = rng.uniform(*config.scale_range) if scale is None else float(scale)
        fh, fw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        if fh > H or fw > W:
            continue
        x = int(rng.integers(0, W - fw + 1))
        c_lo, c_hi = fh / 2.0, H - fh / 2.0
        if p_lower is None:
            cy = rng.uniform(c_lo, c_hi)
        elif rng.random() < p_lower:
            cy = rng.uniform(max(c_lo, H / 2.0), c_hi) if c_hi > H / 2.0 else rng.uniform(c_lo, c_hi)
        else:
            cy = rng.uniform(c_lo, min(c_hi, H / 2.0)) if c_lo < H / 2.0 else rng.uniform(c_lo, c_hi)
        y = int(min(max(round(cy - fh / 2.0), 0), H - fh))
        if scene.ego_mask[y : y + fh, x : x + fw].any():
            continue
        return Placement(float(s), x, y, fh, fw)
    raise PlacementInfeasible(
        f"no ego-free placement for asset {asset.asset_id} after {config.max_placement_attempts} attempts"
    )


def resample_asset(rgba: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with premultiplied alpha."""
    rgba = np.asarray(rgba, dtype=np.float64)
    if rgba.shape[:2] == tuple(shape):
        return rgba.copy()
    alpha = rgba[..., 3:]
    premult = resize_bilinear(rgba[..., :3] * alpha, shape)
    a = np.clip(resize_bilinear(alpha, shape), 0.0, 1.0)
    rgb = np.where(a > 1e-12, premult / np.maximum(a, 1e-12), 0.0)
    return np.concatenate([np.clip(rgb, 0.0, 1.0), a], axis=-1)


def _check_footprint(shape, t: Placement):
    H, W = shape[:2]
    if t.x < 0 or t.y < 0 or t.x + t.width > W or t.y + t.height > H:
        raise ContractViolation(f"footprint {t} leaves the {H}x{W} image")


def color_adapt(asset: ObjectAsset, background: np.ndarray, transform: Placement, strength: float = 0.5) -> ObjectAsset:
    """Per-channel mean/std transfer towards the background under the footprint.

    A channel with zero spread in the asset only receives the mean shift.
    """
    _check_footprint(background.shape, transform)
    if strength == 0:
        return asset
    rgba = asset.rgba.copy()
    fg = rgba[..., 3] > 0
    foot_alpha = resample_asset(rgba, (transform.height, transform.width))[..., 3]
    patch = np.asarray(background, dtype=np.float64)[
        transform.y : transform.y + transform.height, transform.x : transform.x + transform.width
    ]
    under = patch[foot_alpha > 0] if np.any(foot_alpha > 0) else patch.reshape(-1, patch.shape[-1])
    for c in range(3):
        vals = rgba[..., c][fg]
        mu_a, sd_a = vals.mean(), vals.std()
        mu_b, sd_b = under[:, c].mean(), under[:, c].std()
        if sd_a < 1e-8:
            mapped = rgba[..., c] - mu_a + mu_b
        else:
            mapped = (rgba[..., c] - mu_a) / sd_a * sd_b + mu_b
        rgba[..., c] = np.clip((1.0 - strength) * rgba[..., c] + strength * mapped, 0.0, 1.0)
    return ObjectAsset(rgba, asset.category, asset.asset_id, asset.min_size_ok)


def apply_fog(image: np.ndarray, depth_proxy: np.ndarray, fog: FogParams, rng: np.random.Generator):
    """Koschmieder fog ``t * I + (1 - t) * L`` with ``t = exp(-beta * depth)``, applied with the per-image probability."""
    image = np.asarray(image, dtype=np.float64)
    if rng.random() >= fog.per_image_probability:
        return image.copy(), False
    with np.errstate(over="ignore"):
        t = np.exp(-fog.beta * np.asarray(depth_proxy, dtype=np.float64))[..., None]
    light = np.asarray(fog.atmospheric_light, dtype=np.float64)
    return t * image + (1.0 - t) * light, True


def composite(
    background: np.ndarray,
    asset: ObjectAsset | np.ndarray,
    transform: Placement,
    background_mask: np.ndarray | None = None,
    alpha_threshold: float = 0.5,
):
    """Alpha-over the resampled asset; pixels with alpha above the threshold become OoD."""
    background = np.asarray(background, dtype=np.float64)
    _check_footprint(background.shape, transform)
    rgba = asset.rgba if isinstance(asset, ObjectAsset) else np.asarray(asset, dtype=np.float64)
    fp = resample_asset(rgba, (transform.height, transform.width))
    out = background.copy()
    mask = (
        np.zeros(background.shape[:2], dtype=np.uint8)
        if background_mask is None
        else np.asarray(background_mask, dtype=np.uint8).copy()
    )
    sl = (slice(transform.y, transform.y + transform.height), slice(transform.x, transform.x + transform.width))
    a = fp[..., 3:]
    out[sl] = a * fp[..., :3] + (1.0 - a) * out[sl]
    region = mask[sl]
    region[fp[..., 3] > alpha_threshold] = OOD_LABEL
    return out, mask


# ---------------------------------------------------------------------------
# procedural content
# ---------------------------------------------------------------------------


def make_scene(rng: np.random.Generator, height: int = 64, width: int = 128, depth_near=2.0, depth_far=50.0) -> SceneSpec:
    """Street-like scene: sky (0), buildings / vegetation (1), road (2), void poles, ego hood."""
    H, W = height, width
    light = rng.uniform(0.8, 1.1)
    horizon = int(H * rng.uniform(0.45, 0.55))
    img = np.zeros((H, W, 3))
    labels = np.zeros((H, W), dtype=np.uint8)
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]

    sky_top = np.array([0.35, 0.55, 0.85]) * light
    sky_bottom = np.array([0.65, 0.78, 0.92]) * light
    frac = np.clip(rows / max(horizon, 1), 0, 1)[..., None]
    img[:] = (1 - frac) * sky_top + frac * sky_bottom

    palette = [np.array([0.5, 0.5, 0.52]), np.array([0.55, 0.44, 0.34]), np.array([0.28, 0.48, 0.24])]
    x = 0
    while x < W:
        bw = int(rng.integers(8, 25))
        top = horizon - int(H * rng.uniform(0.08, 0.35))
        base = palette[int(rng.integers(len(palette)))] * light * rng.uniform(0.85, 1.1)
        block = (slice(max(top, 0), horizon), slice(x, min(x + bw, W)))
        img[block] = base
        labels[block] = 1
        if rng.random() < 0.6:  # window grid
            wy = (rows[max(top, 0) : horizon] - top) % 6 < 2
            wx = (cols[:, x : min(x + bw, W)] - x) % 5 < 2
            win = wy & wx
            sub = img[block]
            sub[win] = base * 0.6
            img[block] = sub
        x += bw

    road = np.array([0.36, 0.36, 0.38]) * light
    img[horizon:] = road
    labels[horizon:] = 2
    lane_rows = slice(horizon + (H - horizon) // 2, horizon + (H - horizon) // 2 + 2)
    for lx in range(int(rng.integers(0, 10)), W, 14):
        img[lane_rows, lx : lx + 6] = np.array([0.85, 0.85, 0.8]) * light

    img += rng.normal(0.0, 0.02, size=img.shape)

    for _ in range(int(rng.integers(0, 3))):
        px = int(rng.integers(0, W - 2))
        ptop = horizon - int(rng.integers(5, max(6, horizon)))
        pbot = horizon + int(rng.integers(1, 6))
        img[max(ptop, 0) : pbot, px : px + 2] = np.array([0.2, 0.2, 0.24])
        labels[max(ptop, 0) : pbot, px : px + 2] = IGNORE_LABEL

    ego_h = H * rng.uniform(0.1, 0.16)
    bulge = 1.0 - 0.5 * ((cols - W / 2.0) / (W / 2.0)) ** 2
    ego = rows >= (H - ego_h * bulge)
    img[ego] = np.array([0.12, 0.12, 0.14]) + rng.normal(0.0, 0.01, size=(int(ego.sum()), 3))
    labels[ego] = IGNORE_LABEL

    depth = planar_depth(H, W, horizon, depth_near, depth_far)
    return SceneSpec(np.clip(img, 0.0, 1.0), ego, depth, labels)


def make_asset(rng: np.random.Generator, asset_id: str, category: str | None = None, size=(10, 22)) -> ObjectAsset:
    """Textured blob with a soft edge and saturated colours, padded so it never touches the border."""
    s = int(rng.integers(size[0], size[1] + 1))
    pad = 3
    n = s + 2 * pad
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    shape = np.zeros((n, n), dtype=bool)
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(pad + s * 0.3, pad + s * 0.7, size=2)
        ry, rx = rng.uniform(s * 0.2, s * 0.45, size=2)
        shape |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    alpha = np.clip(gaussian_filter(shape.astype(np.float64), 0.7), 0.0, 1.0)
    alpha[alpha < 0.02] = 0.0
    alpha[:1], alpha[-1:], alpha[:, :1], alpha[:, -1:] = 0.0, 0.0, 0.0, 0.0
    hue = rng.uniform(0, 1)
    c1 = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.7, 1.0), rng.uniform(0.6, 1.0)))
    c2 = np.array(colorsys.hsv_to_rgb((hue + rng.uniform(0.3, 0.7)) % 1.0, 0.9, rng.uniform(0.3, 0.9)))
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.6, 1.6)
    pattern = (np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta))) > 0)[..., None]
    rgb = np.where(pattern, c1, c2) + rng.normal(0.0, 0.03, size=(n, n, 3))
    category = category or CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    return ObjectAsset(np.concatenate([np.clip(rgb, 0, 1), alpha[..., None]], axis=-1), category, asset_id)


def filter_assets(candidates: Sequence[tuple[np.ndarray, str, str]], min_opaque_pixels: int = 16) -> list[ObjectAsset]:
    """Keep candidate ``(rgba, category, id)`` triples that are valid, border-free and large enough."""
    out = []
    for rgba, category, asset_id in candidates:
        try:
            asset = ObjectAsset(rgba, category, asset_id)
        except ContractViolation as exc:
            log.info("dropping asset %s: %s", asset_id, exc)
            continue
        if asset.opaque_area() < min_opaque_pixels:
            log.info("dropping asset %s: too small", asset_id)
            continue
        out.append(asset)
    return out


def make_assets(config: SynthConfig, seed: int) -> list[ObjectAsset]:
    rng = derive_rng(seed, "assets")
    return [make_asset(rng, f"a{i:04d}", size=config.asset_size) for i in range(config.n_assets)]


def make_backgrounds(n: int, config: SynthConfig, seed: int, stream: str = "backgrounds") -> list[SceneSpec]:
    out = []
    for i in range(n):
        scene = make_scene(derive_rng(seed, stream, i), config.height, config.width, config.depth_near, config.depth_far)
        scene.seed = i
        out.append(scene)
    return out


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    semantic: np.ndarray
    ego_mask: np.ndarray
    record: dict


@dataclass
class DatasetManifest:
    records: list[dict]
    splits: dict
    ood_pixel_count: int
    id_pixel_count: int
    ignored_pixel_count: int
    seed: int
    config: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))

    def split_records(self, split: str) -> list[dict]:
        return [r for r in self.records if r["split"] == split]


def split_assets(assets: Sequence[ObjectAsset], config: SynthConfig, seed: int):
    ids = sorted(a.asset_id for a in assets)
    if len(set(ids)) != len(ids):
        raise ConfigError("asset ids are not unique")
    if len(ids) < 2:
        raise ConfigError("need at least two assets to keep validation and test disjoint")
    order = derive_rng(seed, "asset-split").permutation(len(ids))
    n_val = int(round(config.validation_asset_fraction * len(ids)))
    n_val = min(max(n_val, 1), len(ids) - 1)
    val = sorted(ids[i] for i in order[:n_val])
    test = sorted(ids[i] for i in order[n_val:])
    return val, test


def _compose_image(scene: SceneSpec, pool: list[ObjectAsset], config: SynthConfig, rng: np.random.Generator):
    beta = float(rng.uniform(*config.fog_beta_range))
    fog = FogParams(beta, config.atmospheric_light, config.fog_probability)
    image, fogged = apply_fog(scene.image, scene.depth_proxy, fog, rng)
    mask = scene.eval_mask()
    placed = []

    def add(asset, scale=None):
        nonlocal image, mask
        t = sample_placement(rng, scene, asset, config, scale)
        adapted = color_adapt(asset, image, t, config.color_strength)
        image, mask = composite(image, adapted, t, mask, config.alpha_threshold)
        placed.append({"asset_id": asset.asset_id, "category": asset.category, "transform": t.to_json()})

    if config.target_prevalence is None:
        n_obj = int(rng.integers(config.objects_per_image[0], config.objects_per_image[1] + 1))
        for _ in range(n_obj):
            add(pool[int(rng.integers(len(pool)))])
    else:
        n_eval = int(np.sum(mask != IGNORE_LABEL))
        target = config.target_prevalence * n_eval
        while len(placed) < config.max_objects:
            have = int(np.sum(mask == OOD_LABEL))
            if have >= 0.99 * target:
                break
            asset = pool[int(rng.integers(len(pool)))]
            need = target - have
            # the last object may shrink below the usual range so the budget is met closely
            scale = np.sqrt(need / max(asset.opaque_area(), 1))
            scale = float(np.clip(scale, 0.5 * config.scale_range[0] ** 2, config.scale_range[1]))
            add(asset, scale)
    semantic = np.where(mask == OOD_LABEL, IGNORE_LABEL, scene.labels).astype(np.uint8)
    return image, mask, semantic, placed, fogged, beta


def generate_samples(
    backgrounds: Sequence[SceneSpec],
    assets: Sequence[ObjectAsset],
    config: SynthConfig,
    seed: int,
    train_backgrounds: Sequence[SceneSpec] = (),
) -> tuple[dict[str, list[Sample]], DatasetManifest]:
    """Build every split in memory. Deterministic in ``(config, seed)`` and the inputs."""
    if not backgrounds:
        raise ConfigError("no backgrounds supplied")
    val_ids, test_ids = split_assets(assets, config, seed)
    by_id = {a.asset_id: a for a in assets}
    pools = {"validation": [by_id[i] for i in val_ids], "test": [by_id[i] for i in test_ids]}
    counts = {"validation": config.n_validation, "test": config.n_test}
    samples: dict[str, list[Sample]] = {"train": [], "validation": [], "test": []}
    for i, scene in enumerate(train_backgrounds):
        rec = {"split": "train", "index": i, "asset_ids": [], "placements": [], "fog": False, "fog_beta": 0.0}
        samples["train"].append(
            Sample(scene.image, scene.eval_mask(), scene.labels.astype(np.uint8), scene.ego_mask, rec)
        )
    for split in ("validation", "test"):
        order = derive_rng(seed, "background-order", split).permutation(len(backgrounds))
        for i in range(counts[split]):
            bg_index = int(order[i % len(backgrounds)])
            rng = derive_rng(seed, split, i)
            image, mask, semantic, placed, fogged, beta = _compose_image(
                backgrounds[bg_index], pools[split], config, rng
            )
            rec = {
                "split": split,
                "index": i,
                "background": bg_index,
                "asset_ids": [p["asset_id"] for p in placed],
                "placements": placed,
                "fog": bool(fogged),
                "fog_beta": beta,
                "seed": [seed, split, i],
            }
            samples[split].append(Sample(image, mask, semantic, backgrounds[bg_index].ego_mask, rec))
    records = []
    ood = idp = ign = 0
    for split in ("train", "validation", "test"):
        for s in samples[split]:
            m = s.mask
            s.record["ood_pixels"] = int(np.sum(m == OOD_LABEL))
            s.record["id_pixels"] = int(np.sum(m == ID_LABEL))
            if split != "train":
                ood += s.record["ood_pixels"]
                idp += s.record["id_pixels"]
                ign += int(np.sum(m == IGNORE_LABEL))
            records.append(s.record)
    manifest = DatasetManifest(
        records=records,
        splits={"validation_assets": val_ids, "test_assets": test_ids},
        ood_pixel_count=ood,
        id_pixel_count=idp,
        ignored_pixel_count=ign,
        seed=seed,
        config=config.to_dict(),
    )
    return samples, manifest


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def read_image(path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return arr[..., :3].astype(np.float64) / 255.0


def write_dataset(out_dir, samples: dict[str, list[Sample]], manifest: DatasetManifest) -> DatasetManifest:
    """Write PNGs and ``manifest.json``; records gain relative file paths.

    Masks are recounted from the PNG payloads so the manifest matches what is on disk.
    """
    out = Path(out_dir)
    ood = idp = ign = 0
    for split, items in samples.items():
        for s in items:
            stem = f"{split}/{s.record['index']:04d}"
            paths = {
                "image": f"{stem}_image.png",
                "mask": f"{stem}_mask.png",
                "semantic": f"{stem}_semantic.png",
                "ego": f"{stem}_ego.png",
            }
            atomic_write(out / paths["image"], png_bytes(to_uint8(s.image)))
            atomic_write(out / paths["mask"], png_bytes(s.mask.astype(np.uint8)))
            atomic_write(out / paths["semantic"], png_bytes(s.semantic.astype(np.uint8)))
            atomic_write(out / paths["ego"], png_bytes(s.ego_mask.astype(np.uint8) * 255))
            s.record.update({f"{k}_path": v for k, v in paths.items()})
            if split != "train":
                ood += int(np.sum(s.mask == OOD_LABEL))
                idp += int(np.sum(s.mask == ID_LABEL))
                ign += int(np.sum(s.mask == IGNORE_LABEL))
    manifest.ood_pixel_count, manifest.id_pixel_count, manifest.ignored_pixel_count = ood, idp, ign
    atomic_write(out / "manifest.json", manifest.to_json().encode("utf-8"))
    return manifest


def generate_dataset(
    backgrounds: Sequence[SceneSpec],
    assets: Sequence[ObjectAsset],
    config: SynthConfig,
    seed: int,
    out_dir=None,
    train_backgrounds: Sequence[SceneSpec] = (),
):
    """Generate all splits; writes them under ``out_dir`` when given.

    Returns ``(manifest, samples)``.
    """
    samples, manifest = generate_samples(backgrounds, assets, config, seed, train_backgrounds)
    if out_dir is not None:
        manifest = write_dataset(out_dir, samples, manifest)
    return manifest, samples


def bundled_dataset(config: SynthConfig, seed: int, out_dir=None):
    """Procedural backgrounds and assets run through :func:`generate_dataset`."""
    assets = make_assets(config, seed)
    n_bg = max(config.n_validation, config.n_test)
    backgrounds = make_backgrounds(n_bg, config, seed, "backgrounds")
    train = make_backgrounds(config.n_train, config, seed, "train-backgrounds")
    return generate_dataset(backgrounds, assets, config, seed, out_dir, train)


def load_dataset_split(root, split: str):
    """Yield ``(record, image, mask, semantic)`` for a split written by :func:`write_dataset`."""
    root = Path(root)
    manifest = DatasetManifest.from_json((root / "manifest.json").read_text(encoding="utf-8"))
    for rec in manifest.split_records(split):
        yield (
            rec,
            read_image(root / rec["image_path"]),
            read_png(root / rec["mask_path"]),
            read_png(root / rec["semantic_path"]),
        )


def manifest_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_assets(asset_dir) -> list[ObjectAsset]:
    """RGBA PNGs from a directory; the category is the filename prefix before ``__``
    (``mammal-like__cat01.png``), defaulting to neutral."""
    out = []
    for p in sorted(Path(asset_dir).glob("*.png")):
        arr = read_png(p)
        if arr.ndim != 3 or arr.shape[2] != 4:
            continue
        cat = p.stem.split("__")[0] if "__" in p.stem else "neutral"
        out.append((arr.astype(np.float64) / 255.0, cat if cat in CATEGORIES else "neutral", p.stem))
    return filter_assets(out)


def load_backgrounds(bg_dir, depth_near=2.0, depth_far=50.0) -> list[SceneSpec]:
    """``<name>.png`` images with optional ``<name>_labels.png`` and ``<name>_ego.png`` siblings."""
    out = []
    for p in sorted(Path(bg_dir).glob("*.png")):
        if p.stem.endswith(("_labels", "_ego")):
            continue
        image = read_image(p)
        lab_p = p.with_name(f"{p.stem}_labels.png")
        ego_p = p.with_name(f"{p.stem}_ego.png")
        ego = read_png(ego_p) > 0 if ego_p.exists() else np.zeros(image.shape[:2], dtype=bool)
        labels = read_png(lab_p).astype(np.uint8) if lab_p.exists() else None
        H, W = image.shape[:2]
        out.append(SceneSpec(image, ego, planar_depth(H, W, None, depth_near, depth_far), labels))
    return out
