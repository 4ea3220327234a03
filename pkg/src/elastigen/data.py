"""Procedural synthetic scenes with ground-truth attributes.

Each scene is a solid-hue background, one anti-aliased ellipse, and a
curvature-controlled "smile" arc drawn inside the ellipse. Attributes are
recoverable by pure pixel measurements, so the same evaluator works on
dataset renders and on generator outputs, which is what makes attribute-
consistency and editing-direction checks possible without a pretrained
classifier.

Pixel range is [-1, 1] to match the generator output convention.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from elastigen import persistence

ATTRIBUTE_NAMES = ("bright_background", "large_shape", "smiling", "warm_foreground")

# fixed palette parameters; foreground differs from background in
# saturation/value so the shape stays measurable even at equal hue
_BG_SAT, _BG_VAL = 0.55, 0.85
_FG_SAT, _FG_VAL = 0.95, 0.50
_SMILE_VAL = 0.06
_EDGE_SOFTNESS = 0.04  # in [-1, 1] scene coordinates; ~2/3 px at 32x32


class UnknownAttributeError(ValueError):
    pass


@dataclass(frozen=True)
class SceneAttrs:
    background_hue: float
    shape_size: float
    shape_aspect: float
    center_offset: tuple[float, float]
    smile_curvature: float
    foreground_hue: float

    def __post_init__(self):
        checks = [
            (0.0 <= self.background_hue < 1.0, "background_hue"),
            (0.2 <= self.shape_size <= 0.6, "shape_size"),
            (0.5 <= self.shape_aspect <= 2.0, "shape_aspect"),
            (all(-0.2 <= c <= 0.2 for c in self.center_offset), "center_offset"),
            (-1.0 <= self.smile_curvature <= 1.0, "smile_curvature"),
            (0.0 <= self.foreground_hue < 1.0, "foreground_hue"),
        ]
        for ok, name in checks:
            if not ok:
                raise ValueError(f"SceneAttrs.{name} out of range")

    def labels(self) -> dict[str, bool]:
        return {
            "bright_background": self.background_hue > 0.5,
            "large_shape": self.shape_size > 0.4,
            "smiling": self.smile_curvature > 0.0,
            "warm_foreground": _circular_dist(self.foreground_hue, 0.0) < 0.25,
        }


@dataclass(frozen=True)
class DatasetSpec:
    count: int
    resolution: int
    seed: int
    aa_samples: int = 2

    def __post_init__(self):
        if self.resolution < 4 or self.resolution & (self.resolution - 1):
            raise ValueError("resolution must be a power of two >= 4")


def sample_attrs(rng: np.random.Generator) -> SceneAttrs:
    return SceneAttrs(
        background_hue=float(rng.uniform(0.0, 1.0)),
        shape_size=float(rng.uniform(0.2, 0.6)),
        shape_aspect=float(rng.uniform(0.5, 2.0)),
        center_offset=(float(rng.uniform(-0.2, 0.2)), float(rng.uniform(-0.2, 0.2))),
        smile_curvature=float(rng.uniform(-1.0, 1.0)),
        foreground_hue=float(rng.uniform(0.0, 1.0)),
    )


def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB, all components in [0, 1]."""
    h = np.asarray(h, dtype=np.float64) % 1.0
    s = np.asarray(s, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=0)


def _rgb_to_hue(rgb: np.ndarray) -> np.ndarray:
    """Hue channel of RGB (components in [0,1]); achromatic pixels map to 0."""
    r, g, b = rgb[0], rgb[1], rgb[2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(
        mx == r, (g - b) / safe % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    return np.where(d > 0, h / 6.0 % 1.0, 0.0)


def _circular_dist(a, b):
    d = np.abs(np.asarray(a) - np.asarray(b)) % 1.0
    return np.minimum(d, 1.0 - d)


def _circular_median(hues: np.ndarray) -> float:
    """Median on the circle: recenter around the circular mean, then median."""
    ang = np.asarray(hues) * 2.0 * np.pi
    mean = np.arctan2(np.sin(ang).mean(), np.cos(ang).mean()) / (2.0 * np.pi)
    centered = (np.asarray(hues) - mean + 0.5) % 1.0
    return float((np.median(centered) + mean - 0.5) % 1.0)


def _soft_mask(signed_dist: np.ndarray) -> np.ndarray:
    """1 inside (negative distance), 0 outside, linear ramp across the edge."""
    return np.clip(0.5 - signed_dist / _EDGE_SOFTNESS, 0.0, 1.0)


def render_scene(attrs: SceneAttrs, resolution: int, aa_samples: int = 2) -> np.ndarray:
    """Deterministic render -> float32 [3, R, R] in [-1, 1]."""
    r = resolution * aa_samples
    # pixel centers in [-1, 1]; y grows downward
    coords = (np.arange(r) + 0.5) / r * 2.0 - 1.0
    ys, xs = np.meshgrid(coords, coords, indexing="ij")

    cx, cy = attrs.center_offset
    semi_x = attrs.shape_size * np.sqrt(attrs.shape_aspect)
    semi_y = attrs.shape_size / np.sqrt(attrs.shape_aspect)
    # approximate signed distance to the ellipse edge
    q = np.sqrt(((xs - cx) / semi_x) ** 2 + ((ys - cy) / semi_y) ** 2)
    ellipse = _soft_mask((q - 1.0) * min(semi_x, semi_y))

    # smile arc: quadratic stroke inside the ellipse, below its center
    hw = 0.55 * semi_x
    y0 = cy + 0.30 * semi_y
    xr = (xs - cx) / hw
    arc_y = y0 + 0.35 * semi_y * attrs.smile_curvature * (xr ** 2 - 1.0)
    stroke_w = max(0.08 * semi_y, 0.06)
    d_arc = np.abs(ys - arc_y) - stroke_w
    span = _soft_mask((np.abs(xr) - 1.0) * hw)
    smile = _soft_mask(d_arc) * span * ellipse

    bg = _hsv_to_rgb(attrs.background_hue, _BG_SAT, _BG_VAL)[:, None, None]
    fg = _hsv_to_rgb(attrs.foreground_hue, _FG_SAT, _FG_VAL)[:, None, None]
    smile_rgb = np.full((3, 1, 1), _SMILE_VAL)

    img = bg * (1.0 - ellipse) + fg * ellipse
    img = img * (1.0 - smile) + smile_rgb * smile

    if aa_samples > 1:
        img = img.reshape(3, resolution, aa_samples, resolution, aa_samples).mean(axis=(2, 4))
    return (img * 2.0 - 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# attribute measurement (pure pixel functions; also valid on generator output)

def _to_unit_rgb(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("eval_attribute expects a single image")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {arr.shape}")
    return np.clip((arr + 1.0) / 2.0, 0.0, 1.0)


def _masks(rgb: np.ndarray):
    res = rgb.shape[1]
    border = np.zeros((res, res), dtype=bool)
    bw = max(1, res // 16)
    border[:bw, :] = border[-bw:, :] = border[:, :bw] = border[:, -bw:] = True
    bg_color = np.median(rgb[:, border], axis=1)
    value = rgb.max(axis=0)
    dark = value < 0.30
    dist_bg = np.sqrt(((rgb - bg_color[:, None, None]) ** 2).sum(axis=0))
    fg = (dist_bg > 0.28) & ~dark
    return border, bg_color, dark, fg


def _shape_coverage(rgb: np.ndarray, bg_color: np.ndarray, dark: np.ndarray,
                    fg: np.ndarray) -> np.ndarray | None:
    """Per-pixel shape coverage by linear unmixing against the background.

    Edge pixels blend linearly between background and foreground, so the
    projection onto the bg->fg axis recovers the exact coverage fraction;
    the smile fraction (value-based unmixing) is added back so the covered
    area equals the ellipse, not the ellipse minus the stroke.
    """
    interior = fg & (np.sqrt(((rgb - bg_color[:, None, None]) ** 2).sum(axis=0)) > 0.35)
    if interior.sum() < 3:
        return None
    fg_color = np.median(rgb[:, interior], axis=1)
    axis = fg_color - bg_color
    denom = float((axis ** 2).sum())
    if denom < 1e-4:
        return None
    proj = ((rgb - bg_color[:, None, None]) * axis[:, None, None]).sum(axis=0) / denom
    value = rgb.max(axis=0)
    v_fg = float(fg_color.max())
    smile_frac = np.clip((v_fg - value) / max(v_fg - _SMILE_VAL, 1e-3), 0.0, 1.0)
    return np.clip(np.clip(proj, 0.0, 1.0) + smile_frac, 0.0, 1.0)


def eval_attribute(image, name: str) -> tuple[bool, float]:
    """Thresholded measurement -> (label, confidence = distance to threshold)."""
    if name not in ATTRIBUTE_NAMES:
        raise UnknownAttributeError(f"unknown attribute {name!r}; known: {ATTRIBUTE_NAMES}")
    rgb = _to_unit_rgb(image)
    res = rgb.shape[1]
    border, bg_color, dark, fg = _masks(rgb)

    if name == "bright_background":
        hue = float(np.median(_rgb_to_hue(rgb[:, border])))
        return hue > 0.5, abs(hue - 0.5)

    if name == "large_shape":
        threshold = np.pi * 0.4 ** 2 / 4.0
        coverage = _shape_coverage(rgb, bg_color, dark, fg)
        if coverage is None:
            area = float((fg | dark).mean())
        else:
            area = float(coverage.mean())
        return area > threshold, abs(area - threshold)

    if name == "warm_foreground":
        if fg.sum() < 5:
            return False, 0.0
        hue = _circular_median(_rgb_to_hue(rgb[:, fg]))
        dist = float(_circular_dist(hue, 0.0))
        return dist < 0.25, abs(0.25 - dist)

    # smiling: per-column darkness-weighted centroids of the stroke, then a
    # quadratic fit; the x^2 coefficient's sign is the curvature sign
    weights = np.clip(0.42 - rgb.max(axis=0), 0.0, 1.0)
    col_w = weights.sum(axis=0)
    if float(col_w.sum()) < 0.25:
        return False, 0.0
    coords = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    good = col_w > 0.02
    if good.sum() < 3:
        return False, 0.0
    # drop the outermost stroke columns: span edges and ellipse clipping
    # bias their centroids
    gi = np.nonzero(good)[0]
    if gi.size >= 6:
        trim = max(1, gi.size // 6)
        good[gi[:trim]] = False
        good[gi[-trim:]] = False
    xs_c = coords[good]
    cent = (weights[:, good] * coords[:, None]).sum(axis=0) / col_w[good]
    w_c = col_w[good]
    xm = float((w_c * xs_c).sum() / w_c.sum())
    a = np.stack([np.ones_like(xs_c), xs_c - xm, (xs_c - xm) ** 2], axis=1)
    aw = a * w_c[:, None]
    try:
        coef = np.linalg.solve(aw.T @ a, aw.T @ cent)
    except np.linalg.LinAlgError:
        return False, 0.0
    beta = float(coef[2])
    # convert to the arc's rise over its measured half-span, in pixel units
    half_span = max(float(np.abs(xs_c - xm).max()), 1e-6)
    rise_px = beta * half_span ** 2 * res / 2.0
    # positive curvature bends the arc ends downward (+y), so beta > 0
    conf = min(abs(rise_px) / 2.0, 1.0)
    return beta > 0, conf


# ---------------------------------------------------------------------------
# on-disk dataset

@dataclass
class Dataset:
    spec: DatasetSpec
    images: np.ndarray  # [count, 3, R, R] float32
    attrs: list[SceneAttrs] = field(repr=False)

    def __len__(self) -> int:
        return self.spec.count


def generate(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    attrs = [sample_attrs(rng) for _ in range(spec.count)]
    images = np.stack([render_scene(a, spec.resolution, spec.aa_samples) for a in attrs])
    return Dataset(spec=spec, images=images, attrs=attrs)


def build_dataset(spec: DatasetSpec, out_dir: str) -> Dataset:
    """Render and persist: one raw-tensor file per sample plus a text index."""
    ds = generate(spec)
    os.makedirs(out_dir, exist_ok=True)
    index = {"spec": asdict(spec), "samples": {}}
    for i, (img, attrs) in enumerate(zip(ds.images, ds.attrs)):
        name = f"{i:05d}.ten"
        persistence.write_tensor_file(os.path.join(out_dir, name), img)
        index["samples"][f"{i:05d}"] = asdict(attrs)
    tmp = os.path.join(out_dir, "index.json.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(index, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, os.path.join(out_dir, "index.json"))
    return ds


def load_dataset(path: str) -> Dataset:
    with open(os.path.join(path, "index.json"), encoding="utf-8") as f:
        index = json.load(f)
    spec_d = index["spec"]
    spec = DatasetSpec(count=spec_d["count"], resolution=spec_d["resolution"],
                       seed=spec_d["seed"], aa_samples=spec_d.get("aa_samples", 2))
    images = []
    attrs = []
    for sid in sorted(index["samples"]):
        images.append(persistence.read_tensor_file(os.path.join(path, f"{sid}.ten")))
        a = index["samples"][sid]
        attrs.append(SceneAttrs(
            background_hue=a["background_hue"], shape_size=a["shape_size"],
            shape_aspect=a["shape_aspect"], center_offset=tuple(a["center_offset"]),
            smile_curvature=a["smile_curvature"], foreground_hue=a["foreground_hue"]))
    return Dataset(spec=spec, images=np.stack(images), attrs=attrs)
