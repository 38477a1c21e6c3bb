"""Datasets: synthetic curvilinear structures, fundus-style directory loading,
augmentation, and the patch extraction/stitching protocol."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidArgument, LoadError

# luminance threshold for the approximate mask fallback
FOV_FALLBACK_THRESHOLD = 0.1


@dataclass
class Sample:
    """One dataset item: RGB image in [0,1], binary label, binary FOV mask."""

    image: np.ndarray  # [3, H, W]
    label: np.ndarray  # [1, H, W] in {0, 1}
    fov: np.ndarray  # [1, H, W] in {0, 1}
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise InvalidArgument(f"image must be [3, H, W], got {self.image.shape}")
        hw = self.image.shape[1:]
        for arr, what in ((self.label, "label"), (self.fov, "fov")):
            if arr.shape != (1, *hw):
                raise InvalidArgument(f"{what} shape {arr.shape} != (1, {hw[0]}, {hw[1]})")
            vals = np.unique(arr)
            if not np.isin(vals, (0.0, 1.0)).all():
                raise InvalidArgument(f"{what} must be binary, found values {vals[:5]}")


@dataclass(frozen=True)
class AugmentSpec:
    """Random geometric + photometric augmentation ranges."""

    rotation_deg: tuple[float, float] = (0.0, 360.0)
    scale: tuple[float, float] = (0.8, 1.4)
    flip_h: bool = True
    flip_v: bool = True
    shear_deg: tuple[float, float] = (-5.0, 5.0)
    brightness: tuple[float, float] = (-0.1, 0.1)
    saturation: tuple[float, float] = (0.7, 1.3)
    contrast: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        if self.scale[0] <= 0 or self.scale[1] < self.scale[0]:
            raise InvalidArgument(f"bad scale range {self.scale}")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls(
            rotation_deg=(0.0, 0.0), scale=(1.0, 1.0), flip_h=False, flip_v=False,
            shear_deg=(0.0, 0.0), brightness=(0.0, 0.0), saturation=(1.0, 1.0),
            contrast=(1.0, 1.0),
        )


@dataclass(frozen=True)
class PatchSpec:
    size: int = 256
    stride: int = 128
    batch: int = 2

    def __post_init__(self):
        if self.stride > self.size:
            raise InvalidArgument(f"stride {self.stride} exceeds patch size {self.size}")
        if self.size < 1 or self.batch < 1:
            raise InvalidArgument("patch size and batch must be positive")


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator knobs for the synthetic curvilinear dataset.

    The canonical pose is orientation- and width-banded; evaluation under
    rotations/rescalings then probes generalization to poses never seen in
    training.
    """

    count: int = 20
    size: int = 64
    curves: tuple[int, int] = (3, 10)
    width: tuple[float, float] = (1.0, 6.0)
    orientation_deg: float = 0.0
    orientation_spread_deg: float = 25.0
    vessel_contrast: tuple[float, float] = (0.10, 0.18)
    texture: tuple[float, float] = (0.02, 0.06)
    noise: float = 0.05
    # unlabeled dark blobs with vessel-like contrast: darkness alone cannot
    # separate the classes, elongated structure is required
    distractors: tuple[int, int] = (10, 22)
    distractor_radius: tuple[float, float] = (0.8, 2.6)

    def __post_init__(self):
        if self.size < 32:
            raise InvalidArgument(f"synthetic size must be >= 32, got {self.size}")


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _fft_blur(plane: np.ndarray, sigma: float) -> np.ndarray:
    h, w = plane.shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    g = np.exp(-2.0 * (math.pi * sigma) ** 2 * (fy ** 2 + fx ** 2))
    return np.fft.irfft2(np.fft.rfft2(plane) * g, s=(h, w))


def _quadratic_bezier(p0, p1, p2, t):
    t = t[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _stamp_curve(mask: np.ndarray, pts: np.ndarray, width: float) -> None:
    """Mark pixels within width/2 of the sampled polyline."""
    size = mask.shape[0]
    r = width / 2.0
    ir = int(math.ceil(r))
    offs = [
        (dy, dx)
        for dy in range(-ir, ir + 1)
        for dx in range(-ir, ir + 1)
        if dy * dy + dx * dx <= r * r + 1e-9
    ]
    ctr = np.unique(np.round(pts).astype(np.int64), axis=0)
    for dy, dx in offs:
        yy = ctr[:, 0] + dy
        xx = ctr[:, 1] + dx
        ok = (yy >= 0) & (yy < size) & (xx >= 0) & (xx < size)
        mask[yy[ok], xx[ok]] = True


def gen_synthetic(seed: int, count: int | None = None, size: int | None = None,
                  spec: SyntheticSpec | None = None) -> list[Sample]:
    """Deterministic synthetic samples: dark smooth curves on a textured
    background, full-ones inscribed-disc FOV."""
    spec = spec or SyntheticSpec()
    if count is not None or size is not None:
        spec = SyntheticSpec(
            **{
                **spec.__dict__,
                **({"count": count} if count is not None else {}),
                **({"size": size} if size is not None else {}),
            }
        )
    out = []
    for i in range(spec.count):
        out.append(_gen_one(_rng_for(seed, i), spec, name=f"synth{seed:04d}_{i:03d}"))
    return out


def _gen_one(rng: np.random.Generator, spec: SyntheticSpec, name: str) -> Sample:
    size = spec.size
    base = rng.uniform(0.55, 0.8)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    texture = np.zeros((size, size))
    for _ in range(3):
        f = rng.uniform(0.5, 3.0) / size
        ang = rng.uniform(0, 2 * math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(*spec.texture)
        texture += amp * np.cos(
            2 * math.pi * f * (yy * math.cos(ang) + xx * math.sin(ang)) + phase
        )
    mask = np.zeros((size, size), dtype=bool)
    n_curves = int(rng.integers(spec.curves[0], spec.curves[1] + 1))
    for _ in range(n_curves):
        width = spec.width[0] + (spec.width[1] - spec.width[0]) * rng.uniform() ** 2
        phi = math.radians(spec.orientation_deg) + math.radians(
            rng.uniform(-spec.orientation_spread_deg, spec.orientation_spread_deg)
        )
        length = rng.uniform(0.5, 1.0) * size
        ctr = rng.uniform(0.2 * size, 0.8 * size, size=2)
        d = np.array([math.cos(phi), math.sin(phi)])
        perp = np.array([-d[1], d[0]])
        p0 = ctr - 0.5 * length * d
        p2 = ctr + 0.5 * length * d
        p1 = ctr + perp * rng.uniform(-0.2, 0.2) * length
        t = np.linspace(0.0, 1.0, max(int(2.5 * length), 8))
        pts = _quadratic_bezier(p0, p1, p2, t)
        inside = ((pts >= 0) & (pts < size)).all(axis=1)
        if inside.any():
            _stamp_curve(mask, pts[inside], width)
    blobs = np.zeros((size, size), dtype=bool)
    n_blobs = int(rng.integers(spec.distractors[0], spec.distractors[1] + 1))
    for _ in range(n_blobs):
        r = rng.uniform(*spec.distractor_radius)
        ctr = rng.uniform(2, size - 2, size=2)
        _stamp_curve(blobs, ctr[None, :], 2 * r)
    depth = rng.uniform(*spec.vessel_contrast)
    soft = _fft_blur(mask.astype(np.float64), 0.7)
    soft_blobs = _fft_blur(blobs.astype(np.float64), 0.7)
    gray = base + texture - depth * np.maximum(soft, soft_blobs)
    image = np.stack([
        np.clip(gray * rng.uniform(0.95, 1.05) + rng.normal(0, spec.noise, gray.shape), 0, 1)
        for _ in range(3)
    ])
    c = (size - 1) / 2.0
    fov = ((yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2).astype(np.float64)
    return Sample(
        image=image,
        label=mask.astype(np.float64)[None],
        fov=fov[None],
        name=name,
    )


# -- fundus-style directory loading ------------------------------------------


def _load_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert(mode), dtype=np.float64) / 255.0


def load_fundus_dir(path, fov_fallback: bool = False) -> list[Sample]:
    """Load images/, labels/, fov/ PNG triples with matching stems.

    Images are scaled to [0,1]; labels and masks binarized at 0.5.  With
    ``fov_fallback`` a missing fov/ directory is replaced by an approximate
    mask (luminance threshold, largest connected component).
    """
    root = Path(path)
    img_dir, lab_dir, fov_dir = root / "images", root / "labels", root / "fov"
    if not img_dir.is_dir():
        raise LoadError(f"missing images directory under {root}")
    stems = sorted(p.stem for p in img_dir.glob("*.png"))
    if not stems:
        warnings.warn(f"no PNG images found under {img_dir}")
        return []
    samples = []
    for stem in stems:
        image = _load_png(img_dir / f"{stem}.png", "RGB").transpose(2, 0, 1)
        lab_path = lab_dir / f"{stem}.png"
        if not lab_path.exists():
            raise LoadError(f"no label for stem {stem!r} (expected {lab_path})")
        raw = _load_png(lab_path, "L")
        if ((raw > 0.1) & (raw < 0.9)).mean() > 0.05:
            warnings.warn(f"label {stem!r} is far from binary; thresholding at 0.5")
        label = (raw >= 0.5).astype(np.float64)
        fov_path = fov_dir / f"{stem}.png"
        if fov_path.exists():
            fov = (_load_png(fov_path, "L") >= 0.5).astype(np.float64)
        elif fov_fallback:
            fov = _fov_from_luminance(image)
        else:
            raise LoadError(f"no fov mask for stem {stem!r} (expected {fov_path})")
        if label.shape != image.shape[1:] or fov.shape != image.shape[1:]:
            raise LoadError(
                f"size mismatch for stem {stem!r}: image {image.shape[1:]}, "
                f"label {label.shape}, fov {fov.shape}"
            )
        samples.append(Sample(image=image, label=label[None], fov=fov[None], name=stem))
    return samples


def _fov_from_luminance(image: np.ndarray) -> np.ndarray:
    """Approximate field-of-view: bright region, largest connected component."""
    bright = image.mean(axis=0) > FOV_FALLBACK_THRESHOLD
    labels, count = _label_components(bright)
    if count == 0:
        return np.zeros_like(bright, dtype=np.float64)
    sizes = np.bincount(labels.reshape(-1))[1:]
    return (labels == (1 + int(sizes.argmax()))).astype(np.float64)


def _label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected component labeling via per-row runs and union-find."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int64)
    parent: list[int] = [0]

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    prev_runs: list[tuple[int, int, int]] = []
    for y in range(h):
        row = mask[y]
        runs = []
        x = 0
        while x < w:
            if row[x]:
                x1 = x
                while x < w and row[x]:
                    x += 1
                parent.append(len(parent))
                lbl = len(parent) - 1
                labels[y, x1:x] = lbl
                for p1, p2, plbl in prev_runs:
                    if p1 < x and p2 > x1:
                        union(lbl, plbl)
                runs.append((x1, x, lbl))
            else:
                x += 1
        prev_runs = runs
    if len(parent) == 1:
        return labels, 0
    roots = np.array([find(i) for i in range(len(parent))])
    remap = np.zeros(len(parent), dtype=np.int64)
    uniq = np.unique(roots[1:])
    remap[uniq] = np.arange(1, len(uniq) + 1)
    return remap[roots[labels]], len(uniq)


# -- augmentation --------------------------------------------------------------


def _affine_sample(plane: np.ndarray, mat: np.ndarray, nearest: bool,
                   boundary: str = "reflect") -> np.ndarray:
    """out[x] = plane[mat @ (x - c) + c] with bilinear or nearest sampling."""
    h, w = plane.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    qy = mat[0, 0] * (ys - cy) + mat[0, 1] * (xs - cx) + cy
    qx = mat[1, 0] * (ys - cy) + mat[1, 1] * (xs - cx) + cx

    def fetch(iy, ix):
        if boundary == "reflect":
            from .equivariance import _reflect_index

            return plane[_reflect_index(iy, h), _reflect_index(ix, w)]
        inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        vals = np.zeros_like(qy)
        vals[inside] = plane[iy[inside], ix[inside]]
        return vals

    if nearest:
        return fetch(np.round(qy).astype(np.intp), np.round(qx).astype(np.intp))
    y0 = np.floor(qy).astype(np.intp)
    x0 = np.floor(qx).astype(np.intp)
    fy, fx = qy - y0, qx - x0
    out = np.zeros_like(qy)
    for dy in (0, 1):
        for dx in (0, 1):
            wgt = (fy if dy else 1 - fy) * (fx if dx else 1 - fx)
            out += wgt * fetch(y0 + dy, x0 + dx)
    return out


def _augment_matrix(a: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Inverse-lookup matrix for one random affine draw."""
    theta = math.radians(rng.uniform(*a.rotation_deg))
    scale = rng.uniform(*a.scale)
    shear = math.tan(math.radians(rng.uniform(*a.shear_deg)))
    fh = -1.0 if (a.flip_h and rng.uniform() < 0.5) else 1.0
    fv = -1.0 if (a.flip_v and rng.uniform() < 0.5) else 1.0
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, s], [-s, c]])
    sh = np.array([[1.0, shear], [0.0, 1.0]])
    fl = np.diag([fv, fh])
    fwd = scale * (rot @ sh @ fl)
    return np.linalg.inv(fwd)


def augment(s: Sample, a: AugmentSpec, draw: np.random.Generator) -> Sample:
    """One random affine applied identically to image/label/fov (bilinear vs
    nearest), then photometric jitter on the image only."""
    mat = _augment_matrix(a, draw)
    image = np.stack([_affine_sample(p, mat, nearest=False, boundary="reflect")
                      for p in s.image])
    label = _affine_sample(s.label[0], mat, nearest=True)[None]
    fov = _affine_sample(s.fov[0], mat, nearest=True)[None]

    brightness = draw.uniform(*a.brightness)
    contrast = draw.uniform(*a.contrast)
    saturation = draw.uniform(*a.saturation)
    gray = image.mean(axis=0, keepdims=True)
    image = gray + saturation * (image - gray)
    image = image.mean() + contrast * (image - image.mean())
    image = np.clip(image + brightness, 0.0, 1.0)
    return Sample(image=image, label=label, fov=fov, name=s.name)


# -- patch protocol --------------------------------------------------------------


def _grid_positions(extent: int, size: int, stride: int) -> list[int]:
    """Stride-spaced starts, with a final start aligned to the far border."""
    if extent <= size:
        return [0]
    pos = list(range(0, extent - size + 1, stride))
    if pos[-1] != extent - size:
        pos.append(extent - size)
    return pos


def _pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    ph, pw = max(size - h, 0), max(size - w, 0)
    if not ph and not pw:
        return arr
    width = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, width, mode="reflect")


def extract_patches(arr: np.ndarray, p: PatchSpec) -> list[np.ndarray]:
    """Overlapping [C, size, size] patches covering the frame."""
    arr = _pad_to(np.asarray(arr), p.size)
    h, w = arr.shape[-2:]
    return [
        arr[..., y : y + p.size, x : x + p.size].copy()
        for y in _grid_positions(h, p.size, p.stride)
        for x in _grid_positions(w, p.size, p.stride)
    ]


def stitch_patches(patches: list[np.ndarray], original_hw: tuple[int, int],
                   p: PatchSpec) -> np.ndarray:
    """Average overlapping patch predictions back into a full-frame map."""
    h, w = original_hw
    hp, wp = max(h, p.size), max(w, p.size)
    ys = _grid_positions(hp, p.size, p.stride)
    xs = _grid_positions(wp, p.size, p.stride)
    if len(patches) != len(ys) * len(xs):
        raise InvalidArgument(
            f"got {len(patches)} patches, expected {len(ys) * len(xs)}"
        )
    acc = np.zeros((*patches[0].shape[:-2], hp, wp))
    cnt = np.zeros((hp, wp))
    it = iter(patches)
    for y in ys:
        for x in xs:
            acc[..., y : y + p.size, x : x + p.size] += next(it)
            cnt[y : y + p.size, x : x + p.size] += 1.0
    return (acc / cnt)[..., :h, :w]


# -- synthetic export -------------------------------------------------------------


def save_sample_pngs(s: Sample, outdir) -> None:
    out = Path(outdir)
    for sub, arr, mode in (
        ("images", (s.image.transpose(1, 2, 0) * 255).round().astype(np.uint8), "RGB"),
        ("labels", (s.label[0] * 255).astype(np.uint8), "L"),
        ("fov", (s.fov[0] * 255).astype(np.uint8), "L"),
    ):
        d = out / sub
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr, mode=mode).save(d / f"{s.name}.png")
