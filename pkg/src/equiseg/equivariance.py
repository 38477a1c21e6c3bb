"""Input/feature-map transforms and equivariance measurement.

The continuous theory says: warp the input, and the layer output is the
same warp plus a shift along the rot/scale axes.  Discretely two details
matter and are handled here:

* Even kernels with size-preserving (k/2-1, k/2) padding sample the output
  field half a pixel off the input lattice, so each convolution shifts the
  exact rotation center by half a pixel.  ``center_offset`` tracks this
  (+0.5 per convolution); quarter-turn warps about any such center are still
  exact lattice permutations.
* The scale axis is truncated.  Output scale b only reads input scales >= b,
  so after a one-step scale shift the slices at or above the shift are exact
  and comparison is restricted to them.

All functions here are pure numpy on detached arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bank import GroupSpec
from .errors import InvalidArgument
from .nn import GroupFeatureMap

_QUARTER = math.pi / 2.0


@dataclass(frozen=True)
class WarpSpec:
    """A group transformation of inputs: rotate by theta_hat, scale by mu**s_hat."""

    theta_hat: float = 0.0
    s_hat: int = 0
    mu: float = 1.25
    interpolation: str = "exact90"  # {"exact90", "bilinear"}
    boundary: str = "zero"  # {"zero", "reflect"}

    def __post_init__(self):
        if self.interpolation not in ("exact90", "bilinear"):
            raise InvalidArgument(f"unknown interpolation {self.interpolation!r}")
        if self.boundary not in ("zero", "reflect"):
            raise InvalidArgument(f"unknown boundary {self.boundary!r}")
        if self.interpolation == "exact90":
            if self.s_hat != 0:
                raise InvalidArgument("exact90 supports s_hat = 0 only")
            if not _is_quarter_multiple(self.theta_hat):
                raise InvalidArgument(
                    f"exact90 needs theta_hat in multiples of pi/2, got {self.theta_hat}"
                )


def _is_quarter_multiple(theta: float, tol: float = 1e-9) -> bool:
    q = theta / _QUARTER
    return abs(q - round(q)) < tol


def _lookup_matrix(theta: float, s: int, mu: float) -> np.ndarray:
    """Index-space lookup map for the content transform.

    out[x] = in[M (x - c) + c] with M = mu**(-s) * R(theta); positive s
    magnifies content by mu**s, positive theta turns content the same way as
    a +1 array quarter-turn at theta = pi/2.
    """
    c, sn = math.cos(theta), math.sin(theta)
    return mu ** (-s) * np.array([[c, sn], [-sn, c]])


def warp_image(img: np.ndarray, w: WarpSpec, center_offset: float = 0.0) -> np.ndarray:
    """Warp the last two axes about the image center.

    exact90 is a lossless lattice permutation (for center_offset 0 it equals
    a plain array quarter-turn); bilinear inverse-maps each output pixel and
    samples with the chosen boundary rule.
    """
    img = np.asarray(img)
    h, ww = img.shape[-2], img.shape[-1]
    if w.interpolation == "exact90":
        if h != ww:
            raise InvalidArgument("exact90 needs square spatial extent")
        m = int(round(w.theta_hat / _QUARTER)) % 4
        return _rot90_about(img, m, center_offset)
    return _bilinear_warp(img, w, center_offset)


def _rot90_about(img: np.ndarray, m: int, offset: float):
    h = img.shape[-1]
    if m == 0 and offset == 0.0:
        return img.copy()
    c = (h - 1) / 2.0 - offset
    if abs(2 * c - round(2 * c)) > 1e-9:
        raise InvalidArgument(f"center offset {offset} breaks the lattice")
    ys, xs = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    cs = (1, 0, -1, 0)[m]
    sn = (0, 1, 0, -1)[m]
    q1 = cs * (ys - c) + sn * (xs - c) + c
    q2 = -sn * (ys - c) + cs * (xs - c) + c
    q1 = np.round(q1).astype(np.intp)
    q2 = np.round(q2).astype(np.intp)
    valid = (q1 >= 0) & (q1 < h) & (q2 >= 0) & (q2 < h)
    out = np.zeros_like(img)
    out[..., valid] = img[..., q1[valid], q2[valid]]
    return out


def _reflect_index(q: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices into [0, n-1] without repeating the edge sample."""
    if n == 1:
        return np.zeros_like(q)
    period = 2 * (n - 1)
    q = np.abs(q) % period
    return np.where(q >= n, period - q, q)


def _bilinear_warp(img: np.ndarray, w: WarpSpec, offset: float) -> np.ndarray:
    h, ww = img.shape[-2], img.shape[-1]
    mat = _lookup_matrix(w.theta_hat, w.s_hat, w.mu)
    cy = (h - 1) / 2.0 - offset
    cx = (ww - 1) / 2.0 - offset
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(ww, dtype=np.float64), indexing="ij")
    qy = mat[0, 0] * (ys - cy) + mat[0, 1] * (xs - cx) + cy
    qx = mat[1, 0] * (ys - cy) + mat[1, 1] * (xs - cx) + cx
    y0 = np.floor(qy).astype(np.intp)
    x0 = np.floor(qx).astype(np.intp)
    fy = qy - y0
    fx = qx - x0
    out = np.zeros(img.shape, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            wgt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
            if w.boundary == "reflect":
                sample = img[..., _reflect_index(yy, h), _reflect_index(xx, ww)]
            else:
                inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < ww)
                sample = np.zeros(img.shape, dtype=np.float64)
                sample[..., inside] = img[..., yy[inside], xx[inside]]
            out += wgt * sample
    return out


def rot_steps(w: WarpSpec, g: GroupSpec) -> int:
    steps = w.theta_hat / g.rot_step
    if abs(steps - round(steps)) > 1e-9:
        raise InvalidArgument(
            f"theta_hat={w.theta_hat} is not a multiple of the rot step {g.rot_step}"
        )
    return int(round(steps)) % g.n_rot


def transform_feature(f: GroupFeatureMap, w: WarpSpec,
                      center_offset: float = 0.0) -> GroupFeatureMap:
    """Group action on a feature map: shift the rot/scale axes, warp slices.

    Output rot slice a takes input slice (a + steps) mod n_rot; output scale
    slice b takes input slice b - s_hat (vacated slots zero).  These
    directions pair with the warp convention of ``warp_image`` so the layer
    equivariance identities hold.
    """
    g = f.group
    steps = rot_steps(w, g)
    t = np.roll(f.tensor, -steps, axis=2)
    if w.s_hat:
        shifted = np.zeros_like(t)
        s = w.s_hat
        if s > 0:
            if s < g.n_scale:
                shifted[:, :, :, s:] = t[:, :, :, : g.n_scale - s]
        else:
            if -s < g.n_scale:
                shifted[:, :, :, :s] = t[:, :, :, -s:]
        t = shifted
    t = warp_image(t, w, center_offset=center_offset)
    return GroupFeatureMap(t, g)


def valid_scales(w: WarpSpec, g: GroupSpec) -> np.ndarray:
    """Scale slices that survive the shift truncation on both sides."""
    keep = np.ones(g.n_scale, dtype=bool)
    if w.s_hat > 0:
        keep[: min(w.s_hat, g.n_scale)] = False
    elif w.s_hat < 0:
        keep[max(g.n_scale + w.s_hat, 0):] = False
    return keep


@dataclass(frozen=True)
class ErrorReport:
    value: float
    absolute_fallback: bool = False

    def __float__(self):
        return self.value


def _crop(arr: np.ndarray, crop: int) -> np.ndarray:
    if crop <= 0:
        return arr
    if 2 * crop >= arr.shape[-1] or 2 * crop >= arr.shape[-2]:
        raise InvalidArgument(f"crop {crop} swallows the whole {arr.shape[-2:]} map")
    return arr[..., crop:-crop, crop:-crop]


def _apply_transform(arr_or_fmap, w: WarpSpec, group: GroupSpec | None,
                     center_offset: float):
    if isinstance(arr_or_fmap, GroupFeatureMap):
        return transform_feature(arr_or_fmap, w, center_offset=center_offset)
    arr = np.asarray(arr_or_fmap)
    if arr.ndim == 6:
        if group is None:
            raise InvalidArgument("6D input needs a GroupSpec")
        fm = GroupFeatureMap(arr, group)
        return transform_feature(fm, w, center_offset=center_offset)
    return warp_image(arr, w, center_offset=center_offset)


def _as_array(x) -> np.ndarray:
    return x.tensor if isinstance(x, GroupFeatureMap) else np.asarray(x)


def equivariance_error(
    layer,
    input,
    w: WarpSpec,
    crop: int,
    group: GroupSpec | None = None,
    in_offset: float = 0.0,
    out_offset: float | None = None,
) -> ErrorReport:
    """Interior relative L2 mismatch of layer(warp(x)) vs transform(layer(x)).

    ``layer`` maps arrays to arrays (images, 6D feature tensors, or 4D score
    maps).  ``in_offset``/``out_offset`` are the lattice center offsets of
    the input and output samples; with the even-kernel convention every
    convolution inside the layer adds half a pixel, which is the default
    assumption when ``out_offset`` is omitted for a 6D output.
    """
    warped_in = _apply_transform(input, w, group, in_offset)
    lhs = _as_array(layer(_as_array(warped_in)))
    base = layer(_as_array(input))
    if out_offset is None:
        out_offset = in_offset + 0.5
    if isinstance(base, GroupFeatureMap) or np.asarray(base).ndim == 6:
        fm = base if isinstance(base, GroupFeatureMap) else GroupFeatureMap(base, group)
        rhs = transform_feature(fm, w, center_offset=out_offset).tensor
        keep = valid_scales(w, fm.group)
        lhs = lhs[:, :, :, keep]
        rhs = rhs[:, :, :, keep]
    else:
        rhs = warp_image(np.asarray(base), w, center_offset=out_offset)
    diff = _crop(lhs - rhs, crop)
    ref = _crop(rhs, crop)
    denom = np.linalg.norm(ref)
    if denom == 0.0:
        return ErrorReport(value=float(np.linalg.norm(diff)), absolute_fallback=True)
    return ErrorReport(value=float(np.linalg.norm(diff) / denom))


# -- inputs and controls for the verification harness -------------------------


def smooth_noise(rng: np.random.Generator, shape: tuple[int, ...],
                 sigma: float = 2.0) -> np.ndarray:
    """Band-limited random field: white noise blurred by a Gaussian."""
    noise = rng.standard_normal(shape)
    h, w = shape[-2], shape[-1]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    gauss = np.exp(-2.0 * (math.pi * sigma) ** 2 * (fy ** 2 + fx ** 2))
    flat = noise.reshape(-1, h, w)
    out = np.empty_like(flat)
    for i, plane in enumerate(flat):
        out[i] = np.fft.irfft2(np.fft.rfft2(plane) * gauss, s=(h, w))
    out = out.reshape(shape)
    return out / max(out.std(), 1e-12)


class UnsharedLiftingControl:
    """Negative control: a lifting-shaped layer whose per-element kernels are
    independent random draws instead of transformed copies."""

    def __init__(self, in_channels: int, patterns: int, g: GroupSpec,
                 rng: np.random.Generator):
        self.group = g
        self.patterns = patterns
        self.kernels = [
            rng.standard_normal((patterns * g.n_rot, in_channels, k, k))
            / math.sqrt(in_channels * k * k)
            for k in g.kernel_sizes
        ]

    def __call__(self, image: np.ndarray) -> np.ndarray:
        from . import autodiff as ad

        x = ad.Tensor(np.asarray(image, dtype=np.float64))
        outs = [ad.conv2d(x, ad.Tensor(k)) for k in self.kernels]
        from .nn import _merge_scales

        flat = _merge_scales(outs, self.patterns, self.group).data
        b, c, hh, ww = flat.shape
        return flat.reshape(b, self.patterns, self.group.n_rot, self.group.n_scale, hh, ww)
