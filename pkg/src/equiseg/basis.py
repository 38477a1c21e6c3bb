"""2D Fourier filter parameterization.

A discrete convolution kernel is represented as samples of a continuous
function psi(x) = sum_n w_n phi_n(x), where the phi_n form a real 2D Fourier
basis on an origin-centered mesh.  Because the basis is invertible on the
canonical mesh, any p x p kernel has an exact coefficient representation, and
the same coefficients can be re-sampled under arbitrary rotation and scaling
of the coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, NumericalFailure, UnsupportedConfiguration

# Frequency-mask shape: pass-band up to MASK_PASS * nyquist, cosine roll-off
# to zero at the nyquist radius.  Applied only to transformed evaluations.
MASK_PASS = 0.75

# Spatial envelope of masked evaluations, in units of the inscribed filter
# radius (p/2)*h: flat up to ENV_PASS, cosine roll-off to zero at ENV_STOP.
# The square filter window is only 4-fold symmetric; removing corner content
# is what makes non-quarter-turn rotations consistent.  The roll must stay
# wide: a sharp spatial edge aliases on the coarse base mesh.
ENV_PASS = 0.55
ENV_STOP = 1.15


@dataclass(frozen=True)
class MeshGrid:
    """Origin-centered p x p sampling grid with spacing h.

    Point (i, j) (1-based) sits at ((i - (p+1)/2) * h, (j - (p+1)/2) * h);
    the first coordinate indexes rows, the second columns.
    """

    p: int
    h: float
    points: np.ndarray  # [p, p, 2]

    def flat(self) -> np.ndarray:
        return self.points.reshape(-1, 2)


@dataclass(frozen=True)
class BasisSet:
    """Real 2D Fourier basis of period p*h with exactly p**2 functions.

    ``frequencies`` holds signed integer frequency pairs (k, l); ``kinds`` is
    0 for cosine and 1 for sine terms.  ``cutoff_radius`` is the grid Nyquist
    radius pi/h; ``mask_mode`` selects whether transformed evaluations apply
    the smooth radial roll-off.
    """

    p: int
    h: float
    n: int
    frequencies: np.ndarray  # [N, 2] signed integers
    kinds: np.ndarray  # [N] 0=cos, 1=sin
    cutoff_radius: float
    mask_mode: str = "smooth"  # {"off", "smooth"}
    _mask: np.ndarray = field(repr=False, default=None)

    @property
    def period(self) -> float:
        return self.p * self.h

    def mask_weights(self) -> np.ndarray:
        """Per-function radial attenuation in (0..1]; 1 inside the pass band."""
        return self._mask


@dataclass
class ParamFilter:
    """Learnable coefficients w_n over a fixed BasisSet."""

    coefficients: np.ndarray
    basis: BasisSet

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.shape != (self.basis.n,):
            raise InvalidArgument(
                f"coefficient vector has shape {self.coefficients.shape}, "
                f"expected ({self.basis.n},)"
            )


@dataclass(frozen=True)
class TransformSpec:
    """A rotation by theta combined with scaling by mu**s."""

    theta: float = 0.0
    s: float = 0.0
    mu: float = 1.25

    def __post_init__(self):
        if self.mu <= 1.0:
            raise InvalidArgument(f"scale step mu must exceed 1, got {self.mu}")

    @property
    def scale(self) -> float:
        return self.mu ** self.s

    def is_identity(self) -> bool:
        return self.theta == 0.0 and self.s == 0


def make_mesh(p: int, h: float) -> MeshGrid:
    """Build the origin-centered p x p mesh with spacing h."""
    if not isinstance(p, (int, np.integer)) or p < 1:
        raise InvalidArgument(f"filter size p must be a positive integer, got {p!r}")
    if h <= 0:
        raise InvalidArgument(f"mesh spacing h must be positive, got {h!r}")
    coords = (np.arange(1, p + 1) - (p + 1) / 2.0) * h
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    return MeshGrid(p=int(p), h=float(h), points=np.stack([rows, cols], axis=-1))


def transform_matrix(t: TransformSpec) -> np.ndarray:
    """2x2 rotation-and-scale matrix with determinant mu**(2s)."""
    c, s = math.cos(t.theta), math.sin(t.theta)
    return t.scale * np.array([[c, s], [-s, c]], dtype=np.float64)


def _frequency_table(p: int) -> tuple[np.ndarray, np.ndarray]:
    """Enumerate the non-redundant half-plane of signed frequencies.

    Conjugate pairs (k, l) ~ (-k, -l) are collapsed to one representative
    carrying a cosine and a sine term.  Self-conjugate frequencies keep the
    single term that survives on the half-integer sampling grid: the cosine
    at (0, 0) and (p/2, p/2), the sine at (0, p/2) and (p/2, 0).
    """
    half = p // 2
    freqs: list[tuple[int, int]] = []
    kinds: list[int] = []

    def add(k: int, l: int, kind: int) -> None:
        freqs.append((k, l))
        kinds.append(kind)

    for k in range(0, half + 1):
        if k in (0, half):
            l_range = range(0, half + 1)
        else:
            l_range = range(-(half - 1), half + 1)
        for l in l_range:
            if (k, l) == (0, 0) or (k, l) == (half, half):
                add(k, l, 0)
            elif (k, l) == (0, half) or (k, l) == (half, 0):
                add(k, l, 1)
            else:
                add(k, l, 0)
                add(k, l, 1)
    return np.array(freqs, dtype=np.int64), np.array(kinds, dtype=np.int64)


def make_fourier_basis(p: int, h: float, mask_mode: str = "smooth") -> BasisSet:
    """Real 2D Fourier basis of period p*h with N = p**2 functions.

    Only even p is supported: the half-plane bookkeeping above and the even
    kernel-size convention used downstream both assume it.
    """
    if not isinstance(p, (int, np.integer)) or p < 1:
        raise InvalidArgument(f"filter size p must be a positive integer, got {p!r}")
    if p % 2 != 0:
        raise UnsupportedConfiguration(f"odd filter size p={p} is not supported")
    if h <= 0:
        raise InvalidArgument(f"mesh spacing h must be positive, got {h!r}")
    if mask_mode not in ("off", "smooth"):
        raise InvalidArgument(f"unknown mask_mode {mask_mode!r}")

    freqs, kinds = _frequency_table(int(p))
    n = len(freqs)
    assert n == p * p
    period = p * h
    cutoff = math.pi * p / period  # == pi / h
    radius = 2.0 * math.pi / period * np.linalg.norm(freqs, axis=1)
    mask = _smooth_mask(radius, cutoff)
    return BasisSet(
        p=int(p),
        h=float(h),
        n=n,
        frequencies=freqs,
        kinds=kinds,
        cutoff_radius=cutoff,
        mask_mode=mask_mode,
        _mask=mask,
    )


def _smooth_mask(radius: np.ndarray, cutoff: float) -> np.ndarray:
    lo = MASK_PASS * cutoff
    t = np.clip((radius - lo) / (cutoff - lo), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(math.pi * t))


def eval_basis(b: BasisSet, pts: np.ndarray, masked: bool = False) -> np.ndarray:
    """Evaluate every basis function at the given points.

    Returns an [N, len(pts)] matrix with entry (n, q) = phi_n(pts[q]).  With
    ``masked`` (and mask_mode="smooth") the anti-alias treatment is applied:
    each row is attenuated by the radial frequency mask and each column by
    the radial spatial envelope.  Both are rotation invariant, so masked
    evaluations at exactly rotated points are exact array rotations of each
    other; masked=False reproduces raw Fourier values.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    omega = (2.0 * math.pi / b.period) * b.frequencies.astype(np.float64)
    phase = omega @ pts.T  # [N, Q]
    out = np.where(b.kinds[:, None] == 0, np.cos(phase), np.sin(phase))
    if masked and b.mask_mode == "smooth":
        out = out * b._mask[:, None]
        out = out * spatial_envelope(b, np.linalg.norm(pts, axis=1))[None, :]
    return out


def spatial_envelope(b: BasisSet, radius: np.ndarray) -> np.ndarray:
    """Smooth radial window in filter coordinates: 1 inside ENV_PASS of the
    inscribed radius, cosine roll-off to 0 at ENV_STOP."""
    r_in = (b.p / 2.0) * b.h
    t = np.clip((radius / r_in - ENV_PASS) / (ENV_STOP - ENV_PASS), 0.0, 1.0)
    return 0.5 * (1.0 + np.cos(math.pi * t))


def canonical_matrix(b: BasisSet, masked: bool = False) -> np.ndarray:
    """Evaluation matrix [N, p**2] on the canonical mesh."""
    mesh = make_mesh(b.p, b.h)
    return eval_basis(b, mesh.flat(), masked=masked)


def discretize(
    f: ParamFilter,
    t: TransformSpec,
    out_size: int,
    masked: bool | None = None,
) -> np.ndarray:
    """Sample psi(U^-1 x) on an out_size mesh with the filter's spacing.

    By default the anti-alias mask is applied exactly when the transform is
    not the identity, so the identity discretization reproduces the exact
    coefficient fit.  Pass ``masked`` explicitly to override (the filter
    banks mask every group element uniformly).
    """
    if out_size < 1:
        raise InvalidArgument(f"out_size must be >= 1, got {out_size}")
    if masked is None:
        masked = not t.is_identity()
    mesh = make_mesh(out_size, f.basis.h)
    inv = np.linalg.inv(transform_matrix(t))
    pts = mesh.flat() @ inv.T
    vals = f.coefficients @ eval_basis(f.basis, pts, masked=masked)
    return vals.reshape(out_size, out_size)


def fit_coefficients(target: np.ndarray, b: BasisSet) -> ParamFilter:
    """Solve for coefficients whose identity discretization equals ``target``."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (b.p, b.p):
        raise InvalidArgument(
            f"target kernel has shape {target.shape}, expected ({b.p}, {b.p})"
        )
    a = canonical_matrix(b, masked=False)
    try:
        coeffs = np.linalg.solve(a.T, target.reshape(-1))
    except np.linalg.LinAlgError as exc:  # unreachable for the canonical basis
        raise NumericalFailure(f"basis system is singular: {exc}") from exc
    residual = np.abs(a.T @ coeffs - target.reshape(-1)).max()
    if not np.isfinite(residual) or residual > 1e-6:
        raise NumericalFailure(f"coefficient fit residual too large: {residual:g}")
    return ParamFilter(coefficients=coeffs, basis=b)


def init_coefficients(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, n: int
) -> np.ndarray:
    """Uniform coefficient init scaled so generated kernels match standard
    conv initialization variance (kernel variance ~ 1/(3*fan_in))."""
    bound = math.sqrt(2.0 / (fan_in * n))
    return rng.uniform(-bound, bound, size=shape)


def save_kernel_txt(path, kernel: np.ndarray) -> None:
    """Plain-text kernel dump: one row per line, %.12e entries."""
    kernel = np.asarray(kernel, dtype=np.float64)
    with open(path, "w") as fh:
        for row in np.atleast_2d(kernel):
            fh.write(" ".join(f"{v:.12e}" for v in row) + "\n")


def load_kernel_txt(path) -> np.ndarray:
    with open(path) as fh:
        rows = [[float(v) for v in line.split()] for line in fh if line.strip()]
    return np.array(rows, dtype=np.float64)
