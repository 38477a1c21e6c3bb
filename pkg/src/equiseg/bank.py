"""Expansion of shared filter patterns into discrete group filter banks.

A bank realizes the weight sharing of the equivariant convolutions: every
kernel in the expanded tensor is a transformed copy of one of a small set of
pattern filters.  Rotation offsets are cyclic; the scale axis is truncated,
so relative scale offsets outside [0, n_scale-1] contribute zero kernels.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSet, ParamFilter, TransformSpec, discretize, eval_basis, make_mesh
from .errors import InvalidArgument

_MAGIC = b"EQBK"
_VERSION = 1


@dataclass(frozen=True)
class GroupSpec:
    """Discrete rotation-scale group acting on filters and feature maps.

    Rotation angles are i * 2*pi/n_rot (closed under the cyclic shift by one
    step); scale factors are mu**s for s = 0..n_scale-1.  Kernels grow with
    scale so the enlarged pattern is not cropped.
    """

    n_rot: int = 8
    n_scale: int = 4
    mu: float = 1.25
    base_p: int = 6
    h: float = 0.5

    def __post_init__(self):
        if self.n_rot < 1 or self.n_scale < 1:
            raise InvalidArgument("group needs n_rot >= 1 and n_scale >= 1")
        if self.mu <= 1.0:
            raise InvalidArgument(f"scale step mu must exceed 1, got {self.mu}")
        if self.base_p < 2 or self.base_p % 2:
            raise InvalidArgument(f"base filter size must be even >= 2, got {self.base_p}")

    @property
    def size(self) -> int:
        return self.n_rot * self.n_scale

    @property
    def nontrivial(self) -> bool:
        return self.size > 1

    @property
    def rot_step(self) -> float:
        return 2.0 * math.pi / self.n_rot

    def angle(self, a: int) -> float:
        return (a % self.n_rot) * self.rot_step

    @property
    def kernel_sizes(self) -> tuple[int, ...]:
        return tuple(
            2 * math.ceil(self.base_p * self.mu ** s / 2.0) for s in range(self.n_scale)
        )

    def scale_weight(self, s: int) -> float:
        """Jacobian weight mu**(-2s) attached to scale level s."""
        return self.mu ** (-2 * s)

    def element(self, a: int, b: int) -> TransformSpec:
        return TransformSpec(theta=self.angle(a), s=b, mu=self.mu)


def _check_patterns(patterns: np.ndarray, g: GroupSpec) -> BasisSet:
    if patterns.size == 0:
        raise InvalidArgument("pattern array is empty")
    first = patterns.reshape(-1)[0]
    basis = first.basis
    if basis.p != g.base_p or basis.h != g.h:
        raise InvalidArgument(
            f"basis (p={basis.p}, h={basis.h}) does not match group "
            f"(base_p={g.base_p}, h={g.h})"
        )
    for f in patterns.reshape(-1):
        if f.basis is not basis and (f.basis.p != basis.p or f.basis.h != basis.h):
            raise InvalidArgument("all patterns must share one basis")
    return basis


def element_eval_matrices(basis: BasisSet, g: GroupSpec) -> list[np.ndarray]:
    """Per-scale stacks of basis evaluation matrices for every group element.

    Entry [b][a] is the [N, k_b**2] matrix evaluating the (masked, unless the
    group is trivial) basis at the scale-b mesh mapped through the inverse of
    the (a, b) transform, scaled by the mu**(-2b) weight.  The mask is applied
    uniformly over all elements of a non-trivial group: a radially masked
    basis rotates exactly into itself under the cyclic subgroup, which an
    identity-only exemption would break.
    """
    masked = g.nontrivial
    out = []
    for b, k in enumerate(g.kernel_sizes):
        pts = make_mesh(k, basis.h).flat()
        mats = np.empty((g.n_rot, basis.n, k * k))
        for a in range(g.n_rot):
            from .basis import transform_matrix

            inv = np.linalg.inv(transform_matrix(g.element(a, b)))
            mats[a] = eval_basis(basis, pts @ inv.T, masked=masked)
        out.append(mats * g.scale_weight(b))
    return out


@dataclass
class LiftingBank:
    """Expanded kernels for the image-to-group convolution.

    ``expanded[b]`` has shape [out_pattern, rot, in_channel, k_b, k_b]; the
    learnable state is the pattern coefficients only.
    """

    patterns: np.ndarray  # object array [out_patterns, in_channels] of ParamFilter
    group: GroupSpec
    expanded: tuple = field(default=())

    @property
    def out_patterns(self) -> int:
        return self.patterns.shape[0]

    @property
    def in_channels(self) -> int:
        return self.patterns.shape[1]

    def coefficients(self) -> np.ndarray:
        n = self.patterns.reshape(-1)[0].basis.n
        out = np.empty((*self.patterns.shape, n))
        for idx, f in np.ndenumerate(self.patterns):
            out[idx] = f.coefficients
        return out


@dataclass
class GroupBank:
    """Expanded kernels for the group-to-group convolution.

    ``expanded[b]`` has shape [out_pattern, rot, in_pattern, in_rot, in_scale,
    k_b, k_b]; slot (o, a, b, c, a', b') holds the pattern at relative offset
    ((a'-a) mod n_rot, b'-b), transformed by element (a, b), and the zero
    kernel when b' < b (scale truncation).
    """

    patterns: np.ndarray  # object array [out_pat, in_pat, n_rot, n_scale]
    group: GroupSpec
    expanded: tuple = field(default=())

    @property
    def out_patterns(self) -> int:
        return self.patterns.shape[0]

    @property
    def in_patterns(self) -> int:
        return self.patterns.shape[1]

    def coefficients(self) -> np.ndarray:
        n = self.patterns.reshape(-1)[0].basis.n
        out = np.empty((*self.patterns.shape, n))
        for idx, f in np.ndenumerate(self.patterns):
            out[idx] = f.coefficients
        return out


def as_pattern_array(filters, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.empty(shape, dtype=object)
    flat = list(np.asarray(filters, dtype=object).reshape(-1))
    if len(flat) != arr.size:
        raise InvalidArgument(f"expected {arr.size} patterns, got {len(flat)}")
    for i, f in enumerate(flat):
        arr.reshape(-1)[i] = f
    return arr.reshape(shape)


def expand_lifting_bank(patterns, g: GroupSpec) -> LiftingBank:
    """Expand [out_patterns, in_channels] patterns over every group element."""
    patterns = np.asarray(patterns, dtype=object)
    if patterns.ndim != 2:
        raise InvalidArgument(f"lifting patterns must be 2D, got {patterns.ndim}D")
    _check_patterns(patterns, g)
    masked = g.nontrivial
    n_out, n_in = patterns.shape
    expanded = []
    for b, k in enumerate(g.kernel_sizes):
        w = g.scale_weight(b)
        block = np.empty((n_out, g.n_rot, n_in, k, k))
        for a in range(g.n_rot):
            t = g.element(a, b)
            for o in range(n_out):
                for c in range(n_in):
                    block[o, a, c] = w * discretize(patterns[o, c], t, k, masked=masked)
        expanded.append(block)
    return LiftingBank(patterns=patterns, group=g, expanded=tuple(expanded))


def expand_group_bank(patterns, g: GroupSpec) -> GroupBank:
    """Expand [out_pat, in_pat, n_rot, n_scale] relative-offset patterns."""
    patterns = np.asarray(patterns, dtype=object)
    if patterns.ndim != 4 or patterns.shape[2:] != (g.n_rot, g.n_scale):
        raise InvalidArgument(
            f"group patterns must be [out, in, {g.n_rot}, {g.n_scale}], "
            f"got {patterns.shape}"
        )
    _check_patterns(patterns, g)
    masked = g.nontrivial
    n_out, n_in = patterns.shape[:2]
    expanded = []
    for b, k in enumerate(g.kernel_sizes):
        w = g.scale_weight(b)
        block = np.zeros((n_out, g.n_rot, n_in, g.n_rot, g.n_scale, k, k))
        for a in range(g.n_rot):
            t = g.element(a, b)
            for o in range(n_out):
                for c in range(n_in):
                    for a2 in range(g.n_rot):
                        for b2 in range(b, g.n_scale):
                            f = patterns[o, c, (a2 - a) % g.n_rot, b2 - b]
                            block[o, a, c, a2, b2] = w * discretize(f, t, k, masked=masked)
        expanded.append(block)
    return GroupBank(patterns=patterns, group=g, expanded=tuple(expanded))


def count_shared_params(
    c_in_patterns: int, c_out_patterns: int, g: GroupSpec, layer_kind: str
) -> int:
    """Learnable reals of a weight-shared bank (coefficients only)."""
    n = g.base_p ** 2
    if layer_kind == "lifting":
        return c_out_patterns * c_in_patterns * n
    if layer_kind == "group":
        return c_out_patterns * c_in_patterns * g.n_rot * g.n_scale * n
    raise InvalidArgument(f"unknown layer kind {layer_kind!r}")


def count_unshared_params(
    c_in_patterns: int, c_out_patterns: int, g: GroupSpec, layer_kind: str
) -> int:
    """Learnable reals if every group slice pair had an independent filter."""
    n = g.base_p ** 2
    out_slices = c_out_patterns * g.size
    if layer_kind == "lifting":
        return out_slices * c_in_patterns * n
    if layer_kind == "group":
        return out_slices * c_in_patterns * g.size * n
    raise InvalidArgument(f"unknown layer kind {layer_kind!r}")


# -- checkpoint blob format -------------------------------------------------
#
# One blob = magic "EQBK", version u32, group fields (n_rot u32, n_scale u32,
# base_p u32, mu f64, h f64), ndims u32, dims u32 each, then the coefficient
# array as little-endian float64 in C order.  All integers little-endian.


def write_blob(fh: io.BufferedIOBase, g: GroupSpec, array: np.ndarray) -> int:
    array = np.ascontiguousarray(array, dtype="<f8")
    header = struct.pack(
        "<4sIIIIddI",
        _MAGIC,
        _VERSION,
        g.n_rot,
        g.n_scale,
        g.base_p,
        g.mu,
        g.h,
        array.ndim,
    )
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    payload = array.tobytes()
    fh.write(header)
    fh.write(dims)
    fh.write(payload)
    return len(header) + len(dims) + len(payload)


def read_blob(fh: io.BufferedIOBase) -> tuple[GroupSpec, np.ndarray]:
    header = fh.read(struct.calcsize("<4sIIIIddI"))
    magic, version, n_rot, n_scale, base_p, mu, h, ndim = struct.unpack(
        "<4sIIIIddI", header
    )
    if magic != _MAGIC:
        raise InvalidArgument(f"bad blob magic {magic!r}")
    if version != _VERSION:
        raise InvalidArgument(f"unsupported blob version {version}")
    dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    count = int(np.prod(dims)) if dims else 1
    array = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims).copy()
    g = GroupSpec(n_rot=n_rot, n_scale=n_scale, mu=mu, base_p=base_p, h=h)
    return g, array


def save_bank(path, bank: GroupBank | LiftingBank) -> None:
    with open(path, "wb") as fh:
        write_blob(fh, bank.group, bank.coefficients())


def load_bank(path, basis: BasisSet):
    """Rebuild a bank from a blob; the coefficient rank decides the kind."""
    with open(path, "rb") as fh:
        g, coeffs = read_blob(fh)
    filters = as_pattern_array(
        [ParamFilter(c, basis) for c in coeffs.reshape(-1, coeffs.shape[-1])],
        coeffs.shape[:-1],
    )
    if coeffs.ndim == 3:
        return expand_lifting_bank(filters, g)
    if coeffs.ndim == 5:
        return expand_group_bank(filters, g)
    raise InvalidArgument(f"unexpected coefficient rank {coeffs.ndim}")
