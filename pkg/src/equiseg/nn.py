"""Equivariant layers and U-Net variants.

Feature maps carry explicit rotation and scale axes; layers keep them in a
flattened channel layout [batch, pattern * n_rot * n_scale, H, W] with the
scale index fastest.  Kernels are expanded from shared pattern coefficients
inside the autodiff graph, so gradients accumulate directly on the
coefficients and every transformed copy stays in sync.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bank import (
    GroupBank,
    GroupSpec,
    LiftingBank,
    element_eval_matrices,
    read_blob,
    write_blob,
)
from .basis import BasisSet, init_coefficients, make_fourier_basis
from .errors import InvalidArgument, LoadError

VARIANT_GROUPS = {"vanilla": None, "F": (1, 1), "FR": (8, 1), "FS": (1, 4), "FRS": (8, 4)}


@dataclass
class GroupFeatureMap:
    """Feature tensor [batch, pattern, rot, scale, H, W] over a GroupSpec."""

    tensor: np.ndarray
    group: GroupSpec

    def __post_init__(self):
        t = np.asarray(self.tensor)
        if t.ndim != 6:
            raise InvalidArgument(f"feature map must be 6D, got {t.ndim}D")
        if t.shape[2] != self.group.n_rot or t.shape[3] != self.group.n_scale:
            raise InvalidArgument(
                f"rot/scale axes {t.shape[2:4]} do not match group "
                f"({self.group.n_rot}, {self.group.n_scale})"
            )
        self.tensor = t

    @property
    def patterns(self) -> int:
        return self.tensor.shape[1]

    def flat(self) -> np.ndarray:
        b, p, r, s, h, w = self.tensor.shape
        return self.tensor.reshape(b, p * r * s, h, w)

    @classmethod
    def from_flat(cls, flat: np.ndarray, group: GroupSpec) -> "GroupFeatureMap":
        b, c, h, w = flat.shape
        p = c // group.size
        return cls(flat.reshape(b, p, group.n_rot, group.n_scale, h, w), group)


@dataclass(frozen=True)
class ModelConfig:
    """U-Net variant description; channel counts are total feature widths."""

    variant: str = "FRS"
    depth: int = 3
    base_channels: int = 32
    input_channels: int = 3
    p: int = 6
    h: float = 0.5
    mu: float = 1.25
    out_channels: int = 1

    def __post_init__(self):
        if self.variant not in VARIANT_GROUPS:
            raise InvalidArgument(
                f"unknown variant {self.variant!r}; expected one of {sorted(VARIANT_GROUPS)}"
            )
        if self.depth < 2:
            raise InvalidArgument("U-Net needs depth >= 2")
        g = self.group()
        if g is not None and self.base_channels % g.size:
            raise InvalidArgument(
                f"base_channels={self.base_channels} not divisible by group size {g.size}"
            )

    def group(self) -> GroupSpec | None:
        dims = VARIANT_GROUPS[self.variant]
        if dims is None:
            return None
        return GroupSpec(n_rot=dims[0], n_scale=dims[1], mu=self.mu, base_p=self.p, h=self.h)

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth)]


# -- layers -----------------------------------------------------------------


class LiftingConv:
    """First-layer convolution lifting a plain image onto the group axes."""

    def __init__(self, in_channels: int, out_patterns: int, group: GroupSpec,
                 basis: BasisSet, rng: np.random.Generator):
        self.in_channels = in_channels
        self.out_patterns = out_patterns
        self.group = group
        self.basis = basis
        fan_in = in_channels * basis.p ** 2
        self.coeffs = Tensor(
            init_coefficients(rng, (out_patterns, in_channels, basis.n), fan_in, basis.n),
            requires_grad=True,
        )
        self._emats = [
            [Tensor(m[a]) for a in range(group.n_rot)]
            for m in element_eval_matrices(basis, group)
        ]

    def parameters(self):
        return [self.coeffs]

    def state_arrays(self):
        return [("coeffs", self.coeffs)]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise InvalidArgument(
                f"lifting expects {self.in_channels} channels, got {x.shape[1]}"
            )
        g = self.group
        o, c, n = self.coeffs.shape
        flat = ad.reshape(self.coeffs, (o * c, n))
        outs = []
        for b, k in enumerate(g.kernel_sizes):
            parts = []
            for a in range(g.n_rot):
                kb = ad.matmul(flat, self._emats[b][a])
                parts.append(ad.reshape(kb, (o, 1, c, k, k)))
            kern = ad.reshape(ad.concat(parts, 1), (o * g.n_rot, c, k, k))
            outs.append(ad.conv2d(x, kern))
        return _merge_scales(outs, o, g)


class GroupConv:
    """Group-to-group convolution with cyclic rotation offsets and truncated
    scale offsets; kernels grow with the output scale level."""

    def __init__(self, in_patterns: int, out_patterns: int, group: GroupSpec,
                 basis: BasisSet, rng: np.random.Generator):
        self.in_patterns = in_patterns
        self.out_patterns = out_patterns
        self.group = group
        self.basis = basis
        g = group
        fan_in = in_patterns * g.size * basis.p ** 2
        self.coeffs = Tensor(
            init_coefficients(
                rng, (out_patterns, in_patterns, g.n_rot, g.n_scale, basis.n),
                fan_in, basis.n,
            ),
            requires_grad=True,
        )
        self._emats = [
            [Tensor(m[a]) for a in range(g.n_rot)]
            for m in element_eval_matrices(basis, g)
        ]
        # input channel selection and relative-offset gather tables per scale
        self._in_idx = []
        self._kidx = []
        for b in range(g.n_scale):
            sel = [
                (c * g.n_rot + a2) * g.n_scale + b2
                for c in range(in_patterns)
                for a2 in range(g.n_rot)
                for b2 in range(b, g.n_scale)
            ]
            self._in_idx.append(np.array(sel, dtype=np.intp))
            per_a = []
            for a in range(g.n_rot):
                idx = [
                    ((a2 - a) % g.n_rot) * g.n_scale + (b2 - b)
                    for a2 in range(g.n_rot)
                    for b2 in range(b, g.n_scale)
                ]
                per_a.append(np.array(idx, dtype=np.intp))
            self._kidx.append(per_a)

    def parameters(self):
        return [self.coeffs]

    def state_arrays(self):
        return [("coeffs", self.coeffs)]

    def forward(self, x: Tensor) -> Tensor:
        g = self.group
        if x.shape[1] != self.in_patterns * g.size:
            raise InvalidArgument(
                f"group conv expects {self.in_patterns * g.size} channels, got {x.shape[1]}"
            )
        o, c = self.out_patterns, self.in_patterns
        n = self.basis.n
        coeffs = ad.reshape(self.coeffs, (o, c, g.size, n))
        outs = []
        for b, k in enumerate(g.kernel_sizes):
            xb = ad.take(x, self._in_idx[b], axis=1)
            nsel = g.n_rot * (g.n_scale - b)
            parts = []
            for a in range(g.n_rot):
                ca = ad.take(coeffs, self._kidx[b][a], axis=2)
                kb = ad.matmul(ad.reshape(ca, (o * c * nsel, n)), self._emats[b][a])
                parts.append(ad.reshape(kb, (o, 1, c * nsel, k, k)))
            kern = ad.reshape(ad.concat(parts, 1), (o * g.n_rot, c * nsel, k, k))
            outs.append(ad.conv2d(xb, kern))
        return _merge_scales(outs, o, g)


def _merge_scales(outs: list[Tensor], out_patterns: int, g: GroupSpec) -> Tensor:
    """Per-scale [B, pat*rot, H, W] pieces -> flat (pat, rot, scale) layout."""
    y = ad.concat(outs, 1)
    b, _, h, w = y.shape
    y = ad.reshape(y, (b, g.n_scale, out_patterns, g.n_rot, h, w))
    y = ad.transpose(y, (0, 2, 3, 1, 4, 5))
    return ad.reshape(y, (b, out_patterns * g.size, h, w))


class PlainConv:
    """Ordinary unconstrained convolution (the vanilla baseline)."""

    def __init__(self, in_channels: int, out_channels: int, k: int,
                 rng: np.random.Generator):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = k
        bound = 1.0 / math.sqrt(in_channels * k * k)
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_channels, in_channels, k, k)),
            requires_grad=True,
        )

    def parameters(self):
        return [self.weight]

    def state_arrays(self):
        return [("weight", self.weight)]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise InvalidArgument(
                f"conv expects {self.in_channels} channels, got {x.shape[1]}"
            )
        return ad.conv2d(x, self.weight)


class GroupBatchNorm:
    """Batch norm with statistics pooled over batch, rot, scale and space;
    one affine pair per pattern so the group axes stay exchangeable."""

    def __init__(self, patterns: int, group_size: int, eps: float = 1e-5,
                 momentum: float = 0.1):
        self.patterns = patterns
        self.group_size = group_size
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(patterns), requires_grad=True)
        self.beta = Tensor(np.zeros(patterns), requires_grad=True)
        self.running_mean = np.zeros(patterns)
        self.running_var = np.ones(patterns)

    def parameters(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("running_mean", self.running_mean),
            ("running_var", self.running_var),
        ]

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        b, c, h, w = x.shape
        if c != self.patterns * self.group_size:
            raise InvalidArgument(f"norm expects {self.patterns * self.group_size} channels")
        xr = ad.reshape(x, (b, self.patterns, self.group_size, h, w))
        if training:
            count = b * self.group_size * h * w
            m = ad.mul(ad.sum_axes(xr, (0, 2, 3, 4)), 1.0 / count)
            xc = xr - m
            v = ad.mul(ad.sum_axes(ad.mul(xc, xc), (0, 2, 3, 4)), 1.0 / count)
            mo = self.momentum
            self.running_mean += mo * (m.data.reshape(-1) - self.running_mean)
            self.running_var += mo * (v.data.reshape(-1) - self.running_var)
        else:
            m = Tensor(self.running_mean.reshape(1, -1, 1, 1, 1), dtype=x.dtype)
            v = Tensor(self.running_var.reshape(1, -1, 1, 1, 1), dtype=x.dtype)
            xc = xr - m
        inv = ad.powc(v + self.eps, -0.5)
        shape = (1, self.patterns, 1, 1, 1)
        y = ad.mul(ad.mul(xc, inv), ad.reshape(self.gamma, shape))
        y = y + ad.reshape(self.beta, shape)
        return ad.reshape(y, (b, c, h, w))


class HeadConv:
    """Final 1x1 convolution with bias (the only biased layer)."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.in_channels = in_channels
        self.out_channels = out_channels
        bound = 1.0 / math.sqrt(in_channels)
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_channels, in_channels, 1, 1)),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)

    def parameters(self):
        return [self.weight, self.bias]

    def state_arrays(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.weight, padding=0)
        return y + ad.reshape(self.bias, (1, self.out_channels, 1, 1))


# -- functional ops on group feature maps ------------------------------------


def lifting_conv(image: np.ndarray, bank: LiftingBank) -> GroupFeatureMap:
    """Apply an expanded lifting bank to a [B, C, H, W] image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 4 or image.shape[1] != bank.in_channels:
        raise InvalidArgument(
            f"image shape {image.shape} incompatible with bank "
            f"({bank.in_channels} input channels)"
        )
    g = bank.group
    x = Tensor(image)
    outs = []
    for b, k in enumerate(g.kernel_sizes):
        kern = bank.expanded[b].reshape(bank.out_patterns * g.n_rot, bank.in_channels, k, k)
        outs.append(ad.conv2d(x, Tensor(kern)))
    flat = _merge_scales(outs, bank.out_patterns, g).data
    return GroupFeatureMap.from_flat(flat, g)


def group_conv(f: GroupFeatureMap, bank: GroupBank) -> GroupFeatureMap:
    """Apply an expanded group bank to a group feature map."""
    g = bank.group
    if f.group != g or f.patterns != bank.in_patterns:
        raise InvalidArgument("feature map group/patterns do not match bank")
    x = Tensor(f.flat())
    outs = []
    for b, k in enumerate(g.kernel_sizes):
        kern = bank.expanded[b].reshape(
            bank.out_patterns * g.n_rot, bank.in_patterns * g.size, k, k
        )
        outs.append(ad.conv2d(x, Tensor(kern)))
    flat = _merge_scales(outs, bank.out_patterns, g).data
    return GroupFeatureMap.from_flat(flat, g)


def group_batchnorm(f: GroupFeatureMap, state: GroupBatchNorm,
                    training: bool = True) -> GroupFeatureMap:
    out = state.forward(Tensor(f.flat()), training=training)
    return GroupFeatureMap.from_flat(out.data, f.group)


def group_pool_spatial(f: GroupFeatureMap) -> GroupFeatureMap:
    out = ad.maxpool2x2(Tensor(f.flat()))
    return GroupFeatureMap.from_flat(out.data, f.group)


def group_upsample(f: GroupFeatureMap) -> GroupFeatureMap:
    out = ad.upsample_nearest2x(Tensor(f.flat()))
    return GroupFeatureMap.from_flat(out.data, f.group)


def group_project(f: GroupFeatureMap) -> np.ndarray:
    """Invariant projection: maximum over the rot and scale axes."""
    b, p, r, s, h, w = f.tensor.shape
    return f.tensor.reshape(b, p, r * s, h, w).max(axis=2)


# -- model ------------------------------------------------------------------


def _plan(cfg: ModelConfig) -> list[dict]:
    """Ordered layer descriptors shared by the builder and the param counter."""
    g = cfg.group()
    widths = cfg.widths()
    rs = 1 if g is None else g.size
    pats = [w // rs for w in widths]
    plan: list[dict] = []

    def conv(name, cin_total, cout_total, first=False, up=False):
        if g is None:
            plan.append(
                dict(kind="pconv", name=name, cin=cin_total, cout=cout_total,
                     k=2 if up else 3)
            )
        elif first:
            plan.append(
                dict(kind="lifting", name=name, cin=cin_total, opat=cout_total // rs)
            )
        else:
            plan.append(
                dict(kind="gconv", name=name, ipat=cin_total // rs, opat=cout_total // rs)
            )
        plan.append(dict(kind="norm", name=name + ".norm", pat=cout_total // rs))

    prev = cfg.input_channels
    for i, w in enumerate(widths):
        conv(f"enc{i}.conv0", prev, w, first=(i == 0))
        conv(f"enc{i}.conv1", w, w)
        prev = w
    for i in range(cfg.depth - 2, -1, -1):
        w = widths[i]
        conv(f"dec{i}.up", widths[i + 1], w, up=True)
        conv(f"dec{i}.conv0", 2 * w, w)
        conv(f"dec{i}.conv1", w, w)
    plan.append(dict(kind="head", name="head", cin=pats[0], cout=cfg.out_channels))
    return plan


def _descriptor_params(d: dict, cfg: ModelConfig) -> int:
    n = cfg.p ** 2
    g = cfg.group()
    if d["kind"] == "pconv":
        return d["cout"] * d["cin"] * d["k"] ** 2
    if d["kind"] == "lifting":
        return d["opat"] * d["cin"] * n
    if d["kind"] == "gconv":
        return d["opat"] * d["ipat"] * g.size * n
    if d["kind"] == "norm":
        return 2 * d["pat"]
    if d["kind"] == "head":
        return d["cout"] * d["cin"] + d["cout"]
    raise InvalidArgument(f"unknown layer kind {d['kind']}")


def count_params_config(cfg: ModelConfig, sections: bool = False):
    """Learnable-real count from the layer plan, without allocating anything."""
    plan = _plan(cfg)
    total = sum(_descriptor_params(d, cfg) for d in plan)
    if not sections:
        return total
    head = sum(_descriptor_params(d, cfg) for d in plan if d["kind"] == "head")
    return {"total": total, "head": head, "intermediate": total - head}


class Model:
    """A built U-Net: ordered named layers plus the forward topology.

    ``dtype`` selects the storage/compute precision; parameters are always
    initialized in float64 from the seed and then cast, so runs at different
    precisions start from identical values.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.group = cfg.group()
        self.basis = None if self.group is None else make_fourier_basis(cfg.p, cfg.h)
        self.layers: dict[str, object] = {}
        self.order: list[str] = []
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
        rs = 1 if self.group is None else self.group.size
        for d in _plan(cfg):
            kind, name = d["kind"], d["name"]
            if kind == "pconv":
                layer = PlainConv(d["cin"], d["cout"], d["k"], rng)
            elif kind == "lifting":
                layer = LiftingConv(d["cin"], d["opat"], self.group, self.basis, rng)
            elif kind == "gconv":
                layer = GroupConv(d["ipat"], d["opat"], self.group, self.basis, rng)
            elif kind == "norm":
                layer = GroupBatchNorm(d["pat"], rs)
            elif kind == "head":
                layer = HeadConv(d["cin"], d["cout"], rng)
            else:
                raise InvalidArgument(kind)
            self.layers[name] = layer
            self.order.append(name)
        if self.dtype != np.float64:
            self._cast(self.dtype)

    def _cast(self, dtype) -> None:
        for name in self.order:
            layer = self.layers[name]
            for p in layer.parameters():
                p.data = p.data.astype(dtype)
            for attr in ("_emats",):
                mats = getattr(layer, attr, None)
                if mats is not None:
                    for row in mats:
                        for t in row:
                            t.data = t.data.astype(dtype)

    def parameters(self) -> list[Tensor]:
        out = []
        for name in self.order:
            out.extend(self.layers[name].parameters())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _block(self, name: str, x: Tensor, training: bool) -> Tensor:
        x = self.layers[name].forward(x)
        x = self.layers[name + ".norm"].forward(x, training=training)
        return ad.relu(x)

    def forward(self, x, training: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        elif x.data.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.data.ndim != 4:
            raise InvalidArgument(f"expected [B, C, H, W] input, got shape {x.shape}")
        _, _, h, w = x.shape
        mult = 2 ** (self.cfg.depth - 1)
        hp = -(-h // mult) * mult
        wp = -(-w // mult) * mult
        if (hp, wp) != (h, w):
            x = ad.pad2d(x, (0, hp - h, 0, wp - w))
        skips = []
        cur = x
        for i in range(self.cfg.depth):
            cur = self._block(f"enc{i}.conv0", cur, training)
            cur = self._block(f"enc{i}.conv1", cur, training)
            if i < self.cfg.depth - 1:
                skips.append(cur)
                cur = ad.maxpool2x2(cur)
        for i in range(self.cfg.depth - 2, -1, -1):
            cur = ad.upsample_nearest2x(cur)
            cur = self._block(f"dec{i}.up", cur, training)
            cur = ad.concat([skips[i], cur], axis=1)
            cur = self._block(f"dec{i}.conv0", cur, training)
            cur = self._block(f"dec{i}.conv1", cur, training)
        if self.group is not None:
            b, c, hh, ww = cur.shape
            pat = c // self.group.size
            cur = ad.amax(ad.reshape(cur, (b, pat, self.group.size, hh, ww)), axis=2)
        cur = self.layers["head"].forward(cur)
        cur = ad.sigmoid(cur)
        if (hp, wp) != (h, w):
            cur = ad.crop2d(cur, h, w)
        return cur


def build_unet(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> Model:
    return Model(cfg, seed=seed, dtype=dtype)


def param_count(model: Model) -> int:
    return sum(int(p.size) for p in model.parameters())


def forward(model: Model, batch, training: bool = False) -> Tensor:
    return model.forward(batch, training=training)


# -- checkpointing ------------------------------------------------------------


def save_model(model: Model, path: str) -> None:
    """Binary blobs per layer array, concatenated, with a JSON manifest."""
    manifest = {"config": _cfg_dict(model.cfg), "arrays": []}
    g = model.group or GroupSpec(n_rot=1, n_scale=1, base_p=max(model.cfg.p, 2), h=model.cfg.h)
    offset = 0
    with open(path, "wb") as fh:
        for name in model.order:
            for suffix, arr in model.layers[name].state_arrays():
                data = arr.data if isinstance(arr, Tensor) else arr
                nbytes = write_blob(fh, g, np.asarray(data, dtype=np.float64))
                manifest["arrays"].append(
                    {
                        "name": f"{name}.{suffix}",
                        "shape": list(np.shape(data)),
                        "offset": offset,
                        "nbytes": nbytes,
                    }
                )
                offset += nbytes
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_model(path: str) -> Model:
    try:
        with open(path + ".json") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise LoadError(f"missing manifest sidecar {path}.json") from exc
    cfg = ModelConfig(**manifest["config"])
    model = Model(cfg, seed=0)
    entries = iter(manifest["arrays"])
    with open(path, "rb") as fh:
        for name in model.order:
            for suffix, arr in model.layers[name].state_arrays():
                entry = next(entries, None)
                full = f"{name}.{suffix}"
                if entry is None or entry["name"] != full:
                    raise LoadError(f"checkpoint mismatch at layer array {full!r}")
                _, data = read_blob(fh)
                target = arr.data if isinstance(arr, Tensor) else arr
                if tuple(data.shape) != tuple(target.shape):
                    raise LoadError(
                        f"shape mismatch for {full!r}: checkpoint {data.shape}, "
                        f"model {target.shape}"
                    )
                target[...] = data
    return model


def _cfg_dict(cfg: ModelConfig) -> dict:
    return {
        "variant": cfg.variant,
        "depth": cfg.depth,
        "base_channels": cfg.base_channels,
        "input_channels": cfg.input_channels,
        "p": cfg.p,
        "h": cfg.h,
        "mu": cfg.mu,
        "out_channels": cfg.out_channels,
    }
