"""Training loop, checkpointing, and evaluation pipeline."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step, bce_loss
from .data import (
    AugmentSpec,
    PatchSpec,
    Sample,
    SyntheticSpec,
    augment,
    extract_patches,
    gen_synthetic,
    load_fundus_dir,
    stitch_patches,
)
from .errors import InvalidArgument
from .metrics import auc, confusion, report_rows
from .nn import Model, ModelConfig, build_unet, load_model, save_model


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    data_dir: str = ""  # overrides the synthetic source when set
    data_seed: int = 0
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    augment_enabled: bool = True
    patch: PatchSpec = field(default_factory=PatchSpec)
    epochs: int = 20
    lr: float = 2e-4
    seed: int = 0
    checkpoint_dir: str = "runs/ckpt"
    checkpoint_every: int = 10
    eval_threshold: float = 0.5
    draws_per_image: int = 8  # one epoch = count * draws_per_image random patches
    dtype: str = "float64"  # "float32" halves memory traffic at desk scale

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise InvalidArgument(f"learning rate must be >= 0, got {self.lr}")
        if self.dtype not in ("float64", "float32"):
            raise InvalidArgument(f"dtype must be float64 or float32, got {self.dtype}")


def load_training_data(cfg: TrainConfig) -> list[Sample]:
    if cfg.data_dir:
        return load_fundus_dir(cfg.data_dir)
    return gen_synthetic(cfg.data_seed, spec=cfg.synthetic)


def _rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _random_patch(s: Sample, size: int, rng: np.random.Generator):
    _, h, w = s.image.shape
    if h < size or w < size:
        raise InvalidArgument(f"sample smaller than patch size {size}")
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return (
        s.image[:, y : y + size, x : x + size],
        s.label[:, y : y + size, x : x + size],
    )


@dataclass
class TrainResult:
    model: Model
    log: list[dict]  # per-epoch {"epoch", "loss"}
    seconds: list[float]
    checkpoint: str


def train_loop(cfg: TrainConfig, data: list[Sample] | None = None) -> TrainResult:
    """Per epoch: shuffle/augment/extract random patches, BCE + Adam, with
    filter banks re-expanded from coefficients on every forward pass."""
    data = data if data is not None else load_training_data(cfg)
    if not data:
        raise InvalidArgument("training data is empty")
    dtype = np.dtype(cfg.dtype)
    model = build_unet(cfg.model, seed=cfg.seed, dtype=dtype)
    params = model.parameters()
    state = AdamState(params)
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log: list[dict] = []
    seconds: list[float] = []
    draws = len(data) * cfg.draws_per_image
    steps = max(draws // cfg.patch.batch, 1)
    for epoch in range(cfg.epochs):
        rng = _rng_for(cfg.seed, 1, epoch)
        t0 = time.perf_counter()
        losses = []
        for _ in range(steps):
            xs, ys = [], []
            for _ in range(cfg.patch.batch):
                s = data[int(rng.integers(0, len(data)))]
                if cfg.augment_enabled:
                    s = augment(s, cfg.augment, rng)
                px, py = _random_patch(s, min(cfg.patch.size, s.image.shape[-1]), rng)
                xs.append(px)
                ys.append(py)
            x = Tensor(np.stack(xs), dtype=dtype)
            y = Tensor(np.stack(ys), dtype=dtype)
            prob = model.forward(x, training=True)
            loss = bce_loss(prob, y)
            value = float(loss.data)
            if not np.isfinite(value):
                dump = ckpt_dir / f"nonfinite_epoch{epoch}.npz"
                np.savez(dump, x=x.data, y=y.data, prob=prob.data)
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}; offending batch dumped to {dump}"
                )
            model.zero_grad()
            loss.backward()
            adam_step(params, [p.grad for p in params], state, lr=cfg.lr)
            losses.append(value)
        log.append({"epoch": epoch, "loss": float(np.mean(losses))})
        seconds.append(time.perf_counter() - t0)
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_model(model, str(ckpt_dir / f"ckpt_e{epoch + 1:04d}.bin"))
    final = str(ckpt_dir / "ckpt_final.bin")
    save_model(model, final)
    return TrainResult(model=model, log=log, seconds=seconds, checkpoint=final)


def write_train_log(path, log: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,loss\n")
        for row in log:
            fh.write(f"{row['epoch']},{row['loss']:.17g}\n")


def write_timing(path, seconds: list[float]) -> None:
    # wall times live outside the CSV so repeated runs stay bit-identical
    with open(path, "w") as fh:
        for i, s in enumerate(seconds):
            fh.write(f"epoch {i}: {s:.3f}s\n")


def predict_map(model: Model, s: Sample, patch: PatchSpec) -> np.ndarray:
    """Patch-stitched probability map for one sample."""
    pieces = extract_patches(s.image, patch)
    preds = []
    for piece in pieces:
        out = model.forward(Tensor(piece[None]), training=False)
        preds.append(out.data[0])
    return stitch_patches(preds, s.image.shape[-2:], patch)


def evaluate(
    model_or_ckpt,
    data: list[Sample],
    patch: PatchSpec,
    threshold: float = 0.5,
    dataset: str = "data",
    model_name: str | None = None,
    dump_dir: str | None = None,
) -> dict:
    """Stitched predictions + FOV-restricted metrics (micro and macro rows)."""
    if not data:
        raise InvalidArgument("evaluation dataset is empty")
    model = model_or_ckpt if isinstance(model_or_ckpt, Model) else load_model(model_or_ckpt)
    model_name = model_name or model.cfg.variant
    per_image = []
    for s in data:
        prob = predict_map(model, s, patch)
        per_image.append(
            {
                "name": s.name,
                "confusion": confusion(prob, s.label, s.fov, threshold),
                "auc": auc(prob, s.label, s.fov),
            }
        )
        if dump_dir:
            out = Path(dump_dir)
            out.mkdir(parents=True, exist_ok=True)
            from PIL import Image

            arr = (np.clip(prob[0], 0, 1) * 255).round().astype(np.uint8)
            Image.fromarray(arr, mode="L").save(out / f"{s.name}_prob.png")
    rows = report_rows(per_image, dataset=dataset, model=model_name)
    return {"rows": rows, "per_image": per_image}


def transformed_test_set(samples: list[Sample], seed: int,
                         rotation_deg: tuple[float, float] = (0.0, 360.0),
                         scale: tuple[float, float] = (0.8, 1.4)) -> list[Sample]:
    """Rotated+rescaled copies of a test split (geometry only, no jitter)."""
    spec = AugmentSpec(
        rotation_deg=rotation_deg, scale=scale, flip_h=False, flip_v=False,
        shear_deg=(0.0, 0.0), brightness=(0.0, 0.0), saturation=(1.0, 1.0),
        contrast=(1.0, 1.0),
    )
    return [augment(s, spec, _rng_for(seed, 2, i)) for i, s in enumerate(samples)]
