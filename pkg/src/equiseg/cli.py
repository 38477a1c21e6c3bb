"""Command-line entry point.

Every command reads a JSON config (all keys optional, defaults embedded)
plus ``--key=value`` dotted overrides; unknown keys are rejected.  Outputs
land in a run directory named by config hash + timestamp unless --run-dir
pins one.  Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .bank import GroupSpec, count_shared_params, expand_group_bank, expand_lifting_bank, save_bank
from .basis import (
    ParamFilter,
    TransformSpec,
    discretize,
    fit_coefficients,
    init_coefficients,
    load_kernel_txt,
    make_fourier_basis,
    save_kernel_txt,
)
from .data import PatchSpec, SyntheticSpec, gen_synthetic, load_fundus_dir, save_sample_pngs
from .equivariance import (
    UnsharedLiftingControl,
    WarpSpec,
    equivariance_error,
    smooth_noise,
)
from .errors import InvalidArgument, LoadError, NumericalFailure, UnsupportedConfiguration
from .metrics import write_metrics_csv
from .nn import ModelConfig, count_params_config
from .train import (
    TrainConfig,
    evaluate,
    load_training_data,
    train_loop,
    transformed_test_set,
    write_timing,
    write_train_log,
)

VALIDATION_ERRORS = (InvalidArgument, UnsupportedConfiguration, LoadError)


@dataclass(frozen=True)
class FitBasisConfig:
    p: int = 6
    h: float = 0.5
    target: str = ""  # kernel text file; empty = random target
    seed: int = 0


@dataclass(frozen=True)
class GenBankConfig:
    kind: str = "group"  # {"lifting", "group"}
    n_rot: int = 8
    n_scale: int = 4
    mu: float = 1.25
    p: int = 6
    h: float = 0.5
    in_patterns: int = 1
    out_patterns: int = 1
    seed: int = 0
    dump_kernels: bool = False


@dataclass(frozen=True)
class VerifyConfig:
    n_rot: int = 8
    n_scale: int = 4
    mu: float = 1.25
    p: int = 6
    h: float = 0.5
    size: int = 64
    sigma: float = 3.0
    crop: int = 14
    seeds: int = 5
    patterns: int = 1
    in_channels: int = 3


@dataclass(frozen=True)
class SynthDataConfig:
    seed: int = 0
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass(frozen=True)
class EvalConfig:
    checkpoint: str = ""
    data_dir: str = ""
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    data_seed: int = 0
    transform_test: bool = False
    transform_seed: int = 0
    patch: PatchSpec = field(default_factory=PatchSpec)
    threshold: float = 0.5
    dataset: str = "data"
    dump_maps: bool = False


@dataclass(frozen=True)
class CountParamsConfig:
    variant: str = "FRS"
    depth: int = 5
    base_channels: int = 64
    input_channels: int = 3
    p: int = 6
    h: float = 0.5
    mu: float = 1.25


COMMANDS = {
    "fit-basis": FitBasisConfig,
    "gen-bank": GenBankConfig,
    "verify": VerifyConfig,
    "synth-data": SynthDataConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "count-params": CountParamsConfig,
}


def _run_dir(base: str | None, name: str, cfg_dict: dict) -> Path:
    if base:
        path = Path(base)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        path = Path("runs") / f"{name}-{cfgmod.config_hash(cfg_dict)}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_fit_basis(cfg: FitBasisConfig, out: Path) -> None:
    basis = make_fourier_basis(cfg.p, cfg.h)
    if cfg.target:
        target = load_kernel_txt(cfg.target)
    else:
        target = np.random.default_rng(cfg.seed).standard_normal((cfg.p, cfg.p))
    filt = fit_coefficients(target, basis)
    recon = discretize(filt, TransformSpec(mu=1.25), cfg.p)
    residual = float(np.abs(recon - target).max())
    save_kernel_txt(out / "target.txt", target)
    save_kernel_txt(out / "coefficients.txt", filt.coefficients[None])
    save_kernel_txt(out / "reconstruction.txt", recon)
    print(f"fit residual (max abs): {residual:.3e}")


def _cmd_gen_bank(cfg: GenBankConfig, out: Path) -> None:
    g = GroupSpec(n_rot=cfg.n_rot, n_scale=cfg.n_scale, mu=cfg.mu, base_p=cfg.p, h=cfg.h)
    basis = make_fourier_basis(cfg.p, cfg.h)
    rng = np.random.default_rng(cfg.seed)
    n = basis.n
    if cfg.kind == "lifting":
        shape = (cfg.out_patterns, cfg.in_patterns)
    elif cfg.kind == "group":
        shape = (cfg.out_patterns, cfg.in_patterns, g.n_rot, g.n_scale)
    else:
        raise InvalidArgument(f"unknown bank kind {cfg.kind!r}")
    coeffs = init_coefficients(rng, (*shape, n), cfg.in_patterns * cfg.p ** 2, n)
    filters = np.empty(shape, dtype=object)
    for idx in np.ndindex(shape):
        filters[idx] = ParamFilter(coeffs[idx], basis)
    bank = (expand_lifting_bank if cfg.kind == "lifting" else expand_group_bank)(filters, g)
    save_bank(out / "bank.bin", bank)
    if cfg.dump_kernels:
        for b, block in enumerate(bank.expanded):
            flat = block.reshape(-1, block.shape[-2], block.shape[-1])
            for i, kern in enumerate(flat[: g.n_rot]):
                save_kernel_txt(out / f"kernel_s{b}_{i:02d}.txt", kern)
    print(f"bank written: {out / 'bank.bin'} "
          f"({count_shared_params(cfg.in_patterns, cfg.out_patterns, g, cfg.kind)} reals)")


def _cmd_verify(cfg: VerifyConfig, out: Path) -> None:
    from . import autodiff as ad
    from .nn import GroupConv, LiftingConv

    g = GroupSpec(n_rot=cfg.n_rot, n_scale=cfg.n_scale, mu=cfg.mu, base_p=cfg.p, h=cfg.h)
    basis = make_fourier_basis(cfg.p, cfg.h)
    crop = max(cfg.crop, max(g.kernel_sizes))
    warps = [WarpSpec(theta_hat=t) for t in (np.pi / 2, np.pi, 3 * np.pi / 2)]
    if g.n_rot % 8 == 0:
        warps.append(WarpSpec(theta_hat=np.pi / 4, interpolation="bilinear",
                              boundary="reflect"))
    if g.n_scale > 1:
        warps.append(WarpSpec(theta_hat=0.0, s_hat=1, mu=cfg.mu,
                              interpolation="bilinear", boundary="reflect"))
    rows = []
    for seed in range(cfg.seeds):
        rng = np.random.default_rng(seed)
        lift = LiftingConv(cfg.in_channels, cfg.patterns, g, basis, rng)
        gconv = GroupConv(cfg.patterns, cfg.patterns, g, basis, rng)
        ctrl = UnsharedLiftingControl(cfg.in_channels, cfg.patterns, g, rng)
        x = smooth_noise(rng, (1, cfg.in_channels, cfg.size, cfg.size), cfg.sigma)
        f = smooth_noise(
            rng, (1, cfg.patterns, g.n_rot, g.n_scale, cfg.size, cfg.size), cfg.sigma
        )

        def lift_apply(arr):
            o = lift.forward(ad.Tensor(arr)).data
            return o.reshape(o.shape[0], cfg.patterns, g.n_rot, g.n_scale, *o.shape[-2:])

        def gconv_apply(arr):
            a6 = np.asarray(arr)
            o = gconv.forward(ad.Tensor(a6.reshape(a6.shape[0], -1, *a6.shape[-2:]))).data
            return o.reshape(o.shape[0], cfg.patterns, g.n_rot, g.n_scale, *o.shape[-2:])

        for w in warps:
            fin = f
            if w.s_hat:
                fin = f.copy()
                fin[:, :, :, g.n_scale - w.s_hat :] = 0.0
            for layer_name, fn, arr in (
                ("lifting", lift_apply, x),
                ("group", gconv_apply, fin),
                ("control", ctrl, x),
            ):
                err = equivariance_error(fn, arr, w, crop, group=g)
                rows.append(
                    (layer_name, w.theta_hat, w.s_hat, w.interpolation, seed, err.value)
                )
    csv = out / "equivariance.csv"
    with open(csv, "w") as fh:
        fh.write("layer,theta_hat,s_hat,interpolation,seed,error\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]:.10g},{r[2]},{r[3]},{r[4]},{r[5]:.12e}\n")
    print(f"wrote {csv} ({len(rows)} measurements)")


def _cmd_synth_data(cfg: SynthDataConfig, out: Path) -> None:
    samples = gen_synthetic(cfg.seed, spec=cfg.synthetic)
    for s in samples:
        save_sample_pngs(s, out)
    print(f"wrote {len(samples)} samples under {out}")


def _cmd_train(cfg: TrainConfig, out: Path) -> None:
    cfg = TrainConfig(**{**cfg.__dict__, "checkpoint_dir": str(out / "ckpt")})
    result = train_loop(cfg)
    write_train_log(out / "train_log.csv", result.log)
    write_timing(out / "timing.txt", result.seconds)
    print(f"final checkpoint: {result.checkpoint}")
    print(f"epoch 0 loss {result.log[0]['loss']:.4f} -> "
          f"epoch {len(result.log) - 1} loss {result.log[-1]['loss']:.4f}")


def _cmd_eval(cfg: EvalConfig, out: Path) -> None:
    if not cfg.checkpoint:
        raise InvalidArgument("eval needs a checkpoint path")
    if cfg.data_dir:
        data = load_fundus_dir(cfg.data_dir)
    else:
        data = gen_synthetic(cfg.data_seed, spec=cfg.synthetic)
    if cfg.transform_test:
        data = transformed_test_set(data, cfg.transform_seed)
    report = evaluate(
        cfg.checkpoint,
        data,
        cfg.patch,
        threshold=cfg.threshold,
        dataset=cfg.dataset,
        dump_dir=str(out / "maps") if cfg.dump_maps else None,
    )
    write_metrics_csv(out / "metrics.csv", report["rows"])
    micro = report["rows"][0]
    print(
        f"{cfg.dataset}: Se={micro['Se']:.4f} Sp={micro['Sp']:.4f} "
        f"F1={micro['F1']:.4f} Acc={micro['Acc']:.4f} AUC={micro['AUC']:.4f}"
    )


def _cmd_count_params(cfg: CountParamsConfig, out: Path) -> None:
    kwargs = dict(
        depth=cfg.depth, base_channels=cfg.base_channels,
        input_channels=cfg.input_channels, p=cfg.p, h=cfg.h, mu=cfg.mu,
    )
    target = count_params_config(ModelConfig(variant=cfg.variant, **kwargs), sections=True)
    print(f"{cfg.variant}: total={target['total']} "
          f"intermediate={target['intermediate']} head={target['head']}")
    if cfg.variant != "F":
        ref = count_params_config(ModelConfig(variant="F", **kwargs), sections=True)
        ratio = target["intermediate"] / ref["intermediate"]
        print(f"intermediate ratio vs F: {ratio:.10g} (1/{1 / ratio:.10g})")
    lines = [f"{cfg.variant},{target['total']},{target['intermediate']},{target['head']}"]
    (out / "params.csv").write_text(
        "variant,total,intermediate,head\n" + "\n".join(lines) + "\n"
    )


RUNNERS = {
    "fit-basis": _cmd_fit_basis,
    "gen-bank": _cmd_gen_bank,
    "verify": _cmd_verify,
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "count-params": _cmd_count_params,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="equiseg",
        description="Rotation- and scale-equivariant segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, cls in COMMANDS.items():
        p = sub.add_parser(
            name,
            help=f"{name} (see --help for config keys)",
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog="config keys and defaults:\n" + "\n".join(cfgmod.describe_defaults(cls)),
        )
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--run-dir", default=None, help="output directory override")
        p.add_argument(
            "overrides", nargs="*", metavar="key=value",
            help="dotted config overrides, e.g. model.variant=FRS",
        )
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cls = COMMANDS[args.command]
    try:
        data = {}
        if args.config:
            with open(args.config) as fh:
                data = json.load(fh)
        overrides = [o.lstrip("-") for o in args.overrides]
        data = cfgmod.apply_overrides(data, overrides)
        cfg = cfgmod.from_dict(cls, data)
        out = _run_dir(args.run_dir, args.command, data)
    except (json.JSONDecodeError, FileNotFoundError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        RUNNERS[args.command](cfg, out)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalFailure, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
