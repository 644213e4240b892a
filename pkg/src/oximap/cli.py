"""Command-line surface for the full pipeline.

Subcommands: simulate (synthetic dataset + optional phantom volume),
pretrain (dataset -> weights), finetune (weights + volumes -> adapted
weights), infer (weights + volume -> maps), wls (volume -> baseline
maps), stats (maps + region -> table), compare (two map sets -> paired
t-statistics). Every command is deterministic for a fixed config, seed,
and thread count; errors exit 1 with a single-line `error: ...` message.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from .analysis import InferenceConfig, ParamMaps, infer_maps, paired_tstat, region_stats, wls_fit
from .config import ConfigError, RunConfig, load_config
from .nifti import NiftiFormatError, read_nifti, write_nifti
from .nnet import CheckpointFormatError, load_checkpoint, save_checkpoint
from .synthgen import (
    DatasetFormatError,
    NoiseProfile,
    generate_dataset,
    load_dataset,
    make_phantom,
    save_dataset,
)
from .train import TrainingConfig, run_finetuning, run_pretraining
from .volume import Volume4D, normalize_volume

MAP_FILES = {
    "oef": "oef.nii",
    "dbv": "dbv.nii",
    "r2p": "r2p.nii",
    "oef_std": "oef_std.nii",
    "dbv_std": "dbv_std.nii",
    "elbo": "elbo.nii",
}


def _limit_threads(n: int | None):
    if n is None:
        return
    os.environ.setdefault("OMP_NUM_THREADS", str(n))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        pass  # plain numpy code stays deterministic either way


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg


def _training_for_stage(cfg: RunConfig, stage: str, seed) -> TrainingConfig:
    tr = cfg.training
    if tr.stage != stage:
        defaults = (
            TrainingConfig.pretrain_defaults if stage == "pretrain" else TrainingConfig.finetune_defaults
        )
        tr = defaults()
    if seed is not None:
        tr = dataclasses.replace(tr, seed=seed)
    return tr


def _read_masked_volume(vol_path, mask_path) -> Volume4D:
    vol = read_nifti(vol_path)
    if not isinstance(vol, Volume4D):
        raise ValueError(f"{vol_path} is 3-D; a 4-D multi-tau volume is required")
    if mask_path is not None:
        mask = read_nifti(mask_path)
        if isinstance(mask, Volume4D):
            raise ValueError(f"{mask_path} is 4-D; the mask must be a 3-D image")
        if mask.shape != vol.grid_shape:
            raise ValueError(
                f"mask grid {mask.shape} does not match volume grid {vol.grid_shape}"
            )
        vol = Volume4D(vol.data, (mask > 0.5) & vol.mask, vol.voxel_size_mm)
    return vol


def _check_protocol(vol: Volume4D, cfg: RunConfig, path):
    if vol.n_t != cfg.protocol.n_t:
        raise ValueError(
            f"{path} has {vol.n_t} tau samples but the protocol defines {cfg.protocol.n_t}"
        )


# subcommand implementations -------------------------------------------


def _cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    seed = args.seed if args.seed is not None else cfg.training.seed
    rng = np.random.default_rng(seed)
    noise = NoiseProfile(snr_low=args.snr_low, snr_high=args.snr_high)
    dataset = generate_dataset(
        args.n, cfg.param_prior, cfg.protocol, cfg.constants, cfg.forward, noise, rng
    )
    save_dataset(dataset, args.out)
    print(f"wrote {dataset.n} rows to {args.out}")
    if args.phantom:
        shape = _parse_ints(args.phantom_shape, 3, "--phantom-shape")
        oef, dbv = _parse_floats(args.phantom_params, 2, "--phantom-params")
        phantom = make_phantom(
            tuple(shape),
            (oef, dbv),
            cfg.protocol,
            cfg.constants,
            cfg.forward,
            args.phantom_snr,
            np.random.default_rng(seed + 1),
        )
        write_nifti(phantom, args.phantom, description="simulated phantom")
        print(f"wrote phantom {tuple(shape)} to {args.phantom}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    dataset = load_dataset(args.dataset)
    tr = _training_for_stage(cfg, "pretrain", args.seed)
    theta = run_pretraining(cfg.network, tr, dataset, metrics_path=args.metrics)
    save_checkpoint(theta, args.out)
    print(f"wrote pretrained weights ({theta.n_parameters()} parameters) to {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _load_run_config(args)
    theta = load_checkpoint(args.weights)
    tr = _training_for_stage(cfg, "finetune", args.seed)
    masks = args.mask or []
    if masks and len(masks) != len(args.volume):
        raise ValueError("--mask must be given once per --volume (or not at all)")
    vols = []
    for i, vp in enumerate(args.volume):
        raw = _read_masked_volume(vp, masks[i] if masks else None)
        _check_protocol(raw, cfg, vp)
        vol, dropped = normalize_volume(raw, cfg.protocol)
        if dropped:
            print(f"dropped {dropped} non-positive voxels from {vp}", file=sys.stderr)
        vols.append(vol)
    net_cfg = cfg.network
    psi = run_finetuning(
        theta, net_cfg, tr, vols, cfg.protocol, cfg.constants, cfg.forward,
        metrics_path=args.metrics,
    )
    save_checkpoint(psi, args.out)
    print(f"wrote fine-tuned weights ({psi.n_parameters()} parameters) to {args.out}")
    return 0


def _cmd_infer(args) -> int:
    cfg = _load_run_config(args)
    weights = load_checkpoint(args.weights)
    prior_weights = load_checkpoint(args.prior_weights) if args.prior_weights else None
    raw = _read_masked_volume(args.volume, args.mask)
    _check_protocol(raw, cfg, args.volume)
    vol, _ = normalize_volume(raw, cfg.protocol)
    seed = args.seed if args.seed is not None else 0
    icfg = InferenceConfig(
        protocol=cfg.protocol,
        constants=cfg.constants,
        forward=cfg.forward,
        seed=seed,
        source=args.source,
        prior_weights=prior_weights,
    )
    maps = infer_maps(weights, vol, icfg)
    _write_maps(maps, vol, args.out_dir)
    print(f"wrote {len(MAP_FILES)} maps + mask to {args.out_dir}")
    return 0


def _cmd_wls(args) -> int:
    cfg = _load_run_config(args)
    raw = _read_masked_volume(args.volume, args.mask)
    _check_protocol(raw, cfg, args.volume)
    vol, _ = normalize_volume(raw, cfg.protocol)
    maps = wls_fit(vol, cfg.protocol, cfg.constants, tc_mode=cfg.forward.tc_mode)
    _write_maps(maps, vol, args.out_dir)
    print(f"wrote {len(MAP_FILES)} maps + mask to {args.out_dir}")
    return 0


def _write_maps(maps: ParamMaps, vol: Volume4D, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    fields = {
        "oef": maps.oef_point,
        "dbv": maps.dbv_point,
        "r2p": maps.r2p_point,
        "oef_std": maps.oef_std,
        "dbv_std": maps.dbv_std,
        "elbo": maps.elbo,
    }
    for name, arr in fields.items():
        write_nifti(
            arr,
            os.path.join(out_dir, MAP_FILES[name]),
            voxel_size_mm=vol.voxel_size_mm,
            description=f"{name} ({maps.source})",
        )
    write_nifti(
        maps.mask.astype(np.float64),
        os.path.join(out_dir, "mask.nii"),
        voxel_size_mm=vol.voxel_size_mm,
        description="mask",
    )


def _read_maps_dir(path) -> ParamMaps:
    def rd(name):
        return read_nifti(os.path.join(path, MAP_FILES[name]))

    mask = read_nifti(os.path.join(path, "mask.nii")) > 0.5
    return ParamMaps(
        oef_point=rd("oef"),
        dbv_point=rd("dbv"),
        r2p_point=rd("r2p"),
        oef_std=rd("oef_std"),
        dbv_std=rd("dbv_std"),
        elbo=rd("elbo"),
        source="vi",
        mask=mask,
    )


def _cmd_stats(args) -> int:
    maps = _read_maps_dir(args.maps_dir)
    region = read_nifti(args.region) > 0.5
    table = region_stats(maps, region)
    lines = ["parameter\tmean\tstd\tn"]
    for name, (mean, std, n) in table.items():
        lines.append(f"{name}\t{mean:.8g}\t{std:.8g}\t{n}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote stats to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_compare(args) -> int:
    if len(args.a) != len(args.b):
        raise ValueError("--a and --b need the same number of map files")
    maps_a = [read_nifti(p) for p in args.a]
    maps_b = [read_nifti(p) for p in args.b]
    t = paired_tstat(maps_a, maps_b, smoothing_fwhm_mm=args.fwhm)
    write_nifti(t, args.out, description="paired t-statistic")
    print(f"wrote t-statistic map to {args.out}")
    return 0


# argument plumbing ----------------------------------------------------


def _parse_ints(text, n, flag):
    parts = text.split(",")
    if len(parts) != n:
        raise ValueError(f"{flag} needs {n} comma-separated values, got {text!r}")
    return [int(p) for p in parts]


def _parse_floats(text, n, flag):
    parts = text.split(",")
    if len(parts) != n:
        raise ValueError(f"{flag} needs {n} comma-separated values, got {text!r}")
    return [float(p) for p in parts]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oximap",
        description="Amortized variational qBOLD parameter mapping",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured RNG seed")
    common.add_argument("--threads", type=int, help="cap numeric library threads")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=100_000, help="number of voxels to draw")
    p.add_argument("--out", required=True, help="output dataset file")
    p.add_argument("--snr-low", type=float, default=50.0)
    p.add_argument("--snr-high", type=float, default=120.0)
    p.add_argument("--phantom", help="also write a phantom volume (NIfTI path)")
    p.add_argument("--phantom-shape", default="96,96,8", help="h,w,d of the phantom")
    p.add_argument("--phantom-params", default="0.4,0.025", help="oef,dbv of the phantom")
    p.add_argument("--phantom-snr", type=float, default=60.0, help="spin-echo SNR of the phantom")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain on a synthetic dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--metrics", help="TSV training log path")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="variational fine-tuning on volumes")
    p.add_argument("--weights", required=True, help="pretrained checkpoint")
    p.add_argument("--volume", action="append", required=True, help="raw 4-D volume (repeatable)")
    p.add_argument("--mask", action="append", help="3-D mask per volume (repeatable)")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--metrics", help="TSV training log path")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("infer", parents=[common], help="produce parameter maps from a volume")
    p.add_argument("--weights", required=True)
    p.add_argument("--prior-weights", help="pretrained checkpoint for the ELBO prior")
    p.add_argument("--volume", required=True)
    p.add_argument("--mask")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--source", default="vi", choices=("synth", "vi", "vi+tv"))
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("wls", parents=[common], help="weighted least-squares baseline maps")
    p.add_argument("--volume", required=True)
    p.add_argument("--mask")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_wls)

    p = sub.add_parser("stats", parents=[common], help="region statistics table")
    p.add_argument("--maps-dir", required=True, help="directory written by infer/wls")
    p.add_argument("--region", required=True, help="3-D region mask NIfTI")
    p.add_argument("--out", help="output TSV (default: stdout)")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("compare", parents=[common], help="paired t-statistics between conditions")
    p.add_argument("--a", nargs="+", required=True, help="condition A map files")
    p.add_argument("--b", nargs="+", required=True, help="condition B map files")
    p.add_argument("--fwhm", type=float, default=6.0, help="in-plane smoothing FWHM in mm")
    p.add_argument("--out", required=True, help="output t-map NIfTI")
    p.set_defaults(func=_cmd_compare)
    return parser


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _limit_threads(getattr(args, "threads", None))
    try:
        return args.func(args)
    except (
        ConfigError,
        NiftiFormatError,
        DatasetFormatError,
        CheckpointFormatError,
        ValueError,
        RuntimeError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
