#!/usr/bin/env python3
"""Forward-model comparison: full 2-compartment vs asymptotic 1-compartment.

Both pipelines are trained with matched seeds and budgets — synthetic
pretraining on their own forward model, then variational fine-tuning on
the same phantom (generated by the full model) — and scored by the mean
voxelwise ELBO on a held-out phantom. At high deoxygenated blood volume
the intravascular compartment carries real signal, so the full model
should win; at mid-range parameters the two families are nearly
indistinguishable and the gap collapses toward zero.
"""

import argparse
import sys

import numpy as np

from oximap.analysis import elbo_map
from oximap.nnet import NetworkConfig
from oximap.physics import AcquisitionProtocol, ForwardModelConfig, PhysioConstants
from oximap.synthgen import PRIOR_PRESETS, NoiseProfile, generate_dataset, make_phantom
from oximap.train import TrainingConfig, compute_prior_maps, run_finetuning, run_pretraining
from oximap.volume import normalize_volume


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="24,24,2", help="phantom shape h,w,d")
    ap.add_argument("--truth", default="0.55,0.15", help="phantom oef,dbv")
    ap.add_argument("--snr", type=float, default=150.0)
    ap.add_argument("--width", type=int, default=32)
    ap.add_argument("--finetune-iterations", type=int, default=400)
    ap.add_argument("--seed", type=int, default=21)
    args = ap.parse_args(argv)

    proto = AcquisitionProtocol()
    const = PhysioConstants()
    models = {
        "full-2comp": ForwardModelConfig(),
        "asym-1comp": ForwardModelConfig(variant="asymptotic", compartments=1),
    }
    grid = tuple(int(v) for v in args.grid.split(","))
    truth = tuple(float(v) for v in args.truth.split(","))
    gen_fwd = models["full-2comp"]

    train_vol, _ = normalize_volume(
        make_phantom(grid, truth, proto, const, gen_fwd, args.snr, np.random.default_rng(779)), proto
    )
    held_vol, _ = normalize_volume(
        make_phantom(grid, truth, proto, const, gen_fwd, args.snr, np.random.default_rng(780)), proto
    )

    gated = NetworkConfig(n_blocks=2, width=args.width, spatial_mode="gated-residual")
    ft_cfg = TrainingConfig.finetune_defaults(
        iterations=args.finetune_iterations,
        batch_size=6,
        crop_xy=12,
        n_samples_elbo=2,
        tv_lambda=0.0,
        seed=args.seed,
    )

    print("model\theldout_mean_elbo")
    scores = {}
    for name, fwd in models.items():
        ds = generate_dataset(
            16000, PRIOR_PRESETS["uniform"], proto, const, fwd, NoiseProfile(), np.random.default_rng(300)
        )
        theta = run_pretraining(
            NetworkConfig(n_blocks=2, width=args.width),
            TrainingConfig.pretrain_defaults(iterations=1400, batch_size=512, seed=11),
            ds,
        )
        psi = run_finetuning(theta, gated, ft_cfg, [train_vol], proto, const, fwd)
        priors = compute_prior_maps(theta, held_vol)
        m = elbo_map(psi, held_vol, priors, proto, const, fwd, np.random.default_rng(55), 16)
        scores[name] = float(np.nanmean(m[held_vol.mask]))
        print("%s\t%.6g" % (name, scores[name]))
    print("# diff (full - asym): %+.4g" % (scores["full-2comp"] - scores["asym-1comp"]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
