#!/usr/bin/env python3
"""Smoothness sweep: fine-tune one phantom at several TV weights.

For each lambda the script fine-tunes the same pretrained network on the
same noisy phantom, then reports the total variation of the OEF map and
the negative ELBO on a held-out phantom drawn with a fresh noise seed.
Stronger smoothing should trade a small held-out ELBO decrease for a
large TV decrease.
"""

import argparse
import sys

import numpy as np

from oximap import autodiff as ad
from oximap.distributions import forward_transform
from oximap.nnet import NetworkConfig, encoder_forward, prediction_to_distribution
from oximap.physics import AcquisitionProtocol, ForwardModelConfig, PhysioConstants
from oximap.synthgen import PRIOR_PRESETS, NoiseProfile, generate_dataset, make_phantom
from oximap.train import (
    TrainingConfig,
    compute_prior_maps,
    elbo_loss,
    run_finetuning,
    run_pretraining,
    tv_loss,
)
from oximap.volume import normalize_volume


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lambdas", default="0,1,5", help="comma-separated TV weights")
    ap.add_argument("--grid", default="24,24,2", help="phantom shape h,w,d")
    ap.add_argument("--truth", default="0.40,0.025", help="phantom oef,dbv")
    ap.add_argument("--snr", type=float, default=60.0)
    ap.add_argument("--width", type=int, default=32)
    ap.add_argument("--pretrain-iterations", type=int, default=1400)
    ap.add_argument("--finetune-iterations", type=int, default=150)
    ap.add_argument("--seed", type=int, default=21)
    args = ap.parse_args(argv)

    proto = AcquisitionProtocol()
    const = PhysioConstants()
    fwd = ForwardModelConfig()
    grid = tuple(int(v) for v in args.grid.split(","))
    truth = tuple(float(v) for v in args.truth.split(","))

    train_vol, _ = normalize_volume(
        make_phantom(grid, truth, proto, const, fwd, args.snr, np.random.default_rng(777)), proto
    )
    held_vol, _ = normalize_volume(
        make_phantom(grid, truth, proto, const, fwd, args.snr, np.random.default_rng(778)), proto
    )

    ds = generate_dataset(
        16000, PRIOR_PRESETS["normal"], proto, const, fwd, NoiseProfile(), np.random.default_rng(300)
    )
    theta = run_pretraining(
        NetworkConfig(n_blocks=2, width=args.width),
        TrainingConfig.pretrain_defaults(iterations=args.pretrain_iterations, batch_size=512, seed=11),
        ds,
    )
    gated = NetworkConfig(n_blocks=2, width=args.width, spatial_mode="gated-residual")
    held_priors = compute_prior_maps(theta, held_vol)
    eval_cfg = TrainingConfig.finetune_defaults(n_samples_elbo=16)

    print("lambda\ttv_oef\theldout_neg_elbo")
    for lam in (float(v) for v in args.lambdas.split(",")):
        cfg = TrainingConfig.finetune_defaults(
            iterations=args.finetune_iterations,
            batch_size=6,
            crop_xy=12,
            n_samples_elbo=2,
            tv_lambda=lam,
            seed=args.seed,
        )
        psi = run_finetuning(theta, gated, cfg, [train_vol], proto, const, fwd)
        x4 = np.moveaxis(train_vol.data, 2, 0)
        mu = prediction_to_distribution(encoder_forward(psi, ad.Tensor(x4)), "diagonal").mu
        oef = np.moveaxis(forward_transform(mu)[..., 0], 0, 2)
        tv = float(tv_loss(oef, train_vol.mask).data)
        neg = float(
            elbo_loss(psi, held_vol, held_priors, proto, const, fwd, eval_cfg, np.random.default_rng(99)).data
        )
        print("%g\t%.6g\t%.6g" % (lam, tv, neg))
    return 0


if __name__ == "__main__":
    sys.exit(main())
