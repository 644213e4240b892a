#!/usr/bin/env python3
"""Baseline contrast: weighted least squares vs variational inference.

Fits the same noisy phantom with the log-linear WLS baseline and with
the fine-tuned variational network (TV-regularized), then tabulates the
mean and spatial standard deviation of each parameter map next to the
ground truth. WLS is unbiased only in its asymptotic regime and inflates
spatial variance at clinical SNR; the amortized posterior stays near the
truth with far tighter maps.
"""

import argparse
import sys

import numpy as np

from oximap import autodiff as ad
from oximap.distributions import forward_transform
from oximap.nnet import NetworkConfig, encoder_forward, prediction_to_distribution
from oximap.physics import AcquisitionProtocol, ForwardModelConfig, PhysioConstants
from oximap.synthgen import PRIOR_PRESETS, NoiseProfile, generate_dataset, make_phantom
from oximap.train import TrainingConfig, run_finetuning, run_pretraining
from oximap.volume import normalize_volume
from oximap.analysis import wls_fit


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", default="24,24,2", help="phantom shape h,w,d")
    ap.add_argument("--truth", default="0.40,0.025", help="phantom oef,dbv")
    ap.add_argument("--snr", type=float, default=60.0)
    ap.add_argument("--width", type=int, default=32)
    ap.add_argument("--finetune-iterations", type=int, default=150)
    ap.add_argument("--tv-lambda", type=float, default=5.0)
    ap.add_argument("--seed", type=int, default=21)
    args = ap.parse_args(argv)

    proto = AcquisitionProtocol()
    const = PhysioConstants()
    fwd = ForwardModelConfig()
    grid = tuple(int(v) for v in args.grid.split(","))
    truth = tuple(float(v) for v in args.truth.split(","))
    vol, _ = normalize_volume(
        make_phantom(grid, truth, proto, const, fwd, args.snr, np.random.default_rng(777)), proto
    )

    fit = wls_fit(vol, proto, const)
    w_oef = fit.oef_point[vol.mask]
    w_dbv = fit.dbv_point[vol.mask]

    ds = generate_dataset(
        16000, PRIOR_PRESETS["normal"], proto, const, fwd, NoiseProfile(), np.random.default_rng(300)
    )
    theta = run_pretraining(
        NetworkConfig(n_blocks=2, width=args.width),
        TrainingConfig.pretrain_defaults(iterations=1400, batch_size=512, seed=11),
        ds,
    )
    gated = NetworkConfig(n_blocks=2, width=args.width, spatial_mode="gated-residual")
    ft_cfg = TrainingConfig.finetune_defaults(
        iterations=args.finetune_iterations,
        batch_size=6,
        crop_xy=12,
        n_samples_elbo=2,
        tv_lambda=args.tv_lambda,
        seed=args.seed,
    )
    psi = run_finetuning(theta, gated, ft_cfg, [vol], proto, const, fwd)
    x4 = np.moveaxis(vol.data, 2, 0)
    mu = prediction_to_distribution(encoder_forward(psi, ad.Tensor(x4)), "diagonal").mu
    pt = forward_transform(mu)
    v_oef = np.moveaxis(pt[..., 0], 0, 2)[vol.mask]
    v_dbv = np.moveaxis(pt[..., 1], 0, 2)[vol.mask]

    def row(name, vals):
        ok = np.isfinite(vals)
        return "%s\t%.4f\t%.4f\t%d" % (name, vals[ok].mean(), vals[ok].std(), ok.sum())

    print("method\tmean\tstd\tn   (truth oef %.3f, dbv %.4f)" % truth)
    print(row("wls_oef", w_oef))
    print(row("vi_oef", v_oef))
    print(row("wls_dbv", w_dbv))
    print(row("vi_dbv", v_dbv))
    return 0


if __name__ == "__main__":
    sys.exit(main())
