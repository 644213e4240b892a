"""Two-stage training: supervised pretraining on synthetic voxels, then
amortized variational fine-tuning on masked image volumes.

Pretraining maximizes the predicted-distribution log-density of known
synthetic truths (AdamW, optional stochastic weight averaging over the
second half). Fine-tuning minimizes a Monte-Carlo negative ELBO — KL of
the predicted posterior against per-voxel priors from the frozen
pretrained network, minus the expected diagonal-Gaussian log-likelihood
of the normalized signals under the biophysical forward model — plus a
weighted in-plane total-variation penalty on the transformed mean maps,
with learning rate and weight decay linearly annealed by a factor of 100.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .distributions import PARAM_OFFSET, PARAM_SCALE, inverse_transform
from .nnet import (
    SIGMA_IM_FLOOR,
    AdamWState,
    EncoderWeights,
    NetworkConfig,
    VoxelPrediction,
    adamw_step,
    collect_gradients,
    encoder_forward,
    extend_weights,
    init_weights,
    lr_schedule,
    prediction_to_distribution,
    swa_update,
)
from .physics import (
    AcquisitionProtocol,
    ForwardModelConfig,
    PhysioConstants,
    TissueParams,
    normalized_model_signal_t,
)
from .synthgen import SynthDataset
from .volume import Volume4D, valid_crop_corners

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for one training stage."""

    stage: str
    iterations: int
    batch_size: int
    lr: float
    weight_decay: float = 2e-4
    n_samples_elbo: int = 4
    tv_lambda: float = 5.0
    crop_xy: int = 25
    swa_enabled: bool = False
    kl_mode: str = "analytic"
    kl_samples: int = 8
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        for name in ("iterations", "batch_size", "n_samples_elbo", "crop_xy", "kl_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.tv_lambda < 0:
            raise ValueError("tv_lambda must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.kl_mode not in ("analytic", "sampled"):
            raise ValueError(f"unknown kl_mode {self.kl_mode!r}")

    @classmethod
    def pretrain_defaults(cls, **overrides) -> "TrainingConfig":
        base = dict(stage="pretrain", iterations=1400, batch_size=512, lr=2e-3, swa_enabled=True)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def finetune_defaults(cls, **overrides) -> "TrainingConfig":
        base = dict(stage="finetune", iterations=4000, batch_size=38, lr=5e-3)
        base.update(overrides)
        return cls(**base)


class MetricsLog:
    """Tab-separated training log: one header line, then one row per step."""

    HEADER = "step\tloss\tkl\tloglik\ttv\tlr"

    def __init__(self, path=None):
        self._fh = open(path, "w", encoding="utf-8") if path is not None else None
        if self._fh is not None:
            self._fh.write(self.HEADER + "\n")

    def write(self, step, loss, kl=np.nan, loglik=np.nan, tv=np.nan, lr=np.nan):
        if self._fh is None:
            return
        row = "\t".join(f"{float(v):.10g}" for v in (loss, kl, loglik, tv, lr))
        self._fh.write(f"{int(step)}\t{row}\n")

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class PriorMaps:
    """Per-voxel logit-space prior parameters on a volume grid.

    Outside the mask mu_l is zero and chol_l the identity, so downstream
    arithmetic stays finite; only masked voxels carry information.
    """

    mu_l: np.ndarray
    chol_l: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.mu_l = np.asarray(self.mu_l, dtype=np.float64)
        self.chol_l = np.asarray(self.chol_l, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mu_l.ndim != 4 or self.mu_l.shape[-1] != 2:
            raise ValueError("mu_l must have shape (h, w, d, 2)")
        grid = self.mu_l.shape[:3]
        if self.chol_l.shape != grid + (2, 2):
            raise ValueError("chol_l must have shape (h, w, d, 2, 2)")
        if self.mask.shape != grid:
            raise ValueError("mask must match the (h, w, d) grid")
        if not np.all(np.isfinite(self.mu_l[self.mask])):
            raise ValueError("prior means must be finite on masked voxels")
        if not np.all(np.isfinite(self.chol_l[self.mask])):
            raise ValueError("prior scales must be finite on masked voxels")
        diag = self.chol_l[self.mask][:, (0, 1), (0, 1)] if self.mask.any() else np.ones((0, 2))
        if np.any(diag <= 0):
            raise ValueError("prior Cholesky diagonals must be positive on masked voxels")

    @property
    def grid_shape(self):
        return self.mu_l.shape[:3]

    def crop_xy(self, x0: int, y0: int, size: int) -> "PriorMaps":
        h, w, _ = self.grid_shape
        if size < 1 or x0 < 0 or y0 < 0 or x0 + size > h or y0 + size > w:
            raise ValueError(f"crop ({x0}, {y0}, size {size}) exceeds grid ({h}, {w})")
        sl = (slice(x0, x0 + size), slice(y0, y0 + size))
        return PriorMaps(self.mu_l[sl], self.chol_l[sl], self.mask[sl])


# pretraining ---------------------------------------------------------


def pretrain_loss(pred: VoxelPrediction, truth) -> ad.Tensor:
    """Mean negative log-density of the true (oef, dbv) under the prediction.

    `truth` is a TissueParams or an array (..., 2) matching the prediction's
    leading shape; values must lie strictly inside the parameter box.
    """
    if isinstance(truth, TissueParams):
        y = np.array([truth.oef, truth.dbv])
    else:
        y = np.asarray(truth, dtype=np.float64)
    beta = inverse_transform(y)
    yhat = (y - PARAM_OFFSET) / PARAM_SCALE
    log_jac = np.log(PARAM_SCALE * yhat * (1.0 - yhat)).sum(axis=-1)

    mu = pred.mu_l
    p = pred.sigma_l_params
    full = p.data.shape[-1] == 3
    q0 = p[..., 0]
    q1 = p[..., 1]
    r0 = ad.as_tensor(beta[..., 0]) - mu[..., 0]
    r1 = ad.as_tensor(beta[..., 1]) - mu[..., 1]
    w0 = r0 * ad.exp(-q0)
    if full:
        w1 = (r1 - p[..., 2] * w0) * ad.exp(-q1)
    else:
        w1 = r1 * ad.exp(-q1)
    neg_logp = _LOG_2PI + q0 + q1 + 0.5 * (w0 * w0 + w1 * w1) + log_jac
    return ad.tmean(neg_logp)


def evaluate_pretrain_loss(weights: EncoderWeights, signals: np.ndarray, truths: np.ndarray) -> float:
    """Detached mean pretraining loss of a weight set on given rows."""
    pred = encoder_forward(weights, ad.Tensor(np.asarray(signals, dtype=np.float64)))
    return float(pretrain_loss(pred, truths).data)


def run_pretraining(
    net_cfg: NetworkConfig,
    train_cfg: TrainingConfig,
    dataset: SynthDataset,
    metrics_path=None,
) -> EncoderWeights:
    """Supervised pretraining on a synthetic dataset; returns the trained
    (SWA-averaged when enabled) voxelwise network.

    The returned weights are initialized from the first draws of
    default_rng(train_cfg.seed), so the starting network is reproducible
    with init_weights under the same generator.
    """
    if train_cfg.stage != "pretrain":
        raise ValueError("train_cfg.stage must be 'pretrain'")
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(train_cfg.seed)
    n_t = dataset.signals.shape[1]
    theta = init_weights(net_cfg, n_t, rng)
    opt = AdamWState.for_weights(theta)

    perm = rng.permutation(dataset.n)
    n_val = int(round(train_cfg.val_fraction * dataset.n))
    val_rows = perm[:n_val]
    train_rows = perm[n_val:]
    if train_rows.size == 0:
        train_rows = perm
    if val_rows.size == 0:
        val_rows = train_rows

    swa_avg = {k: np.zeros_like(t.data) for k, t in theta.tensors.items()}
    swa_count = 0
    with MetricsLog(metrics_path) as log:
        for i in range(train_cfg.iterations):
            rows = train_rows[rng.integers(0, train_rows.size, train_cfg.batch_size)]
            pred = encoder_forward(theta, ad.Tensor(dataset.signals[rows]))
            loss = pretrain_loss(pred, dataset.truths[rows])
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise RuntimeError(f"non-finite loss at iteration {i}")
            ad.zero_grads(loss)
            grads = collect_gradients(theta, loss)
            adamw_step(theta, opt, grads, train_cfg.lr, train_cfg.weight_decay)
            if train_cfg.swa_enabled and (i + 1) > train_cfg.iterations // 2:
                swa_count += 1
                swa_update(swa_avg, theta, swa_count)
            log.write(i, loss_val, lr=train_cfg.lr)

    if train_cfg.swa_enabled and swa_count > 0:
        theta = EncoderWeights(
            net_cfg, n_t, {k: ad.Tensor(v.copy()) for k, v in swa_avg.items()}
        )
    # fail loudly if training left the weights unusable
    if not all(np.all(np.isfinite(t.data)) for t in theta.tensors.values()):
        raise RuntimeError("non-finite weights after pretraining")
    return theta


# adaptive priors ------------------------------------------------------


def compute_prior_maps(theta: EncoderWeights, vol: Volume4D) -> PriorMaps:
    """Frozen-network per-voxel priors for every masked voxel of a volume."""
    if theta.config.spatial_mode != "voxelwise":
        raise ValueError("prior maps require a voxelwise (pretrained) network")
    grid = vol.grid_shape
    mu_full = np.zeros(grid + (2,))
    chol_full = np.zeros(grid + (2, 2))
    chol_full[..., 0, 0] = 1.0
    chol_full[..., 1, 1] = 1.0
    rows = vol.masked_signals()
    if rows.shape[0]:
        pred = encoder_forward(theta, ad.Tensor(rows))
        dist = prediction_to_distribution(pred, theta.config.covariance_mode)
        mu_full[vol.mask] = dist.mu
        chol_full[vol.mask] = dist.chol
    return PriorMaps(mu_full, chol_full, vol.mask.copy())


# negative ELBO --------------------------------------------------------


def _kl_analytic_t(mu, q0, q1, q2, prior_mu, prior_chol):
    """Per-voxel analytic KL(q || p) on the tape; priors are constants."""
    lp00 = prior_chol[..., 0, 0]
    lp10 = prior_chol[..., 1, 0]
    lp11 = prior_chol[..., 1, 1]
    m00 = ad.exp(q0) / lp00
    m11 = ad.exp(q1) / lp11
    if q2 is None:
        m10 = m00 * (-lp10 / lp11)
    else:
        m10 = (q2 - lp10 * m00) / lp11
    d0 = mu[..., 0] - prior_mu[..., 0]
    d1 = mu[..., 1] - prior_mu[..., 1]
    w0 = d0 / lp00
    w1 = (d1 - lp10 * w0) / lp11
    log_m00 = q0 - np.log(lp00)
    log_m11 = q1 - np.log(lp11)
    quad = m00 * m00 + m10 * m10 + m11 * m11 + w0 * w0 + w1 * w1
    kl = 0.5 * (quad - 2.0) - (log_m00 + log_m11)
    # rounding may leave a -1e-17 residue at q == p; KL is nonnegative and
    # flat there, so the clamp changes neither the value nor the gradient
    return ad.clip_min(kl, 0.0)


def _kl_sampled_t(mu, q0, q1, q2, prior_mu, prior_chol, z):
    """Monte-Carlo KL(q || p) from reparameterized logit-space draws.

    The box-transform Jacobians cancel because both densities are evaluated
    at the same point, so only the Gaussian terms remain; the q term reduces
    to its entropy because L_q^-1 (beta - mu_q) is the injected noise itself.
    """
    lp00 = prior_chol[..., 0, 0]
    lp10 = prior_chol[..., 1, 0]
    lp11 = prior_chol[..., 1, 1]
    logdet_p = np.log(lp00) + np.log(lp11)
    acc = None
    for j in range(z.shape[0]):
        z0 = z[j, ..., 0]
        z1 = z[j, ..., 1]
        b0 = mu[..., 0] + ad.exp(q0) * z0
        b1 = mu[..., 1] + ad.exp(q1) * z1
        if q2 is not None:
            b1 = b1 + q2 * z0
        u0 = (b0 - prior_mu[..., 0]) / lp00
        u1 = ((b1 - prior_mu[..., 1]) - lp10 * u0) / lp11
        log_q = -(q0 + q1) - 0.5 * (z0 * z0 + z1 * z1)
        log_p = -logdet_p - 0.5 * (u0 * u0 + u1 * u1)
        term = log_q - log_p
        acc = term if acc is None else acc + term
    return acc * (1.0 / z.shape[0])


def _elbo_core(psi, x_arr, mask_arr, prior_mu, prior_chol, proto, constants, fwd_cfg, cfg, rng):
    """Negative-ELBO graph on plane-major arrays (planes, h, w, ...).

    Returns (loss, kl_mean, loglik_mean, mean_maps) where mean_maps is the
    tape tensor of transformed posterior means, shape (planes, h, w, 2).
    """
    n_masked = int(mask_arr.sum())
    if n_masked == 0:
        raise ValueError("batch contains no masked voxels")
    x_t = ad.Tensor(x_arr)
    pred = encoder_forward(psi, x_t)
    mu = pred.mu_l
    p = pred.sigma_l_params
    full = psi.config.covariance_mode == "full"
    q0 = p[..., 0]
    q1 = p[..., 1]
    q2 = p[..., 2] if full else None

    if cfg.kl_mode == "analytic":
        kl_vox = _kl_analytic_t(mu, q0, q1, q2, prior_mu, prior_chol)
    else:
        z_kl = rng.standard_normal((cfg.kl_samples,) + mask_arr.shape + (2,))
        kl_vox = _kl_sampled_t(mu, q0, q1, q2, prior_mu, prior_chol, z_kl)

    sigma_im = ad.clip_min(ad.exp(pred.log_sigma_im), SIGMA_IM_FLOOR)
    log_sigma = ad.log(sigma_im)
    ll_acc = None
    for _ in range(cfg.n_samples_elbo):
        z = rng.standard_normal(mask_arr.shape + (2,))
        b0 = mu[..., 0] + ad.exp(q0) * z[..., 0]
        b1 = mu[..., 1] + ad.exp(q1) * z[..., 1]
        if full:
            b1 = b1 + q2 * z[..., 0]
        oef = PARAM_SCALE[0] * ad.logistic(b0) + PARAM_OFFSET[0]
        dbv = PARAM_SCALE[1] * ad.logistic(b1) + PARAM_OFFSET[1]
        s_model = normalized_model_signal_t(oef, dbv, proto, constants, fwd_cfg)
        res = (x_t - s_model) / sigma_im
        per_tau = -0.5 * _LOG_2PI - log_sigma - 0.5 * (res * res)
        ll_vox = ad.tsum(per_tau, axis=-1)
        ll_acc = ll_vox if ll_acc is None else ll_acc + ll_vox
    ll_vox = ll_acc * (1.0 / cfg.n_samples_elbo)

    mask_f = mask_arr.astype(np.float64)
    inv = 1.0 / n_masked
    kl_mean = ad.tsum(kl_vox * mask_f) * inv
    ll_mean = ad.tsum(ll_vox * mask_f) * inv
    loss = kl_mean - ll_mean
    mean_maps = ad.stack_last(
        [
            PARAM_SCALE[0] * ad.logistic(mu[..., 0]) + PARAM_OFFSET[0],
            PARAM_SCALE[1] * ad.logistic(mu[..., 1]) + PARAM_OFFSET[1],
        ]
    )
    return loss, kl_mean, ll_mean, mean_maps


def _planes_first(arr: np.ndarray) -> np.ndarray:
    """Move the slice axis of an (h, w, d, ...) grid array to the front."""
    return np.ascontiguousarray(np.moveaxis(arr, 2, 0))


def elbo_loss(
    psi: EncoderWeights,
    batch: Volume4D,
    priors: PriorMaps,
    proto: AcquisitionProtocol,
    constants: PhysioConstants,
    fwd_cfg: ForwardModelConfig,
    cfg: TrainingConfig,
    rng: np.random.Generator,
    return_parts: bool = False,
):
    """Monte-Carlo negative ELBO of a normalized volume (or crop), averaged
    over its masked voxels: mean KL(q || prior) minus the mean over
    n_samples_elbo reparameterized draws of the diagonal-Gaussian signal
    log-likelihood. Differentiable w.r.t. the network weights.

    With return_parts, also returns {"kl", "loglik"} as floats; the loss
    equals kl - loglik exactly.
    """
    if priors.grid_shape != batch.grid_shape or not np.array_equal(priors.mask, batch.mask):
        raise ValueError("priors are not aligned with the batch grid and mask")
    loss, kl_mean, ll_mean, _ = _elbo_core(
        psi,
        _planes_first(batch.data),
        _planes_first(batch.mask),
        _planes_first(priors.mu_l),
        _planes_first(priors.chol_l),
        proto,
        constants,
        fwd_cfg,
        cfg,
        rng,
    )
    if return_parts:
        return loss, {"kl": float(kl_mean.data), "loglik": float(ll_mean.data)}
    return loss


# total variation ------------------------------------------------------


def _tv_planes(maps_t, mask=None):
    """Mean absolute in-plane forward differences of (planes, h, w, c) maps.

    Both difference directions are evaluated on the shared (h-1) x (w-1)
    interior and normalized by planes * (h-1) * (w-1); channels are summed.
    With a mask, a difference contributes only when both voxels are masked
    (the normalizer is unchanged, so edge voxels are penalized less).
    """
    n_planes, h, w = maps_t.data.shape[:3]
    if h < 2 or w < 2:
        return ad.as_tensor(0.0)
    dx = maps_t[:, :-1, :-1, :] - maps_t[:, 1:, :-1, :]
    dy = maps_t[:, :-1, :-1, :] - maps_t[:, :-1, 1:, :]
    adx = ad.absval(dx)
    ady = ad.absval(dy)
    if mask is not None:
        core = mask[:, :-1, :-1]
        wx = (core & mask[:, 1:, :-1]).astype(np.float64)[..., None]
        wy = (core & mask[:, :-1, 1:]).astype(np.float64)[..., None]
        adx = adx * wx
        ady = ady * wy
    norm = 1.0 / (n_planes * (h - 1) * (w - 1))
    return (ad.tsum(adx) + ad.tsum(ady)) * norm


def tv_loss(mean_maps, mask=None):
    """In-plane total variation of parameter maps on an (h, w, d) grid.

    Accepts (h, w, d) or (h, w, d, channels) arrays or tape tensors; only
    x/y neighbor differences enter, never z. Returns a tape scalar.
    """
    t = ad.as_tensor(mean_maps)
    if t.data.ndim == 3:
        t = ad.reshape(t, t.data.shape + (1,))
    if t.data.ndim != 4:
        raise ValueError("mean_maps must have shape (h, w, d) or (h, w, d, channels)")
    t = ad.transpose(t, (2, 0, 1, 3))
    m = None if mask is None else np.moveaxis(np.asarray(mask, dtype=bool), 2, 0)
    return _tv_planes(t, m)


# fine-tuning ----------------------------------------------------------


def _check_finetune_compat(theta: EncoderWeights, net_cfg: NetworkConfig):
    base = theta.config
    if (
        net_cfg.n_blocks != base.n_blocks
        or net_cfg.width != base.width
        or net_cfg.covariance_mode != base.covariance_mode
    ):
        raise ValueError(
            "fine-tune network must keep the pretrained depth, width, and covariance mode"
        )


def run_finetuning(
    theta: EncoderWeights,
    net_cfg: NetworkConfig,
    train_cfg: TrainingConfig,
    vols: list,
    proto: AcquisitionProtocol,
    constants: PhysioConstants,
    fwd_cfg: ForwardModelConfig,
    metrics_path=None,
) -> EncoderWeights:
    """Variational fine-tuning on normalized volumes; returns the adapted
    network (gated-residual extension of theta unless net_cfg stays
    voxelwise).

    Each step draws batch_size random in-plane crops (all slices kept),
    evaluates the negative ELBO against frozen-theta priors plus
    tv_lambda times the total variation of the transformed mean maps, and
    applies AdamW with both learning rate and weight decay linearly
    decayed to 1/100 of their starting values.
    """
    if train_cfg.stage != "finetune":
        raise ValueError("train_cfg.stage must be 'finetune'")
    if not vols:
        raise ValueError("no volumes to fine-tune on")
    _check_finetune_compat(theta, net_cfg)
    rng = np.random.default_rng(train_cfg.seed)

    if net_cfg.spatial_mode == "gated-residual":
        psi = extend_weights(theta, rng)
        cfg_spatial = NetworkConfig(
            n_blocks=net_cfg.n_blocks,
            width=net_cfg.width,
            spatial_mode="gated-residual",
            covariance_mode=net_cfg.covariance_mode,
            gate_offset=net_cfg.gate_offset,
            gate_scope=net_cfg.gate_scope,
        )
        psi = EncoderWeights(cfg_spatial, psi.n_t, psi.tensors)
    else:
        psi = theta.copy()

    size = train_cfg.crop_xy
    planes = []
    for k, vol in enumerate(vols):
        priors = compute_prior_maps(theta, vol)
        corners = valid_crop_corners(vol, size)
        if corners.shape[0] == 0:
            raise ValueError(f"volume {k} has no crop position containing a masked voxel")
        planes.append(
            {
                "x": _planes_first(vol.data),
                "mask": _planes_first(vol.mask),
                "mu": _planes_first(priors.mu_l),
                "chol": _planes_first(priors.chol_l),
                "corners": corners,
            }
        )

    opt = AdamWState.for_weights(psi)
    initial_loss = None
    with MetricsLog(metrics_path) as log:
        for i in range(train_cfg.iterations):
            xs, masks, mus, chols = [], [], [], []
            for _ in range(train_cfg.batch_size):
                v = planes[rng.integers(len(planes))]
                x0, y0 = v["corners"][rng.integers(v["corners"].shape[0])]
                sx = slice(x0, x0 + size)
                sy = slice(y0, y0 + size)
                xs.append(v["x"][:, sx, sy])
                masks.append(v["mask"][:, sx, sy])
                mus.append(v["mu"][:, sx, sy])
                chols.append(v["chol"][:, sx, sy])
            x_arr = np.concatenate(xs, axis=0)
            mask_arr = np.concatenate(masks, axis=0)
            mu_arr = np.concatenate(mus, axis=0)
            chol_arr = np.concatenate(chols, axis=0)

            elbo, kl_mean, ll_mean, mean_maps = _elbo_core(
                psi, x_arr, mask_arr, mu_arr, chol_arr, proto, constants, fwd_cfg, train_cfg, rng
            )
            tv = _tv_planes(mean_maps, mask_arr)
            loss = elbo + train_cfg.tv_lambda * tv if train_cfg.tv_lambda else elbo
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise RuntimeError(f"non-finite loss at iteration {i}")
            if initial_loss is None:
                initial_loss = loss_val
            elif loss_val - initial_loss > 10.0 * abs(initial_loss):
                raise RuntimeError(
                    f"training diverged at iteration {i}: loss {loss_val:.6g} "
                    f"grew more than 10x above the initial {initial_loss:.6g}"
                )
            ad.zero_grads(loss)
            grads = collect_gradients(psi, loss)
            lr_i = lr_schedule(i, train_cfg.iterations, train_cfg.lr)
            wd_i = lr_schedule(i, train_cfg.iterations, train_cfg.weight_decay)
            adamw_step(psi, opt, grads, lr_i, wd_i)
            log.write(
                i,
                loss_val,
                kl=float(kl_mean.data),
                loglik=float(ll_mean.data),
                tv=float(tv.data),
                lr=lr_i,
            )
    return psi
