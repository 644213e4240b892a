"""Map-making and statistics: apply trained networks to volumes, compute
WLS baseline fits, per-voxel ELBO maps, region summaries, and paired
voxelwise t-statistics.

The learned point estimate is the transformed logit-space mean f(mu_l),
i.e. the distribution median; Monte-Carlo means and standard deviations
are derived from per-voxel samples. All per-voxel quantities are NaN
outside the mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from .distributions import ScaledLogitNormal, forward_transform, kl_analytic
from .nnet import (
    SIGMA_IM_FLOOR,
    EncoderWeights,
    encoder_forward,
    prediction_to_distribution,
)
from .physics import (
    AcquisitionProtocol,
    ForwardModelConfig,
    PhysioConstants,
    characteristic_time,
    delta_omega,
    normalized_model_signal,
)
from .train import PriorMaps, compute_prior_maps
from .volume import DEFAULT_VOXEL_SIZE_MM, Volume4D

_LOG_2PI = np.log(2.0 * np.pi)

MAP_SOURCES = ("wls", "synth", "vi", "vi+tv")


@dataclass
class ParamMaps:
    """Per-voxel parameter maps on an (h, w, d) grid; NaN outside the mask.

    Point maps are medians (f of the logit mean) for learned sources and
    direct fit values for WLS; mc-mean maps hold the Monte-Carlo posterior
    means when available. `elbo` is in nats, higher meaning better
    explained; WLS carries no ELBO (all NaN).
    """

    oef_point: np.ndarray
    dbv_point: np.ndarray
    r2p_point: np.ndarray
    oef_std: np.ndarray
    dbv_std: np.ndarray
    elbo: np.ndarray
    source: str
    mask: np.ndarray
    oef_mc_mean: np.ndarray | None = None
    dbv_mc_mean: np.ndarray | None = None

    def __post_init__(self):
        if self.source not in MAP_SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        self.mask = np.asarray(self.mask, dtype=bool)
        grid = self.mask.shape
        for name in ("oef_point", "dbv_point", "r2p_point", "oef_std", "dbv_std", "elbo"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != grid:
                raise ValueError(f"{name} must match the mask grid {grid}")
            setattr(self, name, arr)
        for name in ("oef_std", "dbv_std"):
            vals = getattr(self, name)[self.mask]
            if np.any(vals[np.isfinite(vals)] < 0):
                raise ValueError(f"{name} must be nonnegative")

    @property
    def grid_shape(self):
        return self.mask.shape


@dataclass(frozen=True)
class InferenceConfig:
    """Everything infer_maps needs beyond the network and the volume."""

    protocol: AcquisitionProtocol = field(default_factory=AcquisitionProtocol)
    constants: PhysioConstants = field(default_factory=PhysioConstants)
    forward: ForwardModelConfig = field(default_factory=ForwardModelConfig)
    n_std_samples: int = 256
    n_elbo_samples: int = 32
    seed: int = 0
    source: str = "vi"
    prior_weights: EncoderWeights | None = None

    def __post_init__(self):
        if self.n_std_samples < 2:
            raise ValueError("n_std_samples must be >= 2")
        if self.n_elbo_samples < 1:
            raise ValueError("n_elbo_samples must be >= 1")
        if self.source not in MAP_SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


def _nan_grid(grid) -> np.ndarray:
    return np.full(grid, np.nan)


def _planes_first(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(arr, 2, 0))


def _planes_last(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(arr, 0, 2))


def _full_grid_distribution(weights: EncoderWeights, vol: Volume4D):
    """Detached posterior over the whole grid, plane-major; returns
    (distribution, log_sigma_im) with arrays shaped (d, h, w, ...)."""
    x = _planes_first(vol.data)
    pred = encoder_forward(weights, ad.Tensor(x))
    dist = prediction_to_distribution(pred, weights.config.covariance_mode)
    return dist, pred.log_sigma_im.data


def elbo_map(
    weights: EncoderWeights,
    vol: Volume4D,
    priors: PriorMaps,
    proto: AcquisitionProtocol,
    constants: PhysioConstants,
    fwd_cfg: ForwardModelConfig,
    rng: np.random.Generator,
    n_samples: int = 32,
) -> np.ndarray:
    """Per-voxel ELBO in nats (higher = better explained); NaN outside the
    mask.

    Computed detached from the tape: analytic KL against the priors plus
    the mean over n_samples reparameterized draws of the diagonal-Gaussian
    signal log-likelihood. Noise draws cover the full grid plane-major, so
    a generator seeded like the training loss reproduces its exact draws;
    the masked mean of this map equals minus the analytic-KL training loss
    on the same inputs.
    """
    if priors.grid_shape != vol.grid_shape or not np.array_equal(priors.mask, vol.mask):
        raise ValueError("priors are not aligned with the volume grid and mask")
    out = np.full(vol.grid_shape, np.nan)
    if not vol.mask.any():
        return out
    dist, log_sigma = _full_grid_distribution(weights, vol)
    p_dist = ScaledLogitNormal(_planes_first(priors.mu_l), _planes_first(priors.chol_l))
    kl_vox = kl_analytic(dist, p_dist)

    x = _planes_first(vol.data)
    sigma = np.maximum(np.exp(log_sigma), SIGMA_IM_FLOOR)
    log_sig = np.log(sigma)
    plane_grid = x.shape[:3]
    ll_acc = np.zeros(plane_grid)
    for _ in range(n_samples):
        z = rng.standard_normal(plane_grid + (2,))
        y = dist.transform_noise(z)
        s_model = normalized_model_signal(y[..., 0], y[..., 1], proto, constants, fwd_cfg)
        res = (x - s_model) / sigma
        ll_acc += (-0.5 * _LOG_2PI - log_sig - 0.5 * res * res).sum(axis=-1)
    elbo_vox = ll_acc / n_samples - kl_vox
    grid_elbo = _planes_last(elbo_vox)
    out[vol.mask] = grid_elbo[vol.mask]
    return out


def infer_maps(weights: EncoderWeights, vol: Volume4D, cfg: InferenceConfig) -> ParamMaps:
    """Apply a trained network to a normalized volume.

    Point maps are the transformed logit means; std and mc-mean maps come
    from cfg.n_std_samples per-voxel posterior draws; R2' is the
    deterministic map DBV * delta_omega(OEF) of the point estimates; the
    ELBO map uses priors from cfg.prior_weights (or the network itself
    when voxelwise and no prior network is given).
    """
    grid = vol.grid_shape
    maps = ParamMaps(
        oef_point=_nan_grid(grid),
        dbv_point=_nan_grid(grid),
        r2p_point=_nan_grid(grid),
        oef_std=_nan_grid(grid),
        dbv_std=_nan_grid(grid),
        elbo=_nan_grid(grid),
        source=cfg.source,
        mask=vol.mask.copy(),
        oef_mc_mean=_nan_grid(grid),
        dbv_mc_mean=_nan_grid(grid),
    )
    if not vol.mask.any():
        return maps

    dist, _ = _full_grid_distribution(weights, vol)
    rng = np.random.default_rng(cfg.seed)
    point = forward_transform(dist.mu)
    samples = dist.sample(rng, cfg.n_std_samples)
    mc_mean = samples.mean(axis=0)
    mc_std = samples.std(axis=0, ddof=1)

    def fill(target, planes_arr):
        target[vol.mask] = _planes_last(planes_arr)[vol.mask]

    fill(maps.oef_point, point[..., 0])
    fill(maps.dbv_point, point[..., 1])
    fill(maps.oef_mc_mean, mc_mean[..., 0])
    fill(maps.dbv_mc_mean, mc_mean[..., 1])
    fill(maps.oef_std, mc_std[..., 0])
    fill(maps.dbv_std, mc_std[..., 1])
    r2p = point[..., 1] * delta_omega(point[..., 0], cfg.constants, cfg.protocol.b0)
    fill(maps.r2p_point, r2p)

    prior_net = cfg.prior_weights
    if prior_net is None:
        if weights.config.spatial_mode != "voxelwise":
            raise ValueError("a gated-residual network needs prior_weights for the ELBO map")
        prior_net = weights
    priors = compute_prior_maps(prior_net, vol)
    maps.elbo = elbo_map(
        weights,
        vol,
        priors,
        cfg.protocol,
        cfg.constants,
        cfg.forward,
        np.random.default_rng(cfg.seed + 1),
        cfg.n_elbo_samples,
    )
    return maps


# WLS baseline ---------------------------------------------------------


def wls_fit(
    vol: Volume4D,
    proto: AcquisitionProtocol,
    constants: PhysioConstants,
    tc_mode: float = 1.5,
    nominal_oef: float = 0.4,
    max_oef: float = 1.0,
) -> ParamMaps:
    """Weighted least-squares baseline on normalized log-ratio signals.

    Per voxel, regress the normalized signal on |tau| over the long-tau
    regime (|tau| >= the characteristic time at nominal_oef), with weights
    proportional to the squared raw signal exp(2 s*): the intercept is the
    DBV estimate zeta, the slope is -R2', and OEF = R2' / (zeta *
    delta_omega(1)). Voxels with zeta <= 0 or OEF outside (0, max_oef]
    get NaN OEF (flagged, so they drop out of statistics).
    """
    dw_nominal = delta_omega(nominal_oef, constants, proto.b0)
    tc = characteristic_time(dw_nominal, tc_mode)
    taus = proto.tau_array
    sel = np.abs(taus) >= tc
    if sel.sum() < 3:
        raise ValueError(
            f"need >= 3 tau points with |tau| >= {tc:.4g}s for the WLS fit, have {int(sel.sum())}"
        )
    tsel = np.abs(taus[sel])

    grid = vol.grid_shape
    maps = ParamMaps(
        oef_point=_nan_grid(grid),
        dbv_point=_nan_grid(grid),
        r2p_point=_nan_grid(grid),
        oef_std=_nan_grid(grid),
        dbv_std=_nan_grid(grid),
        elbo=_nan_grid(grid),
        source="wls",
        mask=vol.mask.copy(),
    )
    if not vol.mask.any():
        return maps

    s = vol.data[vol.mask][:, sel]  # (n, k) normalized log signals
    w = np.exp(2.0 * s)  # weights ~ squared raw signal
    # weighted linear fit s = zeta - r2p * |tau| per row
    sw = w.sum(axis=1)
    mx = (w * tsel).sum(axis=1) / sw
    my = (w * s).sum(axis=1) / sw
    cxx = (w * (tsel - mx[:, None]) ** 2).sum(axis=1)
    cxy = (w * (tsel - mx[:, None]) * (s - my[:, None])).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = cxy / cxx
    r2p = -slope
    zeta = my - slope * mx
    with np.errstate(divide="ignore", invalid="ignore"):
        oef = r2p / (zeta * delta_omega(1.0, constants, proto.b0))
    bad = ~(zeta > 0) | ~(oef > 0) | (oef > max_oef) | ~np.isfinite(oef)
    oef = np.where(bad, np.nan, oef)

    maps.oef_point[vol.mask] = oef
    maps.dbv_point[vol.mask] = zeta
    maps.r2p_point[vol.mask] = r2p
    maps.oef_std[vol.mask] = 0.0
    maps.dbv_std[vol.mask] = 0.0
    return maps


# statistics -----------------------------------------------------------

_STAT_FIELDS = {
    "oef": "oef_point",
    "dbv": "dbv_point",
    "r2p": "r2p_point",
    "elbo": "elbo",
}


def region_stats(maps: ParamMaps, region_mask: np.ndarray) -> dict:
    """Mean and standard deviation of OEF, DBV, R2', and ELBO over a region.

    The region is intersected with the map mask; non-finite voxels (e.g.
    flagged WLS OEF) are excluded per field. Returns
    {name: (mean, std, n)}; a field with no finite voxels reports NaNs.
    """
    region_mask = np.asarray(region_mask, dtype=bool)
    if region_mask.shape != maps.grid_shape:
        raise ValueError("region mask must match the map grid")
    joint = region_mask & maps.mask
    if not joint.any():
        raise ValueError("region contains no masked voxels")
    out = {}
    for name, attr in _STAT_FIELDS.items():
        vals = getattr(maps, attr)[joint]
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            out[name] = (np.nan, np.nan, 0)
        else:
            out[name] = (float(vals.mean()), float(vals.std()), int(vals.size))
    return out


def _extract_map(m, parameter: str) -> np.ndarray:
    if isinstance(m, ParamMaps):
        return getattr(m, _STAT_FIELDS[parameter])
    return np.asarray(m, dtype=np.float64)


def paired_tstat(
    maps_a,
    maps_b,
    smoothing_fwhm_mm: float = 6.0,
    parameter: str = "oef",
    voxel_size_mm=DEFAULT_VOXEL_SIZE_MM,
) -> np.ndarray:
    """Voxelwise paired t-statistic between two co-registered conditions.

    Each list entry is a ParamMaps (the chosen parameter map is used) or a
    bare 3-D array. Maps are optionally smoothed with an in-plane Gaussian
    (FWHM in mm; 0 disables), then t = mean(diff) / (std(diff)/sqrt(n))
    with the 0/0 case defined as 0. Uncorrected.
    """
    if len(maps_a) != len(maps_b):
        raise ValueError("conditions must have the same number of subjects")
    n = len(maps_a)
    if n < 2:
        raise ValueError("paired t-test needs at least 2 subjects")
    arrs_a = [_extract_map(m, parameter) for m in maps_a]
    arrs_b = [_extract_map(m, parameter) for m in maps_b]
    grid = arrs_a[0].shape
    for arr in arrs_a + arrs_b:
        if arr.shape != grid:
            raise ValueError("all maps must share one grid")

    if smoothing_fwhm_mm > 0:
        sigma_mm = smoothing_fwhm_mm / np.sqrt(8.0 * np.log(2.0))
        sig = (sigma_mm / voxel_size_mm[0], sigma_mm / voxel_size_mm[1], 0.0)
        arrs_a = [gaussian_filter(a, sigma=sig) for a in arrs_a]
        arrs_b = [gaussian_filter(b, sigma=sig) for b in arrs_b]

    diff = np.stack(arrs_a, axis=0) - np.stack(arrs_b, axis=0)
    mean = diff.mean(axis=0)
    sd = diff.std(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = mean / (sd / np.sqrt(n))
    # 0/0 is a genuine no-difference voxel; mean/0 keeps its signed infinity
    return np.where((sd == 0) & (mean == 0), 0.0, t)
