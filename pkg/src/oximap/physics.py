"""Forward signal models for asymmetric spin-echo (ASE) qBOLD MRI.

The tissue model attenuates the spin-echo signal by exp(-dbv * I(dw * tau))
where I is the reversible-dephasing integral of the static dephasing regime
and dw is the characteristic frequency set by deoxygenated blood. A cheaper
two-regime approximation (quadratic near the spin echo, linear far from it)
and an optional intravascular blood compartment complete the model family.

All signal functions broadcast over leading axes of oef/dbv arrays and
return arrays whose trailing axis runs over the acquisition's tau offsets.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import j0, j1

from . import autodiff as ad

DEFAULT_TAUS = tuple(np.round(np.arange(-16, 65, 8) * 1e-3, 6))


@dataclass(frozen=True)
class AcquisitionProtocol:
    """Tau schedule and timing of one ASE acquisition. Times in seconds, field in tesla."""

    tau: tuple[float, ...] = DEFAULT_TAUS
    te: float = 0.074
    tr: float = 3.0
    ti: float = 1.21
    b0: float = 3.0
    se_index: int = 2

    def __post_init__(self):
        if len(self.tau) == 0:
            raise ValueError("protocol needs at least one tau offset")
        if not (0 <= self.se_index < len(self.tau)):
            raise ValueError(f"se_index {self.se_index} outside tau schedule of length {len(self.tau)}")
        zeros = [i for i, t in enumerate(self.tau) if t == 0.0]
        if zeros != [self.se_index]:
            raise ValueError(
                f"exactly one tau must be 0 and sit at se_index={self.se_index}; zeros found at {zeros}"
            )
        for name in ("te", "tr", "ti", "b0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.ti >= self.tr:
            raise ValueError("ti must be smaller than tr")

    @property
    def n_t(self) -> int:
        return len(self.tau)

    @property
    def tau_array(self) -> np.ndarray:
        return np.asarray(self.tau, dtype=np.float64)


@dataclass(frozen=True)
class PhysioConstants:
    """Physiological and hardware constants of the signal model.

    r2_blood is an implementation default, exposed here because no single
    agreed value exists for it at 3 T.
    """

    hct: float = 0.34
    delta_chi0: float = 2.64e-7
    gamma: float = 2.675e8
    r2_tissue: float = 11.5
    blood_spin_density: float = 0.775
    t1_blood: float = 1.58
    vessel_radius_um: float = 2.6
    blood_diffusivity_um2_per_ms: float = 2.0
    r2_blood: float = 31.1

    def __post_init__(self):
        for name in (
            "hct",
            "delta_chi0",
            "gamma",
            "r2_tissue",
            "blood_spin_density",
            "t1_blood",
            "vessel_radius_um",
            "blood_diffusivity_um2_per_ms",
            "r2_blood",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.hct < 1):
            raise ValueError("hct must lie in (0, 1)")

    @property
    def diffusion_time(self) -> float:
        """Characteristic diffusion time across a vessel radius, in seconds."""
        return (self.vessel_radius_um**2 / self.blood_diffusivity_um2_per_ms) * 1e-3


@dataclass(frozen=True)
class TissueParams:
    """Oxygen extraction fraction and deoxygenated blood volume fraction of one voxel."""

    oef: float
    dbv: float

    def __post_init__(self):
        if not (0.0 <= self.oef <= 1.0):
            raise ValueError(f"oef {self.oef} outside [0, 1]")
        if not (0.0 <= self.dbv < 1.0):
            raise ValueError(f"dbv {self.dbv} outside [0, 1)")


@dataclass(frozen=True)
class ForwardModelConfig:
    """Which member of the signal-model family to evaluate."""

    variant: str = "full"
    compartments: int = 2
    tc_mode: float = 1.5
    n_intervals: int = 64

    def __post_init__(self):
        if self.variant not in ("full", "asymptotic"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.compartments not in (1, 2):
            raise ValueError("compartments must be 1 or 2")
        if self.tc_mode not in (1.5, 1.0):
            raise ValueError("tc_mode must be 1.5 or 1.0")
        if self.n_intervals < 2 or self.n_intervals % 2:
            raise ValueError("n_intervals must be an even number >= 2")


def delta_omega(oef, c: PhysioConstants, b0: float):
    """Characteristic dephasing frequency (rad/s): gamma * (4/3) pi * dchi0 * hct * oef * b0."""
    oef = np.asarray(oef, dtype=np.float64)
    if np.any(oef < 0):
        raise ValueError("oef must be non-negative")
    return c.gamma * (4.0 / 3.0) * np.pi * c.delta_chi0 * c.hct * oef * b0


def characteristic_time(dw, mode: float = 1.5):
    """Transition time between the quadratic and linear dephasing regimes.

    dw == 0 has no transition; infinity is returned so that every tau
    falls in the short regime.
    """
    dw = np.asarray(dw, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(dw == 0.0, np.inf, mode / dw)


def one_minus_j0(x):
    """1 - J0(x), switching to the power series below |x| = 0.01 to avoid cancellation."""
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    series = x2 / 4.0 - x2 * x2 / 64.0 + x2 * x2 * x2 / 2304.0
    with np.errstate(invalid="ignore"):
        direct = 1.0 - j0(x)
    return np.where(np.abs(x) < 1e-2, series, direct)


@lru_cache(maxsize=8)
def _quad_rule(n_intervals: int):
    """Composite-Simpson rule for the dephasing integral.

    The integrand over u in [0, 1] carries a sqrt(1-u) endpoint factor, so
    Simpson is applied after substituting u = 1 - v^2 (the transformed
    integrand is analytic on the whole interval). Returns the interior
    u nodes, their combined weights, and the weight of the u -> 0 endpoint
    whose sample is the analytic limit 2 * (3/8) a^2 of the transformed
    integrand (the substitution's Jacobian contributes the factor 2).
    """
    n = n_intervals
    v = np.linspace(0.0, 1.0, n + 1)
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w /= 3.0 * n
    vm = v[1:-1]
    u = 1.0 - vm * vm
    # 2 v (2+u) sqrt(1-u) / (3 u^2) with sqrt(1-u) = v
    prefactor = 2.0 * vm * vm * (2.0 + u) / (3.0 * u * u)
    return u, w[1:-1] * prefactor, w[-1]


_CHUNK = 1 << 17


def _chunked(fn, a):
    a = np.asarray(a, dtype=np.float64)
    flat = a.reshape(-1)
    out = np.empty_like(flat)
    for start in range(0, flat.size, _CHUNK):
        out[start : start + _CHUNK] = fn(flat[start : start + _CHUNK])
    return out.reshape(a.shape)


def _integral_core(a, n_intervals):
    u, cw, w_end = _quad_rule(n_intervals)

    def piece(chunk):
        args = 1.5 * chunk[:, None] * u[None, :]
        # v = 1 endpoint: transformed integrand tends to 2 * (3/8) a^2
        return one_minus_j0(args) @ cw + w_end * 0.75 * chunk * chunk

    return _chunked(piece, a)


def _integral_core_dda(a, n_intervals):
    u, cw, w_end = _quad_rule(n_intervals)
    cwu = cw * 1.5 * u

    def piece(chunk):
        args = 1.5 * chunk[:, None] * u[None, :]
        return j1(args) @ cwu + w_end * 1.5 * chunk

    return _chunked(piece, a)


def static_dephasing_integral(dw, tau, n_intervals: int = 64):
    """Reversible-dephasing attenuation integral I(dw * tau).

    I = integral over u in (0, 1] of (2+u) sqrt(1-u) / (3 u^2) * (1 - J0(1.5 dw tau u)),
    even in tau, zero at tau = 0, evaluated by composite Simpson (see _quad_rule).
    """
    if n_intervals < 2 or n_intervals % 2:
        raise ValueError("n_intervals must be an even number >= 2")
    a = np.asarray(dw, dtype=np.float64) * np.asarray(tau, dtype=np.float64)
    return _integral_core(a, n_intervals)


def mean_square_inhomogeneity(c: PhysioConstants, b0: float):
    """Mean squared field inhomogeneity around randomly packed spheres: (4/45) hct (1-hct) (dchi0 b0)^2."""
    return (4.0 / 45.0) * c.hct * (1.0 - c.hct) * (c.delta_chi0 * b0) ** 2


def steady_state_magnetization(tr: float, ti: float, t1_blood: float):
    """Longitudinal blood magnetization under the inversion-prepared steady state."""
    return 1.0 - (2.0 - np.exp(-(tr - ti) / t1_blood)) * np.exp(-ti / t1_blood)


def blood_signal(proto: AcquisitionProtocol, c: PhysioConstants) -> np.ndarray:
    """Motional-narrowing signal of the blood compartment, one value per tau.

    Depends on the protocol and constants only; in this model family the
    blood compartment does not vary with oef.
    """
    taus = proto.tau_array
    td = c.diffusion_time
    arg_plus = 0.5 + (proto.te + taus) / td
    arg_minus = 0.25 + (proto.te - taus) / td
    for name, arg in (("te+tau", arg_plus), ("te-tau", arg_minus)):
        bad = np.nonzero(arg < 0)[0]
        if bad.size:
            raise ValueError(
                f"blood signal undefined: sqrt argument {name} negative at tau index {bad[0]}"
            )
    g0 = mean_square_inhomogeneity(c, proto.b0)
    bracket = (
        proto.te / td
        + np.sqrt(0.25 + proto.te / td)
        + 1.5
        - 2.0 * np.sqrt(arg_plus)
        - 2.0 * np.sqrt(arg_minus)
    )
    return np.exp(-c.r2_blood * proto.te) * np.exp(-(c.gamma**2 / 2.0) * g0 * td * td * bracket)


def blood_volume_weight(dbv, proto: AcquisitionProtocol, c: PhysioConstants):
    """Effective blood signal fraction: steady-state magnetization * spin density * dbv."""
    mb = steady_state_magnetization(proto.tr, proto.ti, c.t1_blood)
    return mb * c.blood_spin_density * np.asarray(dbv, dtype=np.float64)


def _params(p):
    if isinstance(p, TissueParams):
        return np.float64(p.oef), np.float64(p.dbv)
    oef, dbv = p
    return np.asarray(oef, dtype=np.float64), np.asarray(dbv, dtype=np.float64)


def tissue_signal_full(p, proto: AcquisitionProtocol, c: PhysioConstants, n_intervals: int = 64):
    """Tissue compartment under the full static-dephasing model."""
    oef, dbv = _params(p)
    dw = delta_omega(oef, c, proto.b0)
    i_vals = static_dephasing_integral(dw[..., None], proto.tau_array, n_intervals)
    return np.exp(-c.r2_tissue * proto.te) * np.exp(-dbv[..., None] * i_vals)


def _asymptotic_exponent(oef, dbv, proto, c, tc_mode):
    """Tissue log-attenuation of the two-regime model, relative to the spin echo."""
    dw = delta_omega(oef, c, proto.b0)
    taus = proto.tau_array
    a = dw[..., None] * np.abs(taus)
    short = -0.3 * dbv[..., None] * a * a
    long = dbv[..., None] * (1.0 - a)
    return np.where(a < tc_mode, short, long)


def tissue_signal_asymptotic(p, proto: AcquisitionProtocol, c: PhysioConstants, tc_mode: float = 1.5):
    """Tissue compartment under the two-regime approximation.

    Quadratic log-attenuation for |tau| below the transition time, linear
    beyond it; |tau| equal to the transition time takes the linear branch.
    """
    oef, dbv = _params(p)
    return np.exp(-c.r2_tissue * proto.te) * np.exp(_asymptotic_exponent(oef, dbv, proto, c, tc_mode))


def total_signal(p, proto: AcquisitionProtocol, c: PhysioConstants, cfg: ForwardModelConfig):
    """Voxel signal of the configured model variant, per tau offset."""
    oef, dbv = _params(p)
    if cfg.variant == "full":
        tissue = tissue_signal_full((oef, dbv), proto, c, cfg.n_intervals)
    else:
        tissue = tissue_signal_asymptotic((oef, dbv), proto, c, cfg.tc_mode)
    if cfg.compartments == 1:
        return tissue
    zp = blood_volume_weight(dbv, proto, c)[..., None]
    return zp * blood_signal(proto, c) + (1.0 - zp) * tissue


def r2_prime(p, c: PhysioConstants, b0: float):
    """Reversible relaxation rate dbv * delta_omega(oef)."""
    oef, dbv = _params(p)
    return dbv * delta_omega(oef, c, b0)


def normalize_signal(s, proto: AcquisitionProtocol) -> np.ndarray:
    """Log signal relative to the spin echo: log(s_i / s_se).

    Raises on any non-positive sample, identifying the offending tau index,
    since such a voxel cannot be log-normalized.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != proto.n_t:
        raise ValueError(f"signal has {s.shape[-1]} samples, protocol has {proto.n_t}")
    bad = np.nonzero(~(s > 0))
    if bad[0].size:
        first = tuple(int(b[0]) for b in bad)
        raise ValueError(
            f"non-positive signal value {s[first]} at tau index {first[-1]}; voxel cannot be normalized"
        )
    return np.log(s / s[..., proto.se_index : proto.se_index + 1])


def normalized_model_signal(oef, dbv, proto, c, cfg: ForwardModelConfig):
    """Clean model signal in normalized (spin-echo log-ratio) space."""
    oef = np.asarray(oef, dtype=np.float64)
    dbv = np.asarray(dbv, dtype=np.float64)
    if cfg.compartments == 1:
        if cfg.variant == "full":
            dw = delta_omega(oef, c, proto.b0)
            i_vals = static_dephasing_integral(dw[..., None], proto.tau_array, cfg.n_intervals)
            return -dbv[..., None] * i_vals
        return _asymptotic_exponent(oef, dbv, proto, c, cfg.tc_mode)
    total = total_signal((oef, dbv), proto, c, cfg)
    log_total = np.log(total)
    return log_total - log_total[..., proto.se_index : proto.se_index + 1]


# differentiable (tape) forward model --------------------------------


def dephasing_integral_t(dw_t: ad.Tensor, proto: AcquisitionProtocol, n_intervals: int) -> ad.Tensor:
    """Tape node for I(dw * tau): adjoint integrates J1 with the same Simpson weights."""
    taus = proto.tau_array
    a = dw_t.data[..., None] * taus
    out = _integral_core(a, n_intervals)

    def vjp(g):
        dda = _integral_core_dda(a, n_intervals)
        return ((g * dda * taus).sum(axis=-1),)

    return ad.custom(out, (dw_t,), vjp)


def _expand(t: ad.Tensor) -> ad.Tensor:
    return ad.reshape(t, t.data.shape + (1,))


def normalized_model_signal_t(
    oef_t: ad.Tensor,
    dbv_t: ad.Tensor,
    proto: AcquisitionProtocol,
    c: PhysioConstants,
    cfg: ForwardModelConfig,
) -> ad.Tensor:
    """Differentiable twin of normalized_model_signal, for the training losses.

    The two-regime variant treats the regime assignment as constant, so its
    gradient is the almost-everywhere derivative.
    """
    k = delta_omega(1.0, c, proto.b0)
    taus = proto.tau_array
    dbv_e = _expand(dbv_t)
    if cfg.variant == "full":
        dw_t = ad.mul(oef_t, float(k))
        i_t = dephasing_integral_t(dw_t, proto, cfg.n_intervals)
        tissue_log = ad.mul(ad.mul(dbv_e, i_t), -1.0)
    else:
        a_abs = ad.mul(_expand(ad.mul(oef_t, float(k))), np.abs(taus))
        short = ad.mul(ad.mul(dbv_e, ad.mul(a_abs, a_abs)), -0.3)
        long = ad.mul(dbv_e, ad.sub(1.0, a_abs))
        tissue_log = ad.where(a_abs.data < cfg.tc_mode, short, long)
    if cfg.compartments == 1:
        return tissue_log
    tissue = ad.mul(ad.exp(tissue_log), float(np.exp(-c.r2_tissue * proto.te)))
    mb_nb = steady_state_magnetization(proto.tr, proto.ti, c.t1_blood) * c.blood_spin_density
    zp = ad.mul(dbv_e, float(mb_nb))
    sb = blood_signal(proto, c)
    total = ad.add(ad.mul(zp, sb), ad.mul(ad.sub(1.0, zp), tissue))
    log_total = ad.log(total)
    se = proto.se_index
    idx = (Ellipsis, slice(se, se + 1))
    return ad.sub(log_total, log_total[idx])
