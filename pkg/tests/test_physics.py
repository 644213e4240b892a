"""Forward-model tests against independent quadrature, FD, and hand-evaluated oracles."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import integrate
from scipy.special import j0

from oximap import autodiff as ad
from oximap.physics import (
    AcquisitionProtocol,
    ForwardModelConfig,
    PhysioConstants,
    TissueParams,
    blood_signal,
    blood_volume_weight,
    characteristic_time,
    delta_omega,
    dephasing_integral_t,
    mean_square_inhomogeneity,
    normalize_signal,
    normalized_model_signal,
    normalized_model_signal_t,
    one_minus_j0,
    r2_prime,
    static_dephasing_integral,
    steady_state_magnetization,
    tissue_signal_asymptotic,
    tissue_signal_full,
    total_signal,
)


def quad_oracle(a):
    """Adaptive-quadrature reference for the dephasing integral at a = dw * tau."""

    def integrand(u):
        return (2.0 + u) * np.sqrt(1.0 - u) / (3.0 * u * u) * (1.0 - j0(1.5 * a * u))

    val, err = integrate.quad(integrand, 1e-12, 1.0, limit=400, epsabs=1e-13, epsrel=1e-12)
    assert err < 1e-9 * max(val, 1.0)
    return val


class TestProtocolAndConstants:
    def test_default_protocol(self, proto):
        assert proto.n_t == 11
        assert proto.tau[proto.se_index] == 0.0
        assert proto.tau_array[0] == -0.016 and proto.tau_array[-1] == 0.064

    def test_protocol_validation(self):
        with pytest.raises(ValueError, match="exactly one tau"):
            AcquisitionProtocol(tau=(-0.01, 0.01), se_index=0)
        with pytest.raises(ValueError, match="exactly one tau"):
            AcquisitionProtocol(tau=(0.0, 0.01, 0.0), se_index=0)
        with pytest.raises(ValueError, match="se_index"):
            AcquisitionProtocol(tau=(0.0, 0.01), se_index=5)
        with pytest.raises(ValueError, match="ti must be smaller"):
            AcquisitionProtocol(ti=4.0)

    def test_tissue_params_validation(self):
        TissueParams(0.0, 0.0)
        with pytest.raises(ValueError, match="oef"):
            TissueParams(1.2, 0.1)
        with pytest.raises(ValueError, match="dbv"):
            TissueParams(0.4, 1.0)

    def test_model_config_validation(self):
        with pytest.raises(ValueError, match="variant"):
            ForwardModelConfig(variant="fast")
        with pytest.raises(ValueError, match="compartments"):
            ForwardModelConfig(compartments=3)
        with pytest.raises(ValueError, match="even"):
            ForwardModelConfig(n_intervals=63)

    def test_diffusion_time(self, constants):
        assert_allclose(constants.diffusion_time, 3.38e-3, rtol=1e-12)


class TestScalarQuantities:
    def test_delta_omega_reference(self, constants):
        # hand evaluation: 2.675e8 * (4/3) * pi * 2.64e-7 * 0.34 * 0.4 * 3.0
        assert_allclose(delta_omega(0.4, constants, 3.0), 120.6906, rtol=1e-5)

    def test_delta_omega_linearity(self, constants):
        base = delta_omega(0.2, constants, 3.0)
        assert_allclose(delta_omega(0.4, constants, 3.0), 2 * base, rtol=1e-12)
        assert_allclose(delta_omega(0.2, constants, 7.0), base * 7 / 3, rtol=1e-12)
        assert delta_omega(0.0, constants, 3.0) == 0.0
        with pytest.raises(ValueError, match="non-negative"):
            delta_omega(-0.1, constants, 3.0)

    def test_characteristic_time(self, constants):
        dw = delta_omega(0.4, constants, 3.0)
        assert_allclose(characteristic_time(dw, 1.5), 12.428e-3, rtol=1e-3)
        assert_allclose(characteristic_time(dw, 1.0), 8.285e-3, rtol=1e-3)
        assert characteristic_time(0.0) == np.inf

    def test_mean_square_inhomogeneity(self, constants):
        # hand evaluation: (4/45) * 0.34 * 0.66 * (2.64e-7 * 3)^2
        assert_allclose(mean_square_inhomogeneity(constants, 3.0), 1.25116e-14, rtol=1e-4)

    def test_steady_state_magnetization(self, proto, constants):
        m = steady_state_magnetization(proto.tr, proto.ti, constants.t1_blood)
        assert_allclose(m, 0.219856, rtol=1e-4)

    def test_blood_volume_weight(self, proto, constants):
        assert_allclose(blood_volume_weight(0.025, proto, constants), 4.2597e-3, rtol=1e-4)

    def test_r2_prime(self, constants):
        assert_allclose(r2_prime((0.4, 0.025), constants, 3.0), 3.01727, rtol=1e-5)
        assert r2_prime(TissueParams(0.4, 0.0), constants, 3.0) == 0.0


class TestDephasingIntegral:
    def test_zero_at_tau_zero(self):
        assert static_dephasing_integral(120.0, 0.0) == 0.0

    def test_even_in_tau(self):
        taus = np.array([-0.016, -0.004, 0.004, 0.016, 0.064])
        vals = static_dephasing_integral(121.0, taus)
        assert_allclose(vals, static_dephasing_integral(121.0, -taus), rtol=1e-14)

    def test_against_adaptive_quadrature(self, constants):
        dw = delta_omega(0.4, constants, 3.0)
        for tau in (0.004, 0.008, 0.016, 0.032, 0.064, 0.128):
            got = static_dephasing_integral(dw, tau)
            assert_allclose(got, quad_oracle(dw * tau), rtol=2e-5)

    def test_reference_point_tight(self, constants):
        dw = delta_omega(0.4, constants, 3.0)
        got = static_dephasing_integral(dw, 0.064)
        assert_allclose(got, quad_oracle(dw * 0.064), rtol=2e-6)

    def test_self_convergence(self, constants):
        taus = np.array([0.008, 0.016, 0.032, 0.064])
        for oef in (0.2, 0.4, 0.6, 0.8):
            dw = delta_omega(oef, constants, 3.0)
            i64 = static_dephasing_integral(dw, taus, 64)
            i256 = static_dephasing_integral(dw, taus, 256)
            assert np.max(np.abs(i64 - i256) / i256) < 1e-5

    def test_small_argument_limit(self):
        # integral of 0.1875 (2+u) sqrt(1-u) a^2 du = 0.3 a^2 as a -> 0
        a = 1e-4
        got = static_dephasing_integral(a, 1.0)
        assert_allclose(got, 0.3 * a * a, rtol=1e-6)

    def test_odd_intervals_rejected(self):
        with pytest.raises(ValueError, match="even"):
            static_dephasing_integral(120.0, 0.01, n_intervals=7)

    def test_one_minus_j0_series_continuity(self):
        xs = np.array([0.00999, 0.01, 0.01001])
        vals = one_minus_j0(xs)
        assert_allclose(vals, [1.0 - j0(x) for x in xs], rtol=1e-10, atol=1e-18)

    @given(st.floats(1.0, 300.0), st.floats(1e-4, 0.1))
    def test_positive_and_even(self, dw, tau):
        v = static_dephasing_integral(dw, tau)
        assert v > 0
        assert_allclose(v, static_dephasing_integral(dw, -tau), rtol=1e-14)


class TestBloodCompartment:
    def test_reference_value_at_spin_echo(self, proto, constants):
        sb = blood_signal(proto, constants)
        # hand evaluation of the motional-narrowing expression at tau = 0
        assert_allclose(sb[proto.se_index], 0.0955056, rtol=1e-4)

    def test_positive_and_bounded(self, proto, constants):
        sb = blood_signal(proto, constants)
        assert np.all(sb > 0)
        assert np.all(sb < 1)

    def test_oef_independent_by_construction(self, proto, constants):
        # the signature admits no oef; the value is protocol-and-constants only
        assert blood_signal(proto, constants).shape == (proto.n_t,)

    def test_negative_sqrt_argument_rejected(self, constants):
        proto = AcquisitionProtocol(tau=(-0.016, 0.0, 0.076), se_index=1)
        with pytest.raises(ValueError, match=r"te-tau negative at tau index 2"):
            blood_signal(proto, constants)


class TestTissueAndTotal:
    def test_zero_dbv_is_flat(self, proto, constants):
        s = tissue_signal_full((0.4, 0.0), proto, constants)
        assert_allclose(s, np.exp(-constants.r2_tissue * proto.te), rtol=1e-14)

    def test_zero_oef_is_flat(self, proto, constants):
        s = tissue_signal_full((0.0, 0.05), proto, constants)
        assert_allclose(s, np.exp(-constants.r2_tissue * proto.te), rtol=1e-14)

    def test_spin_echo_value(self, proto, constants):
        s = tissue_signal_full((0.4, 0.025), proto, constants)
        assert_allclose(s[proto.se_index], np.exp(-constants.r2_tissue * proto.te), rtol=1e-14)

    def test_decreasing_in_dbv(self, proto, constants):
        lo = tissue_signal_full((0.4, 0.02), proto, constants)
        hi = tissue_signal_full((0.4, 0.05), proto, constants)
        off_se = np.arange(proto.n_t) != proto.se_index
        assert np.all(hi[off_se] < lo[off_se])

    def test_asymptotic_branches_by_hand(self, proto, constants):
        oef, dbv = 0.4, 0.03
        dw = delta_omega(oef, constants, 3.0)
        s = tissue_signal_asymptotic((oef, dbv), proto, constants)
        base = np.exp(-constants.r2_tissue * proto.te)
        a_short = dw * 0.008  # below the transition
        assert_allclose(s[3], base * np.exp(-0.3 * dbv * a_short**2), rtol=1e-12)
        a_long = dw * 0.064  # beyond the transition
        assert_allclose(s[-1], base * np.exp(dbv * (1.0 - a_long)), rtol=1e-12)

    def test_boundary_takes_long_branch(self, proto, constants):
        dw = delta_omega(0.4, constants, 3.0)
        tc = 1.5 / dw
        p = AcquisitionProtocol(tau=(0.0, tc), se_index=0)
        s = tissue_signal_asymptotic((0.4, 0.03), p, constants)
        base = np.exp(-constants.r2_tissue * p.te)
        assert_allclose(s[1], base * np.exp(0.03 * (1.0 - 1.5)), rtol=1e-12)

    def test_models_agree_near_spin_echo(self, proto, constants):
        taus = np.array([-0.002, -0.001, 0.0, 0.001, 0.002])
        p = AcquisitionProtocol(tau=tuple(taus), se_index=2)
        for oef in (0.2, 0.4, 0.6):
            for dbv in (0.01, 0.03, 0.05):
                full = np.log(tissue_signal_full((oef, dbv), p, constants))
                asym = np.log(tissue_signal_asymptotic((oef, dbv), p, constants))
                assert np.max(np.abs(full - asym)) < 1e-3

    def test_long_tau_slope_matches_linear_rate(self, proto, constants):
        # d log S / d tau at tau = 64 ms vs -dbv * dw, within 3 percent
        h = 1e-5
        for oef, dbv in ((0.4, 0.03), (0.5, 0.05), (0.6, 0.02)):
            dw = delta_omega(oef, constants, 3.0)
            assert dw * 0.064 > 4.0
            f = lambda t: -dbv * static_dephasing_integral(dw, t)
            slope = (f(0.064 + h) - f(0.064 - h)) / (2 * h)
            assert abs(slope - (-dbv * dw)) / (dbv * dw) < 0.03

    def test_total_one_compartment_is_tissue(self, proto, constants):
        cfg = ForwardModelConfig(variant="full", compartments=1)
        assert_allclose(
            total_signal((0.4, 0.025), proto, constants, cfg),
            tissue_signal_full((0.4, 0.025), proto, constants),
            rtol=1e-14,
        )

    def test_total_two_compartment_is_convex_mix(self, proto, constants):
        cfg = ForwardModelConfig(variant="full", compartments=2)
        tot = total_signal((0.4, 0.025), proto, constants, cfg)
        tis = tissue_signal_full((0.4, 0.025), proto, constants)
        blo = blood_signal(proto, constants)
        lo = np.minimum(tis, blo)
        hi = np.maximum(tis, blo)
        assert np.all(tot >= lo - 1e-15) and np.all(tot <= hi + 1e-15)
        zp = blood_volume_weight(0.025, proto, constants)
        assert_allclose(tot, zp * blo + (1 - zp) * tis, rtol=1e-14)

    def test_broadcasting_over_leading_axes(self, proto, constants):
        oef = np.full((4, 5), 0.4)
        dbv = np.full((4, 5), 0.025)
        cfg = ForwardModelConfig()
        out = total_signal((oef, dbv), proto, constants, cfg)
        assert out.shape == (4, 5, proto.n_t)
        single = total_signal((0.4, 0.025), proto, constants, cfg)
        assert_allclose(out[2, 3], single, rtol=1e-14)


class TestNormalization:
    def test_zero_at_spin_echo_and_scale_invariance(self, proto, constants):
        s = tissue_signal_full((0.4, 0.025), proto, constants)
        n1 = normalize_signal(s, proto)
        n2 = normalize_signal(100.0 * s, proto)
        assert n1[proto.se_index] == 0.0
        assert_allclose(n1, n2, rtol=0, atol=1e-12)

    def test_non_positive_rejected_with_index(self, proto):
        s = np.ones(proto.n_t)
        s[5] = -0.5
        with pytest.raises(ValueError, match="tau index 5"):
            normalize_signal(s, proto)

    def test_length_mismatch_rejected(self, proto):
        with pytest.raises(ValueError, match="samples"):
            normalize_signal(np.ones(7), proto)

    def test_one_compartment_full_closed_form(self, proto, constants):
        cfg = ForwardModelConfig(variant="full", compartments=1)
        got = normalized_model_signal(0.4, 0.025, proto, constants, cfg)
        dw = delta_omega(0.4, constants, 3.0)
        expected = -0.025 * static_dephasing_integral(dw, proto.tau_array)
        assert_allclose(got, expected, rtol=1e-14)

    def test_matches_log_ratio_route(self, proto, constants):
        for variant in ("full", "asymptotic"):
            for comp in (1, 2):
                cfg = ForwardModelConfig(variant=variant, compartments=comp)
                direct = normalized_model_signal(0.35, 0.04, proto, constants, cfg)
                via_total = normalize_signal(
                    total_signal((0.35, 0.04), proto, constants, cfg), proto
                )
                assert_allclose(direct, via_total, rtol=0, atol=1e-12)


class TestDifferentiableTwins:
    def test_tape_forward_matches_numpy(self, proto, constants):
        oef = np.array([0.2, 0.4, 0.6])
        dbv = np.array([0.01, 0.025, 0.05])
        for variant in ("full", "asymptotic"):
            for comp in (1, 2):
                cfg = ForwardModelConfig(variant=variant, compartments=comp)
                out = normalized_model_signal_t(
                    ad.Tensor(oef.copy()), ad.Tensor(dbv.copy()), proto, constants, cfg
                )
                assert_allclose(
                    out.data,
                    normalized_model_signal(oef, dbv, proto, constants, cfg),
                    rtol=0,
                    atol=1e-12,
                )

    def test_dephasing_integral_gradient(self, proto, rng):
        dw = np.array([60.0, 121.0, 180.0])
        r = rng.normal(size=(3, proto.n_t))
        t = ad.Tensor(dw.copy())
        out = dephasing_integral_t(t, proto, 64)
        ad.backward(ad.tsum(out * ad.Tensor(r)))
        h = 1e-6
        for i in range(3):
            up, dn = dw.copy(), dw.copy()
            up[i] += h
            dn[i] -= h
            fu = float(ad.tsum(dephasing_integral_t(ad.Tensor(up), proto, 64) * ad.Tensor(r)).data)
            fd = float(ad.tsum(dephasing_integral_t(ad.Tensor(dn), proto, 64) * ad.Tensor(r)).data)
            assert_allclose(t.grad[i], (fu - fd) / (2 * h), rtol=1e-6)

    @pytest.mark.parametrize("variant", ["full", "asymptotic"])
    @pytest.mark.parametrize("comp", [1, 2])
    def test_signal_gradient_by_finite_differences(self, proto, constants, rng, variant, comp):
        cfg = ForwardModelConfig(variant=variant, compartments=comp)
        oef = np.array([0.3, 0.55])
        dbv = np.array([0.02, 0.045])
        r = rng.normal(size=(2, proto.n_t))

        def value(o_arr, d_arr):
            out = normalized_model_signal_t(
                ad.Tensor(o_arr.copy()), ad.Tensor(d_arr.copy()), proto, constants, cfg
            )
            return float(ad.tsum(out * ad.Tensor(r)).data)

        to, td = ad.Tensor(oef.copy()), ad.Tensor(dbv.copy())
        out = normalized_model_signal_t(to, td, proto, constants, cfg)
        ad.backward(ad.tsum(out * ad.Tensor(r)))
        h = 1e-7
        for i in range(2):
            up, dn = oef.copy(), oef.copy()
            up[i] += h
            dn[i] -= h
            fd_o = (value(up, dbv) - value(dn, dbv)) / (2 * h)
            assert_allclose(to.grad[i], fd_o, rtol=3e-5, atol=1e-10)
            up, dn = dbv.copy(), dbv.copy()
            up[i] += h
            dn[i] -= h
            fd_d = (value(oef, up) - value(oef, dn)) / (2 * h)
            assert_allclose(td.grad[i], fd_d, rtol=3e-5, atol=1e-10)
