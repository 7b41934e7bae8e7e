import numpy as np
import pytest

from tnpmc import TimeGrid, TimeScalar, pauli_ops, split_positive, tilted_lindbladian
from tnpmc.errors import CutoffLeakage, InvalidParameter
from tnpmc.exact import solve_hierarchy
from tnpmc.experiments import (
    HeisenbergConfig,
    PhotonCountingConfig,
    bootstrap_rng,
    bootstrap_se_sums,
    check_cutoff_leakage,
    fock_plus_superposition,
    run_heisenberg,
    run_photon_counting,
    run_tilted_trace,
    validate_strongly_driven,
)

P = pauli_ops()


def test_bootstrap_se_sums_matches_binomial():
    # groups of iid coin flips: SE of the sum should match the binomial formula
    rng = np.random.default_rng(0)
    g, per = 200, 100
    flips = rng.random((g, per)) < 0.3
    groups = flips.sum(axis=1)[None, :] / (g * per)
    se = bootstrap_se_sums(groups, bootstrap_rng(1))
    expected = np.sqrt(0.3 * 0.7 / (g * per))
    assert se[0] == pytest.approx(expected, rel=0.2)


def test_fock_plus_superposition():
    psi = fock_plus_superposition(6)
    assert psi[0] == pytest.approx(1 / np.sqrt(2))
    assert psi[1] == pytest.approx(1 / np.sqrt(2))
    assert np.abs(psi[2:]).max() == 0.0


def test_cutoff_leakage_raises():
    cfg = PhotonCountingConfig(n_max=8, n_trajectories=50, n_towers=2)
    with pytest.raises(CutoffLeakage):
        run_photon_counting(cfg)


def test_photon_counting_small_scale():
    cfg = PhotonCountingConfig(
        n_trajectories=800, n_towers=8, k_max=2, t_final=1.5, record_every=50, seed=31
    )
    series = run_photon_counting(cfg)
    assert series.times[0] == 0.0
    assert np.all(series.est[:, 0] == 0.0)  # empty initial stages
    assert np.all(series.exact[:, 0] == 0.0)
    z = np.abs(series.est[:, 1:] - series.exact[:, 1:]) / np.maximum(series.se[:, 1:], 1e-12)
    assert z.max() <= 3.0
    names = series.column_names()
    assert names[0] == "t" and "mu_1" in names and "se_2" in names and "exact_2" in names
    assert len(series.rows()[0]) == len(names)


def test_tilted_trace_zeta_zero_exact():
    cfg = PhotonCountingConfig(
        n_trajectories=300, zeta_list=(0.0,), t_final=1.0, record_every=25, seed=3
    )
    res = run_tilted_trace(cfg, n_groups=10)
    assert np.all(res.est[0] == 1.0)
    assert np.abs(res.exact[0] - 1.0).max() <= 1e-8


def test_tilted_trace_sign_ordering():
    cfg = PhotonCountingConfig(
        n_trajectories=3000, zeta_list=(-0.02, 0.0, 0.02), t_final=1.5, record_every=30, seed=5
    )
    res = run_tilted_trace(cfg, n_groups=30)
    assert res.est[0, -1] < 1.0 < res.est[2, -1]
    assert res.exact[0, -1] < 1.0 < res.exact[2, -1]
    z = np.abs(res.est - res.exact) / np.maximum(res.se, 1e-12)
    assert np.nan_to_num(z[:, 1:]).max() <= 3.0
    rows = res.rows()
    assert len(rows) == 3 * res.times.size


def test_hierarchy_moments_real_and_monotone_for_pure_emission():
    # counting channel only: mu_1 must be nondecreasing
    from tnpmc import JumpChannel, TnpModel, boson_ops

    ops = boson_ops(10)
    h = 0.5 * (ops.a + ops.adag)
    m = TnpModel(dim=10, hamiltonian=h, channels=(JumpChannel(1.0, ops.a, "count"),))
    psi0 = fock_plus_superposition(10)
    hier = solve_hierarchy(m, 0, 2, np.outer(psi0, psi0.conj()), TimeGrid(0.0, 2.0, 0.01))
    traces = np.trace(hier.trajectories[1].values, axis1=1, axis2=2)
    assert np.abs(traces.imag).max() <= 1e-10
    assert np.all(np.diff(hier.moments[1]) >= -1e-12)


def test_strongly_driven_validation():
    cfg = HeisenbergConfig(eps=TimeScalar.constant(1.0))
    with pytest.raises(InvalidParameter):
        validate_strongly_driven(cfg, TimeGrid(0.0, 1.0, 0.1))
    ok = HeisenbergConfig()
    validate_strongly_driven(ok, TimeGrid(0.0, 1.0, 0.1))


def test_heisenberg_observable_split():
    mu_p, rho_p, mu_m, rho_m = split_positive(P.x)
    plus = np.array([1.0, 1.0]) / np.sqrt(2)
    assert mu_p == pytest.approx(1.0)
    assert mu_m == pytest.approx(1.0)
    assert np.allclose(rho_p, np.outer(plus, plus))


def test_heisenberg_constant_when_generator_vanishes():
    cfg = HeisenbergConfig(
        eps=TimeScalar.constant(0.0),
        gamma_minus=TimeScalar.constant(0.0),
        gamma_plus=TimeScalar.constant(0.0),
        n_trajectories=200,
        t_final=0.2,
        record_every=40,
        n_groups=4,
        seed=9,
    )
    res = run_heisenberg(cfg)
    for series in res.series.values():
        assert np.abs(series.est - series.est[0]).max() <= 1e-9
        assert np.abs(series.exact - series.exact[0]).max() <= 1e-9


def test_heisenberg_unitality_identity_observable():
    cfg = HeisenbergConfig(
        gamma_plus=TimeScalar.constant(1.0),
        gamma_minus=TimeScalar.constant(1.0),
        observables=("identity",),
        n_trajectories=400,
        t_final=0.2,
        record_every=20,
        n_groups=8,
        seed=11,
    )
    res = run_heisenberg(cfg)
    assert np.all(res.trace_est == 2.0)  # counts exactly conserved
    assert np.abs(res.trace_exact - 2.0).max() <= 1e-8


def test_heisenberg_small_scale_tracks_oracle():
    cfg = HeisenbergConfig(n_trajectories=1500, t_final=1.0, record_every=100, n_groups=25, seed=13)
    res = run_heisenberg(cfg)
    for name, series in res.series.items():
        z = np.abs(series.est - series.exact) / np.maximum(series.se, 1e-12)
        assert z[1:].max() <= 3.0, name
    zt = np.abs(res.trace_est - res.trace_exact) / np.maximum(res.trace_se, 1e-12)
    assert zt[1:].max() <= 3.0
    assert res.column_names()[0] == "t"
    assert len(res.rows()[0]) == len(res.column_names())
