"""Shared fixtures: random model generators and analytic one-step oracles."""

from __future__ import annotations

import numpy as np

from tnpmc import JumpChannel, TnpModel, deterministic_step, pauli_ops, step_probabilities
from tnpmc.ensemble import canonical_key
from tnpmc.mcwf import jump_state
from tnpmc.ro import RoStrategy, rate_operator, ro_deterministic_step, ro_step_probabilities


def random_state(rng: np.random.Generator, dim: int) -> np.ndarray:
    psi = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return psi / np.linalg.norm(psi)


def random_hermitian(rng: np.random.Generator, dim: int, scale: float = 1.0) -> np.ndarray:
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return scale * 0.5 * (a + a.conj().T)


def random_tnp_model(rng: np.random.Generator, dim: int, n_channels: int = 2) -> TnpModel:
    """Random generator with non-negative rates and an arbitrary Hermitian decay operator."""
    h = random_hermitian(rng, dim)
    channels = []
    for j in range(n_channels):
        op = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        op /= np.linalg.norm(op, 2)  # keep single-step jump probabilities small
        channels.append(JumpChannel(rate=float(rng.uniform(0.1, 2.0)), op=op, label=f"c{j}"))
    gamma = random_hermitian(rng, dim)
    return TnpModel(dim=dim, hamiltonian=h, channels=tuple(channels), gamma=gamma)


def liouvillian_pure(model: TnpModel, t: float, psi: np.ndarray) -> np.ndarray:
    return model.apply_liouvillian(t, np.outer(psi, psi.conj()))


def mcwf_step_expectation(model: TnpModel, psi: np.ndarray, t: float, dt: float) -> np.ndarray:
    """Exact expectation over the outcome distribution of one MCWF step."""
    probs = step_probabilities(model, psi, t, dt, allow_negative_rates=True)
    out = np.zeros((model.dim, model.dim), dtype=complex)
    for j, p in enumerate(probs.p_jump):
        if p != 0.0:
            phi = jump_state(model, psi, j)
            out += p * np.outer(phi, phi.conj())
    det = deterministic_step(model, psi, t, dt)
    out += (probs.p_det + 2.0 * probs.p_c) * np.outer(det, det.conj())
    return out


def ro_step_expectation(
    model: TnpModel, psi: np.ndarray, t: float, dt: float, strategy: RoStrategy
) -> np.ndarray:
    """Exact expectation over the outcome distribution of one rate-operator step."""
    probs = ro_step_probabilities(model, psi, t, dt, strategy, allow_negative=True)
    ro = rate_operator(model, psi, t, strategy)
    out = np.zeros((model.dim, model.dim), dtype=complex)
    for a, p in enumerate(probs.p_jump):
        if p != 0.0:
            chi = ro.eigen.vectors[:, a]
            out += p * np.outer(chi, chi.conj())
    det = ro_deterministic_step(model, psi, t, dt, strategy)
    out += (probs.p_det + 2.0 * probs.p_c) * np.outer(det, det.conj())
    return out


def reverse_ensemble_expectation(model, members, t, dt, n_ref):
    """Expected one-step ensemble average with reverse jumps, counts held fixed.

    ``members`` is a list of (count, state); every state with a negative-rate
    channel image inside the snapshot hosts reverse exits.
    """
    snapshot = {}
    for cnt, psi in members:
        key = canonical_key(psi)
        if key in snapshot:
            snapshot[key] = (snapshot[key][0] + cnt, snapshot[key][1])
        else:
            snapshot[key] = (cnt, psi)
    out = np.zeros((model.dim, model.dim), dtype=complex)
    for cnt, psi in members:
        probs = step_probabilities(model, psi, t, dt, allow_negative_rates=True)
        contrib = np.zeros_like(out)
        used = 0.0
        for j, p in enumerate(probs.p_jump):
            if p > 0.0:
                phi = jump_state(model, psi, j)
                contrib += p * np.outer(phi, phi.conj())
                used += p
        my_key = canonical_key(psi)
        n_here = snapshot[my_key][0]
        for j, ch in enumerate(model.channels):
            rate = ch.rate_at(t)
            if rate >= 0.0:
                continue
            for key, (src_cnt, src) in snapshot.items():
                lp = np.asarray(ch.op, dtype=complex) @ src
                inorm2 = float(np.vdot(lp, lp).real)
                if inorm2 < 1e-14:
                    continue
                if canonical_key(lp / np.sqrt(inorm2)) != my_key:
                    continue
                p_rev = abs(rate) * inorm2 * (src_cnt / n_here) * dt
                contrib += p_rev * np.outer(src, src.conj())
                used += p_rev
        det = deterministic_step(model, psi, t, dt)
        det_weight = 1.0 - used - probs.p_d - probs.p_c + 2.0 * probs.p_c
        contrib += det_weight * np.outer(det, det.conj())
        out += (cnt / n_ref) * contrib
    return out


def qubit_decay_model(gamma_shift: float = 0.0) -> TnpModel:
    """Amplitude damping with Gamma = Gamma_L + shift * identity."""
    p = pauli_ops()
    proj1 = p.plus @ p.minus
    if gamma_shift == 0.0:
        gamma = "lindblad"
    else:
        def gamma(t, _s=gamma_shift):
            return proj1 + _s * np.eye(2)
    return TnpModel(dim=2, hamiltonian=np.zeros((2, 2)), channels=(JumpChannel(1.0, p.minus, "decay"),), gamma=gamma)
