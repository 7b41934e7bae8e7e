"""Deterministic reference solvers: fixed-step RK4 for the density operator,
the inhomogeneous moment hierarchy, and dynamical-map propagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter, NonFiniteState, SingularMap
from .model import SourceTerm, TnpModel


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    dt: float

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidParameter(f"dt must be positive, got {self.dt}")
        ratio = (self.t1 - self.t0) / self.dt
        n = round(ratio)
        if n < 1 or abs(ratio - n) > 1e-6 * max(1.0, abs(ratio)):
            raise InvalidParameter(f"(t1 - t0)/dt = {ratio} is not close to a positive integer")

    @property
    def n_steps(self) -> int:
        return round((self.t1 - self.t0) / self.dt)

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def time_at(self, i: int) -> float:
        return self.t0 + self.dt * i


@dataclass(frozen=True)
class OperatorTrajectory:
    grid: TimeGrid
    values: np.ndarray  # (n_steps + 1, d, d)

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation between stored grid values, clamped at the ends."""
        s = (t - self.grid.t0) / self.grid.dt
        i0 = int(np.floor(s))
        n = self.values.shape[0] - 1
        if i0 < 0:
            return self.values[0]
        if i0 >= n:
            return self.values[n]
        w = s - i0
        return (1.0 - w) * self.values[i0] + w * self.values[i0 + 1]


def _rk4_rhs(model: TnpModel, t: float, rho: np.ndarray) -> np.ndarray:
    return model.apply_liouvillian(t, rho)


def integrate(model: TnpModel, rho0: np.ndarray, grid: TimeGrid) -> OperatorTrajectory:
    """Classical fixed-step RK4; each step re-symmetrizes to kill Hermiticity drift."""
    rho = np.asarray(rho0, dtype=complex).copy()
    out = np.empty((grid.n_steps + 1, model.dim, model.dim), dtype=complex)
    out[0] = rho
    dt = grid.dt
    for i in range(grid.n_steps):
        t = grid.time_at(i)
        k1 = _rk4_rhs(model, t, rho)
        k2 = _rk4_rhs(model, t + 0.5 * dt, rho + 0.5 * dt * k1)
        k3 = _rk4_rhs(model, t + 0.5 * dt, rho + 0.5 * dt * k2)
        k4 = _rk4_rhs(model, t + dt, rho + dt * k3)
        rho = rho + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        rho = 0.5 * (rho + rho.conj().T)
        if not np.isfinite(rho).all():
            raise NonFiniteState(f"non-finite density operator at t = {t + dt:.6g}")
        out[i + 1] = rho
    return OperatorTrajectory(grid=grid, values=out)


@dataclass(frozen=True)
class HierarchyResult:
    trajectories: tuple[OperatorTrajectory, ...]  # tau_0 .. tau_kmax
    moments: np.ndarray  # (k_max + 1, n_steps + 1), mu_k(t) = tr tau_k(t)


def solve_hierarchy(
    model: TnpModel, counting_channel: int, k_max: int, rho0: np.ndarray, grid: TimeGrid
) -> HierarchyResult:
    """Iteratively solve d tau_k/dt = L[tau_k] + k J[tau_{k-1}], tau_k(0) = 0 for k >= 1.

    ``model`` must be trace preserving; J is the jump superoperator of the
    selected channel. Stage k reads the stored stage-(k-1) trajectory through
    linear interpolation, including at RK4 midpoints.
    """
    if not model.is_trace_preserving:
        probe = np.eye(model.dim) / model.dim
        for t in (grid.t0, 0.5 * (grid.t0 + grid.t1), grid.t1):
            if abs(model.trace_derivative(t, probe)) > 1e-9:
                raise InvalidParameter("hierarchy base model must be trace preserving")
    if not 0 <= counting_channel < len(model.channels):
        raise InvalidParameter(f"counting channel {counting_channel} out of range")
    ch = model.channels[counting_channel]
    op = np.asarray(ch.op, dtype=complex)

    trajs = [integrate(model, rho0, grid)]
    for k in range(1, k_max + 1):
        prev = trajs[-1]

        def source(t: float, _k=k, _prev=prev) -> np.ndarray:
            return _k * ch.rate_at(t) * (op @ _prev.at(t) @ op.conj().T)

        staged = TnpModel(
            dim=model.dim,
            hamiltonian=model.hamiltonian,
            channels=model.channels,
            gamma=model.gamma,
            source=SourceTerm(source),
        )
        trajs.append(integrate(staged, np.zeros((model.dim, model.dim), dtype=complex), grid))

    moments = np.stack([np.trace(tr.values, axis1=1, axis2=2).real for tr in trajs])
    return HierarchyResult(trajectories=tuple(trajs), moments=moments)


# ---------------------------------------------------------------------------
# Dynamical maps (column-stacking vectorization: vec index = i + d*j)


def vec(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).reshape(-1, order="F")


def unvec(v: np.ndarray, d: int) -> np.ndarray:
    return np.asarray(v).reshape(d, d, order="F")


@dataclass(frozen=True)
class DynamicalMap:
    dim: int
    matrix: np.ndarray  # (d^2, d^2) acting on column-vectorized operators
    time: float

    def apply(self, op: np.ndarray) -> np.ndarray:
        return unvec(self.matrix @ vec(op), self.dim)

    def adjoint(self) -> "DynamicalMap":
        """Hilbert-Schmidt adjoint; swaps Heisenberg and Schroedinger pictures."""
        return DynamicalMap(dim=self.dim, matrix=self.matrix.conj().T, time=self.time)


def propagate_map(model: TnpModel, grid: TimeGrid) -> list[DynamicalMap]:
    """Propagator matrices at every grid point, Lambda_0 = identity.

    Columns are obtained by integrating a Hermitian operator basis (E_ii and
    the symmetric/antisymmetric combinations for i < j) and recombining, so the
    RK4 path stays within Hermitian matrices.
    """
    d = model.dim
    n = grid.n_steps
    basis_traj: dict[tuple, np.ndarray] = {}
    for i in range(d):
        e = np.zeros((d, d), dtype=complex)
        e[i, i] = 1.0
        basis_traj[("d", i, i)] = integrate(model, e, grid).values
    for i in range(d):
        for j in range(i + 1, d):
            a = np.zeros((d, d), dtype=complex)
            a[i, j] = a[j, i] = 1.0
            b = np.zeros((d, d), dtype=complex)
            b[i, j] = 1j
            b[j, i] = -1j
            basis_traj[("s", i, j)] = integrate(model, a, grid).values
            basis_traj[("a", i, j)] = integrate(model, b, grid).values

    maps = []
    for s in range(n + 1):
        m = np.empty((d * d, d * d), dtype=complex)
        for i in range(d):
            for j in range(d):
                if i == j:
                    img = basis_traj[("d", i, i)][s]
                elif i < j:
                    img = 0.5 * (basis_traj[("s", i, j)][s] - 1j * basis_traj[("a", i, j)][s])
                else:
                    img = 0.5 * (basis_traj[("s", j, i)][s] + 1j * basis_traj[("a", j, i)][s])
                m[:, i + d * j] = vec(img)
        maps.append(DynamicalMap(dim=d, matrix=m, time=grid.time_at(s)))
    return maps


COND_LIMIT = 1e10


def intermediate_map(maps: list[DynamicalMap], s: int, t: int) -> DynamicalMap:
    """Lambda_{t,s} = Lambda_t Lambda_s^{-1} from precomputed grid maps."""
    ms = maps[s]
    mt = maps[t]
    cond = np.linalg.cond(ms.matrix)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMap(f"Lambda at t = {ms.time:.6g} has condition number {cond:.3e}")
    return DynamicalMap(dim=ms.dim, matrix=mt.matrix @ np.linalg.inv(ms.matrix), time=mt.time)
