"""Shared time-synchronous stepping engine for the jump schemes.

Each step advances every trajectory against an immutable snapshot of the
ensemble: probabilities are computed in batched array passes, one uniform (or
one multinomial, for multiplicity > 1) is drawn per trajectory from its own
counter-based stream, and structural changes (jumps, replications,
disappearances, reverse jumps, source creations) are applied at the end-of-step
barrier in deterministic order. Results are therefore independent of the
worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ensemble import Ensemble, canonical_key_rows
from .errors import (
    InvalidParameter,
    NegativeProbability,
    NegativeSource,
    StepTooLarge,
)
from .exact import TimeGrid
from .linops import hermitian_eig
from .model import TnpModel
from .rng import batched_uniform_words, binomial_inverse, make_generator, stream_key

JUMP_MASS_LIMIT = 0.1
SOURCE_STREAM_TAG = 0x536F757263655454  # reserved id far above any trajectory id
NEG_SOURCE_TOL = 1e-6


@dataclass
class RunResult:
    """Recorded time series of an engine run."""

    times: np.ndarray
    average_states: np.ndarray
    trace_estimates: np.ndarray
    total_counts: np.ndarray
    distinct_counts: np.ndarray
    group_counts: np.ndarray
    group_observables: dict[str, np.ndarray] = field(default_factory=dict)
    n_ref: int = 0
    seed: int = 0
    n_groups: int = 1
    final_ensemble: Optional[Ensemble] = None


def _void_rows(rows: np.ndarray) -> np.ndarray:
    """View int64 rows as comparable scalars for sorting/searching."""
    rows = np.ascontiguousarray(rows)
    return rows.view([("", rows.dtype)] * rows.shape[1]).ravel()


def _build_snapshot(states: np.ndarray, mult: np.ndarray):
    rows = canonical_key_rows(states)
    keys = _void_rows(rows)
    uniq_keys, first_idx, inverse = np.unique(keys, return_index=True, return_inverse=True)
    counts = np.zeros(uniq_keys.shape[0], dtype=np.int64)
    np.add.at(counts, inverse, mult)
    return uniq_keys, states[first_idx], counts, inverse


def _match_keys(uniq_keys: np.ndarray, candidate_states: np.ndarray) -> np.ndarray:
    """Index of each candidate's canonical key in uniq_keys, -1 when absent."""
    rows = canonical_key_rows(candidate_states)
    keys = _void_rows(rows)
    pos = np.searchsorted(uniq_keys, keys)
    pos = np.clip(pos, 0, uniq_keys.shape[0] - 1)
    found = uniq_keys[pos] == keys
    return np.where(found, pos, -1)


def run(
    model: TnpModel,
    ensemble: Ensemble,
    grid: TimeGrid,
    scheme,
    *,
    reverse_jumps: bool = False,
    record_every: int = 1,
    merge: Optional[bool] = None,
    observables: Optional[dict[str, np.ndarray]] = None,
    threads: int = 1,
    jump_mass_limit: float = JUMP_MASS_LIMIT,
    record_distinct: bool = True,
) -> RunResult:
    if abs(ensemble.time - grid.t0) > 1e-9:
        raise InvalidParameter(f"ensemble time {ensemble.time} != grid start {grid.t0}")
    if record_every < 1:
        raise InvalidParameter("record_every must be >= 1")
    if merge is None:
        merge = not reverse_jumps
    observables = observables or {}

    ens = ensemble.copy()
    dt = grid.dt
    seed = ens.seed
    src_key = stream_key(seed, SOURCE_STREAM_TAG, 0)

    rec_times = []
    rec_avg = []
    rec_trace = []
    rec_total = []
    rec_distinct = []
    rec_gcounts = []
    rec_gobs = {name: [] for name in observables}

    def record():
        rec_times.append(ens.time)
        rec_avg.append(ens.average_state())
        rec_trace.append(ens.trace_estimate())
        rec_total.append(ens.total_count())
        rec_distinct.append(ens.distinct_state_count() if record_distinct else 0)
        rec_gcounts.append(ens.group_counts())
        for name, op in observables.items():
            rec_gobs[name].append(ens.group_observable_sums(op) / ens.n_ref)

    record()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for step in range(grid.n_steps):
            t = grid.time_at(step)
            _advance_step(model, ens, scheme, t, dt, reverse_jumps, pool, threads, jump_mass_limit)
            _apply_source(model, ens, src_key, step, t, dt)
            if merge:
                ens._merge_in_place()
            ens.time = grid.time_at(step + 1)
            if (step + 1) % record_every == 0:
                record()
    finally:
        if pool is not None:
            pool.shutdown(wait=False)

    return RunResult(
        times=np.array(rec_times),
        average_states=np.array(rec_avg) if rec_avg else np.zeros((0, ens.dim, ens.dim)),
        trace_estimates=np.array(rec_trace),
        total_counts=np.array(rec_total, dtype=np.int64),
        distinct_counts=np.array(rec_distinct, dtype=np.int64),
        group_counts=np.array(rec_gcounts, dtype=np.int64),
        group_observables={k: np.array(v) for k, v in rec_gobs.items()},
        n_ref=ens.n_ref,
        seed=seed,
        n_groups=ens.n_groups,
        final_ensemble=ens,
    )


def _advance_step(model, ens, scheme, t, dt, reverse_jumps, pool, threads, jump_mass_limit=JUMP_MASS_LIMIT):
    n = ens.size
    if n == 0:
        return
    ctx = scheme.prepare(model, t, dt)
    states = ens.states

    raw_bins = scheme.jump_bins(ctx, states)  # (n, J), possibly negative entries
    det_states = scheme.det_states(ctx, states)
    x = scheme.x_values(ctx, states)
    pd = np.maximum(0.0, -x * dt)
    pc = np.maximum(0.0, x * dt)
    pdc = pd + pc
    is_vanish = pd > 0.0

    neg_mask = raw_bins < scheme.negative_tol
    if neg_mask.any() and not reverse_jumps:
        j = int(np.argwhere(neg_mask.any(axis=0))[0][0])
        raise NegativeProbability(
            f"jump branch {j} has negative probability at t = {t:.6g}; enable reverse jumps"
        )
    pos_bins = np.where(raw_bins < 0.0, 0.0, raw_bins)

    # reverse-jump exits shared per snapshot state class (same key -> same exits)
    rev_class: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    rev_targets: Optional[np.ndarray] = None
    obj_class: Optional[np.ndarray] = None
    if reverse_jumps and neg_mask.any():
        uniq_keys, uniq_states, uniq_counts, inverse = _build_snapshot(states, ens.mult)
        entries = scheme.reverse_entries(ctx, uniq_keys, uniq_states, uniq_counts, _match_keys)
        rev_targets = uniq_states
        obj_class = inverse
        for uidx, exits in entries.items():
            n_here = float(uniq_counts[uidx])
            rev_class[uidx] = (
                np.array([w / n_here for (w, _, _) in exits]),
                np.array([tgt for (_, tgt, _) in exits], dtype=np.int64),
            )

    jump_mass = pos_bins.sum(axis=1)
    rev_total = np.zeros(n)
    if rev_class:
        for uidx, (probs, _) in rev_class.items():
            rev_total[obj_class == uidx] = probs.sum()
    pdet = 1.0 - jump_mass - rev_total - pdc  # residual deterministic weight

    worst = float((jump_mass + rev_total + pd).max())
    if worst > jump_mass_limit:
        raise StepTooLarge(
            f"jump+disappearance probability {worst:.3g} exceeds {jump_mass_limit} at t = {t:.6g}; reduce dt"
        )
    if float(pdet.min()) < -1e-12:
        raise StepTooLarge(f"outcome probabilities exceed 1 at t = {t:.6g}; reduce dt")

    ctr_before = ens.ctr.copy()
    u0, u1, u2, u3 = batched_uniform_words(ens.key0, ens.key1, ens.ctr)
    ens.ctr += np.uint64(1)

    n_jump_bins = pos_bins.shape[1]
    n_bins = n_jump_bins + 2
    special = ens.mult > 1
    hosted = np.zeros(n, dtype=bool)
    if rev_class:
        hosted = np.isin(obj_class, np.fromiter(rev_class.keys(), dtype=np.int64))
        special |= hosted

    fast = ~special
    outcome_fast = np.full(n, n_bins - 1, dtype=np.int64)
    if fast.any():
        bins = np.concatenate([pos_bins[fast], pdc[fast, None], pdet[fast, None]], axis=1)
        cum = np.cumsum(bins, axis=1)
        idx = (u0[fast, None] >= cum).sum(axis=1)
        outcome_fast[fast] = np.minimum(idx, n_bins - 1)

    # multiplicity-1 objects with reverse exits: classify per class with shared
    # exit bins [jumps | exits | pdc | det]; only event-bearing ones join the
    # per-object apply path
    host_results: dict[int, tuple[np.ndarray, int]] = {}
    host_det: list[np.ndarray] = []
    if rev_class:
        single_hosted = hosted & (ens.mult == 1)
        for uidx, (probs, targets) in rev_class.items():
            members = np.flatnonzero(single_hosted & (obj_class == uidx))
            if members.size == 0:
                continue
            r = probs.shape[0]
            bins = np.concatenate(
                [
                    pos_bins[members],
                    np.tile(probs, (members.size, 1)),
                    pdc[members, None],
                    pdet[members, None],
                ],
                axis=1,
            )
            cum = np.cumsum(bins, axis=1)
            idx = np.minimum((u0[members, None] >= cum).sum(axis=1), n_jump_bins + r + 1)
            host_det.append(members[idx == n_jump_bins + r + 1])
            for pos in np.flatnonzero(idx != n_jump_bins + r + 1):
                counts = np.zeros(n_jump_bins + r + 2, dtype=np.int64)
                counts[idx[pos]] = 1
                host_results[int(members[pos])] = (counts, r)

    # multiplicity splitting: number of non-deterministic events is Binomial(m, p_ev);
    # small expected counts invert one uniform, large lumps fall back to a Generator
    special_idx = np.flatnonzero(ens.mult > 1)
    special_results: dict[int, tuple[np.ndarray, int]] = {}
    event_free: np.ndarray = np.zeros(0, dtype=np.int64)
    if special_idx.size:
        m_arr = ens.mult[special_idx]
        p_ev = jump_mass[special_idx] + rev_total[special_idx] + pdc[special_idx]
        small = m_arr * p_ev <= 32.0
        k_events = np.zeros(special_idx.size, dtype=np.int64)
        sm = np.flatnonzero(small)
        if sm.size:
            k_events[sm] = binomial_inverse(m_arr[sm], p_ev[sm], u0[special_idx[sm]])
        event_free = special_idx[small & (k_events == 0)]

        def event_bins(i: int):
            if hosted[i]:
                probs = rev_class[int(obj_class[i])][0]
                return list(pos_bins[i]) + list(probs) + [pdc[i]], probs.shape[0]
            return list(pos_bins[i]) + [pdc[i]], 0

        def draw_special(pos: int):
            i = int(special_idx[pos])
            bins_i, n_rev = event_bins(i)
            total = sum(bins_i)
            m = int(m_arr[pos])
            counts = np.zeros(len(bins_i) + 1, dtype=np.int64)
            if small[pos]:
                k = int(k_events[pos])
                if k <= 3:
                    for u in (u1[i], u2[i], u3[i])[:k]:
                        acc = 0.0
                        chosen = len(bins_i) - 1
                        for b, p in enumerate(bins_i):
                            acc += p / total
                            if u < acc:
                                chosen = b
                                break
                        counts[chosen] += 1
                else:
                    gen = make_generator(int(ens.key0[i]), int(ens.key1[i]), int(ctr_before[i]))
                    arr = np.array(bins_i)
                    counts[:-1] = gen.multinomial(k, arr / arr.sum())
                counts[-1] = m - k
            else:
                gen = make_generator(int(ens.key0[i]), int(ens.key1[i]), int(ctr_before[i]))
                pvec = np.array(bins_i + [max(pdet[i], 0.0)])
                counts[:] = gen.multinomial(m, pvec / pvec.sum())
            return i, counts, n_rev

        todo = np.flatnonzero(~(small & (k_events == 0)))
        if pool is not None and todo.size > 1:
            chunks = [c for c in np.array_split(todo, threads) if len(c)]
            futures = [pool.submit(lambda c=c: [draw_special(p) for p in c]) for c in chunks]
            results = [r for fut in futures for r in fut.result()]
        else:
            results = [draw_special(p) for p in todo]
        special_results = {i: (counts, n_rev) for i, counts, n_rev in results}
    special_results.update(host_results)

    # -- apply outcomes at the barrier, touching only event-bearing objects ---
    new_mult = np.zeros(n, dtype=np.int64)
    fast_det = fast & (outcome_fast == n_bins - 1)
    new_mult[fast_det] = 1
    if event_free.size:
        new_mult[event_free] = ens.mult[event_free]
    for members in host_det:
        new_mult[members] = 1

    event_idx = np.flatnonzero(fast & ~fast_det)
    spawn_states: list[np.ndarray] = []
    spawn_mult: list[int] = []
    spawn_group: list[int] = []
    spawn_parent: list[int] = []

    def spawn(parent: int, state: np.ndarray, count: int):
        spawn_states.append(state)
        spawn_mult.append(count)
        spawn_group.append(int(ens.group[parent]))
        spawn_parent.append(parent)

    merged_events = sorted(set(event_idx.tolist()) | set(special_results.keys()))
    for i in merged_events:
        if i in special_results:
            counts, n_rev = special_results[i]
            jump_counts = counts[:n_jump_bins]
            rev_counts = counts[n_jump_bins : n_jump_bins + n_rev]
            k_dc = int(counts[n_jump_bins + n_rev])
            k_det = int(counts[-1])
            for b in np.flatnonzero(jump_counts):
                spawn(i, scheme.jump_target(ctx, states, i, int(b)), int(jump_counts[b]))
            for r in np.flatnonzero(rev_counts):
                target = int(rev_class[int(obj_class[i])][1][int(r)])
                spawn(i, rev_targets[target].copy(), int(rev_counts[r]))
        else:
            o = int(outcome_fast[i])
            k_det = 0
            k_dc = 1 if o == n_bins - 2 else 0
            if o < n_jump_bins:
                spawn(i, scheme.jump_target(ctx, states, i, o), 1)
        if k_dc > 0 and not is_vanish[i]:
            # replication: parents continue deterministically, copies split off
            spawn(i, det_states[i].copy(), k_dc)
            k_det += k_dc
        new_mult[i] = k_det

    ens.states = det_states
    ens.mult = new_mult
    if spawn_states:
        n_new = len(spawn_states)
        ids = np.arange(ens.next_id, ens.next_id + n_new, dtype=np.uint64)
        ens.next_id += n_new
        k0 = np.empty(n_new, dtype=np.uint64)
        k1 = np.empty(n_new, dtype=np.uint64)
        for c, parent in enumerate(spawn_parent):
            ens.spawned[parent] += np.uint64(1)
            kk0, kk1 = stream_key(ens.seed, int(ens.ids[parent]), int(ens.spawned[parent]))
            k0[c] = kk0
            k1[c] = kk1
        ens.states = np.concatenate([ens.states, np.stack(spawn_states)])
        ens.mult = np.concatenate([ens.mult, np.array(spawn_mult, dtype=np.int64)])
        ens.group = np.concatenate([ens.group, np.array(spawn_group, dtype=np.int64)])
        ens.ids = np.concatenate([ens.ids, ids])
        ens.key0 = np.concatenate([ens.key0, k0])
        ens.key1 = np.concatenate([ens.key1, k1])
        ens.ctr = np.concatenate([ens.ctr, np.zeros(n_new, dtype=np.uint64)])
        ens.spawned = np.concatenate([ens.spawned, np.zeros(n_new, dtype=np.uint64)])
    ens.drop_empty()


def _apply_source(model, ens, src_key, step, t, dt):
    # midpoint evaluation keeps the per-step creation quadrature at O(dt^2)
    s = model.source_at(t + 0.5 * dt)
    if s is None:
        return
    eig = hermitian_eig(s, tol=1e-8 * max(1.0, float(np.abs(s).max())))
    vals = eig.values
    if float(vals.min()) < -NEG_SOURCE_TOL:
        raise NegativeSource(f"source eigenvalue {vals.min():.3e} below -{NEG_SOURCE_TOL} at t = {t:.6g}")
    vals = np.maximum(vals, 0.0)
    gen = make_generator(src_key[0], src_key[1], step)
    rows = []
    for i in range(vals.shape[0]):
        if vals[i] <= 0.0:
            continue
        copies = int(gen.poisson(vals[i] * ens.n_ref * dt))
        if copies == 0:
            continue
        state = eig.vectors[:, i]
        if ens.n_groups == 1:
            rows.append((state, copies, 0))
        else:
            split = gen.multinomial(copies, np.full(ens.n_groups, 1.0 / ens.n_groups))
            for g in np.flatnonzero(split):
                rows.append((state, int(split[g]), int(g)))
    ens._append_members(rows)
