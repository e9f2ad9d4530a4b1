"""Clock-driven LIF network simulation with exponential synaptic currents.

Per step of length ``dt`` every synaptic current decays exactly,
``I <- I * exp(-dt/tau_syn)``, and the membrane integrates the decaying
current over the step with the exact propagator of

    tau_mem dv/dt = -v + sum_k I_k

so a single input event produces the closed-form double-exponential response
at every grid point.  Events landing in ``[n*dt, (n+1)*dt)`` are added to the
currents at the start of step ``n``; a neuron whose potential reaches
threshold at the end of a step spikes at that grid time, is reset and held at
``v_reset`` for its refractory period.  Recurrent spikes are delivered at the
start of the following step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numba
import numpy as np

from .aer import EventTrain, SpikeRecord
from .errors import TuningFailed, UnstableConfig
from .topology import (
    EXC_FAST,
    EXCITATORY_TYPES,
    INH_FAST,
    INHIBITORY_TYPES,
    POPULATIONS,
    SYN_TYPES,
    NetworkTopology,
)

log = logging.getLogger(__name__)

N_TYPES = len(SYN_TYPES)
_EPS_STEP = 1e-9


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PopulationParams:
    """Shared (per-core) neuron parameters of one population."""

    tau_mem: float = 0.020
    tau_syn: tuple[float, float, float, float] = (0.010, 0.010, 0.010, 0.010)
    v_thresh: float = 1.0
    v_reset: float = 0.0
    refractory: float = 0.002

    def __post_init__(self):
        object.__setattr__(self, "tau_syn", tuple(float(t) for t in self.tau_syn))
        if self.tau_mem <= 0 or any(t <= 0 for t in self.tau_syn):
            raise ValueError("time constants must be positive")
        if not self.v_thresh > self.v_reset:
            raise ValueError("v_thresh must exceed v_reset")
        if self.refractory < 0:
            raise ValueError("refractory must be >= 0")


@dataclass
class NeuronParams:
    """Per-neuron parameter arrays (length ``N``; ``tau_syn`` is ``N x 4``)."""

    tau_mem: np.ndarray
    tau_syn: np.ndarray
    v_thresh: np.ndarray
    v_reset: np.ndarray
    refractory: np.ndarray

    def __post_init__(self):
        self.tau_mem = np.asarray(self.tau_mem, dtype=np.float64)
        self.tau_syn = np.asarray(self.tau_syn, dtype=np.float64).reshape(-1, N_TYPES)
        self.v_thresh = np.asarray(self.v_thresh, dtype=np.float64)
        self.v_reset = np.asarray(self.v_reset, dtype=np.float64)
        self.refractory = np.asarray(self.refractory, dtype=np.float64)
        n = self.tau_mem.size
        if not all(a.shape[0] == n for a in (self.tau_syn, self.v_thresh, self.v_reset, self.refractory)):
            raise ValueError("parameter arrays disagree in length")
        if np.any(self.tau_mem <= 0) or np.any(self.tau_syn <= 0):
            raise ValueError("time constants must be positive")
        if np.any(self.v_thresh <= self.v_reset):
            raise ValueError("v_thresh must exceed v_reset for every neuron")
        if np.any(self.refractory < 0):
            raise ValueError("refractory must be >= 0")

    @property
    def n_neurons(self) -> int:
        return self.tau_mem.size

    @classmethod
    def uniform(cls, n: int, base: PopulationParams | None = None) -> "NeuronParams":
        b = base or PopulationParams()
        return cls(
            np.full(n, b.tau_mem),
            np.tile(np.asarray(b.tau_syn), (n, 1)),
            np.full(n, b.v_thresh),
            np.full(n, b.v_reset),
            np.full(n, b.refractory),
        )

    @classmethod
    def from_populations(cls, topology: NetworkTopology, per_pop: dict[str, PopulationParams] | None = None):
        per_pop = per_pop or {}
        parts = [cls.uniform(topology.params.pop_slices()[p].stop - topology.params.pop_slices()[p].start,
                             per_pop.get(p)) for p in POPULATIONS]
        return cls(
            np.concatenate([q.tau_mem for q in parts]),
            np.concatenate([q.tau_syn for q in parts]),
            np.concatenate([q.v_thresh for q in parts]),
            np.concatenate([q.v_reset for q in parts]),
            np.concatenate([q.refractory for q in parts]),
        )

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NeuronParams":
        return cls(**{k: np.asarray(v) for k, v in d.items()})


def lognormal_multipliers(rng: np.random.Generator, cv: float, size) -> np.ndarray:
    """Unit-median log-normal draws with coefficient of variation ``cv``."""
    if cv == 0:
        return np.ones(size)
    sigma = math.sqrt(math.log1p(cv * cv))
    return rng.lognormal(0.0, sigma, size=size)


def inject_mismatch(base: NeuronParams, cv: float, seed: int) -> NeuronParams:
    """Multiply every parameter of every neuron by an independent log-normal factor."""
    if not 0 <= cv < 1:
        raise ValueError(f"cv must be in [0, 1), got {cv}")
    rng = np.random.default_rng(seed)
    n = base.n_neurons
    thresh = base.v_thresh * lognormal_multipliers(rng, cv, n)
    reset = base.v_reset * lognormal_multipliers(rng, cv, n)
    # keep the threshold above reset if the draws happen to cross
    reset = np.minimum(reset, thresh - 1e-6 * np.abs(thresh))
    return NeuronParams(
        base.tau_mem * lognormal_multipliers(rng, cv, n),
        base.tau_syn * lognormal_multipliers(rng, cv, (n, N_TYPES)),
        thresh,
        reset,
        base.refractory * lognormal_multipliers(rng, cv, n),
    )


@dataclass
class WeightTable:
    """Synaptic efficacy per (postsynaptic population, synapse type)."""

    weights: dict[tuple[str, int], float] = field(default_factory=dict)

    def __post_init__(self):
        for (pop, syn), w in self.weights.items():
            if pop not in POPULATIONS:
                raise ValueError(f"unknown population {pop!r}")
            if syn in EXCITATORY_TYPES and w < 0:
                raise ValueError(f"excitatory weight {pop}/{SYN_TYPES[syn]} must be >= 0")
            if syn in INHIBITORY_TYPES and w > 0:
                raise ValueError(f"inhibitory weight {pop}/{SYN_TYPES[syn]} must be <= 0")

    def get(self, pop: str, syn: int) -> float:
        return float(self.weights.get((pop, syn), 0.0))

    def matrix(self) -> np.ndarray:
        m = np.zeros((len(POPULATIONS), N_TYPES))
        for (pop, syn), w in self.weights.items():
            m[POPULATIONS.index(pop), syn] = w
        return m

    def scaled(self, exc: float, inh: float) -> "WeightTable":
        return WeightTable(
            {k: w * (exc if k[1] in EXCITATORY_TYPES else inh) for k, w in self.weights.items()}
        )

    def excitatory_zero(self) -> bool:
        return all(w == 0 for (p, s), w in self.weights.items() if s in EXCITATORY_TYPES)

    def to_dict(self) -> dict:
        return {f"{p}/{SYN_TYPES[s]}": w for (p, s), w in sorted(self.weights.items())}

    @classmethod
    def from_dict(cls, d: dict) -> "WeightTable":
        out = {}
        for k, w in d.items():
            p, s = k.split("/")
            out[(p, SYN_TYPES.index(s))] = float(w)
        return cls(out)

    @classmethod
    def default(cls) -> "WeightTable":
        return cls(
            {
                ("input", EXC_FAST): 0.05,
                ("excitatory", EXC_FAST): 0.12,
                ("excitatory", INH_FAST): -0.25,
                ("inhibitory", EXC_FAST): 0.10,
            }
        )


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------


def _csr(src: np.ndarray, n_src: int, *cols):
    order = np.argsort(src, kind="stable")
    ptr = np.zeros(n_src + 1, dtype=np.int64)
    np.add.at(ptr, src + 1, 1)
    ptr = np.cumsum(ptr)
    return (ptr,) + tuple(np.ascontiguousarray(c[order]) for c in cols)


@numba.njit(cache=True)
def _step_loop(
    n_steps, ev_step, ev_line,
    line_ptr, line_post, line_type, line_val,
    out_ptr, out_post, out_type, out_val,
    a_mem, a_syn, c_syn, v_th, v_reset, refr_steps,
    v, cur, refr, pend, n_pend,
    probe, probe_out, spiking,
):
    n = v.size
    n_act = cur.shape[1]
    cap = 1024
    sp_step = np.empty(cap, np.int64)
    sp_id = np.empty(cap, np.int64)
    n_sp = 0
    e = 0
    n_ev = ev_step.size
    newp = np.empty(n, np.int64)
    for s in range(n_steps):
        # recurrent spikes emitted at the end of the previous step
        for q in range(n_pend):
            pre = pend[q]
            for j in range(out_ptr[pre], out_ptr[pre + 1]):
                cur[out_post[j], out_type[j]] += out_val[j]
        # input events falling in this step
        while e < n_ev and ev_step[e] == s:
            ln = ev_line[e]
            for j in range(line_ptr[ln], line_ptr[ln + 1]):
                cur[line_post[j], line_type[j]] += line_val[j]
            e += 1
        n_new = 0
        for i in range(n):
            drive = 0.0
            for k in range(n_act):
                c = cur[i, k]
                drive += c_syn[i, k] * c
                cur[i, k] = c * a_syn[i, k]
            if refr[i] > 0:
                refr[i] -= 1
                v[i] = v_reset[i]
                continue
            vi = a_mem[i] * v[i] + drive
            if spiking and vi >= v_th[i]:
                v[i] = v_reset[i]
                refr[i] = refr_steps[i]
                newp[n_new] = i
                n_new += 1
                if n_sp == cap:
                    cap *= 2
                    a = np.empty(cap, np.int64)
                    b = np.empty(cap, np.int64)
                    a[:n_sp] = sp_step[:n_sp]
                    b[:n_sp] = sp_id[:n_sp]
                    sp_step = a
                    sp_id = b
                sp_step[n_sp] = s
                sp_id[n_sp] = i
                n_sp += 1
            else:
                v[i] = vi
        for q in range(n_new):
            pend[q] = newp[q]
        n_pend = n_new
        for q in range(probe.size):
            probe_out[s, q] = v[probe[q]]
    return sp_step[:n_sp], sp_id[:n_sp], n_pend


def _propagators(params: NeuronParams, dt: float):
    a_mem = np.exp(-dt / params.tau_mem)
    a_syn = np.exp(-dt / params.tau_syn)
    k = 1.0 / params.tau_mem[:, None] - 1.0 / params.tau_syn
    small = np.abs(k * dt) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        c = a_mem[:, None] * np.expm1(dt * k) / (params.tau_mem[:, None] * k)
    c = np.where(small, a_mem[:, None] * dt / params.tau_mem[:, None], c)
    return a_mem, a_syn, np.ascontiguousarray(c)


class Simulator:
    """Stateful network simulator; :meth:`run` may be called repeatedly to continue in time."""

    def __init__(
        self,
        topology: NetworkTopology,
        params: NeuronParams,
        weights: WeightTable,
        dt: float = 1e-4,
        *,
        max_rate: float | None = None,
        spiking: bool = True,
    ):
        if params.n_neurons != topology.n_neurons:
            raise ValueError(f"{params.n_neurons} parameter sets for {topology.n_neurons} neurons")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.topology = topology
        self.params = params
        self.weights = weights
        self.dt = float(dt)
        self.max_rate = max_rate
        self.spiking = spiking

        pop = topology.population_of()
        wm = weights.matrix()
        used = set(np.unique(topology.syn_type).tolist())
        p = topology.params
        used.add(p.syn_line_input)
        self.active = np.array(sorted(used), dtype=np.int64)
        tau_min = min(params.tau_mem.min(), params.tau_syn[:, self.active].min())
        if dt > tau_min / 10 * (1 + 1e-9):
            raise ValueError(f"dt={dt} exceeds min(tau)/10 = {tau_min / 10:.3g}")

        # currents are stored only for the synapse types in use, in compact columns
        col = np.full(N_TYPES, -1, dtype=np.int64)
        col[self.active] = np.arange(self.active.size)
        val = wm[pop[topology.post], topology.syn_type] * topology.multiplicity
        self._out = _csr(topology.pre, topology.n_neurons, topology.post.astype(np.int64),
                         col[topology.syn_type], val.astype(np.float64))
        in_ids = np.arange(p.n_input, dtype=np.int64)
        line_val = wm[0, p.syn_line_input] * topology.input_mult
        self._lines = _csr(topology.input_line.astype(np.int64), max(p.n_lines, 1), in_ids,
                           np.full(p.n_input, col[p.syn_line_input], np.int64), line_val.astype(np.float64))
        self.a_mem, a_syn, c_syn = _propagators(params, self.dt)
        self.a_syn = np.ascontiguousarray(a_syn[:, self.active])
        self.c_syn = np.ascontiguousarray(c_syn[:, self.active])
        self.refr_steps = np.maximum(np.ceil(params.refractory / self.dt - 1e-9).astype(np.int64) - 1, 0)
        self.reset()

    def reset(self) -> None:
        n = self.topology.n_neurons
        self.v = np.zeros(n)
        self.cur = np.zeros((n, self.active.size))
        self.refr = np.zeros(n, dtype=np.int64)
        self.pend = np.zeros(n, dtype=np.int64)
        self.n_pend = 0
        self.step = 0

    def run_steps(self, n_steps: int, ev_step: np.ndarray, ev_line: np.ndarray, probe=None):
        """Advance ``n_steps``; ``ev_step`` is relative to the current step.

        Returns global spike step indices, neuron ids and (optionally) the
        probed membrane trace ``[n_steps, len(probe)]`` sampled after each step.
        """
        probe = np.asarray([] if probe is None else probe, dtype=np.int64)
        probe_out = np.zeros((n_steps if probe.size else 0, probe.size))
        sp_step, sp_id, self.n_pend = _step_loop(
            int(n_steps), np.ascontiguousarray(ev_step, dtype=np.int64),
            np.ascontiguousarray(ev_line, dtype=np.int64),
            *self._lines, *self._out,
            self.a_mem, self.a_syn, self.c_syn, self.params.v_thresh, self.params.v_reset,
            self.refr_steps,
            self.v, self.cur, self.refr, self.pend, self.n_pend,
            probe, probe_out, self.spiking,
        )
        sp_step = sp_step + self.step
        self.step += n_steps
        return sp_step, sp_id, probe_out

    def run(self, train: EventTrain, duration: float | None = None, *, chunk: float = 10.0,
            probe=None, sink=None) -> SpikeRecord | None:
        """Simulate ``train`` (plus trailing silence up to ``duration``).

        Spike times are relative to the start of ``train``.  With ``sink`` set,
        spikes are handed to ``sink(times, ids)`` chunk by chunk and not kept.
        """
        duration = train.duration if duration is None else duration
        total = int(round(duration / self.dt))
        steps_all = np.floor(train.times / self.dt + _EPS_STEP).astype(np.int64)
        lines_all = train.lines
        chunk_steps = max(int(round(chunk / self.dt)), 1)
        start_step = self.step
        times_l, ids_l, probes = [], [], []
        counts = np.zeros(self.topology.n_neurons, dtype=np.int64)
        done = 0
        while done < total:
            n = min(chunk_steps, total - done)
            lo, hi = np.searchsorted(steps_all, [done, done + n])
            sp_step, sp_id, pr = self.run_steps(n, steps_all[lo:hi] - done, lines_all[lo:hi], probe)
            t = (sp_step - start_step + 1) * self.dt
            counts += np.bincount(sp_id, minlength=counts.size)
            done += n
            if self.max_rate is not None:
                worst = counts.max(initial=0) / (done * self.dt)
                if worst > self.max_rate and done * self.dt >= min(1.0, duration):
                    raise UnstableConfig(f"neuron {int(counts.argmax())} fires at {worst:.1f} Hz > {self.max_rate} Hz")
            if sink is not None:
                sink(t, sp_id)
            else:
                times_l.append(t)
                ids_l.append(sp_id)
            if probe is not None:
                probes.append(pr)
        meta = {"dt": self.dt}
        if sink is not None:
            self.last_counts = counts
            return None
        rec = SpikeRecord(
            np.concatenate(times_l) if times_l else np.empty(0),
            np.concatenate(ids_l) if ids_l else np.empty(0, np.int64),
            duration,
            self.topology.n_neurons,
            meta,
        )
        if probe is not None:
            rec.meta["probe"] = np.concatenate(probes) if probes else np.empty((0, len(probe)))
        return rec


def simulate(topology, params, weights, input: EventTrain, dt: float = 1e-4, *,
             duration: float | None = None, max_rate: float | None = None, **kw) -> SpikeRecord:
    return Simulator(topology, params, weights, dt, max_rate=max_rate).run(input, duration, **kw)


# ---------------------------------------------------------------------------
# Rates and tuning
# ---------------------------------------------------------------------------


class RateAccumulator:
    """Incremental boxcar rate series per population (feeds on spike chunks)."""

    def __init__(self, duration: float, window: float, topology: NetworkTopology | None = None,
                 n_neurons: int | None = None):
        if not window > 0:
            raise ValueError("window must be positive")
        self.duration = float(duration)
        self.window = float(window)
        self.n_bins = max(int(math.ceil(self.duration / window - 1e-9)), 1)
        if topology is not None:
            sl = topology.params.pop_slices()
        else:
            sl = {"all": slice(0, int(n_neurons or 0))}
        self.slices = sl
        self.hist = {k: np.zeros(self.n_bins, dtype=np.int64) for k in sl}

    def __call__(self, times: np.ndarray, ids: np.ndarray) -> None:
        b = np.minimum((np.asarray(times) / self.window).astype(np.int64), self.n_bins - 1)
        for name, sl in self.slices.items():
            m = (ids >= sl.start) & (ids < sl.stop)
            self.hist[name] += np.bincount(b[m], minlength=self.n_bins)

    def result(self) -> dict:
        out = {"t": ((np.arange(self.n_bins) + 0.5) * self.window).tolist(), "window": self.window,
               "rates": {}, "mean": {}}
        for name, sl in self.slices.items():
            n_pop = max(sl.stop - sl.start, 1)
            h = self.hist[name]
            out["rates"][name] = (h / (n_pop * self.window)).tolist()
            out["mean"][name] = float(h.sum() / (n_pop * self.duration)) if self.duration > 0 else 0.0
        return out


def rate_report(record: SpikeRecord, window: float, topology: NetworkTopology | None = None) -> dict:
    """Boxcar (non-overlapping) mean firing rate per population, Hz per neuron."""
    acc = RateAccumulator(record.duration, window, topology, record.n_neurons)
    acc(record.times, record.neuron)
    return acc.result()


@dataclass
class EdgeCriteria:
    band: tuple[float, float] = (5.0, 20.0)  # Hz per excitatory neuron while stimulated
    quiet_rate: float = 1.0  # Hz per reservoir neuron
    quiet_within: float = 1.0  # s after input ends
    quiet_window: float = 1.0  # s over which the quiet rate is measured


def edge_stats(topology, params, weights, sample: EventTrain, dt: float, crit: EdgeCriteria) -> dict:
    dur = sample.duration + crit.quiet_within + crit.quiet_window
    rec = simulate(topology, params, weights, sample, dt, duration=dur)
    sl = topology.params.pop_slices()
    exc = (rec.neuron >= sl["excitatory"].start) & (rec.neuron < sl["excitatory"].stop)
    res = rec.neuron >= sl["excitatory"].start
    stim = exc & (rec.times <= sample.duration)
    t0 = sample.duration + crit.quiet_within
    quiet = res & (rec.times > t0) & (rec.times <= t0 + crit.quiet_window)
    n_res = topology.params.n_exc + topology.params.n_inh
    return {
        "stim_rate": float(stim.sum() / (topology.params.n_exc * sample.duration)),
        "quiet_rate": float(quiet.sum() / (n_res * crit.quiet_window)),
    }


def meets_edge(stats: dict, crit: EdgeCriteria) -> bool:
    lo, hi = crit.band
    return lo <= stats["stim_rate"] <= hi and stats["quiet_rate"] < crit.quiet_rate


def tune_to_edge(
    topology: NetworkTopology,
    params: NeuronParams,
    input_sample: EventTrain,
    weights: WeightTable | None = None,
    *,
    dt: float = 1e-4,
    criteria: EdgeCriteria | None = None,
    max_iter: int = 40,
) -> WeightTable:
    """Scale excitatory / inhibitory weights until the network sits in the target regime.

    Excitation is bisected in log-space to bring the stimulated excitatory
    rate into the band; if activity then outlives the input, inhibition is
    strengthened and excitation re-bracketed.
    """
    crit = criteria or EdgeCriteria()
    weights = weights or WeightTable.default()
    history = []

    def evaluate(w):
        st = edge_stats(topology, params, w, input_sample, dt, crit)
        history.append(st)
        log.info("tune: %s -> stim %.2f Hz, quiet %.2f Hz", w.to_dict(), st["stim_rate"], st["quiet_rate"])
        return st

    st = evaluate(weights)
    if meets_edge(st, crit):
        return weights

    base = weights
    if base.excitatory_zero():
        ref = WeightTable.default()
        merged = {k: v for k, v in ref.weights.items() if k[1] in EXCITATORY_TYPES}
        merged.update({k: v for k, v in base.weights.items() if k[1] in INHIBITORY_TYPES})
        base = WeightTable(merged).scaled(0.05, 1.0)
    if all(w == 0 for (p, s), w in base.weights.items() if s in INHIBITORY_TYPES):
        ref = WeightTable.default()
        merged = dict(base.weights)
        merged.update({k: v for k, v in ref.weights.items() if k[1] in INHIBITORY_TYPES})
        base = WeightTable(merged)
        inh = 0.25
    else:
        inh = 1.0

    lo_t, hi_t = crit.band
    target = math.sqrt(lo_t * hi_t)
    e_lo = e_hi = None
    exc = 1.0
    it = 0
    while it < max_iter:
        w = base.scaled(exc, inh)
        st = evaluate(w)
        it += 1
        if meets_edge(st, crit):
            return w
        r = st["stim_rate"]
        if lo_t <= r <= hi_t:
            # in band but activity persists: more inhibition, re-bracket
            inh *= 1.6
            e_lo = e_hi = None
            continue
        if r < lo_t:
            e_lo = exc
        else:
            e_hi = exc
        if e_lo is not None and e_hi is not None:
            exc = math.sqrt(e_lo * e_hi)
        elif e_lo is not None:
            exc *= 2.0 if r < 0.2 * target else 1.4
        else:
            exc /= 2.0 if r > 5 * target else 1.4
    raise TuningFailed(f"no weight scaling met the criteria in {max_iter} evaluations; last {history[-1]}")


# ---------------------------------------------------------------------------
# Run config persistence
# ---------------------------------------------------------------------------


def save_model_state(path: str | Path, params: NeuronParams, weights: WeightTable, extra: dict | None = None):
    Path(path).write_text(
        json.dumps({"params": params.to_dict(), "weights": weights.to_dict(), **(extra or {})})
    )


def load_model_state(path: str | Path):
    d = json.loads(Path(path).read_text())
    return NeuronParams.from_dict(d["params"]), WeightTable.from_dict(d["weights"]), d
