"""Random three-population network: input expansion, excitatory, inhibitory.

Neuron ids are laid out contiguously: input expansion first, then the
excitatory and finally the inhibitory population.  Connections are stored as
parallel arrays ``(pre, post, syn_type, multiplicity)`` with duplicate
``(pre, post, type)`` draws merged into the multiplicity count.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InfeasibleConstraint

EXC_FAST, EXC_SLOW, INH_FAST, INH_SLOW = 0, 1, 2, 3
SYN_TYPES = ("exc_fast", "exc_slow", "inh_fast", "inh_slow")
EXCITATORY_TYPES = (EXC_FAST, EXC_SLOW)
INHIBITORY_TYPES = (INH_FAST, INH_SLOW)

POPULATIONS = ("input", "excitatory", "inhibitory")
TOPOLOGY_VERSION = 1

# Connectivity stated alongside the fan-in counts in the source description.
# The inhibitory->excitatory figure disagrees with 16/128.
STATED_DENSITY = {
    ("input", "excitatory"): 0.125,
    ("excitatory", "excitatory"): 0.0625,
    ("excitatory", "inhibitory"): 0.125,
    ("inhibitory", "excitatory"): 0.031,
}


@dataclass(frozen=True)
class TopologyParams:
    n_input: int = 128
    n_exc: int = 512
    n_inh: int = 128
    n_lines: int = 4
    input_fanin_max: int = 64
    exc_from_input: int = 16
    exc_from_exc: int = 32
    exc_from_inh: int = 16
    inh_from_exc: int = 64
    max_sources: int = 64  # distinct presynaptic sources (hardware_fidelity)
    syn_line_input: int = EXC_FAST
    syn_input_exc: int = EXC_FAST
    syn_exc_exc: int = EXC_FAST
    syn_inh_exc: int = INH_FAST
    syn_exc_inh: int = EXC_FAST

    @property
    def n_neurons(self) -> int:
        return self.n_input + self.n_exc + self.n_inh

    def pop_slices(self) -> dict[str, slice]:
        a, b = self.n_input, self.n_input + self.n_exc
        return {"input": slice(0, a), "excitatory": slice(a, b), "inhibitory": slice(b, self.n_neurons)}


@dataclass
class NetworkTopology:
    params: TopologyParams
    pre: np.ndarray
    post: np.ndarray
    syn_type: np.ndarray
    multiplicity: np.ndarray
    input_line: np.ndarray  # per input-expansion neuron
    input_mult: np.ndarray  # synapses onto that line, 1..64
    seed: int | None = None
    mode: str = "free"
    meta: dict = field(default_factory=dict)

    @property
    def n_neurons(self) -> int:
        return self.params.n_neurons

    def population_of(self) -> np.ndarray:
        """Population index (0 input, 1 exc, 2 inh) per neuron."""
        p = self.params
        return np.repeat(np.arange(3), [p.n_input, p.n_exc, p.n_inh])

    def in_degree(self, src_pop: str, dst_pop: str) -> np.ndarray:
        """Afferent connection count (with multiplicity) per neuron of ``dst_pop``."""
        sl = self.params.pop_slices()
        s, d = sl[src_pop], sl[dst_pop]
        m = (self.pre >= s.start) & (self.pre < s.stop) & (self.post >= d.start) & (self.post < d.stop)
        return np.bincount(self.post[m] - d.start, weights=self.multiplicity[m], minlength=d.stop - d.start).astype(int)

    def distinct_sources(self) -> np.ndarray:
        """Number of distinct presynaptic neurons per neuron (input lines count as sources)."""
        out = np.zeros(self.n_neurons, dtype=int)
        pairs = np.unique(np.stack([self.post, self.pre]), axis=1)
        np.add.at(out, pairs[0], 1)
        out[: self.params.n_input] += (self.input_mult > 0).astype(int)
        return out

    # --- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": TOPOLOGY_VERSION,
            "seed": self.seed,
            "mode": self.mode,
            "params": asdict(self.params),
            "populations": {
                "input_expansion": self.params.n_input,
                "excitatory": self.params.n_exc,
                "inhibitory": self.params.n_inh,
            },
            "synapse_types": list(SYN_TYPES),
            "edges": np.stack([self.pre, self.post, self.syn_type, self.multiplicity], axis=1).tolist(),
            "input_map": np.stack([self.input_line, self.input_mult], axis=1).tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkTopology":
        if d.get("version") != TOPOLOGY_VERSION:
            raise ValueError(f"unsupported topology version {d.get('version')}")
        e = np.asarray(d["edges"], dtype=np.int64).reshape(-1, 4)
        im = np.asarray(d["input_map"], dtype=np.int64).reshape(-1, 2)
        return cls(
            TopologyParams(**d["params"]),
            e[:, 0], e[:, 1], e[:, 2], e[:, 3], im[:, 0], im[:, 1],
            d.get("seed"), d.get("mode", "free"), d.get("meta", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "NetworkTopology":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _draw_sources(rng, n_conn: int, pool: np.ndarray, cap: int | None) -> np.ndarray:
    if n_conn == 0:
        return np.empty(0, dtype=np.int64)
    if cap is None or pool.size <= cap:
        return rng.choice(pool, size=n_conn, replace=True)
    chosen = rng.choice(pool, size=min(cap, n_conn), replace=False)
    return rng.choice(chosen, size=n_conn, replace=True) if n_conn > chosen.size else chosen


def build(seed: int, mode: str = "free", params: TopologyParams | None = None) -> NetworkTopology:
    """Draw a random network with exact per-neuron fan-in counts."""
    p = params or TopologyParams()
    if mode not in ("free", "hardware_fidelity"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    sl = p.pop_slices()
    inp = np.arange(sl["input"].start, sl["input"].stop)
    exc = np.arange(sl["excitatory"].start, sl["excitatory"].stop)
    inh = np.arange(sl["inhibitory"].start, sl["inhibitory"].stop)

    cap_total = None
    if mode == "hardware_fidelity":
        n_pops = sum(1 for c in (p.exc_from_input, p.exc_from_exc, p.exc_from_inh) if c > 0)
        if p.max_sources < max(n_pops, 1 if p.inh_from_exc else 0):
            raise InfeasibleConstraint(
                f"{p.max_sources} distinct sources cannot cover {n_pops} presynaptic populations"
            )
        cap_total = p.max_sources

    if p.n_input and p.n_lines <= 0:
        raise InfeasibleConstraint("input expansion layer needs at least one input line")
    input_line = rng.integers(0, max(p.n_lines, 1), size=p.n_input)
    input_mult = rng.integers(1, p.input_fanin_max + 1, size=p.n_input) if p.input_fanin_max > 0 else np.zeros(p.n_input, int)

    pres, posts, types = [], [], []

    def add(src, dst, syn):
        pres.append(src)
        posts.append(np.full(src.size, dst, dtype=np.int64))
        types.append(np.full(src.size, syn, dtype=np.int64))

    exc_counts = (p.exc_from_input, p.exc_from_exc, p.exc_from_inh)
    for post in exc:
        caps = _split_cap(cap_total, exc_counts)
        add(_draw_sources(rng, p.exc_from_input, inp, caps[0]), post, p.syn_input_exc)
        others = exc[exc != post]
        add(_draw_sources(rng, p.exc_from_exc, others, caps[1]), post, p.syn_exc_exc)
        add(_draw_sources(rng, p.exc_from_inh, inh, caps[2]), post, p.syn_inh_exc)
    for post in inh:
        add(_draw_sources(rng, p.inh_from_exc, exc, cap_total), post, p.syn_exc_inh)

    if pres:
        pre = np.concatenate(pres)
        post = np.concatenate(posts)
        typ = np.concatenate(types)
        key = np.stack([post, pre, typ], axis=1)
        uniq, mult = np.unique(key, axis=0, return_counts=True)
        post, pre, typ = uniq[:, 0], uniq[:, 1], uniq[:, 2]
    else:
        pre = post = typ = mult = np.empty(0, dtype=np.int64)

    topo = NetworkTopology(p, pre, post, typ, mult.astype(np.int64), input_line.astype(np.int64),
                           input_mult.astype(np.int64), seed, mode)
    if mode == "hardware_fidelity" and topo.distinct_sources().max(initial=0) > p.max_sources:
        raise InfeasibleConstraint("distinct-source cap violated")
    return topo


def _split_cap(cap: int | None, counts) -> list[int | None]:
    """Share a distinct-source budget across presynaptic populations."""
    if cap is None:
        return [None] * len(counts)
    total = sum(counts)
    if total <= cap:
        return [None] * len(counts)
    active = [c for c in counts if c > 0]
    shares = [max(1, cap * c // total) if c > 0 else 0 for c in counts]
    while sum(shares) > cap:
        i = int(np.argmax(shares))
        shares[i] -= 1
    if any(c > 0 and s == 0 for c, s in zip(counts, shares)) or len(active) > cap:
        raise InfeasibleConstraint("distinct-source cap too small")
    return shares


def connectivity_report(t: NetworkTopology) -> dict:
    """Connection density between every ordered pair of populations.

    ``density(A -> B)`` is the mean number of afferents a B neuron receives
    from A, divided by the size of A.
    """
    sizes = {"input": t.params.n_input, "excitatory": t.params.n_exc, "inhibitory": t.params.n_inh}
    dens = {}
    for a in POPULATIONS:
        for b in POPULATIONS:
            deg = t.in_degree(a, b)
            dens[f"{a}->{b}"] = float(deg.mean() / sizes[a]) if deg.size and sizes[a] else 0.0
    notes = []
    for (a, b), stated in STATED_DENSITY.items():
        got = dens[f"{a}->{b}"]
        if got and abs(got - stated) > 0.005:
            notes.append(
                f"{a}->{b}: fan-in counts give {got:.2%}, stated connectivity is {stated:.1%}"
            )
    return {"density": dens, "notes": notes}
