"""Procedural task generators with exact oracles.

Two tasks: a cellular-automaton rollout task (predict the first bit of each
of M random states after t transitions of rule 110, periodic boundary) and
a shuffled directed-cycle retrieval task (answer "k hops after u" queries
over a cycle whose edges were shown in shuffled order).

Both generators are pure functions of (spec, rng): the same seed always
yields the same sample byte for byte.  The loss mask is 1 exactly on answer
token positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

RULE = 110                  # shared by generator and step function
BOUNDARY = "periodic"       # wrap-around neighborhoods keep the width fixed
_RULE_TABLE = np.array([(RULE >> i) & 1 for i in range(8)], dtype=np.int64)


@dataclass
class AutomatonSpec:
    """Layout: M random W-bit states back to back, then M answer bits.

    The answer for state i is its first bit after ``steps`` transitions.
    No separator tokens are emitted; eviction boundaries come from the
    engine's window, so total length is exactly W*M + M.
    """

    width: int = 24
    states: int = 4
    steps: int = 8

    def total_length(self):
        return self.width * self.states + self.states

    def vocab_size(self):
        return 2

    def to_dict(self):
        return {"task": "automaton", **asdict(self)}


@dataclass
class DepoSpec:
    """Shuffled directed cycle, left-padded, followed by hop queries.

    Each edge renders as 4 tokens (u -> v ,) and the cycle region is
    left-padded to ``cycle_budget`` tokens.  Each of the ``queries`` queries
    renders as 6 tokens (k hop|hops after u : a) with k a single number
    token, so the query region is exactly 6 * queries tokens.
    """

    max_nodes: int = 75
    min_nodes: int = 5
    cycle_budget: int = 300
    queries: int = 10
    query_budget: int = 60
    hops: tuple = (1, 16)
    fixed_hops: int | None = None   # evaluation sets pin k for every query

    def __post_init__(self):
        self.hops = tuple(self.hops)
        if 4 * self.max_nodes > self.cycle_budget:
            raise ValueError("cycle budget too small for max_nodes")
        if 6 * self.queries > self.query_budget:
            raise ValueError("query budget too small for query count")

    def total_length(self):
        return self.cycle_budget + 6 * self.queries

    def vocab_size(self):
        return NODE_BASE + self.max_nodes

    def to_dict(self):
        d = {"task": "depo", **asdict(self)}
        d["hops"] = list(self.hops)
        return d


# depo token table; node ids live at NODE_BASE + id
PAD, ARROW, COMMA, COLON, HOP, HOPS, AFTER = range(7)
NUM_BASE = 7                 # number tokens "1".."16" -> 7..22
MAX_HOP_TOKEN = 16
NODE_BASE = NUM_BASE + MAX_HOP_TOKEN


@dataclass
class TaskSample:
    tokens: np.ndarray
    mask: np.ndarray
    meta: dict


def spec_from_dict(d):
    d = dict(d)
    kind = d.pop("task")
    if kind == "automaton":
        return AutomatonSpec(**d)
    if kind == "depo":
        d["hops"] = tuple(d.get("hops", (1, 16)))
        return DepoSpec(**d)
    raise ValueError(f"unknown task kind {kind!r}")


# ---------------------------------------------------------------------------
# rule 110
# ---------------------------------------------------------------------------


def rule110_step(state):
    """One transition of rule 110 on a bit string, periodic boundary.

    Each cell's next value is bit (4*left + 2*self + right) of the rule
    number.
    """
    if not state:
        raise ValueError("empty state")
    if set(state) - {"0", "1"}:
        raise ValueError(f"non-binary characters in state {state!r}")
    bits = np.frombuffer(state.encode(), dtype=np.uint8) - ord("0")
    out = _rule110_rows(bits[None, :].astype(np.int64))[0]
    return "".join("01"[b] for b in out)


def _rule110_rows(states):
    """Vectorized transition on an integer array of shape [n, W]."""
    left = np.roll(states, 1, axis=1)
    right = np.roll(states, -1, axis=1)
    return _RULE_TABLE[4 * left + 2 * states + right]


def gen_automaton(spec, rng):
    """One sample: M uniform random states, answers after t transitions."""
    states = rng.integers(0, 2, size=(spec.states, spec.width))
    rolled = states.copy()
    for _ in range(spec.steps):
        rolled = _rule110_rows(rolled)
    labels = rolled[:, 0]
    tokens = np.concatenate([states.reshape(-1), labels]).astype(np.int64)
    mask = np.zeros(tokens.shape[0], dtype=np.int64)
    mask[-spec.states:] = 1
    return TaskSample(tokens=tokens, mask=mask, meta={"t": spec.steps})


# ---------------------------------------------------------------------------
# depo
# ---------------------------------------------------------------------------


def khop_oracle(edges, start, k):
    """Follow the out-edge pointer k times; every node has out-degree 1."""
    node = start
    for _ in range(k):
        if node not in edges:
            raise KeyError(f"node {node} has no outgoing edge")
        node = edges[node]
    return node


def gen_depo(spec, rng):
    """One sample: shuffled cycle edges, left-padded, then hop queries.

    Every query samples (k, start) independently; answers come from the
    generated successor map.  The mask marks only the answer-node tokens.
    """
    n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
    node_ids = rng.permutation(spec.max_nodes)[:n]
    succ = {int(node_ids[i]): int(node_ids[(i + 1) % n]) for i in range(n)}

    edge_order = rng.permutation(n)
    cycle_tokens = []
    for e in edge_order:
        u = int(node_ids[e])
        cycle_tokens += [NODE_BASE + u, ARROW, NODE_BASE + succ[u], COMMA]
    pad = spec.cycle_budget - len(cycle_tokens)
    cycle_tokens = [PAD] * pad + cycle_tokens

    lo, hi = spec.hops
    tokens = list(cycle_tokens)
    mask = [0] * len(cycle_tokens)
    ks = []
    for _ in range(spec.queries):
        k = spec.fixed_hops if spec.fixed_hops is not None else int(rng.integers(lo, hi + 1))
        start = int(node_ids[rng.integers(0, n)])
        answer = khop_oracle(succ, start, k)
        tokens += [NUM_BASE + k - 1, HOP if k == 1 else HOPS, AFTER,
                   NODE_BASE + start, COLON, NODE_BASE + answer]
        mask += [0, 0, 0, 0, 0, 1]
        ks.append(k)
    return TaskSample(
        tokens=np.asarray(tokens, dtype=np.int64),
        mask=np.asarray(mask, dtype=np.int64),
        meta={"k": ks, "n_nodes": n},
    )


def parse_depo_sample(tokens, cycle_budget):
    """Structural parse back to (successor map, queries); used by oracles."""
    tokens = np.asarray(tokens)
    edges = {}
    region = tokens[:cycle_budget]
    i = 0
    while i < cycle_budget:
        if region[i] == PAD:
            i += 1
            continue
        u, arrow, v, comma = region[i:i + 4]
        assert arrow == ARROW and comma == COMMA
        edges[int(u) - NODE_BASE] = int(v) - NODE_BASE
        i += 4
    queries = []
    i = cycle_budget
    while i < len(tokens):
        k_tok, hop_tok, after, u, colon, a = tokens[i:i + 6]
        assert after == AFTER and colon == COLON
        queries.append((int(k_tok) - NUM_BASE + 1, int(u) - NODE_BASE, int(a) - NODE_BASE, i + 5))
        i += 6
    return edges, queries


def generate(spec, seed):
    """Seeded single-sample convenience wrapper."""
    rng = np.random.default_rng(seed)
    if isinstance(spec, AutomatonSpec):
        return gen_automaton(spec, rng)
    return gen_depo(spec, rng)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

DATASET_VERSION = 1


def write_dataset(path, spec, seeds):
    """Newline-delimited records plus a sidecar header for audit."""
    path = str(path)
    with open(path, "w") as f:
        for seed in seeds:
            s = generate(spec, seed)
            f.write(json.dumps({
                "tokens": s.tokens.tolist(),
                "mask": s.mask.tolist(),
                "meta": s.meta,
            }) + "\n")
    header = {
        "format_version": DATASET_VERSION,
        "spec": spec.to_dict(),
        "seed_range": [int(min(seeds)), int(max(seeds))],
        "count": len(list(seeds)),
    }
    with open(path + ".header.json", "w") as f:
        json.dump(header, f, indent=2)


def read_dataset(path):
    path = str(path)
    with open(path + ".header.json") as f:
        header = json.load(f)
    if header["format_version"] != DATASET_VERSION:
        raise ValueError(f"dataset format version {header['format_version']} != {DATASET_VERSION}")
    samples = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            samples.append(TaskSample(
                tokens=np.asarray(rec["tokens"], dtype=np.int64),
                mask=np.asarray(rec["mask"], dtype=np.int64),
                meta=rec["meta"],
            ))
    return header, samples
