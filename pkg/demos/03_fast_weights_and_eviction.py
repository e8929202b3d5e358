#!/usr/bin/env python3
"""The two memories side by side: an evictable KV cache and fast weights.

Writes a few (key, value) pairs into a fast-weight matrix and reads them
back; then shows what hard and sliding eviction leave behind in the
attention cache, and that the fast-weight state never grows with sequence
length.
"""

import numpy as np

from sleepnet import tensor as T
from sleepnet import layers, mixers

F64 = np.float64

# --- fast weights: write with an outer product, read with a query ---------
dh = 8
e = np.eye(dh)
keys = e[[0, 3, 5]]
vals = np.array([e[1], e[2], e[4]])
q = T.Tensor(keys[None, None], dtype=F64)           # query back the same keys
k = T.Tensor(keys[None, None], dtype=F64)
v = T.Tensor(vals[None, None], dtype=F64)
alpha = T.Tensor(np.ones((1, 1, 3)), dtype=F64)     # no forgetting
beta = T.Tensor(np.ones((1, 1, 3)), dtype=F64)      # full writes
s0 = T.zeros((1, 1, dh, dh), dtype=F64)
out, s_final = mixers.fast_weight_scan(q, k, v, alpha, beta, s0)
print("fast-weight reads (each row should equal the written value):")
for i in range(3):
    print(f"  wrote e{np.argmax(vals[i])} at key e{np.argmax(keys[i])}, "
          f"read back -> e{np.argmax(out.data[0, 0, i])}")

# --- the state is a fixed-size matrix, whatever the sequence length -------
cfg = layers.ModelConfig(depth=2, dim=16, heads=2, layout=("attn", "ssm"),
                         vocab=4, window=8, dtype="float64")
model = layers.init_model(cfg, seed=0)
ssm = model.blocks[1].mixer
for t_len in (10, 100, 1000):
    x = T.Tensor(np.random.default_rng(t_len).standard_normal((1, t_len, 16)), dtype=F64)
    s = mixers.init_fast_weights(1, cfg.heads, 8, np.float64)
    _, s2 = mixers.ssm_forward(ssm, x, s, cfg)
    print(f"fast-weight state after {t_len:4d} tokens: {s2.data.nbytes} bytes")

# --- eviction policies -----------------------------------------------------
cache = mixers.empty_cache()
kk = T.Tensor(np.random.default_rng(1).standard_normal((1, 2, 8, 8)), dtype=F64)
vv = T.Tensor(np.random.default_rng(2).standard_normal((1, 2, 8, 8)), dtype=F64)
cache = cache.extended(kk, vv, np.arange(8))
print(f"\ncache holds rows at positions {cache.positions().tolist()}")
hard = mixers.evict(cache, "hard", window=8)
slid = mixers.evict(cache, "sliding", window=8)
print(f"after hard eviction:    {hard.rows} rows")
print(f"after sliding eviction: {slid.rows} rows at positions {slid.positions().tolist()}")
