"""Sleep-like memory consolidation for attention/fast-weight hybrid models.

The package is organized bottom-up:

- :mod:`sleepnet.tensor` -- dense tensors with reverse-mode autodiff on a tape
- :mod:`sleepnet.layers` -- embedding, RMS norm, gated MLP, block assembly
- :mod:`sleepnet.mixers` -- windowed attention (evictable KV cache) and the
  gated fast-weight recurrence
- :mod:`sleepnet.engine` -- chunking, N offline sleep passes, eviction,
  single-pass prediction
- :mod:`sleepnet.tasks` -- automaton rollout and cycle-retrieval generators
  with exact oracles
- :mod:`sleepnet.optim` -- AdamW and orthogonalized-momentum updates
- :mod:`sleepnet.harness` -- training, evaluation, benchmarking, gradcheck,
  checkpoints
"""

from .tensor import Tensor, Tape, backward
from .layers import ModelConfig, init_model
from .engine import SleepConfig, plan_phases, run_sequence
from .harness import RunConfig

__all__ = [
    "Tensor", "Tape", "backward",
    "ModelConfig", "init_model",
    "SleepConfig", "plan_phases", "run_sequence",
    "RunConfig",
]

__version__ = "0.1.0"
