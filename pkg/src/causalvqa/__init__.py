"""Causal intervention mechanisms for video question answering.

Subpackages operate on precomputed clip/question/answer feature vectors:

- ``features``: dataset manifests, binary payloads, synthetic generation
- ``nn_core``: float64 forward/backward numeric primitives
- ``pcma``: the cross-modal attention answering model
- ``mnse``: memory bank of scene vectors with nearest-neighbor lookup
- ``intervention``: mixup-based scene interventions and contrastive loss
- ``samplers``: frame selection strategies (moment-aware, resampling, learned)
- ``harness``: training loops, evaluation protocols, CLI entry points
"""

__version__ = "0.1.0"
