"""Measure and mitigate concept forgetting when fine-tuning a two-tower encoder.

Modules: ``autodiff`` (reverse-mode engine), ``nets`` (encoder and snapshots),
``datagen`` (synthetic concept tasks), ``pretrain`` (contrastive foundation),
``finetune`` (the fine-tuning methods), ``evaluate`` (ZS/LP accuracy and
forgetting deltas) and ``runner`` (plans, registry, reports).
"""

__version__ = "0.1.0"
