"""peftcap: a desk-scale vision-language captioner with pluggable
parameter-efficient tuning (bottleneck adapters, LoRA, bias-only tuning,
explicit visual prompts), exact trainable-parameter audits, and BLEU-4 /
CIDEr evaluation."""

from .autodiff import Tensor, Tape, backward, finite_diff_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "finite_diff_check", "__version__"]
