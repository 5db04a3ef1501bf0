"""Dual-binarization quantization toolkit.

Splits 2-bit weights into two scaled {0,1} bit planes with sparse bitwise
forward kernels, fine-tunes the scale pairs with entropy-reweighted
data-free distillation, and reports perplexity, sparsity, effective bits,
cost-model, and loss-landscape numbers on a desk-scale decoder-only
transformer.
"""

__version__ = "0.1.0"
