"""Vector-quantized acoustic unit discovery on a synthetic corpus.

Subpackages: corpus generation and features (`corpus`), the differentiable
op core (`autograd`), the VQ bottleneck (`quantize`), training losses
(`objectives`), the three models and their training loops (`models`), the
zero-resource evaluation stack (`eval`), and the command line (`cli`).
"""

__version__ = "0.1.0"

VERSION_STRING = f"v{__version__}"
