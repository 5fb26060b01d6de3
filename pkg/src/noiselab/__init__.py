"""noiselab: low-light sensor noise synthesis and verification.

Physics-based camera noise models, conditional diffusion noise generators
with variance-preserving schedules, MMSE shrinkage analytics, and the
statistical evaluation protocol tying them together.
"""

__version__ = "0.1.0"

from .rng import Rng  # noqa: F401
from .tensor import Tensor  # noqa: F401
