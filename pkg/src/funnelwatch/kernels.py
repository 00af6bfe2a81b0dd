"""Hot-loop kernels, backed by the compiled extension when it is importable.

Set ``FUNNELWATCH_PURE_PYTHON=1`` to force the pure-Python fallback. Both
backends return bit-identical results; ``BACKEND`` names the one in use.
"""

import os

from . import _pykernels

python = _pykernels
compiled = None
if not os.environ.get("FUNNELWATCH_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else _pykernels
BACKEND = "cython" if compiled is not None else "python"

OK = _pykernels.OK
CORRECTED = _pykernels.CORRECTED
BAD_POPULATION = _pykernels.BAD_POPULATION
INCONSISTENT = _pykernels.INCONSISTENT
BOUNDARY = _pykernels.BOUNDARY

neumaier_sum = _impl.neumaier_sum
excess_log_odds = _impl.excess_log_odds
dl_fit = _impl.dl_fit
flag = _impl.flag
binomial_inversion = _impl.binomial_inversion
