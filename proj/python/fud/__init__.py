"""Feature unlearning toolkit: python bindings over the C++ core."""

from fud._core import *  # noqa: F401,F403
from fud._core import __doc__ as _core_doc

__doc__ = _core_doc or __doc__
