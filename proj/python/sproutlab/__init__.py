"""Python access to the sproutlab C++ core."""

from ._sproutlab import *  # noqa: F401,F403
from ._sproutlab import __version__  # noqa: F401
