"""Language extension toolkit: a frozen multilingual recognizer plus
per-language parameter-efficient add-on modules."""

try:
    from pele._core import *  # noqa: F401,F403  (installed layout)
    from pele._core import __version__  # noqa: F401
except ImportError:  # build-tree layout: extension module on sys.path
    from _core import *  # noqa: F401,F403
    from _core import __version__  # noqa: F401
