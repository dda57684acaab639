from importlib import metadata
from urllib.request import urlopen


_conf_url = \
        "https://raw.githubusercontent.com/inducer/sphinxconfig/main/sphinxconfig.py"
with urlopen(_conf_url) as _inf:
    exec(compile(_inf.read(), _conf_url, "exec"), globals())

copyright = "2024, fedpriv contributors"
author = "fedpriv contributors"
release = metadata.version("fedpriv")
version = ".".join(release.split(".")[:2])

intersphinx_mapping = {
        "numpy": ("https://numpy.org/doc/stable/", None),
        "python": ("https://docs.python.org/3/", None),
        "pytools": ("https://documen.tician.de/pytools/", None),
        "scipy": ("https://docs.scipy.org/doc/scipy/", None),
        "sklearn": ("https://scikit-learn.org/stable/", None),
}

nitpick_ignore_regex = [
    ["py:class", r"np\.ndarray"],
]
