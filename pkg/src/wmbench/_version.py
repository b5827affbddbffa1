"""Version information for wmbench."""

import importlib.metadata

try:
    __version__ = importlib.metadata.version("wmbench")
except importlib.metadata.PackageNotFoundError:
    # Fallback version if package not installed
    __version__ = "0.1.0-dev"
