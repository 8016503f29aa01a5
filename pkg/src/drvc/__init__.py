"""Any-to-any voice conversion with disentangled content/style codes trained
through a double style exchange (cycle), same-code, domain and adversarial
losses."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def preset_path(name: str) -> Path:
    """Path of a bundled config preset, e.g. ``preset_path("toy")``."""
    return Path(str(resources.files(__package__).joinpath("presets", f"{name}.yaml")))
