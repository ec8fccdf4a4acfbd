"""Cross-entropy search for near-miss/collision adversary path pairs and a learned collision property."""
from importlib import resources

__version__ = "0.1.0"


def shipped_config(name: str = "reference") -> str:
    """Path of a config file that ships with the package (``reference`` or ``small``)."""
    return str(resources.files(__name__) / "configs" / f"{name}.yaml")
