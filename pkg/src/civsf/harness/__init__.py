from civsf.harness.config import Config, from_file, from_overrides

__all__ = ["Config", "from_file", "from_overrides"]
