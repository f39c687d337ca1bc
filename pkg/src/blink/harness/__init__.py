from .config import ConfigError, HarnessConfig, config_hash, load_config

__all__ = ["ConfigError", "HarnessConfig", "config_hash", "load_config"]
