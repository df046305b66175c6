from .seeding import SeedUtils
from .config import Config, RunConfig, load_run_config

__all__ = ['SeedUtils', 'Config', 'RunConfig', 'load_run_config']
