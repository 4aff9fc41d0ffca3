import logging
import os

from config import config

logger = logging.getLogger(__name__)

__version__ = "0.3.0"


def create_context(config_name=None):
    """Resolve runtime settings and configure logging for one process"""

    # Determine configuration
    if config_name is None:
        config_name = os.environ.get("CIL_CONFIG", "default")
    if config_name not in config:
        raise KeyError(f"unknown configuration {config_name!r}; choose from {sorted(config)}")

    settings = config[config_name]()

    # Setup logging
    from cilkit.utils.logging_config import setup_logging
    from cilkit.utils.performance import configure as configure_performance

    setup_logging(settings)
    configure_performance(settings)

    logger.debug(f"cilkit {__version__} starting with '{config_name}' configuration")
    return settings
