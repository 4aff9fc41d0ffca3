import os
import warnings

from dotenv import load_dotenv

basedir = os.path.abspath(os.path.dirname(__file__))
load_dotenv(os.path.join(basedir, ".env"))


def _flag(name, default):
    return os.environ.get(name, default).lower() in ["true", "on", "1"]


class Config:
    # Logging configuration
    LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO")
    LOG_TO_CONSOLE = _flag("LOG_TO_CONSOLE", "True")
    LOG_TO_FILE = _flag("LOG_TO_FILE", "True")
    LOG_DIR = os.environ.get("LOG_DIR", "logs")
    SLOW_STAGE_THRESHOLD = float(os.environ.get("SLOW_STAGE_THRESHOLD", "30.0"))

    # Experiment output
    PROGRESS_BARS = _flag("PROGRESS_BARS", "True")
    EXPERIMENT_CONFIG = os.environ.get("EXPERIMENT_CONFIG")  # default YAML file, optional

    # Environment detection
    CIL_ENV = os.environ.get("CIL_ENV", "development")
    DEBUG = CIL_ENV == "development"
    TESTING = False

    def __init__(self):
        """Resolve paths that depend on the working directory"""
        self.OUTPUT_DIR = self._build_output_dir()

    def _build_output_dir(self):
        output_dir = os.environ.get("OUTPUT_DIR")
        if output_dir:
            return output_dir
        return os.path.join(basedir, "runs")

    def get(self, key, default=None):
        return getattr(self, key, default)


class DevelopmentConfig(Config):
    """Development configuration with helpful defaults"""

    DEBUG = True


class ProductionConfig(Config):
    """Batch/cluster configuration: plain log format, no progress bars"""

    DEBUG = False
    PROGRESS_BARS = _flag("PROGRESS_BARS", "False")

    def __init__(self):
        super().__init__()

        if not os.environ.get("OUTPUT_DIR"):
            warnings.warn(
                "OUTPUT_DIR not explicitly set! Runs will be written inside the repository.",
                UserWarning,
            )


class TestingConfig(Config):
    """Testing configuration"""

    TESTING = True
    LOG_LEVEL = "WARNING"
    LOG_TO_FILE = False
    PROGRESS_BARS = False


# Configuration mapping
config = {
    "development": DevelopmentConfig,
    "production": ProductionConfig,
    "testing": TestingConfig,
    "default": DevelopmentConfig,
}
