"""Configuration, model packages, the pipeline driver and the ``ampse`` command."""

from .config import PipelineConfig, default_config, from_dict, parse_config
from .package import ModelPackage, export_package, import_package
from .pipeline import run_pipeline

__all__ = ["ModelPackage", "PipelineConfig", "default_config", "export_package", "from_dict", "import_package",
           "parse_config", "run_pipeline"]
