"""expflow: declarative, reproducible experiment pipelines."""

from expflow.errors import ExpflowError, RunError, SpecError
from expflow.project import load_project

__version__ = "0.1.0"

__all__ = ["ExpflowError", "RunError", "SpecError", "load_project", "__version__"]
