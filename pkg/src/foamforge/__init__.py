"""Natural-language to OpenFOAM case orchestration."""

from .models import CaseState, Config, FoamFile
from .workflow import WorkflowEngine, run_workflow

__all__ = ["CaseState", "Config", "FoamFile", "WorkflowEngine", "run_workflow"]
__version__ = "0.1.0"
