from functools import lru_cache
from typing import Callable

from app.core.config import Settings, get_settings
from app.models.run_config import RunConfig
from app.services.run_state_service import RunStateService
from app.services.workflow_service import WorkflowOutcome, run_analysis

RunAnalysis = Callable[[RunConfig, str, int], WorkflowOutcome]


@lru_cache(maxsize=1)
def get_run_state_service() -> RunStateService:
    settings: Settings = get_settings()
    return RunStateService(ttl_minutes=settings.run_ttl_minutes)


def get_workflow_runner() -> RunAnalysis:
    return run_analysis
