from __future__ import annotations

import logging
import uuid
from datetime import datetime, timedelta, timezone
from typing import Dict, List, Optional

from app.models.schemas import StepStatus
from app.services.workflow_service import WorkflowOutcome

logger = logging.getLogger(__name__)


def _now() -> datetime:
    return datetime.now(timezone.utc)


class RunState:
    def __init__(self, subcommand: str) -> None:
        self.id = str(uuid.uuid4())
        self.subcommand = subcommand
        self.created_at = _now()
        self.steps: List[StepStatus] = []
        self.manifest: Dict[str, str] = {}
        self.completed = False
        self.error: Optional[str] = None

    def is_expired(self, ttl_minutes: int = 60) -> bool:
        return _now() > self.created_at + timedelta(minutes=ttl_minutes)

    def record_outcome(self, outcome: WorkflowOutcome) -> None:
        self.steps = list(outcome.bundle.steps)
        self.manifest = outcome.bundle.manifest()
        if outcome.failure is None:
            self.completed = True
        else:
            self.mark_error(str(outcome.failure))
        logger.info("Run %s finished completed=%s steps=%d", self.id, self.completed, len(self.steps))

    def mark_error(self, error: str) -> None:
        self.error = error
        self.completed = False


class RunStateService:
    """In-memory registry of runs submitted over HTTP; entries expire after ``ttl_minutes``."""

    def __init__(self, ttl_minutes: int = 60) -> None:
        self._ttl = ttl_minutes
        self._states: Dict[str, RunState] = {}

    def create_run(self, subcommand: str) -> RunState:
        state = RunState(subcommand)
        self._states[state.id] = state
        logger.info("Created run %s subcommand=%s", state.id, subcommand)
        return state

    def get_run(self, run_id: str) -> Optional[RunState]:
        state = self._states.get(run_id)
        if state and state.is_expired(self._ttl):
            self.cleanup_run(run_id)
            return None
        return state

    def cleanup_run(self, run_id: str) -> None:
        if run_id in self._states:
            del self._states[run_id]
            logger.info("Cleaned up run %s", run_id)

    def cleanup_expired(self) -> int:
        """Drop expired runs; returns how many were removed."""
        expired = [run_id for run_id, state in self._states.items() if state.is_expired(self._ttl)]
        for run_id in expired:
            self.cleanup_run(run_id)
        return len(expired)
