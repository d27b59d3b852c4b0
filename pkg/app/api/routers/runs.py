from __future__ import annotations

import logging

from fastapi import APIRouter, Body, Depends, HTTPException, Path, status

from app.core.config import Settings, get_settings
from app.deps import RunAnalysis, get_run_state_service, get_workflow_runner
from app.models.run_config import parse_config
from app.models.schemas import RunRequest, RunResponse
from app.services.run_state_service import RunState, RunStateService

router = APIRouter(prefix="/runs", tags=["runs"])
logger = logging.getLogger(__name__)


def _response(state: RunState) -> RunResponse:
    return RunResponse(
        run_id=state.id,
        subcommand=state.subcommand,
        completed=state.completed,
        steps=state.steps,
        manifest=state.manifest,
        error=state.error,
    )


@router.post(
    "",
    response_model=RunResponse,
    status_code=status.HTTP_201_CREATED,
    summary="Run one analysis subcommand (or `all`) for an inline run configuration",
)
async def create_run(
    payload: RunRequest = Body(...),
    runs: RunStateService = Depends(get_run_state_service),
    runner: RunAnalysis = Depends(get_workflow_runner),
    settings: Settings = Depends(get_settings),
) -> RunResponse:
    try:
        config = parse_config(payload.config)
        outcome = runner(config, payload.subcommand, settings.threads)
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    except Exception as e:
        logger.exception("Run failed: %s", e)
        raise HTTPException(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail="Run failed")

    state = runs.create_run(payload.subcommand)
    state.record_outcome(outcome)
    runs.cleanup_expired()
    return _response(state)


@router.get("/{run_id}", response_model=RunResponse, summary="Step statuses and manifest of a stored run")
async def get_run(
    run_id: str = Path(..., description="Identifier returned by POST /runs"),
    runs: RunStateService = Depends(get_run_state_service),
) -> RunResponse:
    state = runs.get_run(run_id)
    if state is None:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail=f"Run {run_id} not found or expired")
    return _response(state)
