from __future__ import annotations

import logging

from fastapi import APIRouter, Body, HTTPException, status

from app.models.schemas import InferenceRequest, InferenceSummary
from app.services.estimators import summarize_inference

router = APIRouter(prefix="/inference", tags=["inference"])
logger = logging.getLogger(__name__)


@router.post(
    "/summarize",
    response_model=InferenceSummary,
    summary="z or t statistic, two-sided p-value and 95% interval for an estimate and its SE",
)
async def summarize(payload: InferenceRequest = Body(...)) -> InferenceSummary:
    try:
        return summarize_inference(payload.theta, payload.se, payload.df)
    except ValueError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))
    except Exception as e:
        logger.exception("Failed to summarize inference: %s", e)
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Failed to summarize inference",
        )
