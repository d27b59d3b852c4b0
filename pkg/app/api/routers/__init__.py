from fastapi import APIRouter

from .inference import router as inference_router
from .runs import router as runs_router

api_router = APIRouter(prefix="/api/v1")
api_router.include_router(inference_router)
api_router.include_router(runs_router)

__all__ = [
    "api_router",
]
