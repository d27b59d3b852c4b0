__all__ = [
    "panel_service",
    "learners",
    "crossfit_service",
    "estimators",
    "diagnostics",
    "pipeline_service",
    "robustness",
    "mechanisms",
    "simulator",
    "report_service",
    "workflow_service",
    "run_state_service",
]
