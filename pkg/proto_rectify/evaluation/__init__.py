"""
Metrics, sliding-window inference and reports.
"""

from .inference import network_predictor, sliding_window_predict
from .metrics import asd, dice, hd95, jaccard
from .report import (
    CaseScore,
    RectificationRecord,
    bootstrap_summary,
    plot_rectification_report,
    rectification_report,
    score_cases,
    summarize,
)

__all__ = [
    "network_predictor",
    "sliding_window_predict",
    "asd",
    "dice",
    "hd95",
    "jaccard",
    "CaseScore",
    "RectificationRecord",
    "bootstrap_summary",
    "plot_rectification_report",
    "rectification_report",
    "score_cases",
    "summarize",
]
