"""Weakly supervised object detection with progressive knowledge transfer."""

from progtrans.pipeline import LoopConfig, RunReport, run, run_ablation

__all__ = ["LoopConfig", "RunReport", "run", "run_ablation"]
