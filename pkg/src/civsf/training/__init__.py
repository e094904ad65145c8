from civsf.training.model import FrameworkModel, uses_forecaster, uses_weather
from civsf.training.pretrain import EpochRecord, load_model, phase_schedule, run_framework

__all__ = ["EpochRecord", "FrameworkModel", "load_model", "phase_schedule",
           "run_framework", "uses_forecaster", "uses_weather"]
