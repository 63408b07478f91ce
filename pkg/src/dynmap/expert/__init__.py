"""Experts: state observation, scripted planners, PPO and the dataset recorder."""
from .scripted import (LPathExpert, ObstacleExpert, ScriptedExpert, StraightLineExpert,
                       TiltDumpExpert, expert_variants, scripted_expert, trapezoid_profile)
from .state import OBS_DIM, observe_state
