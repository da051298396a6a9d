"""Visibility-aware position/yaw trajectory planning and tracking simulation."""

from .costs import (CostReport, CostWeights, DynamicLimits, TargetTrack,
                    VisibilityParams, best_yaw, cost_ao, cost_collision,
                    cost_do, cost_feasibility, cost_oe, cost_safe_tracking,
                    cost_smoothness, cost_yaw_feasibility, cost_yaw_smoothness,
                    penalty, penalty_derivative, total_cost)
from .env import ESDFField, GridError, OccupancyGrid, build_esdf, load_grid
from .optimizer import (NumericError, OptimizeResult, OptimizerConfig,
                        Termination, optimize)
from .predict import (HistoryBuffer, PredictionModel, TargetObservation, fit,
                      predict_track)
from .search import (InvalidStart, SearchConfig, SearchExhausted, SearchNode,
                     raycast_occluded, search)
from .sim import (RunReport, Scenario, generate_random_forest, in_fov,
                  load_scenario, run, write_outputs)
from .spline import (RobotState, TrajectoryBSpline, Waypoint,
                     initialize_from_path, wrap_angle)

__version__ = "0.1.0"
