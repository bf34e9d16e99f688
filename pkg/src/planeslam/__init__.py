"""Plane SLAM for planar-ambiguous scenes: plane processing, integrated data
association, a single-pose factor graph, map management and a simulator."""

from .association import AssociationConfig, associate_planes
from .exceptions import PlaneSlamError
from .factors import FactorConfig, PoseProblem, SolverSettings, build_problem, optimize
from .geometry import CameraIntrinsics, Line3D, PixelBox, Plane, RigidTransform
from .mapping import MapConfig, PlaneMap, fuse_landmarks, insert_or_update
from .pipeline import PipelineConfig, RunReport, load_config, run_pipeline
from .processing import ProcessingConfig, process_observation, select_planes
from .sim import evaluate_ate, generate_scene, render_frame

__version__ = "0.1.0"
