"""Continuous ego-motion from optical flow and depth, with a static/dynamic layer split."""
from .errors import (ConfigError, DatasetError, DegenerateGeometryError, EgoflowError, InsufficientDataError,
                     OrderError, ParseError, ShapeError, ValidityError)
from .geometry import (CameraIntrinsics, CameraVelocity, FlowField, InverseDepthMap, MotionField, Pose,
                       camera_motion, pose_to_twist, synthesize_motion_field, twist_to_pose)
from .egomotion import EgoFit, RobustConfig, fit_egomotion, irls_fit, project_flow
from .layers import LayerConfig, LayeredFit, SegmentationMask, SymmetryPolicy, fit_two_layers, resolve_static_layer
from .flowwarp import LossReport, compute_losses, loss_mf, loss_of, loss_op, warp_image

__version__ = "0.1.0"
