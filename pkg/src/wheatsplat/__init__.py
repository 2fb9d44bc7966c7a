"""Lift per-view 2D instance masks onto a 3D Gaussian-splat scene, measure
per-instance morphological traits, and evaluate against reference scans."""

__version__ = "0.1.0"

from .errors import (AlignmentError, CalibrationError, EmptySceneError,
                     EvaluationError, FormatError, InputError, Unmeasurable,
                     WheatsplatError)
from .scene_io import (Gaussian, GaussianScene, InstanceMap, MaskPool,
                       MaskRecord, View, load_cameras, load_instance_map,
                       load_masks, load_point_cloud, load_scene_ply,
                       save_cameras, save_instance_map, save_scene_ply)
from .rasterizer import (ContributionLedger, RenderOutput, SplatContributions,
                         accumulate_contributions, flatten_contributions,
                         project_gaussians, rasterize, render_label_mask,
                         render_rgb)
from .label_solver import (LabelAssignment, SolverConfig, evaluate_objective,
                           solve_labels)
from .association import AssociationConfig, associate_all, match_in_view
from .traits import (InstanceCloud, TraitConfig, TraitRecord, measure_all,
                     measure_length, measure_volume, measure_width,
                     preprocess, principal_axes, read_traits_csv,
                     write_traits_csv)
from .evaluation import (IcpConfig, InstanceMatch, RegressionReport,
                         RigidTransform, anova_f, icp_align, image_psnr_ssim,
                         kabsch_align, mask_metrics, match_instances,
                         mcd_outlier_filter, regression_report, ssim)
from .synthbench import (GroundTruth, SynthConfig, generate,
                         sample_reference_cloud, score_against_truth)

__all__ = [name for name in dir() if not name.startswith("_")]
