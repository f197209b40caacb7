"""Beamforming-free ultrasound localization microscopy.

Echoes are fitted per channel with a modified exponential Gaussian model,
matched across channels into phase-refined arrival times, turned into
transmit/receive ellipses whose pairwise intersections are fused by mean
shift into bubble positions.
"""
from .cluster import ClusterConfig, MBLocation, MeanShiftFusion, cluster_candidates
from .evaluation import (DensityImage, FrameScore, aggregate_rmse, jaccard, match_and_score,
                         render_density, ssim)
from .exceptions import (CorruptStreamError, DegenerateEllipseError, FitDivergedError,
                         FormatError, GeoULMError, IllConditionedError,
                         InfiniteIntersectionsError, InvalidComponentError,
                         UndefinedMetricError, ValidationError)
from .geometry import (EllipseSpec, GeometryConfig, LocalizationCandidate, build_ellipse,
                       ellipse_to_quadratic, intersect_ellipses, localize_track)
from .memgo import (ChannelEchoSet, EchoComponent, FitConfig, extract_echoes, fit_memgo,
                    initial_toa_estimates, memgo_eval)
from .pipeline import GeometricULM, PipelineConfig, PipelineReport, localize_frame, localize_frames
from .sim import NoiseParams, PulseModel, add_noise, generate_scene, simulate_frame
from .toa import EchoTrack, MatchConfig, match_echoes, phase_refine_toa, reproject_validate
from .types import (AcquisitionConfig, GroundTruthScene, Region, RFFrame, TransducerGeometry,
                    linear_array, spread_channels, toa_to_distance)

__version__ = "0.1.0"
