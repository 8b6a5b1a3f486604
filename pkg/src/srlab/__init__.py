"""Sub-Riemannian diffusions built by stochastic development on a frame bundle."""
from .bridge import (BridgeEnsemble, BridgeError, concentration_curve, fdd_consistency,
                     rate_function_tube_check, sample_bridges)
from .bundle import (AdmissibilityError, Drift, FramePoint, FrameTrajectory, StepRejected, antidevelop,
                     canonical_fields, develop, horizontal_lift, verify_generator)
from .geometry import (BoxLattice, HeisenbergLattice, ManifoldModel, ModelDefinitionError, bracket,
                       build_model, custom_model, divergence, drift_correction, flat_torus, heisenberg,
                       hormander_rank, load_model, nilmanifold, synthetic_connection, validate_model,
                       weighted_plane)
from .heatkernel import HeatKernelEstimate, heat_kernel_mc, ldp_curve, positivity
from .paths import CameronMartinPath, PiecewiseLinearPath
from .roughpath import (BesovConfig, Level2Path, besov_norms, chen_defect, dilate, dyadic_cauchy_check,
                        geometricity_defect, lift_dyadic, rough_distance, translate)
from .stochastics import (Ensemble, connection_independence_check, energy_distance_test,
                          frame_independence_check, sample_brownian, scaling_law_check, simulate,
                          simulate_ensemble, wong_zakai_convergence)
from .variational import (DistanceResult, connect, energy, malliavin_cov, rate_J, sr_distance)

__version__ = "0.1.0"
