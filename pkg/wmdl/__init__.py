from wmdl.common import ConfigurationError as ConfigurationError
from wmdl.common import FitError as FitError
from wmdl.common import ResultStore as ResultStore
from wmdl.common import SchemaError as SchemaError
from wmdl.common import ValidationError as ValidationError
from wmdl.common import WmdlError as WmdlError
from wmdl.data import CsvSchema as CsvSchema
from wmdl.data import DgpConfig as DgpConfig
from wmdl.data import GroundTruth as GroundTruth
from wmdl.data import MultiSourceData as MultiSourceData
from wmdl.data import SourceData as SourceData
from wmdl.data import load_csv as load_csv
from wmdl.data import simulate as simulate
from wmdl.data import split_folds as split_folds
from wmdl.data import true_delta_het as true_delta_het
from wmdl.data import true_delta_hom as true_delta_hom
from wmdl.data import write_csv as write_csv
from wmdl.estimators import CateEstimate as CateEstimate
from wmdl.estimators import EstimatorSpec as EstimatorSpec
from wmdl.estimators import build_pseudo_samples as build_pseudo_samples
from wmdl.estimators import fit as fit
from wmdl.estimators import predict_delta as predict_delta
from wmdl.estimators import predict_tau as predict_tau
from wmdl.evaluation import ExperimentConfig as ExperimentConfig
from wmdl.evaluation import ExperimentReport as ExperimentReport
from wmdl.evaluation import emit_report as emit_report
from wmdl.evaluation import mse as mse
from wmdl.evaluation import robustness_suite as robustness_suite
from wmdl.evaluation import run_replications as run_replications
from wmdl.learners import LearnerSpec as LearnerSpec
from wmdl.learners import cross_fit as cross_fit
from wmdl.learners import fit_probability as fit_probability
from wmdl.learners import fit_regression as fit_regression
from wmdl.nuisance import NuisanceSet as NuisanceSet
from wmdl.nuisance import estimate_nuisances as estimate_nuisances
from wmdl.nuisance import oracle_nuisances as oracle_nuisances
from wmdl.nuisance import partial_balance_score as partial_balance_score
from wmdl.persistence import load as load
from wmdl.persistence import save as save
from wmdl.weighting import WeightSpec as WeightSpec
from wmdl.weighting import batch_weights as batch_weights
from wmdl.weighting import information_weight as information_weight

# Must be kept aligned with setup.cfg
__version__ = "0.1.0"
