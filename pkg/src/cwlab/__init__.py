"""Structural causal branch for latent world models, staged training and counterfactual retrieval."""
from .backbone import BackboneConfig, WorldModel
from .bench import Benchmark, BenchSpec, build_benchmark, load_benchmark, save_benchmark
from .causal import CausalBranch, CausalLossWeights, dag_penalty, stage2_loss
from .datasets import Dataset, generate_dataset, load_dataset, save_dataset
from .envs import EnvConfig, jacobian_template, make_env
from .errors import ConfigError, CwlabError, FormatError, InputError, NumericError
from .evaluation import compute_metrics, counterfactual_eval, identifiability_test, structure_recovery
from .training import StageConfig, load_run, run_pipeline

__version__ = "0.1.0"
