"""Audio COVID-19 screening: multi-branch 1D CNNs over raw audio and log-spectrogram groups."""

from .baseline import LinearSVM, StandardPCA, extract_functionals, fit_pca, fit_svm, run_baseline
from .corpus import AudioClip, Corpus, ManifestEntry, generate_synthetic_corpus, load_clip, load_manifest, resample_to_8k
from .dsp import InputBundle, SpectrogramVariant, build_input_bundle, compute_log_spectrogram
from .ensemble import PredictionSet, average_probabilities, best_per_fold, search_best_subset
from .hpo import SearchSpace, hyperband_schedule, run_bohb, sample_config
from .metrics import MetricBundle, auc, metric_bundle, metrics_by_modality, uar
from .model import CovidNet, ModelConfig, build_model, forward
from .splits import FoldPlan, SplitPlan, make_folds, make_primary_split
from .trainer import Checkpoint, CovidNetClassifier, TrainConfig, evaluate, train_on_fold

__all__ = [
    "AudioClip",
    "Checkpoint",
    "Corpus",
    "CovidNet",
    "CovidNetClassifier",
    "FoldPlan",
    "InputBundle",
    "LinearSVM",
    "ManifestEntry",
    "MetricBundle",
    "ModelConfig",
    "PredictionSet",
    "SearchSpace",
    "SpectrogramVariant",
    "SplitPlan",
    "StandardPCA",
    "TrainConfig",
    "auc",
    "average_probabilities",
    "best_per_fold",
    "build_input_bundle",
    "build_model",
    "compute_log_spectrogram",
    "evaluate",
    "extract_functionals",
    "fit_pca",
    "fit_svm",
    "forward",
    "generate_synthetic_corpus",
    "hyperband_schedule",
    "load_clip",
    "load_manifest",
    "make_folds",
    "make_primary_split",
    "metric_bundle",
    "metrics_by_modality",
    "resample_to_8k",
    "run_baseline",
    "run_bohb",
    "sample_config",
    "search_best_subset",
    "train_on_fold",
    "uar",
]
