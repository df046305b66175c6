from .ei import CategoryEmbeddingTable, EmbeddingInitiator, PretrainedVectors, train_ei
from .relenc import RelativeEncoder, RelativeIndexMatrices, build_relative
from .recommender import ModelParams, SequentialRecommender
from .evaluation import EvalReport, SplitCorpus, category_rms_probe, evaluate, split
from .pipeline import ABLATION_GRID, EI_GRID, TrainingPipeline, run_ablation, train_pipeline

__all__ = [
    'CategoryEmbeddingTable', 'EmbeddingInitiator', 'PretrainedVectors', 'train_ei',
    'RelativeEncoder', 'RelativeIndexMatrices', 'build_relative',
    'ModelParams', 'SequentialRecommender',
    'EvalReport', 'SplitCorpus', 'category_rms_probe', 'evaluate', 'split',
    'ABLATION_GRID', 'EI_GRID', 'TrainingPipeline', 'run_ablation', 'train_pipeline',
]
