from .models import CheckIn, Corpus, SynthSpec, Window
from .corpus_io import filter_corpus, load_corpus, parse_corpus, save_corpus, serialize_corpus
from .windowing import training_pair, window
from .sampling import sample_category_set, sample_excluding, sample_negative, sample_negatives
from .synthetic import synth_corpus

__all__ = [
    'CheckIn', 'Corpus', 'SynthSpec', 'Window',
    'filter_corpus', 'load_corpus', 'parse_corpus', 'save_corpus', 'serialize_corpus',
    'training_pair', 'window',
    'sample_category_set', 'sample_excluding', 'sample_negative', 'sample_negatives',
    'synth_corpus',
]
