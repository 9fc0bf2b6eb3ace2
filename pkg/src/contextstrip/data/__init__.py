from .dataset import load_dataset, load_subject, save_subject, subject_ids, write_phantom_dataset
from .folds import FoldPlan, kfold_split
from .nifti import NiftiError, read_mask, read_nifti, write_nifti
from .phantom import FAMILIES, generate_phantom
from .volume import (
    SamplePair,
    Volume,
    normalize_volume,
    prepare_volume,
    resize_inplane,
    sample_training_pair,
    stack_pairs,
    subvolume_indices,
)

__all__ = [
    "FAMILIES", "FoldPlan", "NiftiError", "SamplePair", "Volume", "generate_phantom", "kfold_split",
    "load_dataset", "load_subject", "normalize_volume", "prepare_volume", "read_mask", "read_nifti",
    "resize_inplane", "sample_training_pair", "save_subject", "stack_pairs", "subject_ids",
    "subvolume_indices", "write_nifti", "write_phantom_dataset",
]
