from .io import (
    Condition,
    DatasetLoadError,
    DatasetManifest,
    LabeledImages,
    compose_grid,
    load_dataset,
    read_manifest,
    save_grid,
    save_images,
)
from .synth import CellParams, SynthConfig, Treatment, default_config, generate_benchmark, read_ground_truth
