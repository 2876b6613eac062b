from .generate import (
    GenerationError,
    ObjectFactors,
    Scene,
    SceneFactors,
    factor_matrix,
    generate_scene,
    render_scene,
)
from .format import (
    DatasetError,
    DatasetHeader,
    DatasetReader,
    DatasetView,
    generate_dataset,
    split_dataset,
    write_dataset,
)

__all__ = [
    "GenerationError",
    "ObjectFactors",
    "Scene",
    "SceneFactors",
    "factor_matrix",
    "generate_scene",
    "render_scene",
    "DatasetError",
    "DatasetHeader",
    "DatasetReader",
    "DatasetView",
    "generate_dataset",
    "split_dataset",
    "write_dataset",
]
