"""Next-POI recommendation with global category/time graph disentangling and POI weighting maps."""

from .config import ModelConfig, RunConfig
from .graphs import GraphBundle, build_graphs
from .ingest import Dataset, preprocess
from .model import GDPW

__all__ = ["Dataset", "GDPW", "GraphBundle", "ModelConfig", "RunConfig", "build_graphs", "preprocess"]
__version__ = "0.1.0"
