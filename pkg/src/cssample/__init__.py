"""Point-cloud simplification by learned contribution scores.

A scoring network rates every input point, a differentiable top-k built on
entropic optimal transport turns the scores into a hard subset during
training, and a small classifier trained alongside supplies the task loss.
Classical samplers (random, farthest-point, Poisson-disk) and the Chamfer and
earth mover's distances are included for comparison.
"""

from .estimators import CSNetSampler, FarthestPointSampler, PoissonDiskSampler, RandomSampler, SampledPointClassifier
from .metrics import chamfer, emd
from .model import CsNetConfig, CsNetModel, select
from .pointcloud import PointCloud, read_cloud, write_cloud
from .samplers import SampleResult, fps, poisson_disk, random_sample
from .topk import TopkConfig, sinkhorn

__version__ = "0.1.0"

__all__ = [
    "CSNetSampler",
    "FarthestPointSampler",
    "PoissonDiskSampler",
    "RandomSampler",
    "SampledPointClassifier",
    "CsNetConfig",
    "CsNetModel",
    "PointCloud",
    "SampleResult",
    "TopkConfig",
    "chamfer",
    "emd",
    "fps",
    "poisson_disk",
    "random_sample",
    "read_cloud",
    "select",
    "sinkhorn",
    "write_cloud",
]
