"""Asynchronous parameter-server training with dual-way gradient sparsification."""
from .optim import Hyperparams, VelocityState
from .server import ParameterServer
from .sim import DelayModel, LinkModel, SimConfig, evaluate, run, summarize
from .sparsify import SparsifyConfig, select_topk, split_residual, split_samomentum
from .tasks import gradcheck, logistic_task, mlp_task, quadratic_bowl
from .tensor import LayerPartition, ParamVector, SparseUpdate, apply_sparse, decode, diff_as_sparse, encode
from .worker import Worker

__version__ = "0.1.0"

__all__ = [
    "DelayModel", "Hyperparams", "LayerPartition", "LinkModel", "ParamVector", "ParameterServer",
    "SimConfig", "SparseUpdate", "SparsifyConfig", "VelocityState", "Worker", "apply_sparse", "decode",
    "diff_as_sparse", "encode", "evaluate", "gradcheck", "logistic_task", "mlp_task", "quadratic_bowl",
    "run", "select_topk", "split_residual", "split_samomentum", "summarize",
]
