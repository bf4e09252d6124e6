"""Differentiable search of network widths and depths under resource budgets."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .network import ArchitectureDescription, ModelSpec, build_supernet, export_pruned
from .resource import ResourceModel, current_consumption, fit_latency_model, resource_loss, target_schedule
from .search import Hyperparams, PipelineConfig, run_pipeline, search, uniform_baseline
from .topk import TopkOperator, normalize_importance, soft_mask

__version__ = "0.1.0"
