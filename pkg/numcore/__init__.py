from numcore.tensor import FLOAT_DTYPE, Graph, GradientMap, Node, Tensor, backward, current_graph, no_grad
from numcore.optim import Adam, AdamState, adam_step
from numcore.gradcheck import grad_check
from numcore import ops

__all__ = [
    "FLOAT_DTYPE",
    "Graph",
    "GradientMap",
    "Node",
    "Tensor",
    "backward",
    "current_graph",
    "no_grad",
    "Adam",
    "AdamState",
    "adam_step",
    "grad_check",
    "ops",
]
