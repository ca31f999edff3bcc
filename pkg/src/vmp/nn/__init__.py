from vmp.nn.autograd import Var, backward, param
from vmp.nn.losses import softmax, softmax_cross_entropy
from vmp.nn.model import (BNState, LayerSpec, SourceModel, check_arch, forward, init_model, mlp,
                          small_cnn)
from vmp.nn.optim import OptimConfig, Optimizer

__all__ = ["Var", "backward", "param", "softmax", "softmax_cross_entropy", "BNState", "LayerSpec",
           "SourceModel", "check_arch", "forward", "init_model", "mlp", "small_cnn", "OptimConfig",
           "Optimizer"]
