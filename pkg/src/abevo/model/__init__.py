from .autograd import Tensor, no_grad
from .checkpoint import Checkpoint
from .gradcheck import gradient_check
from .optim import Adam, WarmupInvSqrt
from .transformer import (Batch, ForwardOutput, ModelConfig, Transformer, collate, loss_agp, loss_mlm,
                          loss_mpp, mpp_weights, sequence_representation)

__all__ = [
    "Tensor", "no_grad", "Checkpoint", "gradient_check", "Adam", "WarmupInvSqrt", "Batch",
    "ForwardOutput", "ModelConfig", "Transformer", "collate", "loss_agp", "loss_mlm", "loss_mpp",
    "mpp_weights", "sequence_representation",
]
