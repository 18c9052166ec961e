from .layers import (
    MASK_LOGIT,
    apply_mask,
    entropy,
    entropy_grad,
    log_softmax,
    softmax,
)
from .network import NetworkSpec, PolicyOutput, PolicyValueNet, load_blob, save_blob
from .optim import Adam

__all__ = [
    "MASK_LOGIT",
    "Adam",
    "NetworkSpec",
    "PolicyOutput",
    "PolicyValueNet",
    "apply_mask",
    "entropy",
    "entropy_grad",
    "load_blob",
    "log_softmax",
    "save_blob",
    "softmax",
]
