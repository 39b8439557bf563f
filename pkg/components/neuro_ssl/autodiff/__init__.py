from .tensor import Tensor, Parameter, as_tensor, grad_enabled, no_grad, unbroadcast
from .functional import (add, sub, mul, neg, reshape, transpose, broadcast_to, tensor_sum, mean, concatenate,
                         elu, linear, conv1d, film, embedding_lookup, cross_entropy, softmax)
from .layers import Module, Linear, Conv1d, Embedding, Mlp, kaiming_uniform
from .optim import AdamW, AdamWState, adamw_step
from .checkpoint import (encode_checkpoint, decode_checkpoint, save_checkpoint, read_checkpoint, load_parameters,
                         parameters_hash)
