"""MDT-AF: multi-dimension transformer with attention-based filtering,
desk-scale, on a minimal verified autodiff engine."""

from .tensor import Tensor, no_grad, nan_check
from .gradcheck import grad_check
from .params import ParamStore
from .model import (ModelConfig, default_config, desk_config, tiny_config,
                    init_params, model_forward, encoder_forward, mlp_decoder,
                    save_checkpoint, load_checkpoint)
from .train import (TrainConfig, Metrics, bce_loss, cosine_lr, adamw_step,
                    dice_score, accuracy, train, evaluate)
from .data import SynthSpec, SegSample, generate_dataset, load_dataset

__version__ = "0.1.0"
