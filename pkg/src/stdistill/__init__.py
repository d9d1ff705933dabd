"""Speech transformer distillation: intent classification with attention and
hidden-state transfer from a frozen text-side transformer."""

from .tensor import Tensor, backward, grad_check
from .encoder import (EncoderConfig, LayerTaps, FrozenTeacher, encode,
                      frozen_teacher_taps, student_config, teacher_config)
from .distill import (DistillConfig, DistillHead, layer_map_uniform, loss_att,
                      loss_hid, loss_intent, loss_total, resample_attention,
                      resample_hidden)
from .training import (AdamState, NoamSchedule, StudentModel, TrainConfig,
                       adam_step, evaluate, init_student, load_checkpoint, lr_at,
                       save_checkpoint, train)
from .data import (Batch, Dataset, SynthSpec, inject_noise, load_dataset,
                   make_batches, read_tensor, synthesize_dataset, write_tensor)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check",
    "EncoderConfig", "LayerTaps", "FrozenTeacher", "encode",
    "frozen_teacher_taps", "student_config", "teacher_config",
    "DistillConfig", "DistillHead", "layer_map_uniform", "loss_att",
    "loss_hid", "loss_intent", "loss_total", "resample_attention",
    "resample_hidden",
    "AdamState", "NoamSchedule", "StudentModel", "TrainConfig", "adam_step",
    "evaluate", "init_student", "load_checkpoint", "lr_at", "save_checkpoint",
    "train",
    "Batch", "Dataset", "SynthSpec", "inject_noise", "load_dataset",
    "make_batches", "read_tensor", "synthesize_dataset", "write_tensor",
    "__version__",
]
