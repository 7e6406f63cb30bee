"""Masked-autoencoder trajectory forecasting with parameter-efficient fine-tuning, on numpy."""
from .backbone import build_model
from .config import BackboneConfig, LossWeights, PeftConfig, desk_backbone, desk_peft, large_backbone, large_peft
from .errors import CheckpointError, ConfigError, DataError
from .heads import ForecastOutput, MetricsReport, baseline_forecast, loss_finetune, metrics, peft_forecast
from .params import Model
from .peft import count_parameters, make_plan, plugin_load, plugin_save, read_plugin, strip_plugin, write_plugin
from .scene import PROFILES, Scene, SceneProfile, generate_synthetic
from .train import TrainConfig, load_checkpoint, run_eval, run_finetune, run_pretrain, save_checkpoint

__version__ = "0.1.0"
