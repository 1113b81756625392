"""Run configuration: strict JSON parsing, presets, and validation.

Unknown keys are rejected with the full key path so config typos fail loudly.
The `paper` preset keeps the published optimizer settings; `desk` rescales
them for randomly initialized stub backbones.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class ModelConfig:
    channels: int = 64            # VLM feature width C
    spe_channels: int = 64        # guidance feature width
    corr_channels: int = 32       # correlation feature width
    patch: int = 16
    vit_depth: int = 2
    spe_depth: int = 3
    vit_heads: int = 4
    text_hash_dim: int = 256
    use_pos_embed: bool = True
    refine_window: int = 3        # early refinement window (patches)
    refine_heads: int = 2
    spatial_window: int = 4       # late refinement window
    spatial_heads: int = 4
    late_stages: int = 2
    text_ensemble: bool = True    # off: correlation built from local similarities only
    early_refine: bool = True     # off: dense features bypass the refiner

    def validate(self):
        if self.patch < 1:
            raise ConfigError("model.patch must be >= 1")
        if self.channels % 4:
            raise ConfigError("model.channels must be divisible by 4 (rotary pairs per axis)")
        if self.channels % self.vit_heads or self.channels % self.refine_heads:
            raise ConfigError("model.channels must be divisible by vit_heads and refine_heads")
        if (self.channels // self.refine_heads) % 4:
            raise ConfigError("refine head width must be divisible by 4 (rotary pairs per axis)")
        if self.corr_channels % self.spatial_heads:
            raise ConfigError("model.corr_channels must be divisible by spatial_heads")
        if self.refine_window < 1:
            raise ConfigError("model.refine_window must be >= 1")
        if self.spatial_window < 2:
            raise ConfigError("model.spatial_window must be >= 2 (shift is window/2)")
        if self.late_stages < 1:
            raise ConfigError("model.late_stages must be >= 1")


@dataclass
class LossConfig:
    lam: float = 0.05             # dice weight
    gamma: float = 2.0            # focal focusing exponent
    dice_eps: float = 1e-6

    def validate(self):
        if self.lam < 0 or self.gamma < 0:
            raise ConfigError("loss.lam and loss.gamma must be >= 0")
        if self.dice_eps <= 0:
            raise ConfigError("loss.dice_eps must be > 0")


@dataclass
class TrainConfig:
    lr_backbone: float = 3e-4     # paper preset: 2e-6 (tuned for pretrained weights)
    lr_head: float = 1e-3
    batch: int = 4
    iters: int = 2000
    crop: int = 384
    weight_decay: float = 0.0
    dtype: str = "float32"
    loss: LossConfig = field(default_factory=LossConfig)
    focal_dice: bool = True       # off: plain BCE (gamma=0, lam=0)
    augment: bool = True          # random crop position + horizontal flip
    scenes: int = 8
    scene_classes: int = 4
    scene_size: int = 384
    save_every: int = 500
    log_every: int = 25
    eval_every: int = 100
    target_miou: float = 0.0      # >0: stop once training-set mIoU reaches it

    def validate(self, patch):
        if self.lr_backbone <= 0 or self.lr_head <= 0:
            raise ConfigError("train learning rates must be > 0")
        if self.crop % patch or self.scene_size % patch:
            raise ConfigError(f"train.crop and train.scene_size must be multiples of patch {patch}")
        if self.crop > self.scene_size:
            raise ConfigError("train.crop cannot exceed train.scene_size")
        if self.batch < 1 or self.iters < 1:
            raise ConfigError("train.batch and train.iters must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        if self.scene_classes < 2:
            raise ConfigError("train.scene_classes must be >= 2")
        self.loss.validate()


@dataclass
class InferConfig:
    resize: int = 640
    window: int = 384
    overlap: int = 128
    lga_vlm: bool = True
    lga_spe: bool = False

    def validate(self, patch):
        if not (0 <= self.overlap < self.window <= self.resize):
            raise ConfigError("infer requires overlap < window <= resize")
        if self.resize % patch or self.window % patch:
            raise ConfigError(f"infer.resize and infer.window must be multiples of patch {patch}")
        stride = self.window - self.overlap
        if stride % patch:
            raise ConfigError(f"tile stride {stride} must be a multiple of patch {patch}")


@dataclass
class EvalConfig:
    threshold: float = 0.9
    ridge_alpha: float = 1.0
    folds: int = 5
    ignore_label: int = 255

    def validate(self):
        if not (-1 < self.threshold):
            raise ConfigError("eval.threshold must be > -1")
        if self.folds < 2:
            raise ConfigError("eval.folds must be >= 2")


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.model.validate()
        self.train.validate(self.model.patch)
        self.infer.validate(self.model.patch)
        self.eval.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "infer": InferConfig,
             "eval": EvalConfig}


def _fill(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{path}.{key}: unknown key")
        ftype = fields[key].type
        if ftype is LossConfig:
            kwargs[key] = _fill(LossConfig, value, f"{path}.{key}")
            continue
        is_bool = isinstance(value, bool)
        ok = (ftype is bool and is_bool
              or ftype is int and isinstance(value, int) and not is_bool
              or ftype is float and isinstance(value, (int, float)) and not is_bool
              or ftype is str and isinstance(value, str))
        if not ok:
            raise ConfigError(
                f"{path}.{key}: expected {ftype.__name__}, got {type(value).__name__}")
        kwargs[key] = float(value) if ftype is float else value
    return cls(**kwargs)


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    kwargs = {}
    for key, value in data.items():
        if key == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError("seed: expected int")
            kwargs["seed"] = value
        elif key in _SECTIONS:
            kwargs[key] = _fill(_SECTIONS[key], value, key)
        else:
            raise ConfigError(f"{key}: unknown key")
    return RunConfig(**kwargs).validate()


def load_config(path, overrides=()):
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    for item in overrides:
        data = apply_override(data, item)
    return config_from_dict(data)


def apply_override(data, item):
    """Apply one 'section.key=value' override string onto a config dict."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    dotted, raw = item.split("=", 1)
    keys = dotted.strip().split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare string
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: {k} is not an object")
    node[keys[-1]] = value
    return data


def preset(name):
    """Named configuration presets: `desk` (default) and `paper`."""
    cfg = RunConfig()
    if name == "desk":
        pass
    elif name == "paper":
        cfg.train.lr_backbone = 2e-6
        cfg.train.lr_head = 2e-4
        cfg.train.iters = 80_000
        cfg.train.batch = 4
        cfg.train.crop = 384
        cfg.train.loss = LossConfig(lam=0.05, gamma=2.0)
    else:
        raise ConfigError(f"unknown preset {name!r} (expected 'desk' or 'paper')")
    return cfg.validate()
