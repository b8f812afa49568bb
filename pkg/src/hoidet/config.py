"""Run configuration: model hyperparameters, loss weights, optimizer
settings, and the stage schedule.

The "paper" preset documents the full-scale configuration (300 queries,
256-dim embeddings, 6+6 layers); tests and the desk-scale training runs
use the much smaller "toy" preset.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError


@dataclass
class RunConfig:
    seed: int

    # model
    n_queries: int = 16
    model_dim: int = 64
    n_heads: int = 4
    n_levels: int = 3
    n_points: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    sampling_sizes: tuple[int, ...] = (1, 3, 5)
    backbone_dim: int = 16
    ffn_dim: int = 128
    num_objects: int = 3
    num_verbs: int = 3

    # loss weights: object class, verb class, box L1, box GIoU
    lambda_obj: float = 1.0
    lambda_verb: float = 1.0
    lambda_box: float = 2.5
    lambda_giou: float = 1.0

    # optimizer: adaptive per-coordinate steps by default ("adam"), with
    # plain momentum gradient descent ("momentum") as the simple
    # alternative; the feature extractor trains at a fraction of the base
    # step size, and gradients are clipped to a global norm (0 disables)
    optimizer: str = "adam"
    learning_rate: float = 2e-3
    momentum: float = 0.9
    lr_drop_factor: float = 0.1
    extractor_lr_scale: float = 0.1
    max_grad_norm: float = 2.0
    batch_size: int = 8

    # stage schedule: (base network, +spatial merging, +task merging) epochs,
    # each with a learning-rate drop this fraction of the way through
    stage_epochs: tuple[int, ...] = (30, 8, 8)
    lr_drop_at: float = 0.8

    # inference
    top_k: int = 100
    iou_filter: float = 0.5

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        self.sampling_sizes = tuple(int(s) for s in self.sampling_sizes)
        self.stage_epochs = tuple(int(e) for e in self.stage_epochs)
        if len(self.sampling_sizes) != self.n_levels:
            raise ConfigError(
                f"need one sampling size per level: {len(self.sampling_sizes)} "
                f"sizes for {self.n_levels} levels")
        if any(s % 2 == 0 or s < 1 for s in self.sampling_sizes):
            raise ConfigError(f"sampling sizes must be odd and positive: {self.sampling_sizes}")
        if list(self.sampling_sizes) != sorted(self.sampling_sizes):
            raise ConfigError(f"sampling sizes must be ascending: {self.sampling_sizes}")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            raise ConfigError("layer depths must be >= 0")
        if self.model_dim % self.n_heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by {self.n_heads} heads")
        if self.model_dim % 4 != 0:
            raise ConfigError(f"model_dim {self.model_dim} must be divisible by 4 "
                              "for the sine positional encoding")
        if len(self.stage_epochs) != 3:
            raise ConfigError("stage_epochs must list three stage lengths")
        if self.optimizer not in ("adam", "momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PAPER_PRESET = dict(
    n_queries=300, model_dim=256, n_heads=8, n_points=4,
    encoder_layers=6, decoder_layers=6, sampling_sizes=(1, 3, 5),
    backbone_dim=96, ffn_dim=1024, num_objects=80, num_verbs=117,
)

# the gradient-check config: two pyramid levels so a 16x16 image divides
# evenly by the stride ladder (8, 16)
TINY_PRESET = dict(
    n_queries=4, model_dim=16, n_heads=2, n_levels=2, n_points=2,
    encoder_layers=1, decoder_layers=1, sampling_sizes=(1, 3),
    backbone_dim=8, ffn_dim=32, num_objects=3, num_verbs=3,
)


def parse_config_file(text: str, seed: int | None = None) -> RunConfig:
    """Parse the key=value config format.

    Blank lines and '#' comments are ignored. Tuple-valued keys take
    comma-separated entries, e.g. ``sampling_sizes=1,3,5``.
    """
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = _parse_value(key.strip(), val.strip(), lineno)
    if seed is not None:
        values["seed"] = seed
    if "seed" not in values:
        raise ConfigError("seed is mandatory (set it in the config file or pass --seed)")
    return RunConfig.from_dict(values)


_TUPLE_KEYS = {"sampling_sizes", "stage_epochs"}
_FLOAT_KEYS = {"lambda_obj", "lambda_verb", "lambda_box", "lambda_giou",
               "learning_rate", "momentum", "lr_drop_factor", "lr_drop_at",
               "extractor_lr_scale", "max_grad_norm", "iou_filter"}
_STR_KEYS = {"optimizer"}


def _parse_value(key: str, val: str, lineno: int):
    try:
        if key in _TUPLE_KEYS:
            return tuple(int(v) for v in val.split(","))
        if key in _FLOAT_KEYS:
            return float(val)
        if key in _STR_KEYS:
            return val
        return int(val)
    except ValueError as e:
        raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from e
