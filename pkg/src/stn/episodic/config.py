"""Run configuration shared by training, evaluation and the CLI."""
import json
from dataclasses import asdict, dataclass, field, fields, replace

from ..encoder import EncoderConfig
from ..errors import InvalidConfig
from ..fusion import FusionConfig
from ..metrics import GLOBAL_KINDS, LOCAL_KINDS
from ..numerics import DEFAULT_EPSILON_SCALE


@dataclass(frozen=True)
class RunConfig:
    n_way: int = 5
    k_shot: int = 1
    t_query: int = 15
    epochs: int = 30
    episodes_per_epoch: int = 50
    lr: float = 1e-5
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    val_episodes: int = 20
    seed: int = 0
    epsilon_scale: float = DEFAULT_EPSILON_SCALE
    share_params: bool = False
    global_kind: str = "sqr"
    local_kind: str = "kl"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.t_query < 1:
            raise InvalidConfig("need n_way >= 2, k_shot >= 1, t_query >= 1")
        if self.epochs < 0 or self.episodes_per_epoch < 1 or self.val_episodes < 1:
            raise InvalidConfig("epochs must be >= 0 and episode counts >= 1")
        if not self.epsilon_scale > 0:
            raise InvalidConfig("epsilon_scale must be positive")
        if self.global_kind not in GLOBAL_KINDS or self.local_kind not in LOCAL_KINDS:
            raise InvalidConfig(f"unknown metric kinds {self.global_kind!r}/{self.local_kind!r}")
        if self.lr <= 0 or self.lr_min < 0:
            raise InvalidConfig("learning rates must be positive")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown run-config keys: {sorted(unknown)}")
        if "fusion" in d and isinstance(d["fusion"], dict):
            d["fusion"] = FusionConfig(**d["fusion"])
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc

    def with_fusion(self, **changes):
        return replace(self, fusion=replace(self.fusion, **changes))


def load_run_config(path):
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(json.load(fh))
