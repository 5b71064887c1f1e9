from dataclasses import asdict, dataclass, fields, replace

from lfvit.errors import ConfigError

FOCUS_MODES = ("full_sequence", "compact_sequence")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus inference-policy hyperparameters.

    ``region`` is the side of the selected window in localization-grid
    cells, ``eta`` the early-exit confidence threshold, ``alpha`` the
    fraction of fine region tokens recomputed from the full image and
    ``beta`` the momentum of the cross-layer class-attention average.
    """

    depth: int = 12
    dim: int = 384
    heads: int = 6
    patch: int = 16
    image_side: int = 224
    classes: int = 1000
    region: int = 5
    eta: float = 0.76
    alpha: float = 0.88
    beta: float = 0.99
    focus_mode: str = "full_sequence"
    eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("depth", "dim", "heads", "patch", "image_side", "classes", "region"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.image_side % (2 * self.patch):
            raise ConfigError(
                f"image_side {self.image_side} must be divisible by 2*patch = {2 * self.patch}"
            )
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.region > self.coarse_side:
            raise ConfigError(
                f"region {self.region} exceeds localization grid side {self.coarse_side}"
            )
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")
        if self.focus_mode not in FOCUS_MODES:
            raise ConfigError(f"focus_mode must be one of {FOCUS_MODES}, got {self.focus_mode!r}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def fine_side(self) -> int:
        return self.image_side // self.patch

    @property
    def coarse_side(self) -> int:
        return self.image_side // (2 * self.patch)

    @property
    def n_fine(self) -> int:
        return self.fine_side ** 2

    @property
    def n_coarse(self) -> int:
        return self.coarse_side ** 2

    @property
    def n_fresh(self) -> int:
        # floor(alpha * (2m)^2); the epsilon guards 0.88*100 = 87.999...
        return int(self.alpha * (2 * self.region) ** 2 + 1e-9)

    def with_overrides(self, **overrides) -> "ModelConfig":
        overrides = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def deit_small(**overrides) -> ModelConfig:
    """DeiT-S geometry at 224 input (localization grid 7x7)."""
    return ModelConfig().with_overrides(**overrides)


def deit_small_288(**overrides) -> ModelConfig:
    return ModelConfig(image_side=288, region=8, eta=0.75).with_overrides(**overrides)


def tiny(**overrides) -> ModelConfig:
    """Small geometry with the same 7x7 / 14x14 grids, for tests and demos."""
    base = ModelConfig(depth=4, dim=32, heads=4, patch=4, image_side=56, classes=10)
    return base.with_overrides(**overrides)


PRESETS = {"deit-s": deit_small, "deit-s-288": deit_small_288, "tiny": tiny}
