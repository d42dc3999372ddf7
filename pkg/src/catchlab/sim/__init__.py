from .env import CatchEnv, ContactParams, EnvConfig, EnvState, energy, is_caught
from .throws import BOX_PROFILES, ThrowConfig, ThrowSpec, sample_throws

__all__ = [
    "BOX_PROFILES",
    "CatchEnv",
    "ContactParams",
    "EnvConfig",
    "EnvState",
    "ThrowConfig",
    "ThrowSpec",
    "energy",
    "is_caught",
    "sample_throws",
]
